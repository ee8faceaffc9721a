from .checkpoint import Checkpoint, CheckpointStore
from .config import EngineConfig, MissingPolicy, Topics, load_config
from .enrichment import DeadLetter, LocalAttributeState, apply_update, enrich, load_state
from .faults import FAULT_POINTS, FaultPlan, InjectedCrash
from .sink import DedupSink
from .supervisor import Supervisor, run_partition
from .worker import (
    PartitionStats,
    PartitionWorker,
    RetryingStore,
    ensure_topics,
    open_log,
    open_store,
    remote_handle,
)

__all__ = [
    "FAULT_POINTS",
    "Checkpoint",
    "CheckpointStore",
    "DeadLetter",
    "DedupSink",
    "EngineConfig",
    "FaultPlan",
    "InjectedCrash",
    "LocalAttributeState",
    "MissingPolicy",
    "PartitionStats",
    "PartitionWorker",
    "RetryingStore",
    "Supervisor",
    "Topics",
    "apply_update",
    "enrich",
    "ensure_topics",
    "load_config",
    "load_state",
    "open_log",
    "open_store",
    "remote_handle",
    "run_partition",
]
