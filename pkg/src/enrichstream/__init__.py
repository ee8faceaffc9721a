"""Partitioned stream enrichment with point-in-time attribute joins."""

from .log import LogRecord, PartitionedLog, Topic
from .model import (
    AttributeKey,
    AttributeUpdate,
    AttributeVersion,
    EnrichedMeasurement,
    Measurement,
    Provenance,
    StreamOffset,
    partition_for,
)
from .store import AttributeStore, RemoteStore, ShardedAttributeStore, StoreConflictError

__version__ = "0.1.0"

__all__ = [
    "AttributeKey",
    "AttributeStore",
    "AttributeUpdate",
    "AttributeVersion",
    "EnrichedMeasurement",
    "LogRecord",
    "Measurement",
    "PartitionedLog",
    "Provenance",
    "RemoteStore",
    "ShardedAttributeStore",
    "StoreConflictError",
    "StreamOffset",
    "Topic",
    "partition_for",
]
