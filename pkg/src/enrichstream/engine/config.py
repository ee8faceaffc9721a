from __future__ import annotations

import enum
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


DEFAULT_ATTRIBUTE_NAMES = ("geolocation", "unit", "device_type")


class MissingPolicy(str, enum.Enum):
    DEAD_LETTER = "dead_letter"
    EMIT_FLAGGED = "emit_flagged"


@dataclass(frozen=True)
class Topics:
    measurements: str = "measurements"
    updates: str = "attribute-updates"
    results: str = "enriched"
    dead_letter: str = "dead-letter"


@dataclass(frozen=True)
class EngineConfig:
    """Everything a partition worker needs to run.

    ``checkpoint_interval_ms`` of 0 checkpoints after every batch.
    """

    enrichment_attributes: tuple[str, ...]
    partitions: int = 1
    checkpoint_interval_ms: int = 10_000
    missing_policy: MissingPolicy = MissingPolicy.DEAD_LETTER
    topics: Topics = field(default_factory=Topics)
    batch_size: int = 512
    log_root: Path = Path("data/log")
    checkpoint_dir: Path = Path("data/checkpoints")
    store_journal: Path = Path("data/store/attributes.journal")
    simulated_latency_ms: float = 1.0
    store_retries: int = 5
    store_retry_backoff_ms: float = 5.0
    log_flush_records: int = 1000
    log_flush_interval_ms: float = 10.0
    log_fsync: bool = False
    checkpoints_kept: int = 3

    def __post_init__(self) -> None:
        attrs = tuple(self.enrichment_attributes)
        if not attrs:
            raise ValueError("enrichment_attributes must be non-empty")
        if len(set(attrs)) != len(attrs):
            raise ValueError(f"duplicate enrichment attribute in {attrs}")
        if any(not a for a in attrs):
            raise ValueError("attribute names must be non-empty")
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")
        if self.checkpoint_interval_ms < 0:
            raise ValueError("checkpoint_interval_ms must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "enrichment_attributes", attrs)
        object.__setattr__(self, "missing_policy", MissingPolicy(self.missing_policy))
        for name in ("log_root", "checkpoint_dir", "store_journal"):
            object.__setattr__(self, name, Path(getattr(self, name)))

    def with_changes(self, **changes) -> "EngineConfig":
        return replace(self, **changes)

    def rooted_at(self, directory: str | os.PathLike) -> "EngineConfig":
        """Same settings with all state placed under ``directory``."""
        d = Path(directory)
        return replace(
            self,
            log_root=d / "log",
            checkpoint_dir=d / "checkpoints",
            store_journal=d / "store" / "attributes.journal",
        )


def load_config(path: str | os.PathLike, **overrides) -> EngineConfig:
    """Read a TOML config file; relative paths resolve against its directory."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    base = path.parent
    engine = raw.get("engine", {})
    topics = raw.get("topics", {})
    store = raw.get("store", {})
    log = raw.get("log", {})

    def rel(value, default):
        p = Path(value if value is not None else default)
        return p if p.is_absolute() else base / p

    kwargs = dict(
        enrichment_attributes=tuple(engine.get("attributes", DEFAULT_ATTRIBUTE_NAMES)),
        partitions=int(engine.get("partitions", 1)),
        checkpoint_interval_ms=int(engine.get("checkpoint_interval_ms", 10_000)),
        missing_policy=MissingPolicy(engine.get("missing_policy", "dead_letter")),
        batch_size=int(engine.get("batch_size", 512)),
        topics=Topics(**{k: str(v) for k, v in topics.items()}),
        checkpoint_dir=rel(engine.get("checkpoint_dir"), "data/checkpoints"),
        log_root=rel(log.get("root"), "data/log"),
        log_flush_records=int(log.get("flush_records", 1000)),
        log_flush_interval_ms=float(log.get("flush_interval_ms", 10.0)),
        log_fsync=bool(log.get("fsync", False)),
        store_journal=rel(store.get("journal_path"), "data/store/attributes.journal"),
        simulated_latency_ms=float(store.get("simulated_latency_ms", 1.0)),
        store_retries=int(store.get("retries", 5)),
    )
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return EngineConfig(**kwargs)
