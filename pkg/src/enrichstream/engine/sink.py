from __future__ import annotations

from ..log import PartitionedLog, Topic
from ..model import EnrichedMeasurement, partition_for
from ..wire import encode_enriched

_SCAN_CHUNK = 4096


def read_dedup_key(payload: bytes) -> tuple[str, int]:
    # framed enriched record: u32 len, u16 device_len, device, u64 seq, ...
    dl = int.from_bytes(payload[4:6], "little")
    device = payload[6 : 6 + dl].decode("utf-8")
    seq = int.from_bytes(payload[6 + dl : 14 + dl], "little")
    return device, seq


class DedupSink:
    """Idempotent writer for one partition of an output topic.

    Appends are keyed by ``(device, seq)``; a key already present in the
    index is suppressed. After a restart the index is rebuilt by scanning
    the partition from a checkpointed offset, which covers every record a
    replay can reproduce.
    """

    def __init__(self, log: PartitionedLog, topic: Topic, partition: int) -> None:
        self.log = log
        self.topic = topic
        self.partition = partition
        self.seen: set[tuple[str, int]] = set()
        self.high_watermark: dict[str, int] = {}
        self.emitted = 0
        self.suppressed = 0

    @classmethod
    def rebuild(cls, log: PartitionedLog, topic: Topic, partition: int,
                from_offset: int = 0) -> "DedupSink":
        sink = cls(log, topic, partition)
        offset = from_offset
        while True:
            records = log.read(topic, partition, offset, _SCAN_CHUNK)
            for rec in records:
                device, seq = read_dedup_key(rec.payload)
                sink._mark(device, seq)
            offset += len(records)
            if len(records) < _SCAN_CHUNK:
                break
        return sink

    def _mark(self, device: str, seq: int) -> None:
        self.seen.add((device, seq))
        if seq > self.high_watermark.get(device, -1):
            self.high_watermark[device] = seq

    def emit(self, e: EnrichedMeasurement, measurement_payload: bytes | None = None) -> bool:
        m = e.measurement
        key = (m.device, m.seq)
        if key in self.seen:
            self.suppressed += 1
            return False
        if partition_for(m.device, self.topic.partitions) != self.partition:
            raise ValueError(f"{m.device!r} does not belong to partition {self.partition}")
        self.log.append(self.topic, m.device, encode_enriched(e, measurement_payload))
        self.seen.add(key)
        if m.seq > self.high_watermark.get(m.device, -1):
            self.high_watermark[m.device] = m.seq
        self.emitted += 1
        return True

    def end_offset(self) -> int:
        return self.log.end_offset(self.topic, self.partition)

    def flush(self) -> None:
        self.log.flush(self.topic, self.partition)
