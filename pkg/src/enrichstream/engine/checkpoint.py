"""Durable per-partition checkpoints.

Files live at ``<dir>/p<partition>/ckpt-<epoch>`` and hold one framed
record: partition, both input offsets, epoch, the per-device emitted
high-watermark, the output offsets at checkpoint time, and a trailing
CRC32C over the preceding payload bytes. Writes go to a temp file that is
renamed into place, so a crash mid-write leaves the previous checkpoint
as the newest valid one.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from crc32c import crc32c

from ..model import StreamOffset
from ..wire import WireError, Writer, read_offset, unframe, write_offset
from .faults import NO_FAULTS, FaultPlan

_NAME = re.compile(r"^ckpt-(\d+)$")


@dataclass(frozen=True)
class Checkpoint:
    partition: int
    measurement_offset: StreamOffset
    update_offset: StreamOffset
    epoch: int
    emitted_high_watermark: dict[str, int] = field(default_factory=dict)
    results_offset: StreamOffset | None = None
    dead_letter_offset: StreamOffset | None = None


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    w = Writer()
    w.u32(ckpt.partition)
    write_offset(w, ckpt.measurement_offset)
    write_offset(w, ckpt.update_offset)
    w.u64(ckpt.epoch)
    w.u32(len(ckpt.emitted_high_watermark))
    for device in sorted(ckpt.emitted_high_watermark):
        w.str(device).u64(ckpt.emitted_high_watermark[device])
    for off in (ckpt.results_offset, ckpt.dead_letter_offset):
        write_offset(w, off or StreamOffset("", ckpt.partition, 0))
    w.u32(crc32c(bytes(w.buf)))
    return w.framed()


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = unframe(data)
    if r.end != len(data):
        raise WireError("trailing bytes after checkpoint frame")
    partition = r.u32()
    m_off = read_offset(r)
    u_off = read_offset(r)
    epoch = r.u64()
    hwm = {}
    for _ in range(r.u32()):
        device = r.str()
        hwm[device] = r.u64()
    res_off = read_offset(r)
    dlq_off = read_offset(r)
    body_end = r.pos
    crc = r.u32()
    r.done()
    if crc32c(bytes(data[4:body_end])) != crc:
        raise WireError("checkpoint checksum mismatch")
    return Checkpoint(partition, m_off, u_off, epoch, hwm, res_off, dlq_off)


class CheckpointStore:
    def __init__(self, directory: str | os.PathLike, partition: int, keep: int = 3) -> None:
        self.dir = Path(directory) / f"p{partition}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.partition = partition
        self.keep = max(1, keep)

    def epochs(self) -> list[int]:
        found = []
        for p in self.dir.iterdir():
            m = _NAME.match(p.name)
            if m:
                found.append(int(m.group(1)))
        return sorted(found)

    def path_for(self, epoch: int) -> Path:
        return self.dir / f"ckpt-{epoch}"

    def write(self, ckpt: Checkpoint, faults: FaultPlan = NO_FAULTS) -> Path:
        data = encode_checkpoint(ckpt)
        final = self.path_for(ckpt.epoch)
        tmp = final.with_name(final.name + ".tmp")
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            half = len(data) // 2
            os.write(fd, data[:half])
            faults.hit("checkpoint.partial")
            os.write(fd, data[half:])
            os.fsync(fd)
        finally:
            os.close(fd)
        faults.hit("checkpoint.written")
        os.replace(tmp, final)
        faults.hit("checkpoint.renamed")
        self._prune()
        return final

    def _prune(self) -> None:
        for epoch in self.epochs()[: -self.keep]:
            self.path_for(epoch).unlink(missing_ok=True)
        for p in self.dir.glob("*.tmp"):
            p.unlink(missing_ok=True)

    def load_latest(self) -> Checkpoint | None:
        """Newest checkpoint that decodes cleanly; corrupt ones are skipped."""
        for epoch in reversed(self.epochs()):
            try:
                ckpt = decode_checkpoint(self.path_for(epoch).read_bytes())
            except (WireError, OSError):
                continue
            if ckpt.partition == self.partition and ckpt.epoch == epoch:
                return ckpt
        return None


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())

