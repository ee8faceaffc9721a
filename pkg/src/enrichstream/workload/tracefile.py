"""Trace files: a flat sequence of ``u8 tag, i64 arrival, framed record``."""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Iterator

from ..model import AttributeUpdate, Measurement
from ..wire import WireError, decode_measurement, decode_update, encode_measurement, encode_update
from .generator import Trace, TraceEvent

TAG_MEASUREMENT = 1
TAG_UPDATE = 2

_HEAD = struct.Struct("<Bq")
_LEN = struct.Struct("<I")


def encode_event(ev: TraceEvent) -> bytes:
    rec = ev.record
    if type(rec) is Measurement:
        return _HEAD.pack(TAG_MEASUREMENT, ev.arrival) + encode_measurement(rec)
    if type(rec) is AttributeUpdate:
        return _HEAD.pack(TAG_UPDATE, ev.arrival) + encode_update(rec)
    raise TypeError(f"cannot encode {type(rec).__name__} in a trace")


def write_trace(path: str | os.PathLike, trace: Trace) -> int:
    with open(path, "wb") as fh:
        return write_events(fh, trace.events)


def write_events(fh: BinaryIO, events) -> int:
    n = 0
    for ev in events:
        fh.write(encode_event(ev))
        n += 1
    return n


def iter_events(data: bytes) -> Iterator[TraceEvent]:
    pos = 0
    size = len(data)
    while pos < size:
        if pos + _HEAD.size + _LEN.size > size:
            raise WireError(f"truncated trace entry at byte {pos}")
        tag, arrival = _HEAD.unpack_from(data, pos)
        pos += _HEAD.size
        (length,) = _LEN.unpack_from(data, pos)
        end = pos + _LEN.size + length
        if end > size:
            raise WireError(f"truncated trace record at byte {pos}")
        framed = data[pos:end]
        if tag == TAG_MEASUREMENT:
            rec = decode_measurement(framed)
        elif tag == TAG_UPDATE:
            rec = decode_update(framed)
        else:
            raise WireError(f"unknown trace tag {tag} at byte {pos - _HEAD.size}")
        yield TraceEvent(arrival, rec)
        pos = end


def read_trace(path: str | os.PathLike) -> Trace:
    with open(path, "rb") as fh:
        data = fh.read()
    return Trace(events=list(iter_events(data)))
