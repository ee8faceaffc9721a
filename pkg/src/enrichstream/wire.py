"""Length-prefixed little-endian binary encoding of the domain records.

Every record is framed as ``u32 payload_length`` followed by the payload.
Payload fields appear in declaration order: strings as ``u16`` length plus
UTF-8 bytes, integers as fixed-width little-endian, floats as IEEE-754
little-endian doubles. Nested records are inlined without their own frame.
"""

from __future__ import annotations

import struct

from .model import (
    AttributeKey,
    AttributeUpdate,
    AttributeVersion,
    EnrichedMeasurement,
    Measurement,
    Provenance,
    StreamOffset,
)

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_SEQ_TIME_LEN = struct.Struct("<QqH")
_VALUE_INGEST = struct.Struct("<dq")
_TIMES = struct.Struct("<qq")

_PROVENANCE = tuple(Provenance)


class WireError(ValueError):
    """Raised when bytes do not decode to a well-formed record."""


class Writer:
    __slots__ = ("buf",)

    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, v: int) -> "Writer":
        self.buf += _U8.pack(v)
        return self

    def u16(self, v: int) -> "Writer":
        self.buf += _U16.pack(v)
        return self

    def u32(self, v: int) -> "Writer":
        self.buf += _U32.pack(v)
        return self

    def u64(self, v: int) -> "Writer":
        self.buf += _U64.pack(v)
        return self

    def i64(self, v: int) -> "Writer":
        self.buf += _I64.pack(v)
        return self

    def f64(self, v: float) -> "Writer":
        self.buf += _F64.pack(v)
        return self

    def str(self, v: str) -> "Writer":
        raw = v.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WireError("string longer than 65535 bytes")
        self.buf += _U16.pack(len(raw))
        self.buf += raw
        return self

    def raw(self, b: bytes) -> "Writer":
        self.buf += b
        return self

    def framed(self) -> bytes:
        return _U32.pack(len(self.buf)) + bytes(self.buf)


class Reader:
    __slots__ = ("data", "pos", "end")

    def __init__(self, data: bytes, pos: int = 0, end: int | None = None) -> None:
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def _take(self, fmt: struct.Struct):
        if self.pos + fmt.size > self.end:
            raise WireError("truncated record")
        (v,) = fmt.unpack_from(self.data, self.pos)
        self.pos += fmt.size
        return v

    def u8(self) -> int:
        return self._take(_U8)

    def u16(self) -> int:
        return self._take(_U16)

    def u32(self) -> int:
        return self._take(_U32)

    def u64(self) -> int:
        return self._take(_U64)

    def i64(self) -> int:
        return self._take(_I64)

    def f64(self) -> float:
        return self._take(_F64)

    def str(self) -> str:
        n = self.u16()
        if self.pos + n > self.end:
            raise WireError("truncated string")
        try:
            s = bytes(self.data[self.pos : self.pos + n]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WireError(str(exc)) from exc
        self.pos += n
        return s

    def done(self) -> None:
        if self.pos != self.end:
            raise WireError(f"{self.end - self.pos} trailing bytes in record")


def unframe(data: bytes, pos: int = 0) -> Reader:
    """Return a reader bounded to the frame starting at ``pos``."""
    if pos + 4 > len(data):
        raise WireError("truncated frame header")
    (length,) = _U32.unpack_from(data, pos)
    start = pos + 4
    if start + length > len(data):
        raise WireError("truncated frame payload")
    return Reader(data, start, start + length)


def frame_size(data: bytes, pos: int = 0) -> int:
    (length,) = _U32.unpack_from(data, pos)
    return 4 + length


# -- measurement (hot path, hand-unrolled) ----------------------------------


def _measurement_payload(m: Measurement) -> bytes:
    dev = m.device.encode("utf-8")
    obs = m.observable.encode("utf-8")
    return b"".join(
        (
            _U16.pack(len(dev)),
            dev,
            _SEQ_TIME_LEN.pack(m.seq, m.event_time, len(obs)),
            obs,
            _VALUE_INGEST.pack(m.value, m.ingest_time),
        )
    )


def encode_measurement(m: Measurement) -> bytes:
    payload = _measurement_payload(m)
    return _U32.pack(len(payload)) + payload


def _read_measurement(data: bytes, pos: int) -> tuple[Measurement, int]:
    try:
        (dl,) = _U16.unpack_from(data, pos)
        pos += 2
        device = data[pos : pos + dl].decode("utf-8")
        pos += dl
        seq, event_time, ol = _SEQ_TIME_LEN.unpack_from(data, pos)
        pos += 18
        observable = data[pos : pos + ol].decode("utf-8")
        pos += ol
        value, ingest = _VALUE_INGEST.unpack_from(data, pos)
    except (struct.error, UnicodeDecodeError) as exc:
        raise WireError(f"bad measurement: {exc}") from exc
    return Measurement(device, seq, event_time, observable, value, ingest), pos + 16


def decode_measurement(data: bytes) -> Measurement:
    if len(data) < 4:
        raise WireError("truncated frame header")
    (length,) = _U32.unpack_from(data, 0)
    m, end = _read_measurement(data, 4)
    if end != 4 + length or end != len(data):
        raise WireError("measurement length mismatch")
    return m


# -- attribute records -------------------------------------------------------


def _write_key(w: Writer, key: AttributeKey) -> None:
    w.str(key.device).str(key.attribute)


def _write_version(w: Writer, version: AttributeVersion) -> None:
    w.i64(version.valid_from).str(version.value)


def encode_key(key: AttributeKey) -> bytes:
    w = Writer()
    _write_key(w, key)
    return w.framed()


def decode_key(data: bytes) -> AttributeKey:
    r = unframe(data)
    key = AttributeKey(r.str(), r.str())
    r.done()
    return key


def encode_version(version: AttributeVersion) -> bytes:
    w = Writer()
    _write_version(w, version)
    return w.framed()


def decode_version(data: bytes) -> AttributeVersion:
    r = unframe(data)
    v = AttributeVersion(r.i64(), r.str())
    r.done()
    return v


def encode_update(update: AttributeUpdate) -> bytes:
    w = Writer()
    _write_key(w, update.key)
    _write_version(w, update.version)
    return w.framed()


def read_update(r: Reader) -> AttributeUpdate:
    key = AttributeKey(r.str(), r.str())
    version = AttributeVersion(r.i64(), r.str())
    return AttributeUpdate(key, version)


def decode_update(data: bytes) -> AttributeUpdate:
    r = unframe(data)
    u = read_update(r)
    r.done()
    return u


# -- offsets -------------------------------------------------------------------


def write_offset(w: Writer, off: StreamOffset) -> None:
    w.str(off.topic).u32(off.partition).u64(off.offset)


def read_offset(r: Reader) -> StreamOffset:
    return StreamOffset(r.str(), r.u32(), r.u64())


def encode_offset(off: StreamOffset) -> bytes:
    w = Writer()
    write_offset(w, off)
    return w.framed()


def decode_offset(data: bytes) -> StreamOffset:
    r = unframe(data)
    off = read_offset(r)
    r.done()
    return off


# -- enriched measurement ------------------------------------------------------


_SEGMENTS: dict[tuple[str, str, int], bytes] = {}
_SEGMENT_CACHE_MAX = 1 << 17


def _attribute_segment(name: str, value: str, prov: int) -> bytes:
    key = (name, value, prov)
    seg = _SEGMENTS.get(key)
    if seg is None:
        n = name.encode("utf-8")
        v = value.encode("utf-8")
        seg = _U16.pack(len(n)) + n + _U16.pack(len(v)) + v + _U8.pack(prov)
        if len(_SEGMENTS) >= _SEGMENT_CACHE_MAX:
            _SEGMENTS.clear()
        _SEGMENTS[key] = seg
    return seg


def encode_enriched(e: EnrichedMeasurement, measurement_payload: bytes | None = None) -> bytes:
    """Encode ``e``; ``measurement_payload`` may supply the already-encoded
    unframed measurement fields to skip re-encoding them."""
    segments = _SEGMENTS
    parts = [
        measurement_payload if measurement_payload is not None
        else _measurement_payload(e.measurement),
        _U16.pack(len(e.attributes)),
    ]
    for name, (value, prov) in e.attributes.items():
        seg = segments.get((name, value, prov))
        parts.append(seg if seg is not None else _attribute_segment(name, value, prov))
    parts.append(_TIMES.pack(e.enrich_time, e.latency_ms))
    payload = b"".join(parts)
    return _U32.pack(len(payload)) + payload


def decode_enriched(data: bytes) -> EnrichedMeasurement:
    if len(data) < 4:
        raise WireError("truncated frame header")
    (length,) = _U32.unpack_from(data, 0)
    if 4 + length != len(data):
        raise WireError("enriched record length mismatch")
    m, pos = _read_measurement(data, 4)
    r = Reader(data, pos)
    attrs: dict[str, tuple[str, Provenance]] = {}
    for _ in range(r.u16()):
        name = r.str()
        value = r.str()
        code = r.u8()
        if code >= len(_PROVENANCE):
            raise WireError(f"unknown provenance code {code}")
        attrs[name] = (value, _PROVENANCE[code])
    enrich_time = r.i64()
    latency = r.i64()
    r.done()
    return EnrichedMeasurement(m, attrs, enrich_time, latency)
