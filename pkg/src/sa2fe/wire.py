"""Canonical message encoding.

Frame layout (all integers big-endian)::

    magic "SA2F" | version u8 | msg_type u8 | session_id 16B | payload_len u32 | payload

Payload fields are written in a fixed order per message type.  Byte
strings, text and big integers are u32-length-prefixed; big integers use
their minimal big-endian form (no leading zero byte); lists carry a u32
count.  ``decode`` accepts arbitrary bytes and either returns a
:class:`Message` or raises :class:`WireError`; it never reads past
``payload_len``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any

MAGIC = b"SA2F"
VERSION = 1
HEADER_LEN = 4 + 1 + 1 + 16 + 4
MAX_PAYLOAD = 16 * 1024 * 1024
MAX_LIST = 1 << 16

STATUS_OK = 0
STATUS_REJECT = 1


class MsgType(IntEnum):
    SP_REGISTER = 1
    SP_REGISTER_ACK = 2
    ES_REGISTER_SP = 3
    ES_CREDENTIALS = 4
    ES_REGISTER_BS = 5
    ES_REGISTER_BS_ACK = 6
    TOKEN_REQUEST = 7
    TOKEN_RESPONSE = 8
    OFFLOAD_INIT = 9
    PUZZLE_LIST = 10
    OFFLOAD_REQUEST = 11
    FORWARD_REQUEST = 12
    ES_RESPONSE = 13
    OFFLOAD_RESPONSE = 14
    USER_ABORT = 15
    BS_CLAIM = 16
    ES_CLAIM = 17
    CLAIM_RESULT = 18


class WireErrorCode(str, Enum):
    TRUNCATED = "Truncated"
    BAD_MAGIC = "BadMagic"
    BAD_VERSION = "BadVersion"
    UNKNOWN_TYPE = "UnknownType"
    TOO_LARGE = "TooLarge"
    LENGTH_MISMATCH = "LengthMismatch"
    TRAILING_BYTES = "TrailingBytes"
    BAD_FIELD = "BadField"


class WireError(ValueError):
    def __init__(self, code: WireErrorCode, detail: str = ""):
        super().__init__(f"{code.value}: {detail}" if detail else code.value)
        self.code = code


# field kinds: b=bytes, s=utf-8 text, i=non-negative big int, u8/u32/u64, lb=list of bytes
SCHEMAS: dict[MsgType, tuple[tuple[str, str], ...]] = {
    MsgType.SP_REGISTER: (
        ("spid", "s"), ("sname", "s"), ("k_s", "b"), ("pk_n", "i"), ("pk_e", "i"),
        ("sk_d", "i"), ("sk_p", "i"), ("sk_q", "i"), ("s_alg", "s"),
    ),
    MsgType.SP_REGISTER_ACK: (("status", "u8"), ("reason", "s"), ("trapdoor", "b")),
    MsgType.ES_REGISTER_SP: (("esid", "s"), ("reg_info", "b"), ("s_type", "s")),
    MsgType.ES_CREDENTIALS: (
        ("status", "u8"), ("reason", "s"), ("s_type", "s"), ("k_s", "b"),
        ("pk_n", "i"), ("pk_e", "i"), ("s_alg", "s"), ("trapdoor", "b"),
    ),
    MsgType.ES_REGISTER_BS: (("esid", "s"), ("slot", "u32"), ("puzzle", "b")),
    MsgType.ES_REGISTER_BS_ACK: (("status", "u8"), ("reason", "s"), ("slot", "u32")),
    MsgType.TOKEN_REQUEST: (("s_type", "s"), ("m1_blind", "i"), ("m2_blind", "i"), ("payment", "b")),
    MsgType.TOKEN_RESPONSE: (
        ("status", "u8"), ("reason", "s"), ("sig1_blind", "i"), ("sig2_blind", "i"),
        ("k_s", "b"), ("trapdoor", "b"),
    ),
    MsgType.OFFLOAD_INIT: (("token", "b"), ("bsid", "s")),
    MsgType.PUZZLE_LIST: (("status", "u8"), ("reason", "s"), ("puzzles", "lb")),
    MsgType.OFFLOAD_REQUEST: (("z_u", "b"), ("ct", "b")),
    MsgType.FORWARD_REQUEST: (("token", "b"), ("ct", "b")),
    MsgType.ES_RESPONSE: (("status", "u8"), ("reason", "s"), ("resp", "b")),
    MsgType.OFFLOAD_RESPONSE: (("status", "u8"), ("reason", "s"), ("resp", "b")),
    MsgType.USER_ABORT: (("reason", "s"),),
    MsgType.BS_CLAIM: (("bsid", "s"), ("token", "b")),
    MsgType.ES_CLAIM: (("esid", "s"), ("s_type", "s"), ("token", "b")),
    MsgType.CLAIM_RESULT: (("status", "u8"), ("reason", "s"), ("amount", "u64")),
}


@dataclass
class Message:
    kind: MsgType
    session_id: bytes = bytes(16)
    fields: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Any:
        return self.fields[name]

    def get(self, name: str, default: Any = None) -> Any:
        return self.fields.get(name, default)

    @property
    def ok(self) -> bool:
        return self.fields.get("status", STATUS_OK) == STATUS_OK


def make(kind: MsgType, session_id: bytes = bytes(16), **values: Any) -> Message:
    """Build a message, filling omitted fields with their zero value."""
    defaults = {"b": b"", "s": "", "i": 0, "u8": 0, "u32": 0, "u64": 0, "lb": []}
    schema = SCHEMAS[kind]
    names = {n for n, _ in schema}
    unknown = set(values) - names
    if unknown:
        raise KeyError(f"{kind.name} has no fields {sorted(unknown)}")
    fields = {n: values.get(n, defaults[k]) for n, k in schema}
    return Message(kind, session_id, fields)


def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def _encode_field(kind: str, v: Any) -> bytes:
    if kind == "b":
        return _lp(bytes(v))
    if kind == "s":
        return _lp(v.encode("utf-8"))
    if kind == "i":
        if v < 0:
            raise ValueError("negative integer field")
        return _lp(v.to_bytes((v.bit_length() + 7) // 8, "big"))
    if kind == "u8":
        return struct.pack(">B", v)
    if kind == "u32":
        return struct.pack(">I", v)
    if kind == "u64":
        return struct.pack(">Q", v)
    if kind == "lb":
        return struct.pack(">I", len(v)) + b"".join(_lp(bytes(x)) for x in v)
    raise AssertionError(kind)


def encode(msg: Message) -> bytes:
    if len(msg.session_id) != 16:
        raise ValueError("session_id must be 16 bytes")
    payload = b"".join(_encode_field(k, msg.fields[n]) for n, k in SCHEMAS[msg.kind])
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload exceeds maximum size")
    return MAGIC + bytes([VERSION, msg.kind]) + msg.session_id + struct.pack(">I", len(payload)) + payload


class _Reader:
    """Bounds-checked cursor over one payload; ``high_water`` records the furthest byte touched."""

    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0
        self.high_water = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise WireError(WireErrorCode.TRUNCATED, "field runs past payload")
        out = bytes(self.buf[self.pos: self.pos + n])
        self.pos += n
        self.high_water = max(self.high_water, self.pos)
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def lp(self) -> bytes:
        return self.take(self.u32())


def _decode_field(r: _Reader, kind: str) -> Any:
    if kind == "b":
        return r.lp()
    if kind == "s":
        try:
            return r.lp().decode("utf-8")
        except UnicodeDecodeError:
            raise WireError(WireErrorCode.BAD_FIELD, "invalid utf-8") from None
    if kind == "i":
        raw = r.lp()
        if raw[:1] == b"\x00":
            raise WireError(WireErrorCode.BAD_FIELD, "non-minimal integer")
        return int.from_bytes(raw, "big")
    if kind == "u8":
        return r.u8()
    if kind == "u32":
        return r.u32()
    if kind == "u64":
        return r.u64()
    if kind == "lb":
        count = r.u32()
        if count > MAX_LIST:
            raise WireError(WireErrorCode.BAD_FIELD, "list too long")
        return [r.lp() for _ in range(count)]
    raise AssertionError(kind)


def parse_header(header: bytes) -> tuple[MsgType, bytes, int]:
    """Validate a 26-byte header; returns (kind, session_id, payload_len)."""
    if len(header) < HEADER_LEN:
        raise WireError(WireErrorCode.TRUNCATED, "short header")
    if header[:4] != MAGIC:
        raise WireError(WireErrorCode.BAD_MAGIC)
    if header[4] != VERSION:
        raise WireError(WireErrorCode.BAD_VERSION, str(header[4]))
    try:
        kind = MsgType(header[5])
    except ValueError:
        raise WireError(WireErrorCode.UNKNOWN_TYPE, str(header[5])) from None
    (length,) = struct.unpack(">I", header[22:26])
    if length > MAX_PAYLOAD:
        raise WireError(WireErrorCode.TOO_LARGE, str(length))
    return kind, bytes(header[6:22]), length


def decode(frame: bytes, *, _probe: list | None = None) -> Message:
    frame = bytes(frame)
    kind, sid, length = parse_header(frame[:HEADER_LEN])
    if len(frame) < HEADER_LEN + length:
        raise WireError(WireErrorCode.TRUNCATED, "payload shorter than payload_len")
    if len(frame) > HEADER_LEN + length:
        raise WireError(WireErrorCode.LENGTH_MISMATCH, "bytes after payload")
    reader = _Reader(memoryview(frame)[HEADER_LEN:HEADER_LEN + length])
    try:
        fields = {name: _decode_field(reader, k) for name, k in SCHEMAS[kind]}
    finally:
        if _probe is not None:
            _probe.append((reader.high_water, length))
    if reader.pos != length:
        raise WireError(WireErrorCode.TRAILING_BYTES, f"{length - reader.pos} unread payload bytes")
    return Message(kind, sid, fields)
