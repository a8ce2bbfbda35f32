import random

import pytest
from hypothesis import given, settings, strategies as st

from fuzz import fuzz, random_message
from sa2fe import wire
from sa2fe.wire import HEADER_LEN, MAGIC, MsgType, WireError, WireErrorCode


@pytest.mark.parametrize("kind", list(MsgType))
def test_roundtrip_every_kind(kind):
    rnd = random.Random(int(kind))
    for _ in range(20):
        msg = random_message(rnd)
        assert wire.decode(wire.encode(msg)) == msg


def test_header_layout():
    msg = wire.make(MsgType.USER_ABORT, bytes(range(16)), reason="x")
    frame = wire.encode(msg)
    assert frame[:4] == MAGIC and frame[4] == 1 and frame[5] == MsgType.USER_ABORT
    assert frame[6:22] == bytes(range(16))
    assert int.from_bytes(frame[22:26], "big") == len(frame) - HEADER_LEN == 4 + 1
    assert HEADER_LEN == 26


def _code(frame):
    with pytest.raises(WireError) as e:
        wire.decode(frame)
    return e.value.code


def test_error_codes():
    good = wire.encode(wire.make(MsgType.CLAIM_RESULT, status=1, reason="r", amount=5))
    assert _code(b"XXXX" + good[4:]) is WireErrorCode.BAD_MAGIC
    assert _code(good[:4] + b"\x09" + good[5:]) is WireErrorCode.BAD_VERSION
    assert _code(good[:5] + b"\xee" + good[6:]) is WireErrorCode.UNKNOWN_TYPE
    assert _code(good[:10]) is WireErrorCode.TRUNCATED
    assert _code(good + b"\0") is WireErrorCode.LENGTH_MISMATCH
    too_big = good[:22] + (wire.MAX_PAYLOAD + 1).to_bytes(4, "big")
    assert _code(too_big) is WireErrorCode.TOO_LARGE


def test_trailing_payload_bytes():
    msg = wire.make(MsgType.USER_ABORT, reason="x")
    frame = bytearray(wire.encode(msg) + b"\0")
    frame[22:26] = (len(frame) - HEADER_LEN).to_bytes(4, "big")
    assert _code(bytes(frame)) is WireErrorCode.TRAILING_BYTES


def test_non_minimal_integer_rejected():
    frame = bytearray(wire.encode(wire.make(MsgType.TOKEN_REQUEST, s_type="s", m1_blind=5, m2_blind=7)))
    # rewrite m1_blind as 00 05 and fix up both length fields
    off = HEADER_LEN + 4 + 1
    assert frame[off:off + 5] == b"\0\0\0\x01\x05"
    frame[off:off + 5] = b"\0\0\0\x02\x00\x05"
    frame[22:26] = (len(frame) - HEADER_LEN).to_bytes(4, "big")
    assert _code(bytes(frame)) is WireErrorCode.BAD_FIELD


def test_every_truncation_rejected():
    rnd = random.Random(3)
    for _ in range(10):
        frame = wire.encode(random_message(rnd))
        for cut in range(len(frame)):
            with pytest.raises(WireError):
                wire.decode(frame[:cut])


def test_make_rejects_unknown_fields():
    with pytest.raises(KeyError):
        wire.make(MsgType.USER_ABORT, bogus=1)
    with pytest.raises(ValueError):
        wire.encode(wire.make(MsgType.USER_ABORT, b"short"))


def test_fuzz_small():
    stats = fuzz(5000, seed=11)
    assert stats.frames == 5000
    assert not stats.crashes and not stats.oob and not stats.non_identity
    assert stats.rejected > 0 and stats.accepted > 0


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=120))
def test_arbitrary_bytes_never_crash(data):
    for frame in (data, MAGIC + b"\x01" + data):
        try:
            wire.decode(frame)
        except WireError:
            pass
