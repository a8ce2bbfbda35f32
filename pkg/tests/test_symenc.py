import pytest
from hypothesis import given, strategies as st

from sa2fe.rng import DrbgRandom, random_scalar, system_rng
from sa2fe.symenc import (
    IV_LEN,
    TAG_LEN,
    DecryptionError,
    pack_request,
    sym_dec,
    sym_enc,
    sym_key_setup,
    unpack_request,
)


def test_roundtrip(rng):
    k = sym_key_setup(rng)
    for msg in (b"", b"x", b"a" * 16, b"b" * 1000):
        ct = sym_enc(k, msg, rng)
        assert sym_dec(k, ct) == msg
        assert (len(ct) - IV_LEN - TAG_LEN) % 16 == 0


def test_wrong_key_and_tamper_same_error(rng):
    k, k2 = sym_key_setup(rng), sym_key_setup(rng)
    ct = sym_enc(k, b"secret data", rng)
    errors = []
    for bad_key, bad_ct in ((k2, ct), (k, ct[:-1] + bytes([ct[-1] ^ 1])), (k, bytes([ct[0] ^ 1]) + ct[1:]),
                            (k, ct[:20])):
        with pytest.raises(DecryptionError) as e:
            sym_dec(bad_key, bad_ct)
        errors.append(str(e.value))
    assert len(set(errors)) == 1


def test_fresh_iv(rng):
    k = sym_key_setup(rng)
    assert sym_enc(k, b"same", rng) != sym_enc(k, b"same", rng)


@given(st.text(max_size=20), st.binary(max_size=100))
def test_request_packing(name, data):
    assert unpack_request(pack_request(name, data)) == (name, data)


def test_unpack_malformed():
    for raw in (b"", b"\0\0\0\x09abc", b"\0\0\0\x02\xff\xfe"):
        with pytest.raises(DecryptionError):
            unpack_request(raw)


# -- rng ----------------------------------------------------------------------


def test_drbg_reproducible_and_forks():
    a, b = DrbgRandom("s"), DrbgRandom("s")
    assert a.randbytes(40) == b.randbytes(40)
    assert a.getrandbits(77) == b.getrandbits(77)
    c = DrbgRandom("s")
    child = c.fork("x")
    assert c.randbytes(8) == DrbgRandom("s").randbytes(8)
    assert child.randbytes(8) != DrbgRandom("s").randbytes(8)
    assert DrbgRandom(5).randbytes(4) != DrbgRandom(6).randbytes(4)


def test_drbg_state_roundtrip():
    r = DrbgRandom(1)
    r.randbytes(5)
    st_ = r.getstate()
    x = r.randbytes(10)
    r.setstate(st_)
    assert r.randbytes(10) == x


def test_random_scalar_range():
    r = DrbgRandom(2)
    vals = {random_scalar(r, 5, nonzero=True) for _ in range(200)}
    assert vals == {1, 2, 3, 4}
    assert {random_scalar(r, 3) for _ in range(100)} == {0, 1, 2}
    assert 0 <= random_scalar(system_rng(), 10) < 10
