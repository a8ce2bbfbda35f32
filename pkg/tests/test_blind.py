import threading

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import load_vectors
from sa2fe.blind import (
    BlindSignatureError,
    Role,
    Token,
    TokenError,
    blind_msg,
    blind_representative,
    blind_setup,
    blind_sign,
    blind_verify,
    random_blinding,
    textbook_keypair,
    token_finalize,
    token_request_build,
    unblind_sign,
    verify_representative,
)
from sa2fe.rng import DrbgRandom

VEC = load_vectors()


@pytest.fixture(scope="module")
def keys():
    rng = DrbgRandom("blind-tests")
    return blind_setup(Role.platform(), 128, rng, bits=2048), blind_setup(Role.service("s1"), 128, rng, bits=2048)


def test_textbook_vector():
    kp = textbook_keypair()
    assert (kp.n, kp.public.e, kp.d) == (oracles.RSA_N, oracles.RSA_E, oracles.RSA_D)
    blinded = blind_representative(kp.public, 65, 7)
    assert blinded == int.from_bytes(VEC["rsa_blinded_m65_r7"], "big") == oracles.rsa_blind(65, 7)
    bsig = blind_sign(kp.public, kp, blinded)
    assert bsig == int.from_bytes(VEC["rsa_blind_sig"], "big") == oracles.rsa_sign(blinded)
    sig = unblind_sign(kp.public, bsig, 7)
    assert sig == int.from_bytes(VEC["rsa_sig"], "big")
    assert pow(sig, 17, 3233) == 65
    assert verify_representative(kp.public, 65, sig)


def test_key_sizes():
    rng = DrbgRandom("sizes")
    kp = blind_setup(Role.platform(), 128, rng, bits=2048)
    assert kp.n.bit_length() == 2048 and kp.public.e == 65537
    with pytest.raises(BlindSignatureError):
        blind_setup(Role.platform(), 128, rng, bits=1024)
    with pytest.raises(BlindSignatureError):
        blind_setup(Role.platform(), 100, rng)


@pytest.mark.slow
def test_default_modulus_128():
    kp = blind_setup(Role.platform(), 128, DrbgRandom("k3072"))
    assert kp.n.bit_length() == 3072


def test_sign_verify_roundtrip(keys, rng):
    kp, _ = keys
    m = rng.randbytes(32)
    r = random_blinding(kp.public, rng)
    sig = unblind_sign(kp.public, blind_sign(kp.public, kp, blind_msg(kp.public, m, r)), r)
    assert blind_verify(kp.public, m, sig)
    assert not blind_verify(kp.public, m + b"x", sig)
    assert not blind_verify(kp.public, m, sig ^ 1)
    assert not blind_verify(kp.public, m, 0)


def test_signer_sees_only_blinded(keys, rng):
    kp, _ = keys
    m = rng.randbytes(32)
    seen = [blind_msg(kp.public, m, random_blinding(kp.public, rng)) for _ in range(5)]
    assert len(set(seen)) == 5


def test_wrong_key_rejected(keys):
    kp, ks = keys
    with pytest.raises(BlindSignatureError):
        blind_sign(kp.public, ks, 5)
    with pytest.raises(BlindSignatureError):
        blind_sign(kp.public, kp, kp.n)
    with pytest.raises(BlindSignatureError):
        blind_representative(kp.public, 5, 0)


def _issue(keys, rng):
    kp, ks = keys
    secret, (b1, b2) = token_request_build(kp.public, ks.public, rng)
    return secret, blind_sign(kp.public, kp, b1), blind_sign(ks.public, ks, b2)


def test_token_roundtrip(keys, rng):
    kp, ks = keys
    secret, s1, s2 = _issue(keys, rng)
    tok = token_finalize(secret, s1, s2, kp.public, ks.public)
    assert tok.verify_agnostic(kp.public) and tok.verify_specific(ks.public)
    assert not tok.verify_specific(kp.public)
    assert Token.decode(tok.encode()) == tok
    assert tok.m1 != tok.m2


def test_two_tokens_distinct(keys, rng):
    kp, ks = keys
    toks = [token_finalize(*_issue(keys, rng), kp.public, ks.public) for _ in range(2)]
    assert toks[0].encode() != toks[1].encode()
    assert toks[0].token_hash() != toks[1].token_hash()


def test_swapped_halves_fail_both(keys, rng):
    kp, ks = keys
    secret, s1, s2 = _issue(keys, rng)
    with pytest.raises(TokenError) as err:
        token_finalize(secret, s2, s1, kp.public, ks.public)
    assert set(err.value.halves) == {"platform", "service"}


def test_one_bad_half(keys, rng):
    kp, ks = keys
    secret, s1, s2 = _issue(keys, rng)
    with pytest.raises(TokenError) as err:
        token_finalize(secret, s1, s2 ^ 2, kp.public, ks.public)
    assert err.value.halves == ("service",)


@pytest.mark.parametrize("cut", [0, 3, 10, -1])
def test_token_decode_truncated(keys, rng, cut):
    kp, ks = keys
    raw = token_finalize(*_issue(keys, rng), kp.public, ks.public).encode()
    with pytest.raises(ValueError):
        Token.decode(raw[:cut] if cut >= 0 else raw + b"\0")


def test_concurrent_signing(keys):
    kp, _ = keys
    out = {}

    def worker(i):
        r = DrbgRandom(f"thr/{i}")
        m = r.randbytes(32)
        b = random_blinding(kp.public, r)
        out[i] = blind_verify(kp.public, m, unblind_sign(kp.public, blind_sign(kp.public, kp, blind_msg(kp.public, m, b)), b))

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(out.values()) and len(out) == 8


@settings(max_examples=30, deadline=None)
@given(st.binary(max_size=200))
def test_property_any_message(keys, msg):
    kp, _ = keys
    r = random_blinding(kp.public, DrbgRandom(msg))
    sig = unblind_sign(kp.public, blind_sign(kp.public, kp, blind_msg(kp.public, msg, r)), r)
    assert blind_verify(kp.public, msg, sig)
