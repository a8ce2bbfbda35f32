"""Blind RSA signatures with a full-domain hash, and dual-part tokens.

The five algorithms are ``blind_setup``, ``blind_msg``, ``blind_sign``,
``unblind_sign`` and ``blind_verify``.  Messages are hashed onto Z_n with
MGF1-SHA256 before blinding; the signer only ever sees ``H(m) * r^e``.

A token is ``(m1, sig1; m2, sig2)``: ``sig1`` comes from the platform (FA)
key and is what the base station checks, ``sig2`` comes from a per-service
key and is what edge servers and the FA check.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass, field
from math import gcd

import gmpy2

E = 65537
_MODULUS_BITS = {128: 3072, 192: 7680}


class BlindSignatureError(ValueError):
    pass


class TokenError(ValueError):
    """Token finalisation failed; ``halves`` names the halves that did not verify."""

    def __init__(self, halves: tuple[str, ...]):
        super().__init__(f"token verification failed for: {', '.join(halves)}")
        self.halves = halves


@dataclass(frozen=True)
class Role:
    kind: str  # "platform" or "service"
    service_id: str | None = None

    @classmethod
    def platform(cls) -> "Role":
        return cls("platform")

    @classmethod
    def service(cls, service_id: str) -> "Role":
        return cls("service", service_id)


@dataclass(frozen=True)
class BlindPublicKey:
    n: int
    e: int = E
    insecure_test: bool = False

    @property
    def size(self) -> int:
        return (self.n.bit_length() + 7) // 8

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.n.to_bytes(self.size, "big") + self.e.to_bytes(4, "big")).digest()


@dataclass(frozen=True)
class BlindKeyPair:
    public: BlindPublicKey
    d: int = field(repr=False)
    p: int = field(repr=False)
    q: int = field(repr=False)
    role: Role = Role.platform()

    @property
    def n(self) -> int:
        return self.public.n


def _random_prime(bits: int, rng: random.Random) -> int:
    while True:
        cand = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(cand))
        if p.bit_length() == bits and gcd(E, p - 1) == 1:
            return p


def blind_setup(role: Role, security_level: int, rng: random.Random, *, bits: int | None = None) -> BlindKeyPair:
    """Fresh RSA keypair.  ``bits`` overrides the level's modulus size (min 2048)."""
    if bits is None:
        if security_level not in _MODULUS_BITS:
            raise BlindSignatureError(f"unsupported security level {security_level}")
        bits = _MODULUS_BITS[security_level]
    if bits < 2048:
        raise BlindSignatureError("modulus must be at least 2048 bits")
    while True:
        p = _random_prime(bits // 2, rng)
        q = _random_prime(bits - bits // 2, rng)
        n = p * q
        if p != q and n.bit_length() == bits:
            break
    d = pow(E, -1, (p - 1) * (q - 1))
    return BlindKeyPair(BlindPublicKey(n, E), d, p, q, role)


def textbook_keypair(p: int = 61, q: int = 53, e: int = 17, role: Role = Role.platform()) -> BlindKeyPair:
    """Tiny unpadded RSA key for golden vectors.  Insecure; tests only."""
    n = p * q
    d = pow(e, -1, (p - 1) * (q - 1))
    return BlindKeyPair(BlindPublicKey(n, e, insecure_test=True), d, p, q, role)


def fdh(pk: BlindPublicKey, message: bytes) -> int:
    """MGF1-SHA256 full-domain hash onto Z_n (128 extra bits keep the bias negligible)."""
    out_len = pk.size + 16
    buf = b""
    counter = 0
    prefix = b"sa2fe-fdh" + pk.fingerprint()
    while len(buf) < out_len:
        buf += hashlib.sha256(prefix + message + counter.to_bytes(4, "big")).digest()
        counter += 1
    return int.from_bytes(buf[:out_len], "big") % pk.n


def random_blinding(pk: BlindPublicKey, rng: random.Random) -> int:
    while True:
        r = rng.randrange(2, pk.n - 1)
        if gcd(r, pk.n) == 1:
            return r


def blind_representative(pk: BlindPublicKey, rep: int, r: int) -> int:
    """``rep * r^e mod n`` for an already-hashed message representative."""
    if not 0 < r < pk.n or gcd(r, pk.n) != 1:
        raise BlindSignatureError("blinding factor is not invertible modulo n")
    return rep * int(gmpy2.powmod(r, pk.e, pk.n)) % pk.n


def blind_msg(pk: BlindPublicKey, m: bytes, r: int) -> int:
    return blind_representative(pk, fdh(pk, m), r)


def blind_sign(pk: BlindPublicKey, sk: BlindKeyPair, blinded: int) -> int:
    if sk.public.n != pk.n:
        raise BlindSignatureError("secret key does not belong to this public key")
    if not 0 <= blinded < pk.n:
        raise BlindSignatureError("blinded message out of range")
    # CRT
    sp = int(gmpy2.powmod(blinded % sk.p, sk.d % (sk.p - 1), sk.p))
    sq = int(gmpy2.powmod(blinded % sk.q, sk.d % (sk.q - 1), sk.q))
    h = pow(sk.q, -1, sk.p) * (sp - sq) % sk.p
    return sq + h * sk.q


def unblind_sign(pk: BlindPublicKey, blinded_sig: int, r: int) -> int:
    if not 0 <= blinded_sig < pk.n:
        raise BlindSignatureError("blinded signature out of range")
    return blinded_sig * pow(r, -1, pk.n) % pk.n


def verify_representative(pk: BlindPublicKey, rep: int, sig: int) -> bool:
    if not isinstance(sig, int) or not 0 < sig < pk.n:
        return False
    return int(gmpy2.powmod(sig, pk.e, pk.n)) == rep


def blind_verify(pk: BlindPublicKey, m: bytes, sig: int) -> bool:
    return verify_representative(pk, fdh(pk, m), sig)


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------


def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def int_to_bytes(v: int) -> bytes:
    return v.to_bytes((v.bit_length() + 7) // 8, "big")


@dataclass(frozen=True)
class Token:
    m1: bytes
    sig1: int
    m2: bytes
    sig2: int

    @property
    def identity(self) -> tuple[bytes, bytes]:
        return (self.m1, self.m2)

    def token_hash(self) -> bytes:
        return hashlib.sha256(self.m1 + self.m2).digest()

    def encode(self) -> bytes:
        return _lp(self.m1) + _lp(int_to_bytes(self.sig1)) + _lp(self.m2) + _lp(int_to_bytes(self.sig2))

    @classmethod
    def decode(cls, data: bytes) -> "Token":
        data = bytes(data)
        parts = []
        off = 0
        for _ in range(4):
            if off + 4 > len(data):
                raise ValueError("truncated token")
            (ln,) = struct.unpack_from(">I", data, off)
            off += 4
            if off + ln > len(data):
                raise ValueError("truncated token")
            parts.append(data[off: off + ln])
            off += ln
        if off != len(data):
            raise ValueError("trailing bytes after token")
        return cls(parts[0], int.from_bytes(parts[1], "big"), parts[2], int.from_bytes(parts[3], "big"))

    def verify_agnostic(self, pk_p: BlindPublicKey) -> bool:
        return blind_verify(pk_p, self.m1, self.sig1)

    def verify_specific(self, pk_s: BlindPublicKey) -> bool:
        return blind_verify(pk_s, self.m2, self.sig2)


@dataclass(frozen=True)
class TokenSecret:
    m1: bytes
    m2: bytes
    r1: int = field(repr=False)
    r2: int = field(repr=False)


def token_request_build(
    pk_p: BlindPublicKey, pk_s: BlindPublicKey, rng: random.Random
) -> tuple[TokenSecret, tuple[int, int]]:
    """Draw ``m1 != m2`` and independent blinding factors, return both blinded messages."""
    m1 = rng.randbytes(32)
    m2 = rng.randbytes(32)
    while m2 == m1:
        m2 = rng.randbytes(32)
    r1 = random_blinding(pk_p, rng)
    r2 = random_blinding(pk_s, rng)
    secret = TokenSecret(m1, m2, r1, r2)
    return secret, (blind_msg(pk_p, m1, r1), blind_msg(pk_s, m2, r2))


def token_finalize(
    secret: TokenSecret, blinded_sig1: int, blinded_sig2: int, pk_p: BlindPublicKey, pk_s: BlindPublicKey
) -> Token:
    failed = []
    sigs = []
    for name, pk, bsig, r, m in (
        ("platform", pk_p, blinded_sig1, secret.r1, secret.m1),
        ("service", pk_s, blinded_sig2, secret.r2, secret.m2),
    ):
        try:
            sig = unblind_sign(pk, bsig, r)
        except BlindSignatureError:
            sig = 0
        if not blind_verify(pk, m, sig):
            failed.append(name)
        sigs.append(sig)
    if failed:
        raise TokenError(tuple(failed))
    return Token(secret.m1, sigs[0], secret.m2, sigs[1])
