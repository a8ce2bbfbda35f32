"""Prime-order group backends used by the puzzle schemes.

All groups are written multiplicatively (``op`` is the group law, ``exp``
is repeated application) regardless of whether the backend is an elliptic
curve.  Elements are whatever native object the backend uses; callers only
move them between group methods.

Backends:

``ModPGroup``
    Order-q subgroup of Z_p*.  Only the tiny instance :data:`TOY_GROUP`
    (p = 47, q = 23, g = 2) is used, and only by tests and golden vectors.
``Secp256k1Group``
    secp256k1 through libsecp256k1 (coincurve); 128-bit level.
``P384Group``
    NIST P-384 through fastecdsa; 192-bit level.
``ToyPairingGroup`` / ``Bls12381PairingGroup``
    Bilinear settings for the pairing-based puzzle.  The toy pairing
    computes discrete logs by table lookup and exists for oracle tests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from coincurve import PublicKey
from fastecdsa.curve import P384
from fastecdsa.point import Point
from py_arkworks_bls12381 import G1Point, G2Point, GT, Scalar


class InvalidElement(ValueError):
    """Bytes or value that do not denote an element of the expected group."""


def _expand(data: bytes, counter: int, label: bytes) -> int:
    return int.from_bytes(hashlib.sha256(label + counter.to_bytes(4, "big") + data).digest(), "big")


# ---------------------------------------------------------------------------
# Z_p* subgroup
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModPGroup:
    p: int
    q: int
    g: int
    name: str = "modp"

    def __post_init__(self) -> None:
        if (self.p - 1) % self.q:
            raise ValueError("q must divide p - 1")
        if pow(self.g, self.q, self.p) != 1 or self.g == 1:
            raise ValueError("g does not generate the order-q subgroup")

    @property
    def order(self) -> int:
        return self.q

    @property
    def cofactor(self) -> int:
        return (self.p - 1) // self.q

    @property
    def element_len(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def generator(self) -> int:
        return self.g

    def identity(self) -> int:
        return 1

    def op(self, a: int, b: int) -> int:
        return a * b % self.p

    def exp(self, a: int, k: int) -> int:
        return pow(a, k % self.q, self.p)

    def inv(self, a: int) -> int:
        return pow(a, -1, self.p)

    def eq(self, a: int, b: int) -> bool:
        return a == b

    def is_identity(self, a: int) -> bool:
        return a == 1

    def is_element(self, a) -> bool:
        return isinstance(a, int) and 0 < a < self.p and pow(a, self.q, self.p) == 1

    def encode(self, a: int) -> bytes:
        return a.to_bytes(self.element_len, "big")

    def decode(self, data: bytes) -> int:
        if len(data) != self.element_len:
            raise InvalidElement(f"expected {self.element_len} bytes, got {len(data)}")
        a = int.from_bytes(data, "big")
        if not self.is_element(a):
            raise InvalidElement("value is not in the prime-order subgroup")
        return a

    def hash_to_element(self, data: bytes) -> int:
        # rehash-and-check: raise to the cofactor, skip 0 and the identity
        for ctr in range(1 << 16):
            c = _expand(data, ctr, b"sa2fe-h2g-modp") % self.p
            if c == 0:
                continue
            e = pow(c, self.cofactor, self.p)
            if e != 1:
                return e
        raise RuntimeError("hash_to_element did not terminate")  # pragma: no cover


TOY_GROUP = ModPGroup(p=47, q=23, g=2, name="toy-modp-47")


# ---------------------------------------------------------------------------
# Elliptic curves (cofactor 1, so every curve point is in the group)
# ---------------------------------------------------------------------------


class Secp256k1Group:
    """secp256k1; the identity is represented by ``None``."""

    name = "secp256k1"
    p = 2**256 - 2**32 - 977
    q = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
    element_len = 33
    _gx = 0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798
    _gy = 0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8

    def __init__(self) -> None:
        self._g = PublicKey.from_point(self._gx, self._gy)

    @property
    def order(self) -> int:
        return self.q

    def generator(self) -> PublicKey:
        return self._g

    def identity(self) -> None:
        return None

    def op(self, a, b):
        if a is None:
            return b
        if b is None:
            return a
        try:
            return PublicKey.combine_keys([a, b])
        except ValueError:
            return None  # a == b^-1

    def exp(self, a, k: int):
        k %= self.q
        if a is None or k == 0:
            return None
        return a.multiply(k.to_bytes(32, "big"))

    def inv(self, a):
        if a is None:
            return None
        x, y = a.point()
        return PublicKey.from_point(x, self.p - y)

    def eq(self, a, b) -> bool:
        return self.encode(a) == self.encode(b)

    def is_identity(self, a) -> bool:
        return a is None

    def is_element(self, a) -> bool:
        return a is None or isinstance(a, PublicKey)

    def encode(self, a) -> bytes:
        if a is None:
            return bytes(self.element_len)
        return a.format(compressed=True)

    def decode(self, data: bytes):
        if len(data) != self.element_len:
            raise InvalidElement(f"expected {self.element_len} bytes, got {len(data)}")
        if data == bytes(self.element_len):
            return None
        if data[0] not in (2, 3):
            raise InvalidElement("not a compressed point")
        try:
            return PublicKey(bytes(data))
        except ValueError as exc:
            raise InvalidElement("point is not on the curve") from exc

    def hash_to_element(self, data: bytes):
        # try-and-increment on the x coordinate; p = 3 mod 4
        for ctr in range(1 << 16):
            x = _expand(data, ctr, b"sa2fe-h2g-secp256k1") % self.p
            rhs = (pow(x, 3, self.p) + 7) % self.p
            y = pow(rhs, (self.p + 1) // 4, self.p)
            if y * y % self.p == rhs:
                if y & 1:
                    y = self.p - y
                return PublicKey.from_point(x, y)
        raise RuntimeError("hash_to_element did not terminate")  # pragma: no cover


class P384Group:
    """NIST P-384 via fastecdsa; the identity is fastecdsa's point at infinity."""

    name = "p384"
    curve = P384
    p = P384.p
    q = P384.q
    element_len = 49

    def __init__(self) -> None:
        self._inf = P384.G + (-P384.G)

    @property
    def order(self) -> int:
        return self.q

    def generator(self) -> Point:
        return P384.G

    def identity(self) -> Point:
        return self._inf

    def op(self, a: Point, b: Point) -> Point:
        return a + b

    def exp(self, a: Point, k: int) -> Point:
        k %= self.q
        if k == 0:
            return self._inf
        return k * a

    def inv(self, a: Point) -> Point:
        return -a

    def eq(self, a: Point, b: Point) -> bool:
        return a == b

    def is_identity(self, a: Point) -> bool:
        return a == self._inf

    def is_element(self, a) -> bool:
        return isinstance(a, Point) and a.curve is P384

    def encode(self, a: Point) -> bytes:
        if self.is_identity(a):
            return bytes(self.element_len)
        return bytes([2 | (a.y & 1)]) + a.x.to_bytes(48, "big")

    def decode(self, data: bytes) -> Point:
        if len(data) != self.element_len:
            raise InvalidElement(f"expected {self.element_len} bytes, got {len(data)}")
        if data == bytes(self.element_len):
            return self._inf
        if data[0] not in (2, 3):
            raise InvalidElement("not a compressed point")
        x = int.from_bytes(data[1:], "big")
        if x >= self.p:
            raise InvalidElement("x coordinate out of range")
        y = self._lift_x(x)
        if y is None:
            raise InvalidElement("point is not on the curve")
        if (y & 1) != (data[0] & 1):
            y = self.p - y
        return Point(x, y, curve=P384)

    def _lift_x(self, x: int) -> int | None:
        rhs = (pow(x, 3, self.p) + P384.a * x + P384.b) % self.p
        y = pow(rhs, (self.p + 1) // 4, self.p)
        return y if y * y % self.p == rhs else None

    def hash_to_element(self, data: bytes) -> Point:
        for ctr in range(1 << 16):
            x = int.from_bytes(
                hashlib.sha384(b"sa2fe-h2g-p384" + ctr.to_bytes(4, "big") + data).digest(), "big"
            ) % self.p
            y = self._lift_x(x)
            if y is not None:
                if y & 1:
                    y = self.p - y
                return Point(x, y, curve=P384)
        raise RuntimeError("hash_to_element did not terminate")  # pragma: no cover


# ---------------------------------------------------------------------------
# Bilinear settings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyPairingGroup:
    """Symmetric pairing on a tiny Z_p* subgroup: e(g^a, g^b) = g^(ab).

    Discrete logs come from a lookup table, so this is only meaningful for
    groups small enough to enumerate.
    """

    base: ModPGroup = TOY_GROUP
    name: str = "toy-pairing-47"
    _dlog: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        table = {}
        acc = 1
        for k in range(self.base.q):
            table[acc] = k
            acc = acc * self.base.g % self.base.p
        object.__setattr__(self, "_dlog", table)

    @property
    def order(self) -> int:
        return self.base.q

    @property
    def g2(self) -> ModPGroup:
        return self.base

    def g1_exp(self, k: int) -> int:
        return self.base.exp(self.base.g, k)

    def g1_generator(self) -> int:
        return self.base.g

    def pair(self, a: int, b: int) -> int:
        return self.base.exp(self.base.g, self._dlog[a] * self._dlog[b])

    def pairing_equal(self, a1, b1, a2, b2) -> bool:
        return self.pair(a1, b1) == self.pair(a2, b2)


class _BlsG2:
    """G2 of BLS12-381 presented through the common group interface."""

    name = "bls12-381-g2"
    q = 0x73EDA753299D7D483339D80809A1D80553BDA402FFFE5BFEFFFFFFFF00000001
    element_len = 96

    def __init__(self) -> None:
        self._g = G2Point()
        self._id = G2Point.identity()
        self._id_bytes = bytes(self._id.to_compressed_bytes())

    @property
    def order(self) -> int:
        return self.q

    @staticmethod
    def scalar(k: int) -> Scalar:
        return Scalar.from_le_bytes((k % _BlsG2.q).to_bytes(32, "little"))

    def generator(self) -> G2Point:
        return self._g

    def identity(self) -> G2Point:
        return self._id

    def op(self, a, b):
        return a + b

    def exp(self, a, k: int):
        return a * self.scalar(k)

    def inv(self, a):
        return -a

    def eq(self, a, b) -> bool:
        return a == b

    def is_identity(self, a) -> bool:
        return bytes(a.to_compressed_bytes()) == self._id_bytes

    def is_element(self, a) -> bool:
        return isinstance(a, G2Point)

    def encode(self, a) -> bytes:
        return bytes(a.to_compressed_bytes())

    def decode(self, data: bytes):
        if len(data) != self.element_len:
            raise InvalidElement(f"expected {self.element_len} bytes, got {len(data)}")
        try:
            # checked decoding: on-curve and prime-order subgroup membership
            return G2Point.from_compressed_bytes(bytes(data))
        except Exception as exc:  # the binding raises plain ValueError/Exception
            raise InvalidElement("not a G2 subgroup element") from exc


class Bls12381PairingGroup:
    """Type-3 pairing on BLS12-381 via arkworks."""

    name = "bls12-381"

    def __init__(self) -> None:
        self.g2 = _BlsG2()
        self._g1 = G1Point()
        self._neg_g1 = -self._g1
        self._one = GT.one()

    @property
    def order(self) -> int:
        return self.g2.q

    def g1_generator(self) -> G1Point:
        return self._g1

    def g1_exp(self, k: int) -> G1Point:
        return self._g1 * _BlsG2.scalar(k)

    def pairing_equal(self, a1, b1, a2, b2) -> bool:
        # e(a1, b1) * e(a2, b2)^-1 == 1 evaluated as one multi-pairing
        return GT.multi_pairing([a1, -a2], [b1, b2]) == self._one


_CACHE: dict[str, object] = {}


def get_group(name: str):
    """Shared backend instances (they are immutable)."""
    if name not in _CACHE:
        factories = {
            "toy-modp-47": lambda: TOY_GROUP,
            "secp256k1": Secp256k1Group,
            "p384": P384Group,
            "toy-pairing-47": ToyPairingGroup,
            "bls12-381": Bls12381PairingGroup,
        }
        if name not in factories:
            raise KeyError(f"unknown group backend {name!r}")
        _CACHE[name] = factories[name]()
    return _CACHE[name]
