"""Rerandomizable puzzles.

A puzzle commits to a solution derived from a service-key digest.  Whoever
knows the solution (and, for the re-encryption construction, the trapdoor
exponent) can recognise the puzzle; anyone can refresh it into an
unlinkable puzzle with the same solution.

Two constructions share one interface:

* ``Scheme.BILINEAR``: ``(z1, z2) = (g2^(r/m), g2^r)`` checked with
  ``e(g1^m, z1) == e(g1, z2)``.  Division is inversion in Z_q.
* ``Scheme.UNIVERSAL_REENC``: a universal re-encryption of the solution
  element, ``[(m*y^r0, g^r0); (y^r1, g^r1)]`` with ``y = g^x``.

Canonical byte form: scheme tag (1 byte), security level (1 byte, 0 for the
toy test group), then the fixed-length group elements in order.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Sequence

from .groups import InvalidElement, get_group
from .rng import random_scalar


class Scheme(IntEnum):
    BILINEAR = 1
    UNIVERSAL_REENC = 2

    @classmethod
    def parse(cls, value: "str | int | Scheme") -> "Scheme":
        if isinstance(value, Scheme):
            return value
        if isinstance(value, int):
            return cls(value)
        key = value.strip().lower().replace("_", "-")
        aliases = {
            "bilinear": cls.BILINEAR,
            "bilinear-map": cls.BILINEAR,
            "bilinearmap": cls.BILINEAR,
            "ur": cls.UNIVERSAL_REENC,
            "universal-reenc": cls.UNIVERSAL_REENC,
            "universalreenc": cls.UNIVERSAL_REENC,
            "universal-re-encryption": cls.UNIVERSAL_REENC,
        }
        if key not in aliases:
            raise ValueError(f"unknown puzzle scheme {value!r}")
        return aliases[key]


class PuzzleError(ValueError):
    """Malformed puzzle input or mismatched arguments."""


class UnsupportedSecurityLevel(PuzzleError):
    pass


TOY_LEVEL = 0

# (scheme, level) -> group backend name
_BACKENDS = {
    (Scheme.UNIVERSAL_REENC, 128): "secp256k1",
    (Scheme.UNIVERSAL_REENC, 192): "p384",
    (Scheme.UNIVERSAL_REENC, TOY_LEVEL): "toy-modp-47",
    (Scheme.BILINEAR, 128): "bls12-381",
    (Scheme.BILINEAR, TOY_LEVEL): "toy-pairing-47",
}


@dataclass(frozen=True)
class PuzzleParams:
    scheme: Scheme
    security_level: int
    backend: str
    y: Any = None  # UR public element g^x

    @property
    def group(self):
        """The group puzzle components live in (G for UR, G2 for bilinear)."""
        g = get_group(self.backend)
        return g.g2 if self.scheme is Scheme.BILINEAR else g

    @property
    def pairing(self):
        if self.scheme is not Scheme.BILINEAR:
            raise PuzzleError("no pairing for the re-encryption scheme")
        return get_group(self.backend)

    @property
    def order(self) -> int:
        return self.group.order

    @property
    def n_components(self) -> int:
        return 2 if self.scheme is Scheme.BILINEAR else 4

    @property
    def serialized_len(self) -> int:
        return 2 + self.n_components * self.group.element_len

    def public_bytes(self) -> bytes:
        """Header plus ``y`` (UR only); enough to rebuild the params."""
        head = bytes([self.scheme, self.security_level])
        if self.scheme is Scheme.UNIVERSAL_REENC:
            return head + self.group.encode(self.y)
        return head

    @classmethod
    def from_public_bytes(cls, data: bytes) -> "PuzzleParams":
        if len(data) < 2:
            raise PuzzleError("truncated params")
        scheme, level = Scheme(data[0]), data[1]
        backend = _backend_for(scheme, level)
        if scheme is Scheme.BILINEAR:
            if len(data) != 2:
                raise PuzzleError("trailing bytes in bilinear params")
            return cls(scheme, level, backend)
        group = get_group(backend)
        try:
            y = group.decode(data[2:])
        except InvalidElement as exc:
            raise PuzzleError(f"invalid y: {exc}") from exc
        return cls(scheme, level, backend, y)


@dataclass(frozen=True)
class PuzzleTrapdoor:
    scheme: Scheme
    x: int | None = None

    def to_bytes(self) -> bytes:
        if self.x is None:
            return b""
        return self.x.to_bytes(max(1, (self.x.bit_length() + 7) // 8), "big")

    @classmethod
    def from_bytes(cls, scheme: Scheme, data: bytes) -> "PuzzleTrapdoor":
        return cls(scheme, int.from_bytes(data, "big") if data else None)


@dataclass(frozen=True)
class PuzzleSolution:
    scheme: Scheme
    value: Any  # scalar (bilinear) or group element (UR)
    digest: bytes | None = None


@dataclass(frozen=True)
class Puzzle:
    scheme: Scheme
    security_level: int
    components: tuple


def _backend_for(scheme: Scheme, level: int) -> str:
    try:
        return _BACKENDS[(scheme, level)]
    except KeyError:
        raise UnsupportedSecurityLevel(
            f"{scheme.name} puzzles are not available at security level {level}"
        ) from None


def puzzle_setup(
    scheme: Scheme | str,
    security_level: int = 128,
    rng: random.Random | None = None,
    *,
    insecure_test: bool = False,
) -> tuple[PuzzleParams, PuzzleTrapdoor]:
    """Create public parameters and the trapdoor (``x`` for UR, empty otherwise).

    ``insecure_test`` selects the order-23 toy group; never use it outside tests.
    """
    scheme = Scheme.parse(scheme)
    if insecure_test:
        level = TOY_LEVEL
    elif security_level in (128, 192):
        level = security_level
    else:
        raise UnsupportedSecurityLevel(f"security level {security_level} is not supported")
    backend = _backend_for(scheme, level)
    if scheme is Scheme.BILINEAR:
        return PuzzleParams(scheme, level, backend), PuzzleTrapdoor(scheme)
    if rng is None:
        raise PuzzleError("rng required for re-encryption setup")
    group = get_group(backend)
    x = random_scalar(rng, group.order)
    return ur_params_from_secret(x, level), PuzzleTrapdoor(scheme, x)


def ur_params_from_secret(x: int, security_level: int = 128) -> PuzzleParams:
    backend = _backend_for(Scheme.UNIVERSAL_REENC, security_level)
    group = get_group(backend)
    return PuzzleParams(Scheme.UNIVERSAL_REENC, security_level, backend, group.exp(group.generator(), x))


def encode_solution(digest: bytes, params: PuzzleParams) -> PuzzleSolution:
    if len(digest) != 32:
        raise PuzzleError("solution digest must be exactly 32 bytes")
    if params.scheme is Scheme.BILINEAR:
        m = int.from_bytes(digest, "big") % params.order
        return PuzzleSolution(params.scheme, m or 1, bytes(digest))
    return PuzzleSolution(params.scheme, params.group.hash_to_element(bytes(digest)), bytes(digest))


def solution_from_value(params: PuzzleParams, value: Any) -> PuzzleSolution:
    """Wrap an already-encoded scalar or element (used by tests and vectors)."""
    if params.scheme is Scheme.BILINEAR:
        value %= params.order
        if value == 0:
            raise PuzzleError("bilinear solution must be nonzero")
    elif not params.group.is_element(value):
        raise PuzzleError("solution is not a group element")
    return PuzzleSolution(params.scheme, value)


def _check_scheme(params: PuzzleParams, *objs) -> None:
    for obj in objs:
        if obj.scheme is not params.scheme:
            raise PuzzleError(f"scheme mismatch: {obj.scheme.name} vs {params.scheme.name}")


def puzzle_gen(params: PuzzleParams, solution: PuzzleSolution, rng: random.Random) -> Puzzle:
    _check_scheme(params, solution)
    q = params.order
    if params.scheme is Scheme.BILINEAR:
        return puzzle_gen_with_coins(params, solution, (random_scalar(rng, q, nonzero=True),))
    return puzzle_gen_with_coins(params, solution, (random_scalar(rng, q), random_scalar(rng, q, nonzero=True)))


def puzzle_gen_with_coins(params: PuzzleParams, solution: PuzzleSolution, coins: Sequence[int]) -> Puzzle:
    """Deterministic core of :func:`puzzle_gen`: ``(r,)`` or ``(r0, r1)``."""
    _check_scheme(params, solution)
    G = params.group
    g = G.generator()
    q = params.order
    if params.scheme is Scheme.BILINEAR:
        (r,) = coins
        if r % q == 0:
            raise PuzzleError("r must be nonzero")
        m_inv = pow(solution.value, -1, q)
        comps = (G.exp(g, r * m_inv % q), G.exp(g, r))
    else:
        r0, r1 = coins
        if r1 % q == 0:
            # (1, 1) in the second pair would leave the first pair fixed under rerandomisation
            raise PuzzleError("r1 must be nonzero")
        y = params.y
        comps = (
            G.op(solution.value, G.exp(y, r0)),
            G.exp(g, r0),
            G.exp(y, r1),
            G.exp(g, r1),
        )
    return Puzzle(params.scheme, params.security_level, comps)


def puzzle_match(
    params: PuzzleParams,
    trapdoor: PuzzleTrapdoor | None,
    solution: PuzzleSolution,
    puzzle: Puzzle,
) -> bool:
    _check_scheme(params, solution, puzzle)
    G = params.group
    if params.scheme is Scheme.BILINEAR:
        if not all(G.is_element(c) for c in puzzle.components):
            return False
        z1, z2 = puzzle.components
        pg = params.pairing
        return pg.pairing_equal(pg.g1_exp(solution.value), z1, pg.g1_generator(), z2)
    if trapdoor is None or trapdoor.x is None:
        raise PuzzleError("re-encryption match requires the trapdoor")
    _check_scheme(params, trapdoor)
    if not all(G.is_element(c) for c in puzzle.components):
        return False
    a0, b0, a1, b1 = puzzle.components
    x = trapdoor.x
    m1 = G.op(a1, G.inv(G.exp(b1, x)))
    if not G.is_identity(m1):
        return False
    m0 = G.op(a0, G.inv(G.exp(b0, x)))
    return G.eq(m0, solution.value)


def puzzle_rerandomize(params: PuzzleParams, puzzle: Puzzle, rng: random.Random) -> Puzzle:
    q = params.order
    if params.scheme is Scheme.BILINEAR:
        coins = (random_scalar(rng, q, nonzero=True),)
    else:
        coins = (random_scalar(rng, q), random_scalar(rng, q, nonzero=True))
    return puzzle_rerandomize_with_coins(params, puzzle, coins)


def puzzle_rerandomize_with_coins(params: PuzzleParams, puzzle: Puzzle, coins: Sequence[int]) -> Puzzle:
    _check_scheme(params, puzzle)
    G = params.group
    if len(puzzle.components) != params.n_components or not all(G.is_element(c) for c in puzzle.components):
        raise PuzzleError("puzzle contains an invalid group element")
    if params.scheme is Scheme.BILINEAR:
        (rp,) = coins
        if rp % params.order == 0:
            raise PuzzleError("r' must be nonzero")
        z1, z2 = puzzle.components
        comps = (G.exp(z1, rp), G.exp(z2, rp))
    else:
        rp0, rp1 = coins
        if rp1 % params.order == 0:
            raise PuzzleError("r'_1 must be nonzero")
        a0, b0, a1, b1 = puzzle.components
        comps = (
            G.op(a0, G.exp(a1, rp0)),
            G.op(b0, G.exp(b1, rp0)),
            G.exp(a1, rp1),
            G.exp(b1, rp1),
        )
    return Puzzle(params.scheme, params.security_level, comps)


def serialize_puzzle(puzzle: Puzzle, params: PuzzleParams | None = None) -> bytes:
    backend = params.backend if params is not None else _backend_for(puzzle.scheme, puzzle.security_level)
    g = get_group(backend)
    G = g.g2 if puzzle.scheme is Scheme.BILINEAR else g
    return bytes([puzzle.scheme, puzzle.security_level]) + b"".join(G.encode(c) for c in puzzle.components)


def deserialize_puzzle(data: bytes, params: PuzzleParams) -> Puzzle:
    data = bytes(data)
    if len(data) != params.serialized_len:
        raise PuzzleError(f"puzzle must be {params.serialized_len} bytes, got {len(data)}")
    if data[0] != params.scheme or data[1] != params.security_level:
        raise PuzzleError("puzzle header does not match params")
    G = params.group
    n = G.element_len
    comps = []
    for i in range(params.n_components):
        chunk = data[2 + i * n: 2 + (i + 1) * n]
        try:
            comps.append(G.decode(chunk))
        except InvalidElement as exc:
            raise PuzzleError(f"component {i}: {exc}") from exc
    return Puzzle(params.scheme, params.security_level, tuple(comps))
