"""Randomness sources.

Every cryptographic routine in the package takes an explicit ``rng``
argument.  Two sources satisfy that contract:

* ``random.SystemRandom`` (what :func:`system_rng` returns) for real use;
* :class:`DrbgRandom`, an HMAC-SHA256 counter-mode generator that is
  reproducible from a seed, used by the simulator so that whole protocol
  runs can be replayed bit for bit.

Both are ``random.Random`` subclasses, so ``randrange``, ``shuffle``,
``choice`` and ``randbytes`` work unchanged.
"""

from __future__ import annotations

import hashlib
import hmac
import random


def system_rng() -> random.SystemRandom:
    return random.SystemRandom()


class DrbgRandom(random.Random):
    """Deterministic HMAC-SHA256 stream seeded from bytes, str or int."""

    def __init__(self, seed: bytes | str | int = 0) -> None:
        self._key = b""
        self._counter = 0
        self._buf = b""
        super().__init__(seed)

    def seed(self, a=None, version=2) -> None:  # noqa: D401 - random.Random API
        if a is None:
            a = 0
        if isinstance(a, int):
            a = a.to_bytes(max(1, (a.bit_length() + 7) // 8), "big", signed=False) if a >= 0 else str(a).encode()
        elif isinstance(a, str):
            a = a.encode()
        self._key = hashlib.sha256(b"sa2fe-drbg" + bytes(a)).digest()
        self._counter = 0
        self._buf = b""

    def _bytes(self, n: int) -> bytes:
        while len(self._buf) < n:
            block = hmac.new(self._key, self._counter.to_bytes(8, "big"), hashlib.sha256).digest()
            self._counter += 1
            self._buf += block
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def getrandbits(self, k: int) -> int:
        if k < 0:
            raise ValueError("number of bits must be non-negative")
        if k == 0:
            return 0
        nbytes = (k + 7) // 8
        value = int.from_bytes(self._bytes(nbytes), "big")
        return value >> (nbytes * 8 - k)

    def random(self) -> float:
        return self.getrandbits(53) / (1 << 53)

    def randbytes(self, n: int) -> bytes:
        return self._bytes(n)

    def fork(self, label: str) -> "DrbgRandom":
        """Independent child stream; the parent stream is not advanced."""
        return DrbgRandom(hmac.new(self._key, b"fork:" + label.encode(), hashlib.sha256).digest())

    def getstate(self):
        return (self._key, self._counter, self._buf)

    def setstate(self, state) -> None:
        self._key, self._counter, self._buf = state


def random_scalar(rng: random.Random, q: int, nonzero: bool = False) -> int:
    """Uniform element of Z_q (or Z_q* when ``nonzero``)."""
    if nonzero:
        return 1 + rng.randrange(q - 1)
    return rng.randrange(q)
