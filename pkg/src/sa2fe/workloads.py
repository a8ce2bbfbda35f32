"""Built-in toy service programs (``s_alg``)."""

from __future__ import annotations

import re
import time
from typing import Callable

Workload = Callable[[bytes], bytes]


def echo(data: bytes) -> bytes:
    return data


def sum_bytes(data: bytes) -> bytes:
    return sum(data).to_bytes(8, "big")


def _sleep(ms: int) -> Workload:
    def run(data: bytes) -> bytes:
        time.sleep(ms / 1000)
        return data

    return run


_SLEEP = re.compile(r"sleep\((\d+)\)")


def get_workload(name: str) -> Workload:
    """Resolve ``"echo"``, ``"sum-bytes"`` or ``"sleep(<ms>)"``."""
    if name == "echo":
        return echo
    if name == "sum-bytes":
        return sum_bytes
    m = _SLEEP.fullmatch(name)
    if m:
        return _sleep(int(m.group(1)))
    raise ValueError(f"unknown workload {name!r}")
