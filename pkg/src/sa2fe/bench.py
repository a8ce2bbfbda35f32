"""Puzzle micro-benchmarks over growing list sizes.

For each list size ``n`` the bench times three list-wide operations:
generating ``n`` puzzles, rerandomising all ``n``, and a user scanning all
``n`` with ``puzzle_match``.  Each size is sampled until at least
``min_ops`` primitive operations have run, with sizes interleaved; medians
come with a 95% distribution-free interval from binomial order statistics.
"""

from __future__ import annotations

import gc
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from .puzzle import (
    Scheme,
    puzzle_gen,
    puzzle_match,
    puzzle_rerandomize,
    puzzle_setup,
    encode_solution,
)
from .rng import DrbgRandom

DEFAULT_COUNTS = (10, 20, 30, 50, 100)
OPS = ("gen", "rerandomize", "match")


def median_ci(samples: list[float], level: float = 0.95) -> tuple[float, float, float]:
    xs = sorted(samples)
    k = len(xs)
    med = float(np.median(xs))
    if k < 3:
        return med, xs[0], xs[-1]
    a = (1 - level) / 2
    lo = max(0, int(binom.ppf(a, k, 0.5)) - 1)
    hi = min(k - 1, int(binom.ppf(1 - a, k, 0.5)))
    return med, xs[lo], xs[hi]


@dataclass
class BenchRow:
    scheme: str
    op: str
    n: int
    samples: int
    median_ms: float
    ci_lo_ms: float
    ci_hi_ms: float


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)
    elapsed_s: float = 0.0

    def series(self, scheme: str, op: str) -> tuple[list[int], list[float]]:
        pts = sorted((r.n, r.median_ms) for r in self.rows if r.scheme == scheme and r.op == op)
        return [p[0] for p in pts], [p[1] for p in pts]

    def r_squared(self, scheme: str, op: str = "match") -> float:
        x, y = self.series(scheme, op)
        x_arr, y_arr = np.asarray(x, float), np.asarray(y, float)
        slope, icept = np.polyfit(x_arr, y_arr, 1)
        resid = y_arr - (slope * x_arr + icept)
        ss_tot = float(np.sum((y_arr - y_arr.mean()) ** 2))
        return 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot else 1.0

    def monotone(self, scheme: str, op: str = "match") -> bool:
        _, y = self.series(scheme, op)
        return all(b > a for a, b in zip(y, y[1:]))

    def summary(self) -> dict:
        schemes = sorted({r.scheme for r in self.rows})
        return {
            "elapsed_s": round(self.elapsed_s, 3),
            "match_r2": {s: round(self.r_squared(s), 4) for s in schemes},
            "match_monotone": {s: self.monotone(s) for s in schemes},
        }

    def as_rows(self) -> list[dict]:
        return [r.__dict__ for r in self.rows]


def bench_puzzle(
    schemes=(Scheme.UNIVERSAL_REENC, Scheme.BILINEAR),
    counts=DEFAULT_COUNTS,
    security_level: int = 128,
    min_ops: int = 1000,
    min_samples: int = 5,
    seed: int = 0,
) -> BenchResult:
    t_start = time.perf_counter()
    result = BenchResult()
    for scheme in schemes:
        scheme = Scheme.parse(scheme)
        rng = DrbgRandom(f"bench/{seed}/{scheme.name}")
        params, trapdoor = puzzle_setup(scheme, security_level, rng)
        # a user's own solution plus a few foreign ones, so scans see a realistic mix
        sols = [encode_solution(rng.randbytes(32), params) for _ in range(4)]
        mine = sols[0]
        # sizes are interleaved round by round so a transient slowdown lands on
        # every size instead of skewing one median; gc is off while timing, as in timeit
        samples = {n: max(math.ceil(min_ops / n), min_samples) for n in counts}
        timings = {n: {op: [] for op in OPS} for n in counts}
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for round_ in range(max(samples.values())):
                for n in counts:
                    if round_ >= samples[n]:
                        continue
                    t0 = time.perf_counter()
                    lst = [puzzle_gen(params, sols[i % len(sols)], rng) for i in range(n)]
                    t1 = time.perf_counter()
                    lst = [puzzle_rerandomize(params, z, rng) for z in lst]
                    t2 = time.perf_counter()
                    hits = sum(puzzle_match(params, trapdoor, mine, z) for z in lst)
                    t3 = time.perf_counter()
                    if hits != len(range(0, n, len(sols))):
                        raise AssertionError("benchmark list did not match as constructed")
                    timings[n]["gen"].append((t1 - t0) * 1000)
                    timings[n]["rerandomize"].append((t2 - t1) * 1000)
                    timings[n]["match"].append((t3 - t2) * 1000)
                gc.collect()
        finally:
            if gc_was_enabled:
                gc.enable()
        for n in counts:
            for op in OPS:
                med, lo, hi = median_ci(timings[n][op])
                result.rows.append(BenchRow(scheme.name.lower(), op, n, samples[n], med, lo, hi))
    result.elapsed_s = time.perf_counter() - t_start
    return result
