"""Acceptance suite.

Each test checks one acceptance criterion at its stated tolerance and prints
a single ``PASS``/``FAIL`` line, collected into an "acceptance criteria"
section at the end of the pytest run.  Run just this file with

    pytest tests/test_acceptance.py -v

or ``python3 tests/test_acceptance.py``.
"""

import random
import sys
import time

import pytest

import oracles
from acceptance_log import LINES
from fuzz import fuzz
from sa2fe.attacks import ATTACKS, run_attacks
from sa2fe.bench import DEFAULT_COUNTS, bench_puzzle
from sa2fe.conformance import run_conformance
from sa2fe.puzzle import (
    TOY_LEVEL,
    PuzzleTrapdoor,
    Scheme,
    encode_solution,
    puzzle_gen,
    puzzle_gen_with_coins,
    puzzle_match,
    puzzle_rerandomize,
    puzzle_rerandomize_with_coins,
    puzzle_setup,
    serialize_puzzle,
    solution_from_value,
    ur_params_from_secret,
)
from sa2fe.report import render
from sa2fe.rng import DrbgRandom
from sa2fe.scenario import SessionSpec, builtin_config, key_material, run_fairness, run_scenario

pytestmark = pytest.mark.slow

SCHEMES = (Scheme.UNIVERSAL_REENC, Scheme.BILINEAR)


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    LINES.append(line)
    assert ok, line


def test_two_service_end_to_end():
    t0 = time.perf_counter()
    cfg = builtin_config("two-service")
    cfg = cfg.with_(sessions=(SessionSpec("s1", 1000, b"offload me"), SessionSpec("s2", 1000, b"add these")))
    rep = run_scenario(cfg, keys=key_material(cfg))
    elapsed = time.perf_counter() - t0
    by = {"s1": set(), "s2": set()}
    for s in rep.sessions:
        by[s.service].add(s.es)
    ok = (rep.n_success == 2000 and all(s.correct for s in rep.sessions) and by["s1"] <= {"e1", "e3"}
          and by["s2"] <= {"e1", "e2"} and not rep.violations and elapsed < 60)
    verdict("end-to-end", ok, f"{rep.n_success}/2000 ok, s1->{sorted(by['s1'])} s2->{sorted(by['s2'])}, "
                        f"{elapsed:.1f}s (<60s), violations={len(rep.violations)}")


def test_fairness():
    res = run_fairness(builtin_config("two-service"), n_sessions=10_000, service="s1", alpha=0.01)
    shares = res.shares()
    within = all(abs(shares[es] - 0.5) <= 0.02 for es in ("e1", "e3"))
    ok = res.passed and within and set(res.counts) == {"e1", "e3"}
    verdict("fairness", ok, f"counts={res.counts} chi2={res.chi2:.3f} p={res.p_value:.4f} (>0.01), "
                            f"shares within 50+-2pt: {within}")


def test_attack_suite():
    results = run_attacks(builtin_config("two-service"), runs=100)
    required = {"double-spend", "forged-token", "puzzle-replay", "stale-batch", "wrong-service-claim",
                "duplicate-claim"}
    ok = required <= {r.name for r in results} and all(r.passed for r in results)
    detail = ", ".join(f"{r.name} {r.rejected}/{r.runs}" for r in results)
    verdict("attacks", ok, detail + ("" if ok else f"; first failure: {next(r.failures[0] for r in results if r.failures)}"))
    assert len(results) == len(ATTACKS)


def test_toy_oracle_equivalence():
    rnd = random.Random("acceptance/toy")
    mismatches = checks = 0
    elements = oracles.non_identity()
    assert len(elements) == 22
    for m in elements:
        for _ in range(100):
            x = rnd.randrange(1, 23)
            params, trap = ur_params_from_secret(x, TOY_LEVEL), PuzzleTrapdoor(Scheme.UNIVERSAL_REENC, x)
            # coin domain: r0, r'0 in Z_q; r1, r'1 nonzero
            r0, r1, rp0, rp1 = rnd.randrange(23), rnd.randrange(1, 23), rnd.randrange(23), rnd.randrange(1, 23)
            z = puzzle_gen_with_coins(params, solution_from_value(params, m), (r0, r1))
            z2 = puzzle_rerandomize_with_coins(params, z, (rp0, rp1))
            probe = rnd.choice(elements)
            results = [
                params.y == oracles.ur_setup(x),
                z.components == oracles.ur_gen(m, params.y, r0, r1),
                z2.components == oracles.ur_rerandomize(z.components, rp0, rp1),
                puzzle_match(params, trap, solution_from_value(params, m), z2) == oracles.ur_match(x, m, z2.components),
                puzzle_match(params, trap, solution_from_value(params, probe), z2)
                == oracles.ur_match(x, probe, z2.components),
            ]
            checks += len(results)
            mismatches += results.count(False)
    bl, bl_trap = puzzle_setup(Scheme.BILINEAR, insecure_test=True)
    for m in range(1, 23):
        for _ in range(100):
            r, rp = rnd.randrange(1, 23), rnd.randrange(1, 23)
            probe = rnd.randrange(1, 23)
            z = puzzle_gen_with_coins(bl, solution_from_value(bl, m), (r,))
            z2 = puzzle_rerandomize_with_coins(bl, z, (rp,))
            results = [
                z.components == oracles.bl_gen(m, r),
                z2.components == oracles.bl_rerandomize(z.components, rp),
                puzzle_match(bl, bl_trap, solution_from_value(bl, m), z2) == oracles.bl_match(m, z2.components),
                puzzle_match(bl, bl_trap, solution_from_value(bl, probe), z2) == oracles.bl_match(probe, z2.components),
            ]
            checks += len(results)
            mismatches += results.count(False)
    verdict("toy-oracle", mismatches == 0, f"{checks} checks over 22 elements x 100 coins per scheme, "
                                           f"{mismatches} mismatches")


def test_soundness():
    details, ok = [], True
    for scheme in SCHEMES:
        rng = DrbgRandom(f"acceptance/sound/{scheme.name}")
        params, trap = puzzle_setup(scheme, 128, rng)
        false_pos = trials = 0
        while trials < 10_000:
            right = encode_solution(rng.randbytes(32), params)
            z = puzzle_gen(params, right, rng)
            for _ in range(100):
                wrong = encode_solution(rng.randbytes(32), params)
                if wrong.value == right.value:
                    continue
                trials += 1
                false_pos += puzzle_match(params, trap, wrong, z)
        ok &= false_pos == 0
        details.append(f"{scheme.name.lower()} {false_pos}/{trials} false positives")
    verdict("soundness", ok, ", ".join(details))


def test_rerandomization_chains():
    details, ok = [], True
    for scheme in SCHEMES:
        rng = DrbgRandom(f"acceptance/chain/{scheme.name}")
        params, trap = puzzle_setup(scheme, 128, rng)
        seen: set[bytes] = set()
        broken = repeats = 0
        for _ in range(1000):
            sol = encode_solution(rng.randbytes(32), params)
            z = puzzle_gen(params, sol, rng)
            for depth in range(11):
                if depth:
                    z = puzzle_rerandomize(params, z, rng)
                b = serialize_puzzle(z, params)
                repeats += b in seen
                seen.add(b)
                broken += not puzzle_match(params, trap, sol, z)
        ok &= broken == 0 and repeats == 0
        details.append(f"{scheme.name.lower()} 1000x10 broken={broken} repeats={repeats}")
    verdict("rerandomization", ok, ", ".join(details))


def test_model_conformance():
    res = run_conformance(n_traces=1000)
    verdict("conformance", res.passed, f"{res.traces} traces, {res.events} events, "
                                       f"{len(res.mismatches)} mismatches"
            + (f"; first: {res.mismatches[0]}" if res.mismatches else ""))


def test_benchmark_shape():
    res = bench_puzzle(SCHEMES, DEFAULT_COUNTS)
    details, ok = [], res.elapsed_s < 300
    for scheme in SCHEMES:
        name = scheme.name.lower()
        r2, mono = res.r_squared(name), res.monotone(name)
        ok &= mono and r2 >= 0.9
        details.append(f"{name} monotone={mono} R2={r2:.4f}")
    verdict("bench", ok, ", ".join(details) + f", {res.elapsed_s:.1f}s (<300s)")


def test_wire_fuzz():
    stats = fuzz(100_000, seed=2024)
    ok = stats.frames >= 100_000 and not stats.crashes and not stats.oob and not stats.non_identity
    verdict("wire-fuzz", ok, f"{stats.frames} frames ({stats.accepted} accepted, {stats.rejected} rejected), "
                             f"crashes={len(stats.crashes)} oob={len(stats.oob)} "
                             f"non-identity={len(stats.non_identity)}")


def test_determinism():
    cfg = builtin_config("two-service")
    a, b = run_scenario(cfg), run_scenario(cfg)
    same_trace = a._world.net.trace == b._world.net.trace and len(a._world.net.trace) > 0
    same_report = all(render(a, f) == render(b, f) for f in ("text", "csv", "json-lines"))
    verdict("determinism", same_trace and same_report,
            f"{len(a._world.net.trace)} frames identical={same_trace}, reports identical={same_report}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
