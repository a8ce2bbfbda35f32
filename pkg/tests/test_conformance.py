import random

from sa2fe.conformance import (
    conformance_config,
    dump_trace,
    generate_trace,
    load_trace,
    replay,
    run_conformance,
)


def test_trace_dump_roundtrip():
    cfg = conformance_config()
    trace = generate_trace(cfg, random.Random(1))
    assert load_trace(dump_trace(trace)) == trace
    assert {e["op"] for e in trace} >= {"register_sp", "register_es_sp", "register_es_bs"}


def test_trace_generation_is_seeded():
    cfg = conformance_config()
    assert generate_trace(cfg, random.Random(5)) == generate_trace(cfg, random.Random(5))


def test_single_trace_replays_equal():
    cfg = conformance_config()
    cmp = replay(generate_trace(cfg, random.Random(2), 20), cfg)
    assert cmp.equal, cmp.notes
    assert cmp.first_divergence() is None
    assert len(cmp.real) == len(cmp.model) > 0


def test_small_conformance_run():
    res = run_conformance(n_traces=40, seed=3)
    assert res.traces == 40 and res.events > 0
    assert res.passed, res.mismatches[:3]


def test_divergence_is_reported():
    cfg = conformance_config()
    cmp = replay(generate_trace(cfg, random.Random(4)), cfg)
    cmp.model[0] = "tampered"
    assert not cmp.equal and cmp.first_divergence() == 0
