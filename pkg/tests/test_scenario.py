import pytest

from oracles import weighted_shares
from sa2fe.puzzle import Scheme
from sa2fe.scenario import (
    ConfigError,
    EdgeSpec,
    ServiceSpec,
    SessionSpec,
    builtin_config,
    config_from_dict,
    load_config,
    run_fairness,
    run_scenario,
)


def test_builtin_two_service():
    cfg = builtin_config("two-service")
    assert cfg.scheme is Scheme.UNIVERSAL_REENC
    assert [e.esid for e in cfg.edge_servers] == ["e1", "e2", "e3"]
    assert cfg.allowed("s1") == ("e1", "e3") and cfg.allowed("s2") == ("e1", "e2")
    assert sum(s.count for s in cfg.sessions) == 20


@pytest.mark.parametrize("bad", [
    {},  # no seed
    {"seed": 1, "services": [{"sname": "s1"}]},
    {"seed": 1, "services": [{"spid": "a", "sname": "s1"}, {"spid": "b", "sname": "s1"}]},
    {"seed": 1, "edge_servers": [{"esid": "e1", "services": ["nope"]}]},
    {"seed": 1, "services": [{"spid": "a", "sname": "s1"}],
     "edge_servers": [{"esid": "e1", "services": ["s1"], "weights": {"s1": 0}}]},
    {"seed": 1, "services": [{"spid": "a", "sname": "s1", "workload": "mine-bitcoin"}]},
    {"seed": 1, "scheme": "rot13"},
    {"seed": 1, "sessions": [{"service": "ghost"}]},
    {"seed": 1, "eligibility": {"s1": ["e1"]}},
    {"seed": "x"},
])
def test_bad_configs(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "list.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("seed: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_addresses_parsed():
    cfg = config_from_dict({"seed": 1, "addresses": {"fa": "127.0.0.1:9000"}})
    assert cfg.addresses == (("fa", "127.0.0.1", 9000),)


def test_two_service_run_routes_correctly(fast_config, fast_keys):
    rep = run_scenario(fast_config, keys=fast_keys, timings=True)
    assert rep.n_success == 20 and rep.violations == []
    assert set(rep.es_counts["s1"]) <= {"e1", "e3"}
    assert set(rep.es_counts["s2"]) <= {"e1", "e2"}
    assert rep.claims == {"bs_paid": 20, "es_paid": 20}
    assert rep.ledger_totals == {"bs": 20, "es": 60, "sp": 40}
    assert rep.timings["total_s"] > 0


def test_run_is_deterministic(fast_config, fast_keys):
    cfg = fast_config.with_(sessions=(SessionSpec("s1", 3), SessionSpec("s2", 3)))
    a, b = run_scenario(cfg, keys=fast_keys), run_scenario(cfg, keys=fast_keys)
    assert a.summary() == b.summary()
    assert a.trace_digest and a.trace_digest == b.trace_digest
    c = run_scenario(cfg.with_(seed=cfg.seed + 1), keys=fast_keys)
    assert c.trace_digest != a.trace_digest


def test_no_edge_servers_means_no_providers(fast_config, fast_keys):
    cfg = fast_config.with_(edge_servers=(), sessions=(SessionSpec("s1", 2),))
    rep = run_scenario(cfg, keys=fast_keys)
    assert rep.n_success == 0
    assert [s.reason for s in rep.sessions] == ["NoProviders", "NoProviders"]
    assert rep.violations == []


def test_fairness_small(fast_config):
    res = run_fairness(fast_config, n_sessions=200, service="s1")
    assert set(res.counts) == {"e1", "e3"} and sum(res.counts.values()) == 200
    assert res.passed


def test_fairness_single_provider(fast_config):
    cfg = fast_config.with_(edge_servers=(EdgeSpec("e1", ("s1",)),),
                            services=(ServiceSpec("sp1", "s1"),), sessions=())
    res = run_fairness(cfg, n_sessions=20)
    assert res.counts == {"e1": 20} and res.shares() == {"e1": 1.0}


def test_fairness_weighted(fast_config):
    cfg = fast_config.with_(
        services=(ServiceSpec("sp1", "s1"),), sessions=(),
        edge_servers=(EdgeSpec("e1", ("s1",), (("s1", 2),)), EdgeSpec("e2", ("s1",))),
    )
    res = run_fairness(cfg, n_sessions=600)
    want = weighted_shares({"e1": 2, "e2": 1})
    assert res.expected == {k: 600 * v for k, v in want.items()}
    for es, share in res.shares().items():
        assert abs(share - want[es]) < 0.07
    assert res.passed
