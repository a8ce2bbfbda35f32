import json
import socket
import subprocess
import sys

import pytest
import yaml

from sa2fe.cli import EXIT_CONFIG, EXIT_OK, main

FAST = ["--rsa-bits", "2048"]


def run(capsys, *argv):
    rc = main(list(argv))
    return rc, capsys.readouterr().out


def test_run_scenario_json(capsys):
    rc, out = run(capsys, "run-scenario", *FAST, "--sessions", "2", "--format", "json-lines")
    assert rc == EXIT_OK
    head = json.loads(out.splitlines()[0])
    assert head["sessions"] == 4 and head["success"] == 4 and head["violations"] == []


def test_seed_reproducible(capsys):
    args = ["run-scenario", *FAST, "--sessions", "2", "--format", "json-lines", "--seed", "9"]
    _, a = run(capsys, *args)
    _, b = run(capsys, *args)
    assert a == b
    _, c = run(capsys, *args[:-1], "10")
    assert json.loads(c.splitlines()[0])["trace_digest"] != json.loads(a.splitlines()[0])["trace_digest"]


def test_csv_to_file(capsys, tmp_path):
    out = tmp_path / "r.csv"
    rc, printed = run(capsys, "run-scenario", *FAST, "--sessions", "1", "--format", "csv", "--out", str(out))
    assert rc == EXIT_OK and printed == ""
    assert out.read_text().startswith("index,service,status")


def test_config_errors(capsys, tmp_path):
    assert main(["run-scenario", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG
    assert main(["run-scenario", "--scheme", "bilinear", "--seed", "1", "--rsa-bits", "1024"]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nscheme: bilinear\nsecurity_level: 192\n"
                   "services: [{spid: a, sname: s1}]\nedge_servers: [{esid: e1, services: [s1]}]\n")
    assert main(["run-scenario", "--config", str(bad), *FAST]) == EXIT_CONFIG
    assert main(["client", "--rsa-bits", "2048"]) == EXIT_CONFIG  # no addresses map
    assert "config error" in capsys.readouterr().err


def test_keygen(capsys):
    rc, out = run(capsys, "keygen", "--role", "service", "--service", "s1", "--rsa-bits", "2048", "--seed", "3")
    key = json.loads(out)
    n, p, q = (int(key[k], 16) for k in ("n", "p", "q"))
    assert rc == EXIT_OK and n == p * q and n.bit_length() == 2048
    _, again = run(capsys, "keygen", "--role", "service", "--service", "s1", "--rsa-bits", "2048", "--seed", "3")
    assert again == out
    rc, out = run(capsys, "keygen", "--role", "puzzle", "--scheme", "bilinear", "--seed", "1")
    assert rc == EXIT_OK and set(json.loads(out)) == {"params", "trapdoor"}


def test_attacks_and_fairness(capsys):
    rc, out = run(capsys, "attacks", *FAST, "--runs", "1", "--format", "json-lines")
    assert rc == EXIT_OK and json.loads(out.splitlines()[0])["all_rejected"] is True
    rc, out = run(capsys, "fairness", *FAST, "--sessions", "60", "--service", "s2", "--format", "json-lines")
    assert rc == EXIT_OK
    assert {json.loads(x)["es"] for x in out.splitlines()[1:]} == {"e1", "e2"}


def test_bench(capsys):
    rc, out = run(capsys, "bench-puzzle", "--scheme", "universal-reenc", "--counts", "2,3", "--min-ops", "6",
                  "--format", "csv")
    assert rc == EXIT_OK and len(out.splitlines()) == 1 + 6


def _free_ports(n):
    socks = [socket.socket() for _ in range(n)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


@pytest.mark.slow
def test_multiprocess_tcp(tmp_path):
    names = ["fa", "sp1", "sp2", "bs", "e1", "e2", "e3", "user"]
    cfg = {
        "name": "tcp", "seed": 5, "rsa_bits": 2048,
        "services": [{"spid": "sp1", "sname": "s1", "workload": "echo"},
                     {"spid": "sp2", "sname": "s2", "workload": "sum-bytes"}],
        "edge_servers": [{"esid": "e1", "services": ["s1", "s2"]}, {"esid": "e2", "services": ["s2"]},
                         {"esid": "e3", "services": ["s1"]}],
        "addresses": {n: f"127.0.0.1:{p}" for n, p in zip(names, _free_ports(len(names)))},
    }
    path = tmp_path / "net.yaml"
    path.write_text(yaml.safe_dump(cfg))
    base = [sys.executable, "-m", "sa2fe.cli"]
    roles = [("fa", None), ("sp", "sp1"), ("sp", "sp2"), ("bs", None), ("es", "e1"), ("es", "e2"), ("es", "e3")]
    procs = []
    try:
        for role, name in roles:
            cmd = base + ["serve", "--role", role, "--config", str(path), "--vouchers", "10", "--claim-interval", "0.5"]
            procs.append(subprocess.Popen(cmd + (["--name", name] if name else []),
                                          stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL))
        # no start-up sleep: the client must ride out servers that are not listening or registered yet
        for service in ("s1", "s2"):
            res = subprocess.run(base + ["client", "--config", str(path), "--service", service, "--sessions", "2",
                                         "--data", "hi", "--voucher-offset", "0" if service == "s1" else "2",
                                         "--ready-timeout", "90"],
                                 capture_output=True, text=True, timeout=120)
            rows = [json.loads(x) for x in res.stdout.splitlines()]
            assert res.returncode == EXIT_OK, res.stderr
            assert [r["status"] for r in rows] == ["done", "done"]
            want = b"hi".hex() if service == "s1" else sum(b"hi").to_bytes(8, "big").hex()
            assert {r["resp"] for r in rows} == {want}
    finally:
        for p in procs:
            p.terminate()
        for p in procs:
            p.wait(timeout=10)
