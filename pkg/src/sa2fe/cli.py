"""Command-line entry point (``sa2fe``).

Exit codes: 0 success, 2 invariant violation (including a successful
attack or a failed fairness test), 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
import threading
import time
from pathlib import Path

from .blind import BlindSignatureError, Role, blind_setup
from .parties import Reason
from .puzzle import PuzzleError, Scheme, puzzle_setup
from .report import FORMATS, emit_report
from .rng import DrbgRandom, system_rng
from .scenario import ConfigError, ScenarioConfig, World, builtin_config, load_config

EXIT_OK = 0
EXIT_VIOLATION = 2
EXIT_CONFIG = 3

log = logging.getLogger("sa2fe")


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else builtin_config("two-service")
    changes = {}
    if getattr(args, "scheme", None):
        changes["scheme"] = Scheme.parse(args.scheme)
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "rsa_bits", None):
        changes["rsa_bits"] = args.rsa_bits
    return cfg.with_(**changes) if changes else cfg


def _emit(report, args) -> None:
    text = emit_report(report, args.format, args.out)
    if args.out is None:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_keygen(args) -> int:
    rng = DrbgRandom(f"keygen/{args.seed}") if args.seed is not None else system_rng()
    if args.role == "puzzle":
        params, trap = puzzle_setup(args.scheme or "universal-reenc", args.level, rng)
        out = {"params": params.public_bytes().hex(), "trapdoor": trap.to_bytes().hex()}
    else:
        role = Role.platform() if args.role == "platform" else Role.service(args.service or "service")
        kp = blind_setup(role, args.level, rng, bits=args.rsa_bits)
        out = {"role": args.role, "n": hex(kp.n), "e": kp.public.e, "d": hex(kp.d), "p": hex(kp.p), "q": hex(kp.q)}
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run_scenario(args) -> int:
    from .scenario import SessionSpec, run_scenario

    cfg = _config(args)
    if args.sessions is not None:
        sess = tuple(SessionSpec(s.service, args.sessions, s.data) for s in cfg.sessions) or (
            SessionSpec(cfg.services[0].sname, args.sessions),)
        cfg = cfg.with_(sessions=sess)
    report = run_scenario(cfg, timings=args.timings)
    _emit(report, args)
    return EXIT_VIOLATION if report.violations else EXIT_OK


def cmd_fairness(args) -> int:
    from .scenario import run_fairness

    cfg = _config(args)
    res = run_fairness(cfg, args.sessions or 10_000, service=args.service, alpha=args.alpha)
    _emit(res, args)
    return EXIT_OK if res.passed else EXIT_VIOLATION


def cmd_attacks(args) -> int:
    from .attacks import run_attacks

    cfg = _config(args)
    results = run_attacks(cfg, runs=args.runs)
    _emit(results, args)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VIOLATION


def cmd_bench(args) -> int:
    from .bench import DEFAULT_COUNTS, bench_puzzle

    schemes = [Scheme.parse(args.scheme)] if args.scheme else [Scheme.UNIVERSAL_REENC, Scheme.BILINEAR]
    counts = tuple(int(c) for c in args.counts.split(",")) if args.counts else DEFAULT_COUNTS
    res = bench_puzzle(schemes, counts, security_level=args.level, min_ops=args.min_ops, seed=args.seed or 0)
    _emit(res, args)
    return EXIT_OK


# -- networked roles ----------------------------------------------------------


class _Collect:
    """Stand-in transport used only to construct parties."""

    def add(self, party):
        return party


def _tcp_world(cfg: ScenarioConfig, label: str = "tcp") -> World:
    return World(cfg, net=_Collect(), label=label)


def _directory(cfg: ScenarioConfig) -> dict:
    if not cfg.addresses:
        raise ConfigError("networked mode needs an 'addresses' map in the scenario file")
    return {name: (host, port) for name, host, port in cfg.addresses}


def serve_vouchers(cfg: ScenarioConfig, n: int = 100_000) -> list[bytes]:
    """Pre-agreed voucher allow-list for networked runs (stands in for real payments)."""
    rng = DrbgRandom(f"vouchers/{cfg.seed}")
    return [rng.randbytes(16) for _ in range(n)]


def cmd_serve(args) -> int:
    from .transport import TcpNetwork

    cfg = _config(args)
    directory = _directory(cfg)
    world = _tcp_world(cfg)
    role = args.role
    if role == "fa":
        party = world.fa
        party.vouchers.update(serve_vouchers(cfg, args.vouchers))
    elif role == "bs":
        party = world.bs
    elif role == "sp":
        party = next((p for p in world.sps.values() if p.name == args.name), None)
    else:
        party = world.ess.get(args.name)
    if party is None:
        raise ConfigError(f"no {role} named {args.name!r} in the scenario")
    net = TcpNetwork(directory)
    host, port = directory[party.name]
    net.add(party, host, port)
    log.info("%s listening on %s:%d", party.name, host, port)

    def locked(fn) -> bool:
        with net._locks[party.name]:
            outs = fn()
        try:
            net.post(party.name, outs)
        except OSError as exc:  # peer not listening yet
            log.info("%s: %s", party.name, exc)
            return False
        return True

    def backoff(attempt: int) -> None:
        time.sleep(min(0.2 * (attempt + 1), 2.0))

    if role == "sp":
        for attempt in range(args.retries):
            if party.registered:
                break
            if party.holds_secret_key:
                locked(lambda: party.register_with_fa("fa"))
            backoff(attempt)
    if role == "es":
        spec = next(e for e in cfg.edge_servers if e.esid == party.name)
        for attempt in range(args.retries):
            missing = [s for s in spec.services if s not in party.credentials]
            if not missing:
                break
            for s in missing:
                locked(lambda s=s: party.register_with_sp(cfg.service(s).spid, s))
            backoff(attempt)
        for attempt in range(args.retries):
            if locked(lambda: party.register_with_bs(cfg.bs_id)):
                break
            backoff(attempt)
    stop = threading.Event()
    try:
        while not stop.wait(args.claim_interval):
            if role in ("bs", "es"):
                locked(lambda: party.claim_all("fa"))
            if args.once:
                break
    except KeyboardInterrupt:
        pass
    finally:
        net.close()
    return EXIT_OK


def cmd_client(args) -> int:
    from .transport import TcpNetwork

    cfg = _config(args)
    directory = _directory(cfg)
    # each client process needs its own randomness or token serials collide
    world = _tcp_world(cfg, label=f"client/{secrets.token_hex(16)}")
    user = world.user
    net = TcpNetwork(directory)
    net.add(user, listen=False)
    vouchers = serve_vouchers(cfg, args.voucher_offset + args.sessions)[args.voucher_offset:]
    service = args.service or cfg.services[0].sname
    results = []
    # rejections that only mean the servers are still starting; none of them spends the voucher or token
    not_ready = {Reason.UNKNOWN_SERVICE.value, Reason.NO_PROVIDERS.value, Reason.NO_CANDIDATES.value}
    deadline = time.monotonic() + args.ready_timeout

    def settle(outs, done) -> bool:
        try:
            net.post(user.name, outs)
        except OSError:  # server not listening yet
            return False
        net.wait_until(done, args.timeout)
        return True

    for i in range(args.sessions):
        while True:
            sid, outs = user.register_token(service, vouchers[i])
            sent = settle(outs, lambda: user.registrations[sid].status != "pending")
            reg = user.registrations[sid]
            if (sent and (reg.token is not None or reg.reason not in not_ready)) or time.monotonic() > deadline:
                break
            time.sleep(0.5)
        if reg.token is None:
            results.append({"session": i, "status": "token-failed", "reason": reg.reason or "Unreachable"})
            continue
        user.tokens[service].remove(reg.token)
        while True:
            osid, outs = user.start_offload(service, args.data.encode(), reg.token)
            sent = settle(outs, lambda: user.sessions[osid].status in ("done", "rejected", "aborted"))
            s = user.sessions[osid]
            if (sent and (s.status == "done" or s.reason not in not_ready)) or time.monotonic() > deadline:
                break
            time.sleep(0.5)
        results.append({"session": i, "status": s.status if sent else "unreachable", "reason": s.reason,
                        "resp": s.resp_data.hex() if s.resp_data is not None else ""})
    net.close()
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in results)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if all(r["status"] == "done" for r in results) else EXIT_VIOLATION


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sa2fe", description="Anonymous edge offloading simulator and tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sessions=True):
        sp.add_argument("--config", help="scenario YAML (default: built-in two-service)")
        sp.add_argument("--scheme", help="bilinear | universal-reenc")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rsa-bits", type=int, help="override the RSA modulus size (min 2048)")
        if sessions:
            sp.add_argument("--sessions", type=int)
        sp.add_argument("--out", help="write the report here instead of stdout")
        sp.add_argument("--format", choices=FORMATS, default="text")

    k = sub.add_parser("keygen", help="generate a blind-signature keypair or puzzle parameters")
    k.add_argument("--role", choices=["platform", "service", "puzzle"], default="platform")
    k.add_argument("--service")
    k.add_argument("--scheme")
    k.add_argument("--level", type=int, default=128)
    k.add_argument("--rsa-bits", type=int)
    k.add_argument("--seed", type=int)
    k.add_argument("--out")
    k.set_defaults(fn=cmd_keygen)

    r = sub.add_parser("run-scenario", help="run a scenario on the loopback transport")
    common(r)
    r.add_argument("--timings", action="store_true", help="include wall-clock timings (not reproducible)")
    r.set_defaults(fn=cmd_run_scenario)

    f = sub.add_parser("fairness", help="chi-square test of ES selection frequencies")
    common(f)
    f.add_argument("--service")
    f.add_argument("--alpha", type=float, default=0.01)
    f.set_defaults(fn=cmd_fairness)

    a = sub.add_parser("attacks", help="run the scripted attack suite")
    common(a, sessions=False)
    a.add_argument("--runs", type=int, default=100)
    a.set_defaults(fn=cmd_attacks)

    b = sub.add_parser("bench-puzzle", help="time puzzle operations over list sizes")
    b.add_argument("--scheme")
    b.add_argument("--counts", help="comma-separated list sizes (default 10,20,30,50,100)")
    b.add_argument("--level", type=int, default=128)
    b.add_argument("--min-ops", type=int, default=1000)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.add_argument("--format", choices=FORMATS, default="text")
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("serve", help="run one party over TCP")
    s.add_argument("--role", choices=["fa", "sp", "bs", "es"], required=True)
    s.add_argument("--name", help="party name for sp/es roles")
    s.add_argument("--config")
    s.add_argument("--scheme")
    s.add_argument("--seed", type=int)
    s.add_argument("--rsa-bits", type=int)
    s.add_argument("--vouchers", type=int, default=100_000)
    s.add_argument("--claim-interval", type=float, default=1.0)
    s.add_argument("--retries", type=int, default=50)
    s.add_argument("--once", action="store_true", help="exit after the first claim round")
    s.set_defaults(fn=cmd_serve)

    c = sub.add_parser("client", help="run user sessions against served parties")
    c.add_argument("--config")
    c.add_argument("--scheme")
    c.add_argument("--seed", type=int)
    c.add_argument("--rsa-bits", type=int)
    c.add_argument("--service")
    c.add_argument("--sessions", type=int, default=1)
    c.add_argument("--data", default="ping")
    c.add_argument("--voucher-offset", type=int, default=0)
    c.add_argument("--timeout", type=float, default=30.0)
    c.add_argument("--ready-timeout", type=float, default=30.0,
                   help="keep retrying while the servers report they are not set up yet")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_client)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, PuzzleError, BlindSignatureError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
