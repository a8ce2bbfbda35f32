"""Scenario configuration and the in-process simulator.

A :class:`World` wires one FA, one BS, the configured SPs and ESs and a
single user onto a transport, runs the registration flows, and then drives
offloading sessions and claims.  In loopback mode everything derives from
``config.seed``, so two runs with equal seeds produce the same frames.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .blind import BlindKeyPair, Role, Token, blind_setup
from .ledger import ClaimLedger, PaymentAmounts
from .parties import (
    BaseStation,
    EdgeServer,
    FinancialAuthority,
    OffloadBehavior,
    Registration,
    ServiceProvider,
    User,
    UserSession,
)
from .puzzle import PuzzleParams, PuzzleTrapdoor, Scheme, puzzle_setup
from .rng import DrbgRandom
from .symenc import sym_key_setup
from .transport import LoopbackNetwork
from .workloads import get_workload


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ServiceSpec:
    spid: str
    sname: str
    workload: str = "echo"


@dataclass(frozen=True)
class EdgeSpec:
    esid: str
    services: tuple[str, ...]
    weights: tuple[tuple[str, int], ...] = ()

    def weight(self, s: str) -> int:
        return dict(self.weights).get(s, 1)


@dataclass(frozen=True)
class SessionSpec:
    service: str
    count: int = 1
    data: bytes = b"ping"


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    scheme: Scheme = Scheme.UNIVERSAL_REENC
    security_level: int = 128
    seed: int = 0
    rsa_bits: int | None = None
    bs_id: str = "bs"
    services: tuple[ServiceSpec, ...] = ()
    edge_servers: tuple[EdgeSpec, ...] = ()
    eligibility: tuple[tuple[str, tuple[str, ...]], ...] = ()
    payments: PaymentAmounts = PaymentAmounts()
    sessions: tuple[SessionSpec, ...] = ()
    addresses: tuple[tuple[str, str, int], ...] = ()

    def __post_init__(self) -> None:
        names = [s.sname for s in self.services]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate service names")
        esids = [e.esid for e in self.edge_servers]
        if len(set(esids)) != len(esids):
            raise ConfigError("duplicate edge server ids")
        known = set(names)
        for e in self.edge_servers:
            for s in e.services:
                if s not in known:
                    raise ConfigError(f"edge server {e.esid} references unknown service {s}")
            for s, w in e.weights:
                if s not in e.services or w < 1:
                    raise ConfigError(f"bad weight {s}={w} on {e.esid}")
        for s, allowed in self.eligibility:
            if s not in known:
                raise ConfigError(f"eligibility for unknown service {s}")
            for es in allowed:
                if es not in esids:
                    raise ConfigError(f"eligibility names unknown edge server {es}")
        for sess in self.sessions:
            if sess.service not in known:
                raise ConfigError(f"session requests unknown service {sess.service}")
            if sess.count < 0:
                raise ConfigError("negative session count")
        for spec in self.services:
            try:
                get_workload(spec.workload)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    def service(self, sname: str) -> ServiceSpec:
        for s in self.services:
            if s.sname == sname:
                return s
        raise KeyError(sname)

    def allowed(self, sname: str) -> tuple[str, ...]:
        """ESs the SP approves; defaults to every ES that declares the service."""
        for s, allowed in self.eligibility:
            if s == sname:
                return allowed
        return tuple(e.esid for e in self.edge_servers if sname in e.services)

    def with_(self, **changes) -> "ScenarioConfig":
        from dataclasses import replace

        return replace(self, **changes)


def config_from_dict(d: dict[str, Any]) -> ScenarioConfig:
    try:
        services = tuple(
            ServiceSpec(str(s["spid"]), str(s["sname"]), str(s.get("workload", "echo")))
            for s in d.get("services", [])
        )
        edges = tuple(
            EdgeSpec(
                str(e["esid"]),
                tuple(str(x) for x in e.get("services", [])),
                tuple(sorted((str(k), int(v)) for k, v in (e.get("weights") or {}).items())),
            )
            for e in d.get("edge_servers", [])
        )
        elig = tuple(sorted((str(k), tuple(str(x) for x in v)) for k, v in (d.get("eligibility") or {}).items()))
        pay = d.get("payments") or {}
        sessions = tuple(
            SessionSpec(str(s["service"]), int(s.get("count", 1)), str(s.get("data", "ping")).encode())
            for s in d.get("sessions", [])
        )
        addrs = tuple(
            (str(k), str(v.split(":")[0]), int(v.split(":")[1])) for k, v in (d.get("addresses") or {}).items()
        )
        if "seed" not in d:
            raise ConfigError("seed is required")
        return ScenarioConfig(
            name=str(d.get("name", "scenario")),
            scheme=Scheme.parse(d.get("scheme", "universal-reenc")),
            security_level=int(d.get("security_level", 128)),
            seed=int(d["seed"]),
            rsa_bits=int(d["rsa_bits"]) if d.get("rsa_bits") else None,
            bs_id=str(d.get("bs_id", "bs")),
            services=services,
            edge_servers=edges,
            eligibility=elig,
            payments=PaymentAmounts(int(pay.get("bs", 1)), int(pay.get("es", 3)), int(pay.get("sp", 2))),
            sessions=sessions,
            addresses=addrs,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError, IndexError) as exc:
        raise ConfigError(f"invalid scenario config: {exc}") from None


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("scenario file must be a mapping")
    return config_from_dict(data)


def builtin_config(name: str = "two-service") -> ScenarioConfig:
    text = resources.files("sa2fe").joinpath("scenarios").joinpath(f"{name}.yaml").read_text()
    return config_from_dict(yaml.safe_load(text))


# ---------------------------------------------------------------------------
# Keys
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyMaterial:
    params: PuzzleParams
    trapdoor: PuzzleTrapdoor
    platform: BlindKeyPair
    services: dict  # sname -> BlindKeyPair
    k_s: dict  # sname -> bytes


@lru_cache(maxsize=16)
def _keys(scheme: Scheme, level: int, seed: int, rsa_bits: int | None, snames: tuple[str, ...]) -> KeyMaterial:
    rng = DrbgRandom(f"keys/{seed}")
    params, trapdoor = puzzle_setup(scheme, level, rng.fork("puzzle"))
    platform = blind_setup(Role.platform(), level, rng.fork("platform"), bits=rsa_bits)
    services = {s: blind_setup(Role.service(s), level, rng.fork(f"service/{s}"), bits=rsa_bits) for s in snames}
    k_s = {s: sym_key_setup(rng.fork(f"k_s/{s}")) for s in snames}
    return KeyMaterial(params, trapdoor, platform, services, k_s)


def key_material(config: ScenarioConfig) -> KeyMaterial:
    """Deterministic from the seed; cached because RSA keygen dominates setup."""
    return _keys(config.scheme, config.security_level, config.seed, config.rsa_bits,
                 tuple(s.sname for s in config.services))


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------


class World:
    def __init__(self, config: ScenarioConfig, keys: KeyMaterial | None = None, net=None, label: str = "run",
                 ledger: ClaimLedger | None = None):
        self.config = config
        self.keys = keys or key_material(config)
        rng = DrbgRandom(f"world/{config.seed}/{label}")
        self.rng = rng
        self.net = net if net is not None else LoopbackNetwork(rng=rng.fork("net"))
        k = self.keys
        self.fa = FinancialAuthority("fa", rng.fork("fa"), k.platform, k.params, k.trapdoor,
                                     amounts=config.payments, ledger=ledger or ClaimLedger(config.payments))
        self.sps: dict[str, ServiceProvider] = {}
        for spec in config.services:
            self.sps[spec.sname] = ServiceProvider(
                spec.spid, spec.sname, rng.fork(f"sp/{spec.spid}"), k.services[spec.sname], k.k_s[spec.sname],
                spec.workload, eligible=config.allowed(spec.sname),
            )
        self.ess: dict[str, EdgeServer] = {
            e.esid: EdgeServer(e.esid, rng.fork(f"es/{e.esid}"), k.params, dict(e.weights))
            for e in config.edge_servers
        }
        self.bs = BaseStation(config.bs_id, rng.fork("bs"), k.params, k.platform.public)
        self.user = User("user", rng.fork("user"), k.params, k.platform.public,
                         {s: kp.public for s, kp in k.services.items()}, fa="fa", bs=config.bs_id)
        for p in (self.fa, *self.sps.values(), *self.ess.values(), self.bs, self.user):
            self.net.add(p)
        self._voucher_rng = rng.fork("vouchers")

    @property
    def parties(self):
        return [self.fa, *self.sps.values(), *self.ess.values(), self.bs, self.user]

    def run(self) -> None:
        self.net.run()

    # -- registration ------------------------------------------------------

    def setup(self) -> "World":
        for sp in self.sps.values():
            self.net.post(sp.name, sp.register_with_fa("fa"))
        self.run()
        for e in self.config.edge_servers:
            es = self.ess[e.esid]
            for s in e.services:
                self.net.post(es.name, es.register_with_sp(self.config.service(s).spid, s))
        self.run()
        for es in self.ess.values():
            self.net.post(es.name, es.register_with_bs(self.config.bs_id))
        self.run()
        return self

    def mint_voucher(self) -> bytes:
        """A paid voucher: the FA adds it to its allow-list and the user keeps it."""
        v = self._voucher_rng.randbytes(16)
        self.fa.vouchers.add(v)
        return v

    def register_token(self, s_type: str, payment: bytes | None = None) -> Registration:
        if payment is None:
            payment = self.mint_voucher()
        sid, outs = self.user.register_token(s_type, payment)
        self.net.post(self.user.name, outs)
        self.run()
        return self.user.registrations[sid]

    def new_token(self, s_type: str) -> Token:
        reg = self.register_token(s_type)
        if reg.token is None:
            raise RuntimeError(f"token issuance failed: {reg.reason}")
        self.user.tokens[s_type].remove(reg.token)
        return reg.token

    # -- offloading --------------------------------------------------------

    def offload(self, s_type: str, data: bytes = b"ping", token: Token | None = None,
                behavior: OffloadBehavior | None = None, token_bytes: bytes | None = None) -> UserSession:
        if token is None and token_bytes is None:
            token = self.new_token(s_type)
        sid, outs = self.user.start_offload(s_type, data, token, behavior, token_bytes=token_bytes)
        self.net.post(self.user.name, outs)
        self.run()
        return self.user.sessions[sid]

    def release(self, session: UserSession, z_u: bytes | None = None) -> UserSession:
        self.net.post(self.user.name, self.user.release(session.sid, z_u))
        self.run()
        return session

    def served_by(self, session: UserSession) -> str | None:
        bs_s = self.bs.sessions.get(session.sid)
        return bs_s.es_id if bs_s is not None else None

    def claim_all(self) -> None:
        self.net.post(self.bs.name, self.bs.claim_all("fa"))
        for es in self.ess.values():
            self.net.post(es.name, es.claim_all("fa"))
        self.run()

    # -- invariants --------------------------------------------------------

    def check_invariants(self) -> list[str]:
        bad = []
        hashes = [th for _, th, _ in self.bs.forwarded]
        if len(hashes) != len(set(hashes)):
            bad.append("a token was forwarded more than once")
        for s in self.bs.sessions.values():
            if s.state == "closed" and not self.bs.latest_version > s.version:
                bad.append(f"version not advanced past {s.version}")
        used = sum(1 for e in self.bs.p_map.values() if e.used)
        if used != len(self.bs.forwarded):
            bad.append(f"{used} used puzzles for {len(self.bs.forwarded)} forwarded requests")
        cap = self.config.payments.total
        for rec in self.fa.ledger.records.values():
            if rec.total_paid > cap:
                bad.append("token paid above the configured total")
        for sp in self.sps.values():
            if sp.registered and sp.holds_secret_key:
                bad.append(f"{sp.name} still holds sk_s")
        return bad


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class SessionOutcome:
    index: int
    service: str
    status: str  # success | rejected | aborted
    reason: str
    es: str | None
    correct: bool


@dataclass
class RunReport:
    scenario: str
    scheme: str
    seed: int
    sessions: list[SessionOutcome] = field(default_factory=list)
    es_counts: dict = field(default_factory=dict)  # service -> {es: count}
    ledger_totals: dict = field(default_factory=dict)
    claims: dict = field(default_factory=dict)
    trace_digest: str = ""
    violations: list[str] = field(default_factory=list)
    timings: dict | None = None

    @property
    def n_success(self) -> int:
        return sum(1 for s in self.sessions if s.status == "success")

    def summary(self) -> dict:
        out = {
            "scenario": self.scenario,
            "scheme": self.scheme,
            "seed": self.seed,
            "sessions": len(self.sessions),
            "success": self.n_success,
            "es_counts": self.es_counts,
            "ledger_totals": self.ledger_totals,
            "claims": self.claims,
            "trace_digest": self.trace_digest,
            "violations": self.violations,
        }
        if self.timings is not None:
            out["timings"] = self.timings
        return out


def _outcome(world: World, index: int, s: UserSession, expected: bytes) -> SessionOutcome:
    if s.status == "done":
        status = "success"
    elif s.status == "aborted":
        status = "aborted"
    else:
        status = "rejected"
    return SessionOutcome(index, s.s_type, status, s.reason, world.served_by(s),
                          s.status == "done" and s.resp_data == expected)


def run_scenario(config: ScenarioConfig, *, timings: bool = False, keys: KeyMaterial | None = None) -> RunReport:
    t0 = time.perf_counter()
    world = World(config, keys=keys).setup()
    t_setup = time.perf_counter() - t0
    report = RunReport(config.name, config.scheme.name.lower(), config.seed)
    session_times = []
    index = 0
    for spec in config.sessions:
        workload = get_workload(config.service(spec.service).workload)
        for _ in range(spec.count):
            ts = time.perf_counter()
            reg = world.register_token(spec.service)
            if reg.token is None:
                report.sessions.append(SessionOutcome(index, spec.service, "rejected", reg.reason, None, False))
                index += 1
                continue
            world.user.tokens[spec.service].remove(reg.token)
            s = world.offload(spec.service, spec.data, token=reg.token)
            session_times.append(time.perf_counter() - ts)
            report.sessions.append(_outcome(world, index, s, workload(spec.data)))
            index += 1
    world.claim_all()
    for o in report.sessions:
        if o.es is not None and o.status == "success":
            report.es_counts.setdefault(o.service, {}).setdefault(o.es, 0)
            report.es_counts[o.service][o.es] += 1
    report.ledger_totals = world.fa.ledger.totals()
    bs_paid = sum(1 for r in world.bs.claim_results if r[1])
    es_paid = sum(1 for es in world.ess.values() for r in es.claim_results if r[2])
    report.claims = {"bs_paid": bs_paid, "es_paid": es_paid}
    report.trace_digest = world.net.trace_digest() if hasattr(world.net, "trace_digest") else ""
    report.violations = world.check_invariants()
    for o in report.sessions:
        if o.status == "success" and not o.correct:
            report.violations.append(f"session {o.index} returned wrong data")
    if timings:
        report.timings = {
            "setup_s": t_setup,
            "total_s": time.perf_counter() - t0,
            "session_ms_median": 1000 * sorted(session_times)[len(session_times) // 2] if session_times else 0.0,
        }
    report._world = world  # for callers that want to inspect state; not serialised
    return report


# ---------------------------------------------------------------------------
# Fairness
# ---------------------------------------------------------------------------


@dataclass
class FairnessResult:
    service: str
    n_sessions: int
    counts: dict
    expected: dict
    chi2: float
    p_value: float
    alpha: float

    @property
    def passed(self) -> bool:
        return self.p_value > self.alpha

    def shares(self) -> dict:
        total = sum(self.counts.values()) or 1
        return {k: v / total for k, v in self.counts.items()}


def run_fairness(config: ScenarioConfig, n_sessions: int = 10_000, service: str | None = None,
                 alpha: float = 0.01) -> FairnessResult:
    """Offload ``n_sessions`` requests and test ES selection against the weighted-uniform law."""
    from scipy.stats import chisquare

    service = service or config.services[0].sname
    world = World(config, label="fairness").setup()
    weights = {e.esid: e.weight(service) for e in config.edge_servers
               if service in e.services and e.esid in world.ess and service in world.ess[e.esid].credentials}
    counts = {es: 0 for es in weights}
    for _ in range(n_sessions):
        s = world.offload(service)
        es = world.served_by(s)
        if s.status != "done" or es is None:
            raise RuntimeError(f"fairness session failed: {s.status} {s.reason}")
        counts[es] += 1
    total_w = sum(weights.values())
    expected = {es: n_sessions * w / total_w for es, w in weights.items()}
    keys = sorted(counts)
    if len(keys) < 2:
        return FairnessResult(service, n_sessions, counts, expected, 0.0, 1.0, alpha)
    stat, p = chisquare([counts[k] for k in keys], [expected[k] for k in keys])
    return FairnessResult(service, n_sessions, counts, expected, float(stat), float(p), alpha)


def trace_fingerprint(world: World) -> str:
    return hashlib.sha256(repr(world.bs.decisions).encode()).hexdigest()
