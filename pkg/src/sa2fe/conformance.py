"""Model-based trace testing: real parties versus the ideal model.

A trace is a list of events (one JSON object per line when saved).  The
same trace is replayed against a fresh loopback :class:`World` and against
:class:`IdealModel`; each event yields one decision per side and the two
sequences must be equal.  The harness keeps the translation map from real
objects (token identities, puzzle bytes) to ideal identifiers.

Generated traces respect two limits of the real protocol that the model
does not share: only the party that actually holds a token claims with it,
and a user whose token the BS refuses never sees a list, so "abort" and
"hold" are only scripted with fresh tokens.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Iterable

from . import ideal
from .blind import Token
from .ideal import IdealModel
from .parties import OffloadBehavior, Reason
from .scenario import EdgeSpec, KeyMaterial, ScenarioConfig, ServiceSpec, World, key_material
from .wire import MsgType, make

OFFLOAD_REASONS = {
    Reason.INVALID_TOKEN.value: ideal.INVALID_TOKEN,
    Reason.DOUBLE_SPEND.value: ideal.INVALID_TOKEN,
    Reason.UNKNOWN_PUZZLE.value: ideal.INVALID_PUZZLE,
    Reason.PUZZLE_REPLAY.value: ideal.INVALID_PUZZLE,
    Reason.STALE_LIST.value: ideal.INVALID_PUZZLE,
}


def conformance_config(seed: int = 7, rsa_bits: int | None = 2048) -> ScenarioConfig:
    """Two services, three eligible ESs (one weighted) and one ES nobody approves."""
    return ScenarioConfig(
        name="conformance",
        seed=seed,
        rsa_bits=rsa_bits,
        services=(ServiceSpec("sp1", "s1", "echo"), ServiceSpec("sp2", "s2", "sum-bytes")),
        edge_servers=(
            EdgeSpec("e1", ("s1", "s2")),
            EdgeSpec("e2", ("s2",), (("s2", 2),)),
            EdgeSpec("e3", ("s1",)),
            EdgeSpec("e4", ("s1",)),
        ),
        eligibility=(("s1", ("e1", "e3")), ("s2", ("e1", "e2"))),
    )


# ---------------------------------------------------------------------------
# Trace generation
# ---------------------------------------------------------------------------


def generate_trace(config: ScenarioConfig, rng: random.Random, n_events: int = 14) -> list[dict]:
    svc = [s.sname for s in config.services]
    sp_of = {s.sname: s.spid for s in config.services}
    ev: list[dict] = []

    # registration prefix, shuffled within each stage
    sps = list(svc)
    rng.shuffle(sps)
    for s in sps:
        ev.append({"op": "register_sp", "sp": sp_of[s], "service": s, "variant": "normal"})
        if rng.random() < 0.2:
            ev.append({"op": "register_sp", "sp": sp_of[s], "service": s,
                       "variant": rng.choice(["duplicate", "mismatch"])})
    pairs = [(e.esid, s) for e in config.edge_servers for s in e.services]
    rng.shuffle(pairs)
    for es, s in pairs:
        ev.append({"op": "register_es_sp", "es": es, "service": s})
        if rng.random() < 0.15:
            ev.append({"op": "register_es_sp", "es": es, "service": s})
    for e in config.edge_servers:
        ev.append({"op": "register_es_bs", "es": e.esid})
        if rng.random() < 0.1:
            ev.append({"op": "register_bad_puzzle", "es": e.esid})

    tokens: list[tuple[str, str]] = []  # (sym, service) of issued, unused tokens
    spent: list[tuple[str, str]] = []
    served: list[tuple[str, str]] = []  # tokens that honest offloads forwarded
    done_sessions: list[str] = []
    held: list[tuple[str, str, str]] = []  # (session, token, service)
    n_tok = n_sess = 0

    def new_token(s: str) -> str:
        nonlocal n_tok
        sym = f"t{n_tok}"
        n_tok += 1
        ev.append({"op": "token", "service": s, "token": sym, "payment": "fresh"})
        tokens.append((sym, s))
        return sym

    def session() -> str:
        nonlocal n_sess
        n_sess += 1
        return f"u{n_sess}"

    for _ in range(n_events):
        roll = rng.random()
        s = rng.choice(svc)
        if roll < 0.03:
            es = rng.choice(config.edge_servers)
            ev.append({"op": "reregister_slot", "es": es.esid, "slot": rng.randrange(2)})
        elif roll < 0.08:
            ev.append({"op": "token", "service": s, "token": f"t{n_tok}",
                       "payment": rng.choice(["bogus", "reused"])})
            n_tok += 1
        elif roll < 0.40:
            tok = new_token(s)
            tokens.remove((tok, s))
            u = session()
            ev.append({"op": "offload", "session": u, "service": s, "token": tok, "action": "honest"})
            spent.append((tok, s))
            served.append((tok, s))
            done_sessions.append(u)
        elif roll < 0.47 and spent:
            tok, ts = rng.choice(spent)
            ev.append({"op": "offload", "session": session(), "service": ts, "token": tok, "action": "honest"})
        elif roll < 0.52:
            ev.append({"op": "offload", "session": session(), "service": s, "token": "forged", "action": "honest"})
        elif roll < 0.58 and done_sessions:
            tok = new_token(s)
            tokens.remove((tok, s))
            ev.append({"op": "offload", "session": session(), "service": s, "token": tok,
                       "action": "replay", "target": rng.choice(done_sessions)})
            spent.append((tok, s))
        elif roll < 0.64:
            tok = new_token(s)
            tokens.remove((tok, s))
            ev.append({"op": "offload", "session": session(), "service": s, "token": tok, "action": "unknown"})
            spent.append((tok, s))
        elif roll < 0.68:
            tok = new_token(s)
            tokens.remove((tok, s))
            ev.append({"op": "offload", "session": session(), "service": s, "token": tok, "action": "abort"})
            spent.append((tok, s))
        elif roll < 0.74:
            tok = new_token(s)
            tokens.remove((tok, s))
            u = session()
            ev.append({"op": "offload", "session": u, "service": s, "token": tok, "action": "hold"})
            held.append((u, tok, s))
            spent.append((tok, s))
        elif roll < 0.80 and held:
            target = rng.choice(held)[0]
            tok = new_token(s)
            tokens.remove((tok, s))
            ev.append({"op": "offload", "session": session(), "service": s, "token": tok,
                       "action": "stale", "target": target})
            spent.append((tok, s))
        elif roll < 0.85 and held:
            u, tok, ts = held.pop(rng.randrange(len(held)))
            ev.append({"op": "release", "session": u})
            done_sessions.append(u)
            served.append((tok, ts))
        elif roll < 0.93 and served:
            tok, ts = rng.choice(served)
            if rng.random() < 0.5:
                ev.append({"op": "claim_bs", "token": tok})
            else:
                wrong = rng.random() < 0.25
                other = rng.choice([x for x in svc if x != ts]) if wrong else ts
                ev.append({"op": "claim_es", "token": tok, "service": other})
        else:
            ev.append({"op": rng.choice(["claim_bs", "claim_es"]), "token": "forged", "service": s})
    for u, _, _ in held:
        ev.append({"op": "release", "session": u})
    return ev


def dump_trace(events: Iterable[dict]) -> str:
    return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in events)


def load_trace(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


@dataclass
class Comparison:
    real: list[str] = field(default_factory=list)
    model: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def equal(self) -> bool:
        return self.real == self.model and not self.notes

    def first_divergence(self) -> int | None:
        for i, (a, b) in enumerate(zip(self.real, self.model)):
            if a != b:
                return i
        if len(self.real) != len(self.model):
            return min(len(self.real), len(self.model))
        return None


class TraceRunner:
    """Drives one trace through a fresh World and a fresh IdealModel side by side."""

    def __init__(self, config: ScenarioConfig, keys: KeyMaterial, label: str):
        self.config = config
        self.world = World(config, keys=keys, label=label)
        weights = {(e.esid, s): w for e in config.edge_servers for s, w in e.weights}
        self.model = IdealModel(label, weights)
        self.sp_of = {s.sname: s.spid for s in config.services}
        self.sp_msgs = {sp.sname: sp.registration_message() for sp in self.world.sps.values()}
        self.tokens: dict[str, Token] = {}
        self.ideal_tokens: dict[tuple[bytes, bytes], str] = {}  # R for tokens
        self.ideal_puzzles: dict[bytes, str] = {}  # R for puzzles
        self.sessions = {}  # sym -> real UserSession
        self.model_sessions: dict[str, str] = {}  # sym -> model uid
        self.vouchers: list[bytes] = []
        self.cmp = Comparison()
        self._forged = 0

    # helpers ---------------------------------------------------------------

    def _ideal_token(self, token: Token | None) -> str:
        if token is None:
            self._forged += 1
            return f"forged{self._forged}"
        return self.ideal_tokens.get(token.identity) or f"unknown:{token.token_hash().hex()[:12]}"

    def _forge(self) -> Token:
        r = self.world.rng
        n = self.world.keys.platform.public.n
        return Token(r.randbytes(32), r.randrange(2, n), r.randbytes(32), r.randrange(2, n))

    def _map_batch(self, real_list: list[bytes], model_list: list[str]) -> None:
        by_slot = {(self.model.T_p[p].esid, self.model.T_p[p].slot): p for p in model_list}
        for raw in real_list:
            e = self.world.bs.p_map.get(raw)
            if e is not None and (e.es_id, e.slot) in by_slot:
                self.ideal_puzzles[raw] = by_slot[(e.es_id, e.slot)]

    def _record(self, real: str, model: str) -> None:
        self.cmp.real.append(real)
        self.cmp.model.append(model)

    # events ----------------------------------------------------------------

    def apply(self, e: dict) -> None:
        getattr(self, "_ev_" + e["op"])(e)

    def _ev_register_sp(self, e: dict) -> None:
        s = e["service"]
        sp = self.world.sps[s]
        base = self.sp_msgs[s]
        fields = dict(base.fields)
        sdata = "v1"
        if e["variant"] == "mismatch":
            fields["k_s"] = bytes(b ^ 0xFF for b in fields["k_s"])
            sdata = "v2"
        sid = self.world.rng.randbytes(16)
        self.world.net.send(sp.name, "fa", make(MsgType.SP_REGISTER, sid, **fields))
        self.world.run()
        ok, reason = sp.acks[sid]
        real = (ideal.EXISTS if reason == Reason.EXISTS.value else ideal.SUCCESS) if ok else ideal.FAIL
        self._record(real, self.model.register_sp(e["sp"] if "sp" in e else self.sp_of[s], s, sdata))

    def _ev_register_es_sp(self, e: dict) -> None:
        es = self.world.ess[e["es"]]
        s = e["service"]
        outs = es.register_with_sp(self.sp_of[s], s)
        sid = outs[0][1].session_id
        self.world.net.post(es.name, outs)
        self.world.run()
        ok, reason = es.sp_results[sid]
        real = (ideal.EXISTS if reason == Reason.EXISTS.value else ideal.SUCCESS) if ok else ideal.FAIL
        allows = e["es"] in self.config.allowed(s)
        self._record(real, self.model.register_es_sp(self.sp_of[s], s, e["es"], allows))

    def _ev_register_es_bs(self, e: dict) -> None:
        es = self.world.ess[e["es"]]
        outs = es.register_with_bs(self.world.bs.name)
        self.world.net.post(es.name, outs)
        self.world.run()
        real = []
        for _, msg in outs:
            ok, _ = es.bs_acks[msg.session_id]
            real.append(ideal.SUCCESS if ok else ideal.FAIL)
        model = self.model.register_es_bs(e["es"], self.world.bs.name)
        for (_, msg), (_, pid) in zip(outs, model):
            self.ideal_puzzles[msg["puzzle"]] = pid
        self._record("register_es_bs:" + ",".join(real), "register_es_bs:" + ",".join(r for r, _ in model))

    def _ev_register_bad_puzzle(self, e: dict) -> None:
        es = self.world.ess[e["es"]]
        sid = self.world.rng.randbytes(16)
        junk = self.world.rng.randbytes(self.world.keys.params.serialized_len)
        self.world.net.send(es.name, self.world.bs.name,
                            make(MsgType.ES_REGISTER_BS, sid, esid=es.name, slot=10_000, puzzle=junk))
        self.world.run()
        ok, _ = es.bs_acks[sid]
        self._record(ideal.SUCCESS if ok else ideal.FAIL, self.model.register_bad_puzzle())

    def _ev_reregister_slot(self, e: dict) -> None:
        es = self.world.ess[e["es"]]
        slot = e["slot"]
        real = ideal.FAIL
        if slot in es.slots:
            outs = es.register_with_bs(self.world.bs.name, slot=slot)
            self.world.net.post(es.name, outs)
            self.world.run()
            ok, _ = es.bs_acks[outs[0][1].session_id]
            real = ideal.SUCCESS if ok else ideal.FAIL
        reply, pid = self.model.reregister_slot(e["es"], self.world.bs.name, slot)
        if real == ideal.SUCCESS and pid:
            self.ideal_puzzles[outs[0][1]["puzzle"]] = pid
        self._record(real, reply)

    def _ev_token(self, e: dict) -> None:
        s = e["service"]
        if e["payment"] == "fresh":
            payment = self.world.mint_voucher()
        elif e["payment"] == "reused" and self.vouchers:
            payment = self.vouchers[0]
        else:
            payment = self.world.rng.randbytes(16)
        reg = self.world.register_token(s, payment)
        if reg.token is not None:
            self.vouchers.append(payment)
            self.world.user.tokens[s].remove(reg.token)
            self.tokens[e["token"]] = reg.token
        reply, tid = self.model.register_token(self.sp_of[s], s, e["payment"] == "fresh")
        if tid is not None and reg.token is not None:
            self.ideal_tokens[reg.token.identity] = tid
        self._record(ideal.SUCCESS if reg.token is not None else ideal.FAIL, reply)

    def _real_offload_outcome(self, s) -> str:
        if s.status == "done":
            return ideal.SUCCESS
        if s.status == "aborted":
            return ideal.USER_ABORT
        if s.status in ("held", "listed"):
            return "pending"
        return OFFLOAD_REASONS.get(s.reason, ideal.FAIL)

    def _ev_offload(self, e: dict) -> None:
        sym, s, act = e["session"], e["service"], e["action"]
        token = self._forge() if e["token"] == "forged" else self.tokens.get(e["token"])
        if token is None:
            raise KeyError(f"trace uses unknown token {e['token']}")
        w = self.world
        behavior = OffloadBehavior()
        if act == "abort":
            behavior = OffloadBehavior(abort=True)
        elif act in ("hold", "stale"):
            behavior = OffloadBehavior(hold=True)
        elif act == "replay":
            behavior = OffloadBehavior(submit=self.sessions[e["target"]].z_u)
        elif act == "unknown":
            behavior = OffloadBehavior(submit=w.rng.randbytes(w.keys.params.serialized_len))
        real = w.offload(s, b"trace data", token=token, behavior=behavior)
        if act == "stale" and real.status == "held":
            target = self.sessions[e["target"]]
            z = target.puzzles[w.rng.randrange(len(target.puzzles))]
            w.release(real, z)
        self.sessions[sym] = real

        malicious = act not in ("honest", "hold")
        uid = f"{sym}"
        self.model_sessions[sym] = uid
        tid = self.ideal_tokens.get(token.identity) if e["token"] != "forged" else None
        tid = tid or self._ideal_token(None)
        plist = self.model.offload_init(uid, tid, w.bs.name, malicious)
        if real.puzzles:
            self._map_batch(real.puzzles, plist)
        if act == "hold":
            self._record(self._real_offload_outcome(real), "pending")
            self._check_candidates(real, uid)
            return
        choice = self._model_choice(real, plist, act)
        reply, _ = self.model.offload_respond(uid, choice)
        self._record(self._real_offload_outcome(real), reply)
        if act == "honest":
            self._check_candidates(real, uid)

    def _model_choice(self, real, plist: list[str], act: str) -> str | None:
        if act == "abort":
            return None
        if real.z_u is not None:
            return self.ideal_puzzles.get(real.z_u, "unknown-puzzle")
        # the real BS refused before the user could choose; an honest user would pick a candidate
        if act == "honest":
            cands = sorted(p for p in plist if self.model.T_p[p].sname == real.s_type)
            return cands[0] if cands else None
        return "unknown-puzzle"

    def _check_candidates(self, real, uid: str) -> None:
        if real.status in ("rejected",) and not real.puzzles:
            return
        s = real.s_type
        if real.status == "held":
            got = {self.ideal_puzzles.get(z) for z in real.puzzles if self.world.user.matches(s, z)}
        else:
            got = {self.ideal_puzzles.get(z) for z in real.candidates}
        want = self.model.candidates(uid, self.sp_of[s], s)
        if got != want:
            self.cmp.notes.append(f"{uid}: candidate set differs ({len(got)} real vs {len(want)} model)")

    def _ev_release(self, e: dict) -> None:
        sym = e["session"]
        real = self.sessions[sym]
        if real.status == "held":
            self.world.release(real)
        uid = self.model_sessions[sym]
        choice = self.ideal_puzzles.get(real.z_u) if real.z_u is not None else None
        reply, _ = self.model.offload_respond(uid, choice)
        self._record(self._real_offload_outcome(real), reply)

    def _ev_claim_bs(self, e: dict) -> None:
        token = self._forge() if e["token"] == "forged" else self.tokens[e["token"]]
        bs = self.world.bs
        self.world.net.post(bs.name, bs.claim("fa", token))
        self.world.run()
        paid = bs.claim_results[-1][1]
        tid = self._ideal_token(None) if e["token"] == "forged" else self._ideal_token(token)
        self._record(ideal.SUCCESS if paid else ideal.INVALID_TOKEN, self.model.claim_bs(bs.name, tid))

    def _ev_claim_es(self, e: dict) -> None:
        forged = e["token"] == "forged"
        token = self._forge() if forged else self.tokens[e["token"]]
        s = e["service"]
        tid = self._ideal_token(None) if forged else self._ideal_token(token)
        entry = self.model.T_t.get(tid)
        # the claimant is whoever received the token; forged tokens come from an arbitrary ES
        esid = entry.esid if entry is not None and entry.esid else sorted(self.world.ess)[0]
        es = self.world.ess[esid]
        self.world.net.post(es.name, es.claim("fa", s, token))
        self.world.run()
        paid = es.claim_results[-1][2]
        self._record(ideal.SUCCESS if paid else ideal.INVALID_TOKEN,
                     self.model.claim_es(esid, self.sp_of[s], s, tid))

    def finish(self) -> Comparison:
        used_real = sum(1 for e in self.world.bs.p_map.values() if e.used)
        if used_real != len(self.world.bs.forwarded):
            self.cmp.notes.append("real: used puzzles differ from forwarded requests")
        if self.model.used_batches() != self.model.forwarded:
            self.cmp.notes.append("model: used batches differ from forwarded requests")
        if self.model.forwarded != len(self.world.bs.forwarded):
            self.cmp.notes.append(f"forwarded {len(self.world.bs.forwarded)} real vs {self.model.forwarded} model")
        self.cmp.notes += self.model.check() + self.world.check_invariants()
        return self.cmp


def replay(events: list[dict], config: ScenarioConfig, keys: KeyMaterial | None = None,
           label: str = "trace") -> Comparison:
    runner = TraceRunner(config, keys or key_material(config), label)
    for e in events:
        runner.apply(e)
    return runner.finish()


@dataclass
class ConformanceResult:
    traces: int
    events: int
    mismatches: list[tuple[int, str]]

    @property
    def passed(self) -> bool:
        return not self.mismatches


def run_conformance(n_traces: int = 1000, seed: int = 7, n_events: int = 14,
                    config: ScenarioConfig | None = None) -> ConformanceResult:
    config = config or conformance_config(seed)
    keys = key_material(config)
    rng = random.Random(f"traces/{seed}")
    mismatches = []
    events = 0
    for i in range(n_traces):
        trace = generate_trace(config, rng, n_events)
        cmp = replay(trace, config, keys, label=f"trace/{seed}/{i}")
        events += len(cmp.real)
        if not cmp.equal:
            at = cmp.first_divergence()
            detail = (f"event {at}: real={cmp.real[at]} model={cmp.model[at]} op={trace_ops(trace)[at]}"
                      if at is not None else "; ".join(cmp.notes))
            mismatches.append((i, detail))
    return ConformanceResult(n_traces, events, mismatches)


def trace_ops(trace: list[dict]) -> list[str]:
    return [json.dumps(e, sort_keys=True) for e in trace]
