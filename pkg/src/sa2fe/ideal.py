"""Executable reference model of registration, offloading and claims.

The model keeps three tables and answers every event with a short reply
string.  It knows nothing about cryptography: tokens and puzzles are opaque
ideal identifiers, and the caller tells it which party would allow a
request (payment valid, ES eligible, puzzle well formed).

* ``T_s``: (spid, sname, sdata, esid, bsid) service rows
* ``T_p``: (puzzle, spid, sname, ver, f_p, esid, bsid) puzzle rows
* ``T_t``: (token, spid, sname, (esid, f_es), (bsid, f_bs)) token rows

Replies: ``success``, ``exists``, ``fail``, ``invalidToken``,
``invalidPuzzle``, ``userAbort``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

SUCCESS = "success"
EXISTS = "exists"
FAIL = "fail"
INVALID_TOKEN = "invalidToken"
INVALID_PUZZLE = "invalidPuzzle"
USER_ABORT = "userAbort"

FRESH, UNCLAIMED, CLAIMED = "fresh", "unclaimed", "claimed"
UNUSED, USED = "unused", "used"


@dataclass
class TsEntry:
    spid: str
    sname: str
    sdata: str
    esid: str | None = None
    bsid: str | None = None


@dataclass
class TpEntry:
    puzzle: str
    spid: str
    sname: str
    ver: int
    f_p: str
    esid: str
    bsid: str
    slot: int = 0


@dataclass
class TtEntry:
    token: str
    spid: str
    sname: str
    esid: str | None = None
    f_es: str = FRESH
    bsid: str | None = None
    f_bs: str = FRESH


@dataclass
class ModelSession:
    uid: str
    token: str
    ver: int
    p_list: list[str]
    malicious: bool
    labels: dict = field(default_factory=dict)  # puzzle -> (spid, sname), honest users only
    done: bool = False


class IdealModel:
    def __init__(self, seed: int | str = 0, weights: dict | None = None):
        self.rng = random.Random(f"ideal/{seed}")
        self.weights = dict(weights or {})  # (esid, sname) -> capability weight
        self.T_s: list[TsEntry] = []
        self.T_p: dict[str, TpEntry] = {}
        self.T_t: dict[str, TtEntry] = {}
        self.latest: dict[tuple[str, int], str] = {}  # (esid, slot) -> newest puzzle of that slot
        self.ver_newest = 0
        self.sessions: dict[str, ModelSession] = {}
        self.forwarded = 0
        self._slots: dict[str, int] = {}
        self._ids = 0

    def _new_id(self, prefix: str) -> str:
        self._ids += 1
        return f"{prefix}{self._ids}"

    def _sp_row(self, spid: str, sname: str) -> TsEntry | None:
        for t in self.T_s:
            if t.spid == spid and t.sname == sname and t.esid is None:
                return t
        return None

    # -- registration ------------------------------------------------------

    def register_sp(self, spid: str, sname: str, sdata: str) -> str:
        for t in self.T_s:
            if t.sname == sname and t.esid is None:
                if (t.spid, t.sdata) == (spid, sdata):
                    return EXISTS
                return FAIL  # same service name, different owner or keys
        self.T_s.append(TsEntry(spid, sname, sdata))
        return SUCCESS

    def register_es_sp(self, spid: str, sname: str, esid: str, sp_allows: bool) -> str:
        for t in self.T_s:
            if (t.spid, t.sname, t.esid) == (spid, sname, esid):
                return EXISTS
        row = self._sp_row(spid, sname)
        if row is None or not sp_allows:
            return FAIL
        self.T_s.append(TsEntry(spid, sname, row.sdata, esid))
        return SUCCESS

    def es_services(self, esid: str) -> list[TsEntry]:
        return [t for t in self.T_s if t.esid == esid]

    def register_es_bs(self, esid: str, bsid: str) -> list[tuple[str, str]]:
        """One puzzle per weight unit for each service the ES holds; returns (reply, puzzle) pairs."""
        out = []
        for row in self.es_services(esid):
            for _ in range(max(1, self.weights.get((esid, row.sname), 1))):
                slot = self._slots.get(esid, 0)
                self._slots[esid] = slot + 1
                out.append(self._add_puzzle(row, bsid, slot))
        return out

    def reregister_slot(self, esid: str, bsid: str, slot: int) -> tuple[str, str]:
        old = self.latest.get((esid, slot))
        if old is None:
            return FAIL, ""
        entry = self.T_p[old]
        row = next(t for t in self.es_services(esid) if t.sname == entry.sname)
        if entry.ver == 0:
            del self.T_p[old]
        return self._add_puzzle(row, bsid, slot)

    def _add_puzzle(self, row: TsEntry, bsid: str, slot: int) -> tuple[str, str]:
        row.bsid = bsid
        pid = self._new_id("p")
        self.T_p[pid] = TpEntry(pid, row.spid, row.sname, 0, UNUSED, row.esid, bsid, slot)
        self.latest[(row.esid, slot)] = pid
        return SUCCESS, pid

    def register_bad_puzzle(self) -> str:
        return FAIL  # the BS does not allow it; nothing is stored

    def register_token(self, spid: str, sname: str, payment_ok: bool) -> tuple[str, str | None]:
        if self._sp_row(spid, sname) is None or not payment_ok:
            return FAIL, None
        tid = self._new_id("t")
        self.T_t[tid] = TtEntry(tid, spid, sname)
        return SUCCESS, tid

    # -- offloading --------------------------------------------------------

    def offload_init(self, uid: str, token: str, bsid: str, malicious: bool) -> list[str]:
        """Rerandomise every newest puzzle into a fresh batch and hand it out permuted."""
        ver = self.ver_newest + 1
        self.ver_newest = ver
        fresh = []
        for key, pid in list(self.latest.items()):
            old = self.T_p[pid]
            if old.bsid != bsid:
                continue
            new = self._new_id("p")
            self.T_p[new] = TpEntry(new, old.spid, old.sname, ver, UNUSED, old.esid, bsid, old.slot)
            self.latest[key] = new
            fresh.append(new)
        self.rng.shuffle(fresh)
        s = ModelSession(uid, token, ver, fresh, malicious)
        if not malicious:
            s.labels = {p: (self.T_p[p].spid, self.T_p[p].sname) for p in fresh}
        self.sessions[uid] = s
        return list(fresh)

    def candidates(self, uid: str, spid: str, sname: str) -> set[str]:
        s = self.sessions[uid]
        return {p for p, lab in s.labels.items() if lab == (spid, sname)}

    def offload_respond(self, uid: str, puzzle: str | None) -> tuple[str, str | None]:
        """Returns (reply, esid of the chosen puzzle on success)."""
        s = self.sessions[uid]
        s.done = True
        if puzzle is None:
            return USER_ABORT, None
        t = self.T_t.get(s.token)
        if t is None or t.f_es != FRESH or t.f_bs != FRESH:
            return INVALID_TOKEN, None
        if puzzle not in s.p_list:
            return INVALID_PUZZLE, None
        entry = self.T_p[puzzle]
        if entry.f_p != UNUSED:
            return INVALID_PUZZLE, None
        for e in self.T_p.values():
            if e.ver == s.ver:
                e.f_p = USED
        t.esid, t.bsid = entry.esid, entry.bsid
        t.f_es, t.f_bs = UNCLAIMED, UNCLAIMED
        self.forwarded += 1
        return SUCCESS, entry.esid

    # -- claims ------------------------------------------------------------

    def claim_bs(self, bsid: str, token: str) -> str:
        t = self.T_t.get(token)
        if t is None or t.bsid != bsid or t.f_bs != UNCLAIMED:
            return INVALID_TOKEN
        t.f_bs = CLAIMED
        return SUCCESS

    def claim_es(self, esid: str, spid: str, sname: str, token: str) -> str:
        t = self.T_t.get(token)
        if t is None or (t.spid, t.sname, t.esid) != (spid, sname, esid) or t.f_es != UNCLAIMED:
            return INVALID_TOKEN
        t.f_es = CLAIMED
        return SUCCESS

    # -- invariants --------------------------------------------------------

    def used_batches(self) -> int:
        return len({e.ver for e in self.T_p.values() if e.f_p == USED})

    def check(self) -> list[str]:
        bad = []
        if self.used_batches() != self.forwarded:
            bad.append(f"{self.used_batches()} used batches for {self.forwarded} forwarded requests")
        by_ver: dict[int, set] = {}
        for e in self.T_p.values():
            by_ver.setdefault(e.ver, set()).add(e.f_p)
        for ver, flags in by_ver.items():
            if ver and len(flags) > 1:
                bad.append(f"batch {ver} is partially used")
        return bad
