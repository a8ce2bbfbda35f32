"""The five protocol roles as message-driven state machines.

Every party exposes ``handle(msg, reply) -> [(address, Message), ...]`` and
a few "start" methods that return the first messages of a flow.  Parties
never talk to each other directly; a transport from :mod:`sa2fe.transport`
carries the returned messages.  Each handler runs to completion before the
next message for the same party is delivered, so check-and-mark steps in
a handler are atomic with respect to that party.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping

from .blind import (
    BlindKeyPair,
    BlindPublicKey,
    BlindSignatureError,
    Role,
    Token,
    TokenError,
    TokenSecret,
    blind_sign,
    token_finalize,
    token_request_build,
)
from .ledger import ClaimLedger, PaymentAmounts
from .puzzle import (
    Puzzle,
    PuzzleError,
    PuzzleParams,
    PuzzleSolution,
    PuzzleTrapdoor,
    deserialize_puzzle,
    encode_solution,
    puzzle_gen,
    puzzle_match,
    puzzle_rerandomize,
    serialize_puzzle,
)
from .symenc import DecryptionError, pack_request, sym_dec, sym_enc, sym_key_setup, unpack_request
from .wire import Message, MsgType, STATUS_REJECT, make
from .workloads import Workload, get_workload

log = logging.getLogger(__name__)

Out = tuple[object, Message]


class Reason(str, Enum):
    # base station
    INVALID_TOKEN = "InvalidToken"
    DOUBLE_SPEND = "DoubleSpend"
    UNKNOWN_PUZZLE = "UnknownPuzzle"
    PUZZLE_REPLAY = "PuzzleReplay"
    STALE_LIST = "StaleList"
    NO_PROVIDERS = "NoProviders"
    UNKNOWN_SESSION = "UnknownSession"
    SESSION_CLOSED = "SessionClosed"
    INVALID_PUZZLE = "InvalidPuzzle"
    DUPLICATE_PUZZLE = "DuplicatePuzzle"
    # edge server
    WRONG_SERVICE = "WrongService"
    BAD_CIPHERTEXT = "BadCiphertext"
    # registration
    INVALID_PAYMENT = "InvalidPayment"
    UNKNOWN_SERVICE = "UnknownService"
    NOT_ELIGIBLE = "NotEligible"
    NOT_READY = "NotReady"
    MISMATCH = "Mismatch"
    MALFORMED = "Malformed"
    EXISTS = "exists"
    # user side
    USER_ABORT = "UserAbort"
    NO_CANDIDATES = "NoCandidates"


def solution_for_key(k_s: bytes, params: PuzzleParams) -> PuzzleSolution:
    """Puzzles commit to SHA-256(k_s)."""
    return encode_solution(hashlib.sha256(k_s).digest(), params)


def _reject(kind: MsgType, sid: bytes, reason: Reason | str, **extra) -> Message:
    return make(kind, sid, status=STATUS_REJECT, reason=getattr(reason, "value", reason), **extra)


def _digest(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(4, "big") + part)
    return h.digest()


def new_session_id(rng: random.Random) -> bytes:
    return rng.randbytes(16)


class PartyBase:
    name: str

    def __init__(self, name: str, rng: random.Random):
        self.name = name
        self.rng = rng
        self._handlers: dict[MsgType, Callable[[Message, object], list]] = {}

    def handle(self, msg: Message, reply) -> list[Out]:
        fn = self._handlers.get(msg.kind)
        if fn is None:
            log.debug("%s ignores %s", self.name, msg.kind.name)
            return []
        return fn(msg, reply)


# ---------------------------------------------------------------------------
# Financial authority
# ---------------------------------------------------------------------------


@dataclass
class ServiceRecord:
    spid: str
    sname: str
    k_s: bytes
    pk_s: BlindPublicKey
    s_alg: str
    sk_s: BlindKeyPair | None = field(default=None, repr=False)
    trapdoor: PuzzleTrapdoor | None = field(default=None, repr=False)


class FinancialAuthority(PartyBase):
    def __init__(
        self,
        name: str,
        rng: random.Random,
        keypair: BlindKeyPair,
        params: PuzzleParams,
        trapdoor: PuzzleTrapdoor,
        vouchers: Iterable[bytes] = (),
        amounts: PaymentAmounts = PaymentAmounts(),
        ledger: ClaimLedger | None = None,
    ):
        super().__init__(name, rng)
        self.keypair = keypair
        self.params = params
        self.trapdoor = trapdoor
        self.vouchers = set(vouchers)
        self.spent_vouchers: set[bytes] = set()
        self.ledger = ledger or ClaimLedger(amounts)
        self.services: dict[str, ServiceRecord] = {}
        self.issued: dict[str, int] = {}  # per-service count; the FA never sees m1/m2
        self._handlers = {
            MsgType.SP_REGISTER: self._on_sp_register,
            MsgType.TOKEN_REQUEST: self._on_token_request,
            MsgType.BS_CLAIM: self._on_bs_claim,
            MsgType.ES_CLAIM: self._on_es_claim,
        }

    @property
    def pk_p(self) -> BlindPublicKey:
        return self.keypair.public

    def service_keys(self) -> dict[str, BlindPublicKey]:
        return {s: rec.pk_s for s, rec in self.services.items()}

    def _trapdoor_bytes(self) -> bytes:
        return self.trapdoor.to_bytes() if self.trapdoor else b""

    def _on_sp_register(self, msg: Message, reply) -> list[Out]:
        sid = msg.session_id
        n, e, d, p, q = msg["pk_n"], msg["pk_e"], msg["sk_d"], msg["sk_p"], msg["sk_q"]
        if p * q != n or len(msg["k_s"]) != 32 or e < 3:
            return [(reply, _reject(MsgType.SP_REGISTER_ACK, sid, Reason.MALFORMED))]
        sname = msg["sname"]
        existing = self.services.get(sname)
        if existing is not None:
            same = (existing.spid, existing.k_s, existing.pk_s.n, existing.pk_s.e, existing.s_alg) == (
                msg["spid"], msg["k_s"], n, e, msg["s_alg"],
            )
            if not same:
                return [(reply, _reject(MsgType.SP_REGISTER_ACK, sid, Reason.MISMATCH))]
            return [(reply, make(MsgType.SP_REGISTER_ACK, sid, reason=Reason.EXISTS.value,
                                 trapdoor=self._trapdoor_bytes()))]
        pk_s = BlindPublicKey(n, e)
        sk_s = BlindKeyPair(pk_s, d, p, q, Role.service(sname))
        self.services[sname] = ServiceRecord(msg["spid"], sname, msg["k_s"], pk_s, msg["s_alg"], sk_s, self.trapdoor)
        return [(reply, make(MsgType.SP_REGISTER_ACK, sid, trapdoor=self._trapdoor_bytes()))]

    def _on_token_request(self, msg: Message, reply) -> list[Out]:
        sid = msg.session_id
        rec = self.services.get(msg["s_type"])
        if rec is None:
            return [(reply, _reject(MsgType.TOKEN_RESPONSE, sid, Reason.UNKNOWN_SERVICE))]
        voucher = msg["payment"]
        if voucher not in self.vouchers or voucher in self.spent_vouchers:
            return [(reply, _reject(MsgType.TOKEN_RESPONSE, sid, Reason.INVALID_PAYMENT))]
        try:
            sig1 = blind_sign(self.pk_p, self.keypair, msg["m1_blind"])
            sig2 = blind_sign(rec.pk_s, rec.sk_s, msg["m2_blind"])
        except BlindSignatureError:
            return [(reply, _reject(MsgType.TOKEN_RESPONSE, sid, Reason.MALFORMED))]
        self.spent_vouchers.add(voucher)
        self.issued[rec.sname] = self.issued.get(rec.sname, 0) + 1
        return [(reply, make(MsgType.TOKEN_RESPONSE, sid, sig1_blind=sig1, sig2_blind=sig2,
                             k_s=rec.k_s, trapdoor=self._trapdoor_bytes()))]

    def _claim_reply(self, sid: bytes, result) -> Message:
        if result.paid:
            return make(MsgType.CLAIM_RESULT, sid, amount=result.amount)
        return _reject(MsgType.CLAIM_RESULT, sid, result.reason)

    def _decode_token(self, raw: bytes) -> Token | None:
        try:
            return Token.decode(raw)
        except ValueError:
            return None

    def _on_bs_claim(self, msg: Message, reply) -> list[Out]:
        token = self._decode_token(msg["token"])
        if token is None:
            return [(reply, _reject(MsgType.CLAIM_RESULT, msg.session_id, "InvalidSignature"))]
        result = self.ledger.process_bs_claim(token, self.pk_p, self.service_keys())
        return [(reply, self._claim_reply(msg.session_id, result))]

    def _on_es_claim(self, msg: Message, reply) -> list[Out]:
        token = self._decode_token(msg["token"])
        if token is None:
            return [(reply, _reject(MsgType.CLAIM_RESULT, msg.session_id, "InvalidSignature"))]
        result = self.ledger.process_es_claim(msg["s_type"], token, self.pk_p, self.service_keys())
        return [(reply, self._claim_reply(msg.session_id, result))]


# ---------------------------------------------------------------------------
# Service provider
# ---------------------------------------------------------------------------


class ServiceProvider(PartyBase):
    def __init__(
        self,
        name: str,
        sname: str,
        rng: random.Random,
        keypair: BlindKeyPair,
        k_s: bytes | None = None,
        s_alg: str = "echo",
        eligible: Iterable[str] | Callable[[str, bytes], bool] | None = None,
    ):
        super().__init__(name, rng)
        self.sname = sname
        self.pk_s = keypair.public
        self._sk_s: BlindKeyPair | None = keypair
        self.k_s = k_s if k_s is not None else sym_key_setup(rng)
        self.s_alg = s_alg
        if eligible is None or callable(eligible):
            self.eligible = eligible
        else:
            allowed = frozenset(eligible)
            self.eligible = lambda esid, info: esid in allowed
        self.registered = False
        self.register_reason = ""
        self.acks: dict[bytes, tuple[bool, str]] = {}
        self.trapdoor = b""
        self.approved: set[str] = set()
        self._handlers = {
            MsgType.SP_REGISTER_ACK: self._on_ack,
            MsgType.ES_REGISTER_SP: self._on_es_register,
        }

    @property
    def holds_secret_key(self) -> bool:
        return self._sk_s is not None

    def register_with_fa(self, fa: str) -> list[Out]:
        sk = self._sk_s
        if sk is None:
            raise RuntimeError("secret key already handed to the FA")
        return [(fa, make(MsgType.SP_REGISTER, new_session_id(self.rng), spid=self.name, sname=self.sname,
                          k_s=self.k_s, pk_n=sk.n, pk_e=sk.public.e, sk_d=sk.d, sk_p=sk.p, sk_q=sk.q,
                          s_alg=self.s_alg))]

    def registration_message(self) -> Message:
        """The SP_REGISTER frame; only available while the SP still holds sk_s."""
        return self.register_with_fa("")[0][1]

    def _on_ack(self, msg: Message, reply) -> list[Out]:
        self.register_reason = msg["reason"]
        self.acks[msg.session_id] = (msg.ok, msg["reason"])
        if msg.ok:
            self.registered = True
            self.trapdoor = msg["trapdoor"]
            self._sk_s = None  # custody moves to the FA
        return []

    def _on_es_register(self, msg: Message, reply) -> list[Out]:
        sid = msg.session_id
        esid = msg["esid"]
        if msg["s_type"] != self.sname:
            return [(reply, _reject(MsgType.ES_CREDENTIALS, sid, Reason.UNKNOWN_SERVICE, s_type=msg["s_type"]))]
        if not self.registered:
            return [(reply, _reject(MsgType.ES_CREDENTIALS, sid, Reason.NOT_READY, s_type=self.sname))]
        if self.eligible is not None and not self.eligible(esid, msg["reg_info"]):
            return [(reply, _reject(MsgType.ES_CREDENTIALS, sid, Reason.NOT_ELIGIBLE, s_type=self.sname))]
        reason = Reason.EXISTS.value if esid in self.approved else ""
        self.approved.add(esid)
        return [(reply, make(MsgType.ES_CREDENTIALS, sid, reason=reason, s_type=self.sname, k_s=self.k_s,
                             pk_n=self.pk_s.n, pk_e=self.pk_s.e, s_alg=self.s_alg, trapdoor=self.trapdoor))]


# ---------------------------------------------------------------------------
# Edge server
# ---------------------------------------------------------------------------


@dataclass
class ServiceCredentials:
    s_type: str
    k_s: bytes
    pk_s: BlindPublicKey
    s_alg: str
    trapdoor: bytes = b""
    workload: Workload | None = field(default=None, repr=False)


class EdgeServer(PartyBase):
    def __init__(
        self,
        name: str,
        rng: random.Random,
        params: PuzzleParams,
        weights: Mapping[str, int] | None = None,
        reg_info: bytes = b"",
    ):
        super().__init__(name, rng)
        self.params = params
        self.weights = dict(weights or {})
        self.reg_info = reg_info
        self.credentials: dict[str, ServiceCredentials] = {}
        self.registration_failures: dict[str, str] = {}
        self.sp_results: dict[bytes, tuple[bool, str]] = {}
        self.slots: dict[int, str] = {}  # slot -> service it commits to
        self._next_slot = 0
        self.bs_acks: dict[bytes, tuple[bool, str]] = {}  # by request session id
        self.served: list[tuple[str, Token]] = []
        self.claimed: set[tuple[str, bytes]] = set()
        self._pending_claims: dict[bytes, tuple[str, Token]] = {}
        self.claim_results: list[tuple[str, bytes, bool, str, int]] = []
        self.request_log: list[tuple[bytes, str]] = []  # (session_id, outcome)
        self._responses: dict[bytes, tuple[bytes, Message]] = {}
        self._handlers = {
            MsgType.ES_CREDENTIALS: self._on_credentials,
            MsgType.ES_REGISTER_BS_ACK: self._on_bs_ack,
            MsgType.FORWARD_REQUEST: self._on_forward,
            MsgType.CLAIM_RESULT: self._on_claim_result,
        }

    def register_with_sp(self, sp: str, s_type: str) -> list[Out]:
        return [(sp, make(MsgType.ES_REGISTER_SP, new_session_id(self.rng), esid=self.name,
                          reg_info=self.reg_info, s_type=s_type))]

    def _on_credentials(self, msg: Message, reply) -> list[Out]:
        self.sp_results[msg.session_id] = (msg.ok, msg["reason"])
        if not msg.ok:
            self.registration_failures[msg["s_type"]] = msg["reason"]
            return []
        try:
            workload = get_workload(msg["s_alg"])
        except ValueError:
            self.registration_failures[msg["s_type"]] = "UnknownWorkload"
            return []
        self.credentials[msg["s_type"]] = ServiceCredentials(
            msg["s_type"], msg["k_s"], BlindPublicKey(msg["pk_n"], msg["pk_e"]), msg["s_alg"],
            msg["trapdoor"], workload,
        )
        return []

    def register_with_bs(self, bs: str, services: Iterable[str] | None = None, slot: int | None = None) -> list[Out]:
        """One fresh puzzle per unit of capability weight for each held service.

        Passing ``slot`` regenerates the puzzle of an existing slot instead.
        """
        outs = []
        if slot is not None:
            targets = [(slot, self.slots[slot])]
        else:
            targets = []
            for s_type in services if services is not None else list(self.credentials):
                for _ in range(max(1, self.weights.get(s_type, 1))):
                    targets.append((self._next_slot, s_type))
                    self._next_slot += 1
        for sl, s_type in targets:
            cred = self.credentials[s_type]
            self.slots[sl] = s_type
            pz = puzzle_gen(self.params, solution_for_key(cred.k_s, self.params), self.rng)
            outs.append((bs, make(MsgType.ES_REGISTER_BS, new_session_id(self.rng), esid=self.name, slot=sl,
                                  puzzle=serialize_puzzle(pz, self.params))))
        return outs

    def _on_bs_ack(self, msg: Message, reply) -> list[Out]:
        self.bs_acks[msg.session_id] = (msg.ok, msg["reason"])
        return []

    def _on_forward(self, msg: Message, reply) -> list[Out]:
        sid = msg.session_id
        cached = self._responses.get(sid)
        if cached is not None and cached[0] == _digest(msg["token"], msg["ct"]):
            return [(reply, cached[1])]  # duplicate delivery: resend, do not re-run or re-record
        try:
            token = Token.decode(msg["token"])
        except ValueError:
            self.request_log.append((sid, Reason.WRONG_SERVICE.value))
            return [(reply, _reject(MsgType.ES_RESPONSE, sid, Reason.WRONG_SERVICE))]
        cred = None
        for c in self.credentials.values():  # every pk_s this ES holds
            if token.verify_specific(c.pk_s):
                cred = c
                break
        if cred is None:
            self.request_log.append((sid, Reason.WRONG_SERVICE.value))
            return [(reply, _reject(MsgType.ES_RESPONSE, sid, Reason.WRONG_SERVICE))]
        try:
            s_type, data = unpack_request(sym_dec(cred.k_s, msg["ct"]))
        except DecryptionError:
            self.request_log.append((sid, Reason.BAD_CIPHERTEXT.value))
            return [(reply, _reject(MsgType.ES_RESPONSE, sid, Reason.BAD_CIPHERTEXT))]
        if s_type != cred.s_type:
            self.request_log.append((sid, Reason.BAD_CIPHERTEXT.value))
            return [(reply, _reject(MsgType.ES_RESPONSE, sid, Reason.BAD_CIPHERTEXT))]
        result = cred.workload(data)
        self.served.append((cred.s_type, token))
        self.request_log.append((sid, "ok"))
        resp = make(MsgType.ES_RESPONSE, sid, resp=sym_enc(cred.k_s, result, self.rng))
        self._responses[sid] = (_digest(msg["token"], msg["ct"]), resp)
        return [(reply, resp)]

    def claim(self, fa: str, s_type: str, token: Token) -> list[Out]:
        sid = new_session_id(self.rng)
        self._pending_claims[sid] = (s_type, token)
        return [(fa, make(MsgType.ES_CLAIM, sid, esid=self.name, s_type=s_type, token=token.encode()))]

    def claim_all(self, fa: str) -> list[Out]:
        outs = []
        for s_type, token in self.served:
            key = (s_type, token.token_hash())
            if key not in self.claimed:
                self.claimed.add(key)
                outs += self.claim(fa, s_type, token)
        return outs

    def _on_claim_result(self, msg: Message, reply) -> list[Out]:
        s_type, token = self._pending_claims.pop(msg.session_id, (None, None))
        if token is not None:
            self.claim_results.append((s_type, token.token_hash(), msg.ok, msg["reason"], msg["amount"]))
        return []


# ---------------------------------------------------------------------------
# Base station
# ---------------------------------------------------------------------------


@dataclass
class PuzzleMapEntry:
    puzzle: bytes
    es_id: str
    version: int
    slot: int
    used: bool = False

    def mark_used(self) -> None:
        if self.used:
            raise AssertionError("puzzle entry used twice")
        self.used = True


@dataclass
class BsSession:
    sid: bytes
    version: int
    puzzles: frozenset
    token: Token
    reply: object
    state: str = "listed"  # listed -> forwarded -> closed
    es_id: str | None = None
    reason: str = ""
    request_digest: bytes = b""


class BaseStation(PartyBase):
    def __init__(self, name: str, rng: random.Random, params: PuzzleParams, pk_p: BlindPublicKey):
        super().__init__(name, rng)
        self.params = params
        self.pk_p = pk_p
        self.p_map: dict[bytes, PuzzleMapEntry] = {}
        self.current: dict[tuple[str, int], tuple[bytes, Puzzle]] = {}
        self.latest_version = 0
        self.batches: dict[int, str] = {}  # version -> open | used | invalid
        self.sessions: dict[bytes, BsSession] = {}
        self.seen: set[bytes] = set()
        self.forwarded: list[tuple[bytes, bytes, str]] = []  # (session, token hash, es)
        self.claimable: list[Token] = []
        self.claimed: set[bytes] = set()
        self._pending_claims: dict[bytes, Token] = {}
        self.claim_results: list[tuple[bytes, bool, str, int]] = []
        self.decisions: list[tuple] = []  # BS-observable decision trace
        self._handlers = {
            MsgType.ES_REGISTER_BS: self._on_es_register,
            MsgType.OFFLOAD_INIT: self._on_init,
            MsgType.OFFLOAD_REQUEST: self._on_request,
            MsgType.ES_RESPONSE: self._on_es_response,
            MsgType.USER_ABORT: self._on_abort,
            MsgType.CLAIM_RESULT: self._on_claim_result,
        }

    # -- registration ------------------------------------------------------

    def _on_es_register(self, msg: Message, reply) -> list[Out]:
        sid, esid, slot, raw = msg.session_id, msg["esid"], msg["slot"], msg["puzzle"]
        try:
            pz = deserialize_puzzle(raw, self.params)
        except PuzzleError:
            return [(reply, _reject(MsgType.ES_REGISTER_BS_ACK, sid, Reason.INVALID_PUZZLE, slot=slot))]
        if raw in self.p_map:
            return [(reply, _reject(MsgType.ES_REGISTER_BS_ACK, sid, Reason.DUPLICATE_PUZZLE, slot=slot))]
        key = (esid, slot)
        old = self.current.get(key)
        if old is not None:
            entry = self.p_map.get(old[0])
            if entry is not None and entry.version == 0:
                del self.p_map[old[0]]
        self.current[key] = (raw, pz)
        self.p_map[raw] = PuzzleMapEntry(raw, esid, 0, slot)
        self.decisions.append(("register", esid, slot))
        return [(reply, make(MsgType.ES_REGISTER_BS_ACK, sid, slot=slot))]

    # -- offloading --------------------------------------------------------

    def _check_token(self, token: Token) -> Reason | None:
        if not token.verify_agnostic(self.pk_p):
            return Reason.INVALID_TOKEN
        if token.token_hash() in self.seen:
            return Reason.DOUBLE_SPEND
        return None

    def _on_init(self, msg: Message, reply) -> list[Out]:
        sid = msg.session_id
        try:
            token = Token.decode(msg["token"])
        except ValueError:
            token = None
        reason = Reason.INVALID_TOKEN if token is None else self._check_token(token)
        if reason is None and not self.current:
            reason = Reason.NO_PROVIDERS
        if reason is not None:
            self.decisions.append(("init", reason.value))
            return [(reply, _reject(MsgType.PUZZLE_LIST, sid, reason))]
        prior = self.sessions.get(sid)
        if prior is not None and prior.state == "listed":
            self._close(prior, "superseded")
        self.latest_version += 1
        version = self.latest_version
        fresh = []
        for key, (_, pz) in list(self.current.items()):
            es_id, slot = key
            new = puzzle_rerandomize(self.params, pz, self.rng)
            raw = serialize_puzzle(new, self.params)
            self.p_map[raw] = PuzzleMapEntry(raw, es_id, version, slot)
            self.current[key] = (raw, new)
            fresh.append(raw)
        self.rng.shuffle(fresh)
        self.batches[version] = "open"
        self.sessions[sid] = BsSession(sid, version, frozenset(fresh), token, reply)
        self.decisions.append(("init", "ok", version, len(fresh)))
        return [(reply, make(MsgType.PUZZLE_LIST, sid, puzzles=fresh))]

    def _close(self, session: BsSession, reason: str) -> None:
        session.state = "closed"
        session.reason = reason
        if self.batches.get(session.version) == "open":
            self.batches[session.version] = "invalid"
        # any later batch gets a strictly larger version than this session saw
        self.latest_version += 1

    def _validate(self, session: BsSession, z_u: bytes) -> tuple[Reason | None, PuzzleMapEntry | None]:
        reason = self._check_token(session.token)
        if reason is not None:
            return reason, None
        entry = self.p_map.get(z_u)
        if entry is None:
            return Reason.UNKNOWN_PUZZLE, None
        if entry.used or self.batches.get(entry.version) == "used":
            return Reason.PUZZLE_REPLAY, entry
        if entry.version < session.version:
            return Reason.STALE_LIST, entry
        if z_u not in session.puzzles:
            return Reason.UNKNOWN_PUZZLE, entry
        return None, entry

    def _on_request(self, msg: Message, reply) -> list[Out]:
        sid = msg.session_id
        session = self.sessions.get(sid)
        if session is None:
            self.decisions.append(("request", Reason.UNKNOWN_SESSION.value))
            return [(reply, _reject(MsgType.OFFLOAD_RESPONSE, sid, Reason.UNKNOWN_SESSION))]
        if session.state != "listed":
            if session.state == "forwarded" and _digest(msg["z_u"], msg["ct"]) == session.request_digest:
                return []  # transport duplicate of the request already forwarded
            self.decisions.append(("request", Reason.SESSION_CLOSED.value))
            return [(reply, _reject(MsgType.OFFLOAD_RESPONSE, sid, Reason.SESSION_CLOSED))]
        reason, entry = self._validate(session, msg["z_u"])
        if reason is not None:
            self._close(session, reason.value)
            self.decisions.append(("request", reason.value, session.version))
            return [(reply, _reject(MsgType.OFFLOAD_RESPONSE, sid, reason))]
        # check-and-mark; nothing between the checks above and here can yield
        th = session.token.token_hash()
        self.seen.add(th)
        entry.mark_used()
        self.batches[session.version] = "used"
        session.state = "forwarded"
        session.es_id = entry.es_id
        session.reply = reply
        session.request_digest = _digest(msg["z_u"], msg["ct"])
        self.latest_version += 1
        self.forwarded.append((sid, th, entry.es_id))
        self.claimable.append(session.token)
        self.decisions.append(("request", "forward", session.version, len(msg["ct"])))
        return [(entry.es_id, make(MsgType.FORWARD_REQUEST, sid, token=session.token.encode(), ct=msg["ct"]))]

    def _on_es_response(self, msg: Message, reply) -> list[Out]:
        session = self.sessions.get(msg.session_id)
        if session is None or session.state != "forwarded":
            return []
        session.state = "closed"
        session.reason = "served" if msg.ok else msg["reason"]
        self.decisions.append(("response", msg["status"], len(msg["resp"])))
        return [(session.reply, make(MsgType.OFFLOAD_RESPONSE, session.sid, status=msg["status"],
                                     reason=msg["reason"], resp=msg["resp"]))]

    def _on_abort(self, msg: Message, reply) -> list[Out]:
        session = self.sessions.get(msg.session_id)
        if session is not None and session.state == "listed":
            self._close(session, Reason.USER_ABORT.value)
            self.decisions.append(("abort", session.version))
        return []

    # -- claims ------------------------------------------------------------

    def claim_all(self, fa: str) -> list[Out]:
        outs = []
        for token in self.claimable:
            th = token.token_hash()
            if th in self.claimed:
                continue
            self.claimed.add(th)
            outs += self.claim(fa, token)
        return outs

    def claim(self, fa: str, token: Token) -> list[Out]:
        sid = new_session_id(self.rng)
        self._pending_claims[sid] = token
        return [(fa, make(MsgType.BS_CLAIM, sid, bsid=self.name, token=token.encode()))]

    def _on_claim_result(self, msg: Message, reply) -> list[Out]:
        token = self._pending_claims.pop(msg.session_id, None)
        if token is not None:
            self.claim_results.append((token.token_hash(), msg.ok, msg["reason"], msg["amount"]))
        return []


# ---------------------------------------------------------------------------
# User
# ---------------------------------------------------------------------------


@dataclass
class OffloadBehavior:
    """Scripted deviations used by the attack and conformance harnesses."""

    submit: bytes | None = None  # send this z_u instead of choosing
    hold: bool = False  # keep the list and send nothing (yet)
    abort: bool = False  # always abort after receiving the list
    ct: bytes | None = None  # replace the ciphertext


@dataclass
class UserSession:
    sid: bytes
    s_type: str
    data: bytes
    token: Token
    behavior: OffloadBehavior = field(default_factory=OffloadBehavior)
    puzzles: list[bytes] = field(default_factory=list)
    candidates: list[bytes] = field(default_factory=list)
    z_u: bytes | None = None
    status: str = "init"  # init listed held requested done rejected aborted
    reason: str = ""
    resp_data: bytes | None = None


@dataclass
class Registration:
    s_type: str
    secret: TokenSecret | None
    token: Token | None = None
    status: str = "pending"
    reason: str = ""


class User(PartyBase):
    def __init__(
        self,
        name: str,
        rng: random.Random,
        params: PuzzleParams,
        pk_p: BlindPublicKey,
        service_keys: Mapping[str, BlindPublicKey],
        vouchers: Iterable[bytes] = (),
        fa: str = "fa",
        bs: str = "bs",
    ):
        super().__init__(name, rng)
        self.params = params
        self.pk_p = pk_p
        self.service_keys = dict(service_keys)  # obtained out of band from the SPs
        self.vouchers = list(vouchers)
        self.fa = fa
        self.bs = bs
        self.credentials: dict[str, tuple[bytes, PuzzleTrapdoor]] = {}
        self._solutions: dict[str, PuzzleSolution] = {}
        self.tokens: dict[str, list[Token]] = {}
        self.registrations: dict[bytes, Registration] = {}
        self.sessions: dict[bytes, UserSession] = {}
        self._handlers = {
            MsgType.TOKEN_RESPONSE: self._on_token_response,
            MsgType.PUZZLE_LIST: self._on_puzzle_list,
            MsgType.OFFLOAD_RESPONSE: self._on_offload_response,
        }

    # -- token registration ------------------------------------------------

    def register_token(self, s_type: str, payment: bytes | None = None) -> tuple[bytes, list[Out]]:
        if payment is None:
            payment = self.vouchers.pop(0) if self.vouchers else b""
        sid = new_session_id(self.rng)
        pk_s = self.service_keys.get(s_type)
        if pk_s is None:
            # no key to blind against; ask with an empty request so the FA decides
            self.registrations[sid] = Registration(s_type, None)
            return sid, [(self.fa, make(MsgType.TOKEN_REQUEST, sid, s_type=s_type, m1_blind=0, m2_blind=0,
                                        payment=payment))]
        secret, (b1, b2) = token_request_build(self.pk_p, pk_s, self.rng)
        self.registrations[sid] = Registration(s_type, secret)
        return sid, [(self.fa, make(MsgType.TOKEN_REQUEST, sid, s_type=s_type, m1_blind=b1, m2_blind=b2,
                                    payment=payment))]

    def _on_token_response(self, msg: Message, reply) -> list[Out]:
        reg = self.registrations.get(msg.session_id)
        if reg is None or reg.status != "pending":
            return []
        if not msg.ok:
            reg.status, reg.reason = "failed", msg["reason"]
            return []
        pk_s = self.service_keys.get(reg.s_type)
        try:
            token = token_finalize(reg.secret, msg["sig1_blind"], msg["sig2_blind"], self.pk_p, pk_s)
        except (TokenError, TypeError, AttributeError) as exc:
            reg.status, reg.reason = "failed", str(exc)
            return []
        trapdoor = PuzzleTrapdoor.from_bytes(self.params.scheme, msg["trapdoor"])
        self.credentials[reg.s_type] = (msg["k_s"], trapdoor)
        self._solutions[reg.s_type] = solution_for_key(msg["k_s"], self.params)
        self.tokens.setdefault(reg.s_type, []).append(token)
        # status last: networked callers poll it from another thread
        reg.token, reg.status = token, "ok"
        return []

    def take_token(self, s_type: str) -> Token | None:
        pool = self.tokens.get(s_type)
        return pool.pop(0) if pool else None

    # -- offloading --------------------------------------------------------

    def start_offload(
        self, s_type: str, data: bytes, token: Token | None = None, behavior: OffloadBehavior | None = None,
        token_bytes: bytes | None = None,
    ) -> tuple[bytes, list[Out]]:
        if token is None and token_bytes is None:
            token = self.take_token(s_type)
            if token is None:
                raise LookupError(f"no token for {s_type}")
        sid = new_session_id(self.rng)
        self.sessions[sid] = UserSession(sid, s_type, data, token, behavior or OffloadBehavior())
        raw = token_bytes if token_bytes is not None else token.encode()
        return sid, [(self.bs, make(MsgType.OFFLOAD_INIT, sid, token=raw, bsid=self.bs))]

    def matches(self, s_type: str, raw: bytes) -> bool:
        k_s, trapdoor = self.credentials[s_type]
        try:
            pz = deserialize_puzzle(raw, self.params)
        except PuzzleError:
            return False
        return puzzle_match(self.params, trapdoor, self._solutions[s_type], pz)

    def _on_puzzle_list(self, msg: Message, reply) -> list[Out]:
        s = self.sessions.get(msg.session_id)
        if s is None or s.status != "init":
            return []
        if not msg.ok:
            s.status, s.reason = "rejected", msg["reason"]
            return []
        s.puzzles = list(msg["puzzles"])
        s.status = "listed"
        if s.behavior.abort:
            return self._abort(s, reply, Reason.USER_ABORT)
        if s.behavior.hold:
            s.status = "held"
            return []
        if s.behavior.submit is not None:
            return self._send_request(s, reply, s.behavior.submit)
        if s.s_type in self.credentials:
            s.candidates = [z for z in s.puzzles if self.matches(s.s_type, z)]
        if not s.candidates:
            return self._abort(s, reply, Reason.NO_CANDIDATES)
        return self._send_request(s, reply, s.candidates[self.rng.randrange(len(s.candidates))])

    def _abort(self, s: UserSession, reply, reason: Reason) -> list[Out]:
        s.status, s.reason = "aborted", reason.value
        return [(reply, make(MsgType.USER_ABORT, s.sid, reason=reason.value))]

    def _send_request(self, s: UserSession, reply, z_u: bytes) -> list[Out]:
        s.z_u = z_u
        s.status = "requested"
        ct = s.behavior.ct
        if ct is None:
            k_s = self.credentials[s.s_type][0] if s.s_type in self.credentials else bytes(32)
            ct = sym_enc(k_s, pack_request(s.s_type, s.data), self.rng)
        return [(reply, make(MsgType.OFFLOAD_REQUEST, s.sid, z_u=z_u, ct=ct))]

    def release(self, sid: bytes, z_u: bytes | None = None) -> list[Out]:
        """Continue a held session, optionally forcing the submitted puzzle."""
        s = self.sessions[sid]
        if s.status != "held":
            raise RuntimeError("session is not held")
        s.status = "listed"
        s.behavior = OffloadBehavior(submit=z_u)
        if z_u is not None:
            return self._send_request(s, self.bs, z_u)
        s.candidates = [z for z in s.puzzles if self.matches(s.s_type, z)]
        if not s.candidates:
            return self._abort(s, self.bs, Reason.NO_CANDIDATES)
        return self._send_request(s, self.bs, s.candidates[self.rng.randrange(len(s.candidates))])

    def _on_offload_response(self, msg: Message, reply) -> list[Out]:
        s = self.sessions.get(msg.session_id)
        if s is None or s.status != "requested":
            return []
        if not msg.ok:
            s.status, s.reason = "rejected", msg["reason"]
            return []
        try:
            s.resp_data = sym_dec(self.credentials[s.s_type][0], msg["resp"])
        except (DecryptionError, KeyError):
            s.status, s.reason = "rejected", Reason.BAD_CIPHERTEXT.value
            return []
        s.status = "done"
        return []
