"""FA-side claim accounting.

The ledger is keyed by the SHA-256 of ``m1 || m2``.  Each token carries
independent base-station and edge-server flags that only move forward
(fresh -> unclaimed -> claimed); an edge-server claim pays both the ES and
the SP.  Every mutation goes through one lock, and failed claims never
touch state.

Persistence is an append-only event log plus optional snapshots.  Each
record is 50 bytes, written as one hex line::

    type u8 | token_hash 32B | role u8 | amount u64 | seq u64
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Mapping

from .blind import BlindPublicKey, Token

RECORD = struct.Struct(">B32sBQQ")


class EventType(IntEnum):
    MARK_SPENT = 1
    CLAIM = 2


class PayRole(IntEnum):
    NONE = 0
    BS = 1
    ES = 2
    SP = 3


class Flag(str, Enum):
    FRESH = "fresh"
    UNCLAIMED = "unclaimed"
    CLAIMED = "claimed"


class ClaimFailure(str, Enum):
    INVALID_SIGNATURE = "InvalidSignature"
    ALREADY_CLAIMED = "AlreadyClaimed"
    WRONG_SERVICE_TYPE = "WrongServiceType"


DOUBLE_SPEND = "DoubleSpend"


@dataclass(frozen=True)
class PaymentAmounts:
    bs: int = 1
    es: int = 3
    sp: int = 2

    @property
    def total(self) -> int:
        return self.bs + self.es + self.sp


@dataclass
class ClaimRecord:
    token_hash: bytes
    f_bs: Flag = Flag.FRESH
    f_es: Flag = Flag.FRESH
    s_type: str | None = None
    paid: dict = field(default_factory=dict)  # PayRole -> amount

    @property
    def total_paid(self) -> int:
        return sum(self.paid.values())


@dataclass(frozen=True)
class ClaimResult:
    paid: bool
    reason: str = ""
    amount: int = 0


class ClaimLedger:
    def __init__(
        self,
        amounts: PaymentAmounts = PaymentAmounts(),
        log_path: str | os.PathLike | None = None,
        snapshot_path: str | os.PathLike | None = None,
        snapshot_every: int = 0,
    ):
        self.amounts = amounts
        self.records: dict[bytes, ClaimRecord] = {}
        self.payments: list[tuple[int, bytes, PayRole, int]] = []  # (seq, token_hash, role, amount)
        self.seq = 0
        self._lock = threading.Lock()
        self.log_path = Path(log_path) if log_path else None
        self.snapshot_path = Path(snapshot_path) if snapshot_path else None
        self.snapshot_every = snapshot_every
        self._since_snapshot = 0
        if self.snapshot_path and self.snapshot_path.exists():
            self._replay(self.snapshot_path)
        if self.log_path and self.log_path.exists():
            self._replay(self.log_path)

    # -- persistence -------------------------------------------------------

    def _replay(self, path: Path) -> None:
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            etype, th, role, amount, seq = RECORD.unpack(bytes.fromhex(line.strip()))
            if th == bytes(32):
                self.seq = max(self.seq, seq)
                continue
            if seq <= self.seq and path == self.log_path:
                continue  # already covered by the snapshot
            self._apply(EventType(etype), th, PayRole(role), amount, seq)
            self.seq = max(self.seq, seq)

    def _apply(self, etype: EventType, th: bytes, role: PayRole, amount: int, seq: int) -> None:
        rec = self.records.setdefault(th, ClaimRecord(th))
        if etype is EventType.MARK_SPENT:
            if rec.f_bs is Flag.FRESH:
                rec.f_bs = Flag.UNCLAIMED
            if rec.f_es is Flag.FRESH:
                rec.f_es = Flag.UNCLAIMED
            return
        if role is PayRole.BS:
            rec.f_bs = Flag.CLAIMED
        elif role is PayRole.ES:
            rec.f_es = Flag.CLAIMED
        rec.paid[role] = rec.paid.get(role, 0) + amount
        self.payments.append((seq, th, role, amount))

    def _emit(self, etype: EventType, th: bytes, role: PayRole, amount: int) -> None:
        self.seq += 1
        self._apply(etype, th, role, amount, self.seq)
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(RECORD.pack(etype, th, role, amount, self.seq).hex() + "\n")
        self._since_snapshot += 1
        if self.snapshot_every and self._since_snapshot >= self.snapshot_every:
            self._write_snapshot()

    def _snapshot_lines(self) -> list[str]:
        rows = []
        for th, rec in self.records.items():
            if rec.f_bs is not Flag.FRESH or rec.f_es is not Flag.FRESH:
                rows.append(RECORD.pack(EventType.MARK_SPENT, th, PayRole.NONE, 0, 0))
        for seq, th, role, amount in self.payments:
            rows.append(RECORD.pack(EventType.CLAIM, th, role, amount, seq))
        rows.sort()
        return [r.hex() for r in rows]

    def _write_snapshot(self) -> None:
        self._since_snapshot = 0
        if not self.snapshot_path:
            return
        lines = self._snapshot_lines()
        # the seq high-water mark rides on a trailing no-op spend record
        marker = RECORD.pack(EventType.MARK_SPENT, bytes(32), PayRole.NONE, 0, self.seq).hex()
        tmp = self.snapshot_path.with_suffix(".tmp")
        tmp.write_text("\n".join(lines + [marker]) + "\n")
        os.replace(tmp, self.snapshot_path)

    def snapshot(self) -> None:
        with self._lock:
            self._write_snapshot()

    def state_bytes(self) -> bytes:
        """Canonical dump of the full state; used to assert failed claims change nothing."""
        with self._lock:
            return "\n".join(self._snapshot_lines()).encode() + self.seq.to_bytes(8, "big")

    # -- operations --------------------------------------------------------

    def mark_spent(self, token: Token) -> str:
        th = token.token_hash()
        with self._lock:
            rec = self.records.get(th)
            if rec is not None and (rec.f_bs is not Flag.FRESH or rec.f_es is not Flag.FRESH):
                return DOUBLE_SPEND
            self._emit(EventType.MARK_SPENT, th, PayRole.NONE, 0)
            return "ok"

    def process_bs_claim(
        self, token: Token, pk_p: BlindPublicKey, service_keys: Mapping[str, BlindPublicKey]
    ) -> ClaimResult:
        if not token.verify_agnostic(pk_p):
            return ClaimResult(False, ClaimFailure.INVALID_SIGNATURE.value)
        # full-token check: the service half must be genuine for some registered service
        s_type = _service_of(token, service_keys)
        if s_type is None:
            return ClaimResult(False, ClaimFailure.INVALID_SIGNATURE.value)
        th = token.token_hash()
        with self._lock:
            rec = self.records.get(th)
            if rec is not None and rec.f_bs is Flag.CLAIMED:
                return ClaimResult(False, ClaimFailure.ALREADY_CLAIMED.value)
            self._emit(EventType.CLAIM, th, PayRole.BS, self.amounts.bs)
            self.records[th].s_type = self.records[th].s_type or s_type
            return ClaimResult(True, "", self.amounts.bs)

    def process_es_claim(
        self, s_type: str, token: Token, pk_p: BlindPublicKey, service_keys: Mapping[str, BlindPublicKey]
    ) -> ClaimResult:
        pk_s = service_keys.get(s_type)
        if pk_s is None or not token.verify_specific(pk_s):
            return ClaimResult(False, ClaimFailure.WRONG_SERVICE_TYPE.value)
        if not token.verify_agnostic(pk_p):
            return ClaimResult(False, ClaimFailure.INVALID_SIGNATURE.value)
        th = token.token_hash()
        with self._lock:
            rec = self.records.get(th)
            if rec is not None and rec.f_es is Flag.CLAIMED:
                return ClaimResult(False, ClaimFailure.ALREADY_CLAIMED.value)
            self._emit(EventType.CLAIM, th, PayRole.ES, self.amounts.es)
            self._emit(EventType.CLAIM, th, PayRole.SP, self.amounts.sp)
            self.records[th].s_type = s_type
            return ClaimResult(True, "", self.amounts.es + self.amounts.sp)

    # -- queries -----------------------------------------------------------

    def totals(self) -> dict[str, int]:
        with self._lock:
            out = {"bs": 0, "es": 0, "sp": 0}
            for _, _, role, amount in self.payments:
                out[role.name.lower()] += amount
            return out

    def record(self, token: Token) -> ClaimRecord | None:
        return self.records.get(token.token_hash())


def _service_of(token: Token, service_keys: Mapping[str, BlindPublicKey]) -> str | None:
    for name, pk in service_keys.items():
        if token.verify_specific(pk):
            return name
    return None
