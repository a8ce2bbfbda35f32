"""Message transports.

Parties are plain state machines: ``party.handle(msg, reply)`` returns a
list of ``(address, Message)`` pairs, where an address is either a party
name or the ``reply`` handle it was given.  A transport moves encoded
frames between them.

``LoopbackNetwork`` runs everything on the calling thread.  Delivery is
FIFO per (src, dst) pair and, by default, globally in send order, which
makes whole runs replayable from a seed.  A :class:`FaultPlan` can drop,
duplicate or delay matching frames, and ``reorder=True`` interleaves
different pairs at random.

``TcpNetwork`` gives each party a listening socket and a handler lock;
replies travel back over the connection the request arrived on.
"""

from __future__ import annotations

import hashlib
import logging
import random
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol

from . import wire
from .wire import Message

log = logging.getLogger(__name__)


class Party(Protocol):
    name: str

    def handle(self, msg: Message, reply) -> list: ...


# ---------------------------------------------------------------------------
# Loopback
# ---------------------------------------------------------------------------


@dataclass
class FaultRule:
    action: str  # "drop" | "duplicate" | "delay"
    match: Callable[[str, str, Message], bool]
    times: int = 1
    delay_steps: int = 1

    def __post_init__(self) -> None:
        if self.action not in ("drop", "duplicate", "delay"):
            raise ValueError(f"unknown fault action {self.action!r}")


@dataclass
class FaultPlan:
    rules: list[FaultRule] = field(default_factory=list)

    def apply(self, src: str, dst: str, msg: Message) -> FaultRule | None:
        for rule in self.rules:
            if rule.times > 0 and rule.match(src, dst, msg):
                rule.times -= 1
                return rule
        return None


@dataclass
class _Pending:
    seq: int
    src: str
    dst: str
    frame: bytes
    not_before: int


class LoopbackNetwork:
    def __init__(self, faults: FaultPlan | None = None, reorder: bool = False, rng: random.Random | None = None):
        self.parties: dict[str, Party] = {}
        self.faults = faults or FaultPlan()
        self.reorder = reorder
        self.rng = rng or random.Random(0)
        self.pending: list[_Pending] = []
        self.trace: list[tuple[str, str, bytes]] = []
        self.dropped: list[tuple[str, str, bytes]] = []
        self.decode_errors: list[tuple[str, str, str]] = []
        self._seq = 0
        self.step = 0

    def add(self, party: Party) -> Party:
        if party.name in self.parties:
            raise ValueError(f"duplicate party {party.name!r}")
        self.parties[party.name] = party
        return party

    def send(self, src: str, dst: str, msg: Message) -> None:
        frame = wire.encode(msg)
        rule = self.faults.apply(src, dst, msg)
        if rule is not None and rule.action == "drop":
            self.dropped.append((src, dst, frame))
            return
        delay = rule.delay_steps if rule is not None and rule.action == "delay" else 0
        copies = 2 if rule is not None and rule.action == "duplicate" else 1
        for _ in range(copies):
            self._seq += 1
            self.pending.append(_Pending(self._seq, src, dst, frame, self.step + delay))

    def post(self, src: str, outs: list) -> None:
        for dst, msg in outs:
            self.send(src, dst, msg)

    def _next(self) -> _Pending | None:
        heads: dict[tuple[str, str], _Pending] = {}
        for p in self.pending:  # pending is in seq order, so the first per pair is the FIFO head
            heads.setdefault((p.src, p.dst), p)
        ready = [p for p in heads.values() if p.not_before <= self.step]
        if not ready:
            return None
        if self.reorder:
            return ready[self.rng.randrange(len(ready))]
        return min(ready, key=lambda p: p.seq)

    def run(self, max_steps: int = 1_000_000) -> int:
        """Deliver until no frame is pending; returns the number delivered."""
        delivered = 0
        while self.pending and delivered < max_steps:
            item = self._next()
            self.step += 1
            if item is None:
                continue  # everything is delayed; let time pass
            self.pending.remove(item)
            delivered += 1
            self.trace.append((item.src, item.dst, item.frame))
            party = self.parties.get(item.dst)
            if party is None:
                log.debug("frame for unknown party %s dropped", item.dst)
                continue
            try:
                msg = wire.decode(item.frame)
            except wire.WireError as exc:
                self.decode_errors.append((item.src, item.dst, exc.code.value))
                continue
            self.post(item.dst, party.handle(msg, item.src))
        return delivered

    def trace_digest(self) -> str:
        h = hashlib.sha256()
        for src, dst, frame in self.trace:
            for part in (src.encode(), dst.encode(), frame):
                h.update(struct.pack(">I", len(part)) + part)
        return h.hexdigest()


# ---------------------------------------------------------------------------
# TCP
# ---------------------------------------------------------------------------


def read_frame(sock: socket.socket) -> bytes | None:
    """Read one frame; ``None`` on clean EOF.  Raises WireError on a bad header."""
    header = _recv_exact(sock, wire.HEADER_LEN)
    if header is None:
        return None
    _, _, length = wire.parse_header(header)
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        raise wire.WireError(wire.WireErrorCode.TRUNCATED, "connection closed mid-frame")
    return header + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if not buf:
                return None
            raise wire.WireError(wire.WireErrorCode.TRUNCATED, "connection closed mid-frame")
        buf += chunk
    return bytes(buf)


class _Conn:
    """One TCP connection; writes are serialised so frames never interleave."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._wlock = threading.Lock()

    def write(self, frame: bytes) -> None:
        with self._wlock:
            self.sock.sendall(frame)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


@dataclass(frozen=True)
class ConnReply:
    conn: _Conn
    peer: str = "?"


class TcpNetwork:
    def __init__(self, directory: dict[str, tuple[str, int]] | None = None):
        self.directory: dict[str, tuple[str, int]] = dict(directory or {})
        self.parties: dict[str, Party] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._servers: list[socket.socket] = []
        self._conns: dict[tuple[str, str], _Conn] = {}
        self._all_conns: list[_Conn] = []
        self._conn_lock = threading.Lock()
        self._cv = threading.Condition()
        self._inflight = 0
        self._closed = False
        self.trace: list[tuple[str, str, bytes]] = []

    # -- lifecycle ---------------------------------------------------------

    def add(self, party: Party, host: str = "127.0.0.1", port: int | None = None, listen: bool = True) -> Party:
        self.parties[party.name] = party
        self._locks[party.name] = threading.Lock()
        if listen:
            if port is None:
                port = self.directory.get(party.name, (host, 0))[1]
            srv = socket.create_server((host, port))
            self.directory[party.name] = srv.getsockname()[:2]
            self._servers.append(srv)
            threading.Thread(target=self._accept_loop, args=(party.name, srv), daemon=True).start()
        return party

    def close(self) -> None:
        self._closed = True
        for srv in self._servers:
            try:
                srv.close()
            except OSError:
                pass
        for conn in list(self._all_conns):
            conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- sending -----------------------------------------------------------

    def post(self, src: str, outs: list) -> None:
        for dst, msg in outs:
            self.send(src, dst, msg)

    def send(self, src: str, dst, msg: Message) -> None:
        frame = wire.encode(msg)
        if isinstance(dst, ConnReply):
            conn = dst.conn
            label = dst.peer
        else:
            conn = self._connect(src, dst)
            label = dst
        with self._cv:
            self._inflight += 1
            self.trace.append((src, label, frame))
        try:
            conn.write(frame)
        except OSError:
            self._done()
            raise

    def _connect(self, src: str, dst: str) -> _Conn:
        with self._conn_lock:
            conn = self._conns.get((src, dst))
            if conn is None:
                if dst not in self.directory:
                    raise KeyError(f"no address for party {dst!r}")
                sock = socket.create_connection(self.directory[dst])
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn = _Conn(sock)
                self._conns[(src, dst)] = conn
                self._all_conns.append(conn)
                threading.Thread(target=self._read_loop, args=(src, conn, dst), daemon=True).start()
            return conn

    # -- receiving ---------------------------------------------------------

    def _accept_loop(self, name: str, srv: socket.socket) -> None:
        while not self._closed:
            try:
                sock, _ = srv.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock)
            with self._conn_lock:
                self._all_conns.append(conn)
            threading.Thread(target=self._read_loop, args=(name, conn, "?"), daemon=True).start()

    def _read_loop(self, name: str, conn: _Conn, peer: str) -> None:
        try:
            while not self._closed:
                try:
                    frame = read_frame(conn.sock)
                except (OSError, wire.WireError) as exc:
                    # a bad header leaves the stream unsynchronised, so drop the connection
                    log.debug("%s: connection error %s", name, exc)
                    return
                if frame is None:
                    return
                try:
                    self._dispatch(name, frame, ConnReply(conn, peer))
                finally:
                    self._done()
        finally:
            conn.close()
            with self._conn_lock:
                for key, c in list(self._conns.items()):
                    if c is conn:
                        del self._conns[key]

    def _dispatch(self, name: str, frame: bytes, reply: ConnReply) -> None:
        party = self.parties[name]
        try:
            msg = wire.decode(frame)
        except wire.WireError as exc:
            log.warning("%s: dropping undecodable frame: %s", name, exc)
            return
        with self._locks[name]:
            outs = party.handle(msg, reply)
        self.post(name, outs)

    def _done(self) -> None:
        with self._cv:
            self._inflight -= 1
            self._cv.notify_all()

    def run(self, timeout: float = 30.0) -> None:
        """Block until no locally-tracked frame is in flight."""
        with self._cv:
            if not self._cv.wait_for(lambda: self._inflight <= 0, timeout=timeout):
                raise TimeoutError("network did not quiesce")

    def wait_until(self, predicate: Callable[[], bool], timeout: float = 30.0) -> None:
        with self._cv:
            if not self._cv.wait_for(predicate, timeout=timeout):
                raise TimeoutError("condition not reached")

    def kick(self) -> None:
        with self._cv:
            self._cv.notify_all()
