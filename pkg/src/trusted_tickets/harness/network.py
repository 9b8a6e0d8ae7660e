"""Simulated network: envelopes, the transcript recorder and fault application.

Every message crossing the network, requests and replies alike, is committed
to one :class:`Transcript` under a lock, which gives each run a single total
order. Transcript lines have the form ``seq|from|to|segment|kind|hex(body)``.
"""

from __future__ import annotations

import socket
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..errors import BadConfig, BadQuery, MessageDropped
from ..protocol import Reply, Segment, Service
from ..wire import pack_fields, u32, unpack_fields
from .faults import FaultAction, FaultPlan

_WIRE_ACTIONS = (FaultAction.TAMPER_BIT, FaultAction.DROP, FaultAction.REPLAY)


@dataclass(frozen=True)
class Envelope:
    seq: int
    src: str
    dst: str
    segment: Segment
    kind: str
    body: bytes

    def line(self) -> str:
        return f"{self.seq}|{self.src}|{self.dst}|{self.segment.value}|{self.kind}|{self.body.hex()}"

    @classmethod
    def parse(cls, line: str) -> "Envelope":
        parts = line.rstrip("\n").split("|")
        if len(parts) != 6:
            raise BadQuery(f"transcript line has {len(parts)} columns, expected 6")
        seq, src, dst, segment, kind, body = parts
        try:
            return cls(int(seq), src, dst, Segment(segment), kind, bytes.fromhex(body))
        except ValueError as exc:
            raise BadQuery(f"bad transcript line: {exc}") from exc

    def fields(self) -> list[bytes]:
        return unpack_fields(self.body)


class Transcript:
    """Append-only, thread-safe envelope log with simple queries."""

    def __init__(self, envelopes=()):
        self._lock = threading.Lock()
        self.envelopes: list[Envelope] = list(envelopes)

    def record(self, src, dst, segment, kind, body, mutate: Callable[[int], bytes] | None = None) -> Envelope:
        """Commit one envelope; ``mutate(seq)`` may rewrite the body first."""
        with self._lock:
            seq = len(self.envelopes) + 1
            if mutate is not None:
                body = mutate(seq)
            env = Envelope(seq, src, dst, Segment(segment), kind, bytes(body))
            self.envelopes.append(env)
            return env

    def __len__(self) -> int:
        return len(self.envelopes)

    def __iter__(self):
        return iter(list(self.envelopes))

    # -- queries ------------------------------------------------------------

    def select(self, kind=None, segment=None, party=None) -> list[Envelope]:
        seg = Segment(segment) if segment is not None else None
        return [
            e
            for e in self.envelopes
            if (kind is None or e.kind == kind)
            and (seg is None or e.segment == seg)
            and (party is None or party in (e.src, e.dst))
        ]

    def count(self, kind=None, segment=None, party=None) -> int:
        return len(self.select(kind, segment, party))

    def search(self, needle: bytes, segment=None) -> list[Envelope]:
        if not needle:
            raise BadQuery("empty search needle")
        return [e for e in self.select(segment=segment) if needle in e.body]

    def timeline(self, party: str) -> list[Envelope]:
        """Envelopes involving ``party`` in transcript order (not re-sorted)."""
        return self.select(party=party)

    # -- persistence --------------------------------------------------------

    def dumps(self) -> str:
        return "".join(e.line() + "\n" for e in self.envelopes)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Transcript":
        return cls(Envelope.parse(line) for line in text.splitlines() if line.strip())

    @classmethod
    def load(cls, path) -> "Transcript":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise BadQuery(f"cannot read transcript: {exc}") from exc
        return cls.loads(text)


class Network:
    """Routes calls to registered services, applying the fault plan.

    ``transport="socket"`` sends every delivery through a loopback TCP
    server instead of a direct method call; recording and faults are the
    same either way.
    """

    def __init__(self, transcript: Transcript | None = None, fault_plan: FaultPlan | None = None, transport: str = "inproc"):
        if transport not in ("inproc", "socket"):
            raise BadConfig(f"unknown transport {transport!r}")
        self.transcript = transcript if transcript is not None else Transcript()
        self.faults = fault_plan or FaultPlan()
        self.services: dict[str, Service] = {}
        self.observers: dict[Segment, list[Callable[[Envelope], None]]] = {}
        self.transport = transport
        self._server: _LoopbackServer | None = None

    def register(self, name: str, service: Service) -> None:
        self.services[name] = service

    def observe(self, segment: Segment, callback: Callable[[Envelope], None]) -> None:
        self.observers.setdefault(Segment(segment), []).append(callback)

    def _emit(self, src, dst, segment, kind, body) -> tuple[Envelope, list]:
        fired = []

        def mutate(seq: int) -> bytes:
            rules = self.faults.take(seq, kind, segment, _WIRE_ACTIONS) if self.faults else []
            fired.extend(rules)
            out = body
            for rule in rules:
                if rule.action == FaultAction.TAMPER_BIT:
                    out = self.faults.flip_bit(out, rule)
            return out

        env = self.transcript.record(src, dst, segment, kind, body, mutate)
        for cb in self.observers.get(env.segment, ()):
            cb(env)
        return env, [r.action for r in fired]

    def call(self, src: str, dst: str, segment: Segment, kind: str, body: bytes) -> Reply:
        segment = Segment(segment)
        if dst not in self.services:
            raise BadConfig(f"no party named {dst!r}")
        env, actions = self._emit(src, dst, segment, kind, body)
        if FaultAction.DROP in actions:
            raise MessageDropped(f"{kind} #{env.seq} lost")
        reply = self._exchange(env)
        if FaultAction.REPLAY in actions:
            again, _ = self._emit(src, dst, segment, kind, env.body)
            self._exchange(again)
        return reply

    def _exchange(self, env: Envelope) -> Reply:
        raw = self._deliver(env.dst, env.kind, env.body, env.src)
        back, actions = self._emit(env.dst, env.src, env.segment, raw.kind, raw.body)
        if FaultAction.DROP in actions:
            raise MessageDropped(f"{raw.kind} #{back.seq} lost")
        return Reply(back.kind, back.body)

    def _deliver(self, dst: str, kind: str, body: bytes, src: str) -> Reply:
        if self.transport == "inproc":
            return self.services[dst].handle(kind, body, src)
        if self._server is None:
            self._server = _LoopbackServer(self)
        return self._server.request(dst, kind, body, src)

    def close(self) -> None:
        if self._server is not None:
            self._server.close()
            self._server = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- loopback socket transport ------------------------------------------------


def _send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(u32(len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return bytes(buf)


def _recv_frame(sock: socket.socket) -> bytes:
    return _recv_exact(sock, int.from_bytes(_recv_exact(sock, 4), "big"))


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        dst, kind, body, src = unpack_fields(_recv_frame(self.request), 4)
        service = self.server.network.services[dst.decode()]
        reply = service.handle(kind.decode(), body, src.decode())
        _send_frame(self.request, pack_fields(reply.kind.encode(), reply.body))


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class _LoopbackServer:
    def __init__(self, network: Network):
        self.server = _Server(("127.0.0.1", 0), _Handler)
        self.server.network = network
        self.address = self.server.server_address
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def request(self, dst: str, kind: str, body: bytes, src: str) -> Reply:
        with socket.create_connection(self.address) as sock:
            _send_frame(sock, pack_fields(dst.encode(), kind.encode(), body, src.encode()))
            reply_kind, reply_body = unpack_fields(_recv_frame(sock), 2)
        return Reply(reply_kind.decode(), reply_body)

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()
