"""Message plumbing shared by every party.

Protocol flows are written as generators that yield :class:`Request` objects
and receive :class:`Reply` objects back, so the same flow can be driven
directly, by the deterministic scheduler, or over a socket.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Generator, Protocol

from .errors import MalformedEncoding, Rejected, from_wire
from .wire import WireError, pack_fields, unpack_fields

REJECT = "REJECT"


class Segment(str, enum.Enum):
    TA_PCA = "TA_PCA"
    TA_RS = "TA_RS"
    PCA_CP = "PCA_CP"
    RS_PCA = "RS_PCA"
    NOC = "NOC"
    DEVICE_LOCAL = "DEVICE_LOCAL"


@dataclass(frozen=True)
class Request:
    src: str
    dst: str
    segment: Segment
    kind: str
    body: bytes


@dataclass(frozen=True)
class Reply:
    kind: str
    body: bytes

    def fields(self, expected_kind: str, count: int | None = None) -> list[bytes]:
        """Unpack a reply of ``expected_kind``, re-raising remote rejections."""
        if self.kind == REJECT:
            raise decode_reject(self.body)
        if self.kind != expected_kind:
            raise MalformedEncoding(f"expected {expected_kind}, got {self.kind}")
        try:
            return unpack_fields(self.body, count)
        except WireError as exc:
            raise MalformedEncoding(str(exc)) from exc


Flow = Generator[Request, Reply, object]


class Transport(Protocol):
    def call(self, src: str, dst: str, segment: Segment, kind: str, body: bytes) -> Reply: ...


def enc_int(value: int) -> bytes:
    return str(int(value)).encode()


def dec_int(data: bytes) -> int:
    try:
        text = data.decode("ascii")
        value = int(text)
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedEncoding("bad integer") from exc
    if text != str(value):
        raise MalformedEncoding("non-canonical integer")
    return value


def reject_body(exc: Rejected) -> bytes:
    return pack_fields(exc.code.encode(), str(exc.detail).encode())


def decode_reject(body: bytes) -> Rejected:
    try:
        code, detail = unpack_fields(body, 2)
        return from_wire(code.decode(), detail.decode())
    except (WireError, UnicodeDecodeError, ValueError):
        return MalformedEncoding("unreadable reject")


class Service:
    """Dispatches ``KIND`` messages to ``on_kind(fields, sender)`` methods.

    Handlers return ``(reply_kind, [fields...])``; raised rejections become
    REJECT replies and framing errors become MALFORMED rejections.
    """

    party = "SERVICE"

    def handle(self, kind: str, body: bytes, sender: str) -> Reply:
        handler = getattr(self, "on_" + kind.lower(), None)
        try:
            if handler is None:
                raise Rejected(f"{self.party} does not accept {kind}")
            try:
                fields = unpack_fields(body)
            except WireError as exc:
                raise MalformedEncoding(str(exc)) from exc
            reply_kind, reply_fields = handler(fields, sender)
            return Reply(reply_kind, pack_fields(*reply_fields))
        except Rejected as exc:
            return Reply(REJECT, reject_body(exc))
        except ValueError as exc:
            # wrong field counts, bad utf-8, bad framing inside a field
            return Reply(REJECT, reject_body(MalformedEncoding(str(exc))))


def drive(flow: Flow, transport: Transport):
    """Run one flow to completion against ``transport``; return its result."""
    reply = None
    try:
        request = next(flow)
        while True:
            try:
                reply = transport.call(request.src, request.dst, request.segment, request.kind, request.body)
            except Rejected as exc:
                request = flow.throw(exc)
                continue
            request = flow.send(reply)
    except StopIteration as stop:
        return stop.value
