"""Fault plans: deterministic message tampering, replay, loss and delay.

A rule matches an envelope by sequence number and/or by message kind and
segment. Command-line form::

    tamper_bit:segment=TA_RS,kind=TICKET
    drop:seq=12
    replay:kind=TICKET
    delay:kind=IDENTITY_REQUEST,param=3
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from ..crypto import Rng
from ..errors import BadConfig
from ..protocol import Segment


class FaultAction(str, enum.Enum):
    TAMPER_BIT = "TAMPER_BIT"
    REPLAY = "REPLAY"
    DROP = "DROP"
    DELAY = "DELAY"


@dataclass(frozen=True)
class FaultRule:
    action: FaultAction
    seq: int | None = None
    kind: str | None = None
    segment: Segment | None = None
    param: int | None = None
    limit: int | None = None

    def matches(self, seq: int | None, kind: str, segment: Segment) -> bool:
        if self.seq is not None and seq != self.seq:
            return False
        if self.kind is not None and kind != self.kind:
            return False
        if self.segment is not None and segment != self.segment:
            return False
        return True

    def spec(self) -> str:
        parts = []
        for name in ("seq", "kind", "segment", "param", "limit"):
            value = getattr(self, name)
            if value is not None:
                parts.append(f"{name}={getattr(value, 'value', value)}")
        return self.action.value.lower() + (":" + ",".join(parts) if parts else "")


_INT_KEYS = ("seq", "param", "limit")


def parse_rule(text: str) -> FaultRule:
    action_text, _, rest = text.partition(":")
    try:
        action = FaultAction(action_text.strip().upper())
    except ValueError:
        raise BadConfig(f"unknown fault action {action_text!r}") from None
    kwargs: dict[str, object] = {}
    for item in filter(None, (p.strip() for p in rest.split(","))):
        key, eq, value = item.partition("=")
        if not eq:
            raise BadConfig(f"fault option {item!r} is not key=value")
        if key in _INT_KEYS:
            try:
                kwargs[key] = int(value)
            except ValueError:
                raise BadConfig(f"fault option {key} needs an integer") from None
        elif key == "kind":
            kwargs[key] = value
        elif key == "segment":
            try:
                kwargs[key] = Segment(value.upper())
            except ValueError:
                raise BadConfig(f"unknown segment {value!r}") from None
        else:
            raise BadConfig(f"unknown fault option {key!r}")
    if action == FaultAction.DELAY and kwargs.get("param") is None:
        kwargs["param"] = 1
    return FaultRule(action, **kwargs)


@dataclass
class FaultPlan:
    """An ordered rule list plus the RNG that picks tamper positions."""

    rules: list[FaultRule] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self._rng = Rng(self.seed).child("faults")
        self._hits = [0] * len(self.rules)

    @classmethod
    def parse(cls, specs, seed: int = 0) -> "FaultPlan":
        return cls([parse_rule(s) for s in specs or ()], seed)

    def reset(self) -> None:
        self.__post_init__()

    def take(self, seq: int | None, kind: str, segment: Segment, actions) -> list[FaultRule]:
        """Rules of the given actions that fire for this envelope (counted)."""
        fired = []
        for i, rule in enumerate(self.rules):
            if rule.action not in actions or not rule.matches(seq, kind, segment):
                continue
            if rule.limit is not None and self._hits[i] >= rule.limit:
                continue
            self._hits[i] += 1
            fired.append(rule)
        return fired

    def flip_bit(self, body: bytes, rule: FaultRule) -> bytes:
        if not body:
            return body
        bit = rule.param if rule.param is not None else self._rng.randrange(len(body) * 8)
        bit %= len(body) * 8
        out = bytearray(body)
        out[bit // 8] ^= 1 << (bit % 8)
        return bytes(out)

    def describe(self) -> list[str]:
        return [r.spec() for r in self.rules]

    def __bool__(self) -> bool:
        return bool(self.rules)
