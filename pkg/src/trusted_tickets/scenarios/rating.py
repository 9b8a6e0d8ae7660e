"""Pseudonymous rating: priced rating tickets and impact-weighted aggregation.

A rating is the payload of a redeemed ticket. The rating store only ever sees
what the ticket carries (group attributes and the AIK digest), so weights come
from the group's ``impact_factor`` attribute and no platform identity is
stored.
"""

from __future__ import annotations

import enum
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from ..credentials import Credential, VerifiedTicket
from ..errors import BadSchedule, MalformedEncoding, NoRatings
from ..protocol import dec_int, enc_int
from ..wire import WireError, pack_fields, unpack_fields

MIN_SCORE, MAX_SCORE = 1, 5
IMPACT_ATTRIBUTE = "impact_factor"


class ScheduleKind(str, enum.Enum):
    FLAT = "FLAT"
    LINEAR_COUNT = "LINEAR_COUNT"
    FREQUENCY = "FREQUENCY"
    INCENTIVE = "INCENTIVE"


_REQUIRED = {
    ScheduleKind.FLAT: ("base",),
    ScheduleKind.LINEAR_COUNT: ("base", "slope"),
    ScheduleKind.FREQUENCY: ("base", "slope", "window"),
    ScheduleKind.INCENTIVE: ("incentive",),
}


@dataclass(frozen=True)
class PriceSchedule:
    kind: ScheduleKind
    params: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        try:
            kind = ScheduleKind(self.kind)
        except ValueError:
            raise BadSchedule(f"unknown schedule kind {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)
        params = dict(self.params)
        missing = [k for k in _REQUIRED[kind] if k not in params]
        if missing:
            raise BadSchedule(f"{kind.value} needs {', '.join(missing)}")
        for key, value in params.items():
            if not isinstance(value, int) or isinstance(value, bool):
                raise BadSchedule(f"parameter {key} must be an integer")
        if kind != ScheduleKind.INCENTIVE and any(params.get(k, 0) < 0 for k in ("base", "slope")):
            raise BadSchedule("base and slope must be non-negative")
        if kind == ScheduleKind.FREQUENCY and params["window"] <= 0:
            raise BadSchedule("window must be positive")
        object.__setattr__(self, "params", params)

    @classmethod
    def parse(cls, spec: Mapping[str, object]) -> "PriceSchedule":
        spec = dict(spec)
        kind = spec.pop("kind", None)
        if kind is None:
            raise BadSchedule("schedule needs a kind")
        return cls(str(kind).upper(), spec)


def price_for(schedule: PriceSchedule, history: Sequence[int], now: int = 0) -> int:
    """Price of the next ticket given the timestamps of prior issuances."""
    p = schedule.params
    if schedule.kind == ScheduleKind.FLAT:
        return p["base"]
    if schedule.kind == ScheduleKind.LINEAR_COUNT:
        return p["base"] + p["slope"] * len(history)
    if schedule.kind == ScheduleKind.FREQUENCY:
        recent = sum(1 for t in history if now - p["window"] < t <= now)
        return p["base"] + p["slope"] * recent
    return -p["incentive"]


def pca_pricing(schedule: PriceSchedule):
    """Adapter for the PCA's ``pricing(group, history, now)`` hook."""

    def pricing(group, history, now):
        return price_for(schedule, history, now)

    return pricing


# -- payload -------------------------------------------------------------------


def encode_rating(subject_ref: str, score: int) -> bytes:
    if not MIN_SCORE <= score <= MAX_SCORE:
        raise ValueError(f"score must be in [{MIN_SCORE}, {MAX_SCORE}]")
    return pack_fields(b"RATING", subject_ref.encode(), enc_int(score))


def decode_rating(payload: bytes) -> tuple[str, int]:
    try:
        tag, subject, score = unpack_fields(payload, 3)
        subject_ref = subject.decode("utf-8")
    except (WireError, UnicodeDecodeError) as exc:
        raise MalformedEncoding(f"not a rating payload: {exc}") from exc
    if tag != b"RATING":
        raise MalformedEncoding("not a rating payload")
    value = dec_int(score)
    if not MIN_SCORE <= value <= MAX_SCORE:
        raise MalformedEncoding(f"score {value} out of range")
    return subject_ref, value


@dataclass(frozen=True)
class Rating:
    subject_ref: str
    score: int
    group_id: int
    aik_digest: bytes
    weight: Fraction


def impact_weight(attributes: Mapping[str, str]) -> Fraction:
    try:
        w = Fraction(attributes.get(IMPACT_ATTRIBUTE, "1"))
    except (ValueError, ZeroDivisionError):
        raise MalformedEncoding("impact_factor is not a number") from None
    if w <= 0:
        raise MalformedEncoding("impact_factor must be positive")
    return w


class RatingService:
    """The rating system's record store, fed by the RS on each accepted ticket."""

    def __init__(self):
        self._lock = threading.Lock()
        self.by_ticket: dict[bytes, Rating] = {}
        self.by_subject: dict[str, list[Rating]] = defaultdict(list)

    def check(self, verified: VerifiedTicket) -> None:
        """RS payload check: reject anything that is not a valid rating."""
        decode_rating(verified.payload)
        impact_weight(verified.attributes)

    def accept(self, verified: VerifiedTicket, ack: Credential) -> Rating:
        subject, score = decode_rating(verified.payload)
        rating = Rating(subject, score, verified.group_id, verified.aik_digest.bytes, impact_weight(verified.attributes))
        with self._lock:
            if rating.aik_digest in self.by_ticket:
                return self.by_ticket[rating.aik_digest]
            self.by_ticket[rating.aik_digest] = rating
            self.by_subject[subject].append(rating)
        return rating

    def aggregate(self, subject_ref: str) -> Fraction:
        return aggregate(self.by_subject.get(subject_ref, ()))

    def records(self) -> list[Rating]:
        return list(self.by_ticket.values())


def aggregate(ratings: Sequence[Rating]) -> Fraction:
    """Impact-weighted mean score, exact."""
    if not ratings:
        raise NoRatings("no ratings for this subject")
    total = sum((r.weight for r in ratings), Fraction(0))
    return sum((r.weight * r.score for r in ratings), Fraction(0)) / total
