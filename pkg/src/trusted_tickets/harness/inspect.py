"""Transcript queries used by the CLI and the tests.

Query strings::

    count [kind=K] [segment=S] [party=P]
    search <text> [segment=S]          (text may be hex:<hexbytes>)
    timeline party=P
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass

from ..errors import BadQuery
from ..protocol import Segment
from .network import Envelope, Transcript


@dataclass(frozen=True)
class QueryResult:
    query: str
    count: int
    envelopes: tuple[Envelope, ...] = ()
    monotone: bool = True

    def lines(self) -> list[str]:
        out = [f"{self.query}: {self.count}"]
        out += [e.line() for e in self.envelopes]
        return out


def _options(tokens: list[str], allowed: set[str]) -> dict[str, str]:
    opts = {}
    for tok in tokens:
        key, eq, value = tok.partition("=")
        if not eq or key not in allowed:
            raise BadQuery(f"unexpected query term {tok!r}")
        opts[key] = value
    if "segment" in opts:
        try:
            opts["segment"] = Segment(opts["segment"].upper())
        except ValueError:
            raise BadQuery(f"unknown segment {opts['segment']!r}") from None
    return opts


def _needle(text: str) -> bytes:
    if text.startswith("hex:"):
        try:
            return bytes.fromhex(text[4:])
        except ValueError:
            raise BadQuery("bad hex needle") from None
    return text.encode()


def inspect(transcript: Transcript, query: str) -> QueryResult:
    try:
        tokens = shlex.split(query)
    except ValueError as exc:
        raise BadQuery(str(exc)) from exc
    if not tokens:
        raise BadQuery("empty query")
    verb, rest = tokens[0], tokens[1:]
    if verb == "count":
        opts = _options(rest, {"kind", "segment", "party"})
        return QueryResult(query, transcript.count(**opts))
    if verb == "search":
        if not rest:
            raise BadQuery("search needs a needle")
        opts = _options(rest[1:], {"segment"})
        hits = transcript.search(_needle(rest[0]), opts.get("segment"))
        return QueryResult(query, len(hits), tuple(hits))
    if verb == "timeline":
        opts = _options(rest, {"party"})
        if "party" not in opts:
            raise BadQuery("timeline needs party=P")
        envs = transcript.timeline(opts["party"])
        seqs = [e.seq for e in envs]
        return QueryResult(query, len(envs), tuple(envs), all(a < b for a, b in zip(seqs, seqs[1:])))
    raise BadQuery(f"unknown query verb {verb!r}")
