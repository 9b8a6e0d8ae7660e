"""Seeded interleaving of protocol flows.

Each actor is a flow generator. At every tick the scheduler picks one ready
actor with its RNG and advances it by exactly one message exchange, so the
global message order is a pure function of the seed. DELAY faults hold an
actor back for a number of ticks before its next send.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from ..crypto import Rng
from ..errors import Rejected
from ..protocol import Flow, Request, Transport, drive
from .faults import FaultAction, FaultPlan


@dataclass
class Actor:
    name: str
    flow: Flow
    pending: Request | None = None
    started: bool = False
    done: bool = False
    result: object = None
    error: BaseException | None = None
    held_until: int = 0
    delay_checked: bool = False
    steps: int = 0

    @property
    def ok(self) -> bool:
        return self.done and self.error is None


@dataclass
class Scheduler:
    transport: Transport
    seed: int = 0
    fault_plan: FaultPlan | None = None
    actors: list[Actor] = field(default_factory=list)

    def __post_init__(self):
        self._rng = Rng(self.seed).child("schedule")
        self.tick = 0
        self.order: list[str] = []

    def spawn(self, name: str, flow: Flow) -> Actor:
        actor = Actor(name, flow)
        self.actors.append(actor)
        return actor

    def _advance(self, actor: Actor, how, value) -> None:
        try:
            actor.pending = how(value)
            actor.delay_checked = False
        except StopIteration as stop:
            actor.done, actor.result, actor.pending = True, stop.value, None
        except Exception as exc:  # the flow gave up; keep the error for the summary
            actor.done, actor.error, actor.pending = True, exc, None

    def _step(self, actor: Actor) -> None:
        actor.steps += 1
        if not actor.started:
            actor.started = True
            self._advance(actor, lambda _: next(actor.flow), None)
            return
        req = actor.pending
        if self.fault_plan and not actor.delay_checked:
            actor.delay_checked = True
            held = self.fault_plan.take(None, req.kind, req.segment, (FaultAction.DELAY,))
            if held:
                actor.held_until = self.tick + sum(r.param or 1 for r in held)
                return
        try:
            reply = self.transport.call(req.src, req.dst, req.segment, req.kind, req.body)
        except Rejected as exc:
            self._advance(actor, actor.flow.throw, exc)
            return
        self._advance(actor, actor.flow.send, reply)

    def run(self, max_ticks: int = 10_000_000) -> list[Actor]:
        while self.tick < max_ticks:
            alive = [a for a in self.actors if not a.done]
            if not alive:
                break
            ready = [a for a in alive if a.held_until <= self.tick]
            if not ready:
                self.tick = min(a.held_until for a in alive)
                continue
            actor = ready[self._rng.randrange(len(ready))]
            self.order.append(actor.name)
            self._step(actor)
            self.tick += 1
        return self.actors


def run_threaded(flows: list[Flow], transport: Transport, workers: int = 8) -> list[tuple[object, BaseException | None]]:
    """Drive flows on a thread pool; message order is whatever the OS gives."""

    def one(flow):
        try:
            return drive(flow, transport), None
        except Exception as exc:
            return None, exc

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, flows))
