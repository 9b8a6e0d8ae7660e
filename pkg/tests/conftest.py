from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trusted_tickets.agent import HeldTicket, TrustedAgent  # noqa: E402
from trusted_tickets.credentials import Credential  # noqa: E402
from trusted_tickets.harness.runner import ScenarioConfig, World, default_groups  # noqa: E402


@dataclass
class Redeemed:
    agent: TrustedAgent
    entry: HeldTicket
    payload: bytes
    ack: Credential

    @property
    def ticket(self) -> bytes:
        return self.entry.ticket_bytes


def deploy(seed: int = 0, groups: int = 3, **config) -> World:
    """A PCA, CP and RS wired to one in-process network, no agents yet."""
    config.setdefault("agents", 0)
    return World(ScenarioConfig(groups=default_groups(groups), **config), seed)


def redeem_many(world: World, n: int, groups: int | None = None) -> list[Redeemed]:
    agents = world.make_agents(n)
    out = []
    for i, agent in enumerate(agents):
        gid = world.group_for(i) if groups is None else groups
        entry = agent.acquire_ticket(world.network, gid)
        payload = f"request {i}".encode()
        ack = agent.redeem_ticket(world.network, entry, payload, "RS", world.rs_keys.public)
        out.append(Redeemed(agent, entry, payload, ack))
    return out


@pytest.fixture
def world() -> World:
    return deploy(seed=11)


@pytest.fixture(scope="module")
def hundred():
    """100 agents, one redeemed ticket each, over three groups."""
    w = deploy(seed=2024)
    return w, redeem_many(w, 100)
