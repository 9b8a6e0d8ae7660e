"""Deterministic scenario runner.

``run_scenario`` builds a complete world (manufacturer, PCA, CP, RS, agents
or devices) from a :class:`ScenarioConfig` and a seed, drives it through the
seeded scheduler and returns the transcript plus a :class:`Summary`. For a
given ``(config, seed, fault_plan)`` the transcript bytes are always the same.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .. import crypto
from ..agent import TrustedAgent
from ..charging import CP, DEFAULT_AGREEMENT, PCA, RS, SUSPENSE, ChargingProvider, Receipt, RevenueShareAgreement, journal_balanced
from ..crypto import Rng
from ..errors import BadAgreement, BadConfig, BadSchedule, Rejected
from ..pca import ChargeMode, PrivacyCA, account_ref
from ..protocol import Segment, drive, enc_int
from ..receiving import ReceivingSystem, RsPolicy
from ..scenarios.push import Device, NocRelay, SyncServer
from ..scenarios.rating import PriceSchedule, RatingService, encode_rating, pca_pricing
from ..wire import pack_fields
from .faults import FaultPlan
from .network import Network, Transcript
from .scheduler import Scheduler

SCENARIOS = ("generic", "rating", "push_seal", "push_bind", "push_ticketed")


@dataclass(frozen=True)
class GroupSpec:
    group_id: int
    price: int
    attributes: Mapping[str, str] = field(default_factory=dict)


def default_groups(count: int) -> list[GroupSpec]:
    return [
        GroupSpec(g, 10 * g, {"impact_factor": str(g), "priority": str(g)}) for g in range(1, count + 1)
    ]


def parse_groups(text: str) -> list[GroupSpec]:
    """``"3"`` for three default groups, or ``"g:price:k=v;k=v,..."``."""
    text = text.strip()
    if text.isdigit():
        if int(text) < 1:
            raise BadConfig("need at least one group")
        return default_groups(int(text))
    groups = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise BadConfig(f"group spec {item!r} is not g:price[:attrs]")
        try:
            gid, price = int(parts[0]), int(parts[1])
        except ValueError:
            raise BadConfig(f"group spec {item!r} needs integer id and price") from None
        attrs = {}
        if len(parts) == 3:
            for kv in filter(None, parts[2].split(";")):
                k, eq, v = kv.partition("=")
                if not eq:
                    raise BadConfig(f"group attribute {kv!r} is not k=v")
                attrs[k] = v
        groups.append(GroupSpec(gid, price, attrs))
    if not groups:
        raise BadConfig("no groups given")
    return groups


@dataclass
class ScenarioConfig:
    agents: int = 10
    groups: list[GroupSpec] = field(default_factory=lambda: default_groups(3))
    messages: int = 20
    devices: int = 1
    charging: str = "POST"
    deposit: int = 1000
    agreement: Mapping[str, object] | None = None
    schedule: Mapping[str, object] | None = None
    subjects: tuple[str, ...] = ("item-a", "item-b", "item-c")
    ratings_per_agent: int = 1
    blacklist: tuple[int, ...] = ()
    transport: str = "inproc"

    def __post_init__(self):
        if self.agents < 0 or self.messages < 0 or self.devices < 1 or self.ratings_per_agent < 1:
            raise BadConfig("counts must be non-negative (devices, ratings_per_agent >= 1)")
        if self.charging not in ("PRE", "POST", "NONE"):
            raise BadConfig(f"charging must be PRE, POST or NONE, not {self.charging!r}")
        if self.transport not in ("inproc", "socket"):
            raise BadConfig(f"unknown transport {self.transport!r}")
        ids = [g.group_id for g in self.groups]
        if not ids or len(set(ids)) != len(ids):
            raise BadConfig("group ids must be present and unique")
        if any(g.price < 0 for g in self.groups):
            raise BadConfig("group prices are non-negative")
        if not self.subjects:
            raise BadConfig("need at least one rating subject")
        try:
            self.agreement_obj()
            self.schedule_obj()
        except (BadAgreement, BadSchedule) as exc:
            raise BadConfig(str(exc)) from exc

    def agreement_obj(self) -> RevenueShareAgreement | None:
        if self.agreement is None:
            return DEFAULT_AGREEMENT
        return RevenueShareAgreement.parse(self.agreement)

    def schedule_obj(self) -> PriceSchedule | None:
        return None if self.schedule is None else PriceSchedule.parse(self.schedule)

    @classmethod
    def from_mapping(cls, data: Mapping[str, object]) -> "ScenarioConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise BadConfig(f"unknown config keys: {', '.join(sorted(unknown))}")
        groups = data.get("groups")
        if isinstance(groups, (int, str)):
            data["groups"] = parse_groups(str(groups))
        elif isinstance(groups, list):
            try:
                data["groups"] = [
                    GroupSpec(int(g["id"]), int(g["price"]), {str(k): str(v) for k, v in g.get("attributes", {}).items()})
                    for g in groups
                ]
            except (KeyError, TypeError, ValueError) as exc:
                raise BadConfig(f"bad group entry: {exc}") from exc
        for key in ("subjects", "blacklist"):
            if key in data:
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise BadConfig(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        try:
            return cls.from_mapping(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise BadConfig(f"cannot read config: {exc}") from exc


@dataclass
class Summary:
    scenario: str
    seed: int
    events: list[str] = field(default_factory=list)
    totals: dict[str, object] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def lines(self) -> list[str]:
        out = [f"scenario {self.scenario} seed={self.seed}"]
        out += [f"event {e}" for e in self.events]
        out += [f"total {k}={v}" for k, v in self.totals.items()]
        out += [f"flag {f}" for f in self.flags]
        out += [f"check {k}={'PASS' if v else 'FAIL'}" for k, v in self.checks.items()]
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def _code(exc: BaseException | None) -> str:
    if exc is None:
        return "OK"
    if isinstance(exc, Rejected):
        return exc.code if exc.code != "CHAIN_REJECT" else f"CHAIN_REJECT:{exc.reason.value}"
    return type(exc).__name__


class World:
    """All parties of one run, wired to one network."""

    def __init__(self, config: ScenarioConfig, seed: int, fault_plan: FaultPlan | None = None, ledger_dir=None):
        self.config = config
        self.seed = seed
        self.rng = Rng(seed)
        self.faults = fault_plan or FaultPlan(seed=seed)
        self.network = Network(Transcript(), self.faults, config.transport)
        self.ledger_dir = Path(ledger_dir) if ledger_dir else None
        if self.ledger_dir is not None:
            self.ledger_dir.mkdir(parents=True, exist_ok=True)
            for name in ("escrow.jsonl", "audit.jsonl", "rs.jsonl", "cp.jsonl"):
                (self.ledger_dir / name).unlink(missing_ok=True)
        self.manufacturer = crypto.generate_keypair(self.rng.child("manufacturer"))

        self.cp = ChargingProvider(config.agreement_obj(), journal_path=self._ledger("cp.jsonl"))
        schedule = config.schedule_obj()
        mode = None if config.charging == "NONE" else ChargeMode(config.charging)
        self.pca = PrivacyCA(
            self.rng.child("pca"),
            self.manufacturer.public,
            charge=self._charge_via_cp,
            charging_mode=mode,
            pricing=pca_pricing(schedule) if schedule else None,
            journal_dir=self.ledger_dir,
        )
        for g in config.groups:
            self.pca.register_group(g.group_id, g.price, dict(g.attributes))
        self.rs_keys = crypto.generate_keypair(self.rng.child("rs"))
        self.rs = ReceivingSystem(
            RsPolicy({g.group_id for g in config.groups}, self.rs_keys),
            self.pca.directory(),
            rs_id="RS",
            charge_hook=self._charge_redemption if mode == ChargeMode.POST else None,
            journal_path=self._ledger("rs.jsonl"),
        )
        self.pca.register_rs("RS", self.rs_keys.public)
        self.network.register("PCA", self.pca)
        self.network.register("CP", self.cp)
        self.network.register("RS", self.rs)

    def _ledger(self, name):
        return None if self.ledger_dir is None else self.ledger_dir / name

    def _charge_via_cp(self, payer: str, amount: int, ref: str) -> Receipt:
        reply = self.network.call(
            "PCA", "CP", Segment.PCA_CP, "CHARGE", pack_fields(payer.encode(), enc_int(amount), ref.encode())
        )
        return Receipt.from_fields(reply.fields("RECEIPT", 5))

    def _charge_redemption(self, verified) -> None:
        reply = self.network.call("RS", "PCA", Segment.RS_PCA, "CHARGE_REQUEST", pack_fields(verified.aik_digest.bytes))
        reply.fields("CHARGED", 5)

    def make_agents(self, count: int, prefix: str = "TA") -> list[TrustedAgent]:
        agents = []
        for i in range(count):
            agent = TrustedAgent.manufacture(f"{prefix}{i:03d}", self.rng.child(f"{prefix}-{i}"), self.manufacturer)
            self.cp.open_account(account_ref(agent.platform_id), self.config.deposit)
            agents.append(agent)
        for i in self.config.blacklist:
            if 0 <= i < len(agents):
                self.pca.blacklist(agents[i].platform_id)
        return agents

    def scheduler(self) -> Scheduler:
        return Scheduler(self.network, self.seed, self.faults)

    def group_for(self, i: int) -> int:
        groups = self.config.groups
        return groups[i % len(groups)].group_id

    # -- shared summary pieces -------------------------------------------

    def money_totals(self, summary: Summary) -> None:
        charged = sum(t.postings[1].delta for t in self.cp.journal if t.kind == "charge")
        roles = {r: self.cp.balance(r) for r in (CP, PCA, RS)}
        summary.totals["charges"] = sum(1 for t in self.cp.journal if t.kind == "charge")
        summary.totals["charged_amount"] = charged
        for role, value in roles.items():
            summary.totals[f"balance_{role}"] = value
        summary.checks["journal_balanced"] = journal_balanced(self.cp.journal)
        summary.checks["revenue_conserved"] = sum(roles.values()) + self.cp.balance(SUSPENSE) == charged
        for name, value in self.cp.negative_balances().items():
            if name in (CP, PCA, RS):
                summary.flags.append(f"negative_balance {name}={value}")

    def rs_totals(self, summary: Summary) -> None:
        outcomes: dict[str, int] = {}
        for e in self.rs.ledger.journal:
            outcomes[e.outcome] = outcomes.get(e.outcome, 0) + 1
        summary.totals["acks"] = outcomes.pop("ACK", 0)
        summary.totals["rejects"] = sum(outcomes.values())
        for code, n in sorted(outcomes.items()):
            summary.totals[f"reject_{code}"] = n
        summary.totals["escrow_records"] = len(self.pca.escrow)
        if self.rs.charge_failures:
            summary.totals["charge_failures"] = len(self.rs.charge_failures)


# -- scenarios -------------------------------------------------------------------


def _ticket_life(agent: TrustedAgent, group_id: int, payloads, rs: str, rs_public: bytes):
    results = []
    for payload in payloads:
        entry = yield from agent.acquire_flow(group_id)
        ack = yield from agent.redeem_flow(entry, payload, rs, rs_public)
        results.append((entry, ack))
    return results


def _run_generic(world: World, summary: Summary) -> None:
    cfg = world.config
    agents = world.make_agents(cfg.agents)
    sched = world.scheduler()
    for i, agent in enumerate(agents):
        payload = f"generic request {i}".encode()
        sched.spawn(agent.name, _ticket_life(agent, world.group_for(i), [payload], "RS", world.rs_keys.public))
    for actor in sched.run():
        summary.events.append(f"{actor.name} {_code(actor.error)}")
    world.rs_totals(summary)
    world.money_totals(summary)
    if not world.faults:
        n = cfg.agents - len(set(cfg.blacklist) & set(range(cfg.agents)))
        summary.checks["all_acked"] = summary.totals["acks"] == n
        summary.checks["all_escrowed"] = summary.totals["escrow_records"] == n
        if cfg.charging != "NONE":
            summary.checks["all_charged"] = summary.totals["charges"] == n


def _run_rating(world: World, summary: Summary) -> None:
    cfg = world.config
    store = RatingService()
    world.rs.payload_check = store.check
    world.rs.on_accept = store.accept
    agents = world.make_agents(cfg.agents)
    scores = world.rng.child("scores")
    sched = world.scheduler()
    for i, agent in enumerate(agents):
        payloads = [
            encode_rating(cfg.subjects[(i + j) % len(cfg.subjects)], scores.randrange(1, 6))
            for j in range(cfg.ratings_per_agent)
        ]
        sched.spawn(agent.name, _ticket_life(agent, world.group_for(i), payloads, "RS", world.rs_keys.public))
    for actor in sched.run():
        summary.events.append(f"{actor.name} {_code(actor.error)}")
    for r in sorted(store.records(), key=lambda r: r.aik_digest):
        summary.events.append(f"rating subject={r.subject_ref} score={r.score} group={r.group_id} weight={r.weight}")
    world.rs_totals(summary)
    world.money_totals(summary)
    summary.totals["ratings"] = len(store.records())
    for subject in cfg.subjects:
        if store.by_subject.get(subject):
            summary.totals[f"aggregate_{subject}"] = store.aggregate(subject)
    platform_bytes = [a.tpm.ek_public for a in agents] + [a.platform_id for a in agents]
    stored = b"".join(r.subject_ref.encode() + r.aik_digest for r in store.records())
    summary.checks["ratings_match_acks"] = summary.totals["ratings"] == summary.totals["acks"]
    summary.checks["store_pseudonymous"] = not any(p in stored for p in platform_bytes)


def _make_devices(world: World, count: int) -> list[Device]:
    devices = []
    for agent in world.make_agents(count, prefix="DEV"):
        device = Device(agent, world.network)
        device.boot()
        world.network.register(device.name, device)
        world.network.register(device.store.party, device.store)
        devices.append(device)
    return devices


def _make_syncs(world: World) -> tuple[SyncServer, NocRelay]:
    syncs = SyncServer(world.rng.child("syncs"), world.pca.directory(), world.pca.binding_ca.public)
    world.network.register(syncs.name, syncs)
    relay = NocRelay()
    world.network.observe(Segment.NOC, relay)
    return syncs, relay


def _contents(world: World, n: int) -> list[bytes]:
    rng = world.rng.child("content")
    return [f"push message {i} {rng.bytes(8).hex()}".encode() for i in range(n)]


def _attest_then(device: Device, group_id: int, body):
    device.attestation = yield from device.agent.acquire_flow(group_id)
    return (yield from body())


def _push(world: World, summary: Summary, variant: str) -> None:
    cfg = world.config
    world.pca.charging_mode = None
    syncs, relay = _make_syncs(world)
    devices = _make_devices(world, cfg.devices)
    contents = _contents(world, cfg.messages)
    read: list[bytes] = []

    def deliveries(device: Device):
        def body():
            if variant == "bind":
                yield from device.provision_flow("PCA", syncs.name)
            for msg in contents:
                if variant == "seal":
                    index = yield from syncs.push_seal_flow(device.name, msg)
                else:
                    index = yield from syncs.push_bind_flow(device.name, msg)
                read.append(device.read_message(index))
            return len(contents)

        return _attest_then(device, world.group_for(0), body)

    sched = world.scheduler()
    for device in devices:
        sched.spawn(device.name, deliveries(device))
    for actor in sched.run():
        summary.events.append(f"{actor.name} {_code(actor.error)} delivered={actor.result or 0}")
    _push_totals(world, summary, relay, contents, read, len(devices) * len(contents), devices)
    expected_quotes = len(devices) * (len(contents) if variant == "seal" else 1)
    if not world.faults:
        summary.checks["quote_count"] = summary.totals["quotes"] == expected_quotes


def _push_totals(world, summary, relay, contents, read, expected, devices) -> None:
    t = world.network.transcript
    summary.totals["messages"] = expected
    summary.totals["delivered"] = len(read)
    summary.totals["quotes"] = t.count(kind="QUOTE")
    summary.totals["noc_envelopes"] = len(relay.seen)
    summary.totals["noc_plaintext_hits"] = sum(1 for c in contents if relay.saw(c))
    summary.checks["noc_confidential"] = summary.totals["noc_plaintext_hits"] == 0
    shown = [m for d in devices for m in d.store.delivered]
    # what the messaging app received must be exactly what was pushed
    summary.checks["read_back_intact"] = sorted(shown) == sorted(read) and all(r in contents for r in read)
    if not world.faults:
        summary.checks["all_delivered"] = len(read) == expected


def _run_push_ticketed(world: World, summary: Summary) -> None:
    cfg = world.config
    world.pca.charging_mode = None
    syncs, relay = _make_syncs(world)
    rs = ReceivingSystem(
        RsPolicy({g.group_id for g in cfg.groups}, world.rs_keys), world.pca.directory(), rs_id=syncs.name
    )
    syncs.enable_tickets(rs)
    world.pca.register_rs(syncs.name, world.rs_keys.public)
    devices = _make_devices(world, max(cfg.agents, 1))

    def admission(i: int, device: Device):
        def body():
            yield from device.provision_flow("PCA", syncs.name)
            entry = yield from device.agent.acquire_flow(world.group_for(i))
            return (yield from device.agent.redeem_flow(entry, device.ticket_payload(), syncs.name, world.rs_keys.public))

        return _attest_then(device, world.group_for(0), body)

    sched = world.scheduler()
    for i, device in enumerate(devices):
        sched.spawn(device.name, admission(i, device))
    for actor in sched.run():
        summary.events.append(f"{actor.name} {_code(actor.error)}")

    by_name = {d.name: d for d in devices}
    contents = _contents(world, len(syncs.sessions))
    read: list[bytes] = []
    served = []
    for msg in contents:
        session = syncs.next_session()
        served.append(session)
        summary.events.append(f"session {session.device} group={session.group_id} priority={-session.sort_key[0]}")
        try:
            index = drive(syncs.push_bind_flow(session.device, msg, session.binding_public), world.network)
            read.append(by_name[session.device].read_message(index))
        except Rejected as exc:
            summary.events.append(f"session {session.device} {_code(exc)}")
    summary.totals["sessions"] = len(served)
    summary.totals["acks"] = len(rs.acks())
    _push_totals(world, summary, relay, contents, read, len(served), devices)
    priorities = [s.sort_key[0] for s in served]
    summary.checks["priority_order"] = priorities == sorted(priorities)


def run_scenario(
    name: str,
    config: ScenarioConfig | None = None,
    seed: int = 0,
    fault_plan: FaultPlan | None = None,
    ledger_dir=None,
) -> tuple[Transcript, Summary]:
    if name not in SCENARIOS:
        raise BadConfig(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    config = config or ScenarioConfig()
    if fault_plan is not None:
        fault_plan.reset()
    world = World(config, seed, fault_plan, ledger_dir)
    summary = Summary(name, seed)
    if world.faults:
        summary.totals["faults"] = ";".join(world.faults.describe())
    try:
        if name == "generic":
            _run_generic(world, summary)
        elif name == "rating":
            _run_rating(world, summary)
        elif name == "push_seal":
            _push(world, summary, "seal")
        elif name == "push_bind":
            _push(world, summary, "bind")
        else:
            _run_push_ticketed(world, summary)
    finally:
        world.network.close()
    t = world.network.transcript
    summary.totals["envelopes"] = len(t)
    summary.checks["seq_monotone"] = all(e.seq == i + 1 for i, e in enumerate(t.envelopes))
    return t, summary
