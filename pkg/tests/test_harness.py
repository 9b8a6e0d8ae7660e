import hashlib
import json

import pytest

from conftest import deploy
from trusted_tickets.errors import BadConfig, BadQuery, MessageDropped
from trusted_tickets.harness.faults import FaultAction, FaultPlan, parse_rule
from trusted_tickets.harness.inspect import inspect
from trusted_tickets.harness.network import Envelope, Transcript
from trusted_tickets.harness.runner import ScenarioConfig, default_groups, parse_groups, run_scenario
from trusted_tickets.harness.scheduler import Scheduler, run_threaded
from trusted_tickets.protocol import Segment


def small(**kw):
    kw.setdefault("groups", default_groups(3))
    kw.setdefault("agents", 10)
    return ScenarioConfig(**kw)


# -- faults ----------------------------------------------------------------------


def test_parse_rule():
    r = parse_rule("tamper_bit:segment=ta_rs,kind=TICKET,limit=2")
    assert (r.action, r.segment, r.kind, r.limit) == (FaultAction.TAMPER_BIT, Segment.TA_RS, "TICKET", 2)
    assert parse_rule("delay:kind=TICKET").param == 1
    assert parse_rule(r.spec()) == r


@pytest.mark.parametrize("bad", ["explode", "drop:seq", "drop:seq=x", "drop:segment=MARS", "drop:colour=red"])
def test_parse_rule_errors(bad):
    with pytest.raises(BadConfig):
        parse_rule(bad)


def test_generic_summary_example():
    _, s = run_scenario("generic", small(), seed=1)
    assert s.ok
    assert (s.totals["acks"], s.totals["charges"], s.totals["escrow_records"]) == (10, 10, 10)
    assert s.checks["revenue_conserved"] and s.checks["journal_balanced"]


def test_tamper_every_ticket_gives_chain_rejects():
    plan = FaultPlan.parse(["tamper_bit:segment=TA_RS,kind=TICKET"], seed=5)
    transcript, s = run_scenario("generic", small(), seed=5, fault_plan=plan)
    assert s.totals["acks"] == 0
    assert s.totals["rejects"] == 10
    rejected = sum(v for k, v in s.totals.items() if k.startswith("reject_"))
    assert rejected == 10
    assert transcript.count(kind="ACK") == 0


def test_drop_loses_exactly_one_exchange():
    plan = FaultPlan.parse(["drop:kind=TICKET,limit=1"], seed=2)
    _, s = run_scenario("generic", small(agents=3), seed=2, fault_plan=plan)
    assert s.totals["acks"] == 2
    assert sum(1 for e in s.events if e.endswith(" DROPPED")) == 1


def test_replayed_ticket_is_double_spend():
    plan = FaultPlan.parse(["replay:kind=TICKET"], seed=2)
    _, s = run_scenario("generic", small(agents=4), seed=2, fault_plan=plan)
    assert s.totals["acks"] == 4
    assert s.totals["reject_ALREADY_SPENT"] == 4


def test_delay_reorders_but_completes():
    base, _ = run_scenario("generic", small(agents=4), seed=9)
    plan = FaultPlan.parse(["delay:kind=IDENTITY_REQUEST,param=5,limit=2"], seed=9)
    delayed, s = run_scenario("generic", small(agents=4), seed=9, fault_plan=plan)
    assert s.totals["acks"] == 4
    assert base.dumps() != delayed.dumps()


def test_network_drop_raises():
    w = deploy(seed=1)
    w.network.faults = FaultPlan.parse(["drop:segment=TA_PCA"], seed=1)
    (a,) = w.make_agents(1)
    with pytest.raises(MessageDropped):
        a.acquire_ticket(w.network, 1)
    with pytest.raises(BadConfig):
        w.network.call("X", "NOBODY", Segment.TA_RS, "TICKET", b"")


# -- determinism and transcripts ---------------------------------------------------


@pytest.mark.parametrize("name", ["generic", "rating", "push_seal", "push_bind", "push_ticketed"])
def test_scenarios_are_deterministic(name):
    cfg = small(agents=3, messages=3)
    plan = ["tamper_bit:segment=TA_RS,limit=1", "delay:kind=TICKET,param=2"]
    t1, s1 = run_scenario(name, cfg, seed=4, fault_plan=FaultPlan.parse(plan, seed=4))
    t2, s2 = run_scenario(name, cfg, seed=4, fault_plan=FaultPlan.parse(plan, seed=4))
    assert t1.dumps() == t2.dumps() and s1.text() == s2.text()


def test_different_seeds_differ():
    t1, _ = run_scenario("generic", small(agents=3), seed=1)
    t2, _ = run_scenario("generic", small(agents=3), seed=2)
    assert t1.dumps() != t2.dumps()


def test_frozen_transcript_digest():
    t, _ = run_scenario("generic", small(agents=2, groups=default_groups(1)), seed=42)
    digest = hashlib.sha256(t.dumps().encode()).hexdigest()
    assert digest == FROZEN_GENERIC_2_SEED_42


FROZEN_GENERIC_2_SEED_42 = "3894bea198ab9fcdaf6b76e64b380747b6bc4aaba2f880eed6c555eeb5dda1e0"


def test_transcript_roundtrip(tmp_path):
    t, _ = run_scenario("generic", small(agents=2), seed=3)
    path = tmp_path / "run.txt"
    t.write(path)
    assert Transcript.load(path).dumps() == t.dumps()
    seqs = [e.seq for e in t]
    assert seqs == list(range(1, len(seqs) + 1))
    line = t.select()[0].line()
    assert line.count("|") == 5 and Envelope.parse(line) == t.select()[0]
    with pytest.raises(BadQuery):
        Envelope.parse("1|a|b")


def test_socket_transport_matches_inproc():
    t1, s1 = run_scenario("generic", small(agents=3), seed=6)
    t2, s2 = run_scenario("generic", small(agents=3, transport="socket"), seed=6)
    assert s2.ok and t1.dumps() == t2.dumps()


def test_threaded_submitters_ack_each_ticket_once():
    w = deploy(seed=12)
    agents = w.make_agents(8)
    entries = [a.acquire_ticket(w.network, 1) for a in agents]
    flows = [a.redeem_flow(e, b"p", "RS", w.rs.public) for a, e in zip(agents, entries)]
    results = run_threaded(flows, w.network, workers=8)
    assert all(err is None for _, err in results)
    assert len(w.rs.acks()) == 8
    assert [e.seq for e in w.network.transcript] == list(range(1, len(w.network.transcript) + 1))


def test_scheduler_order_depends_on_seed():
    orders = []
    for seed in (1, 2):
        w = deploy(seed=3)
        agents = w.make_agents(4)
        sched = Scheduler(w.network, seed)
        for a in agents:
            sched.spawn(a.name, a.acquire_flow(1))
        sched.run()
        assert all(actor.ok for actor in sched.actors)
        orders.append(sched.order)
    assert orders[0] != orders[1]


# -- inspect ------------------------------------------------------------------------


def test_inspect_queries():
    t, _ = run_scenario("push_bind", small(agents=1, messages=5, groups=default_groups(1)), seed=1)
    assert inspect(t, "count kind=QUOTE").count == 1
    assert inspect(t, "count kind=BOUND_CONTENT segment=NOC").count == 5
    assert inspect(t, "search 'push message' segment=NOC").count == 0
    assert inspect(t, "search 'push message' segment=DEVICE_LOCAL").count == 5
    assert inspect(t, "search hex:7075736820 segment=DEVICE_LOCAL").count == 5
    tl = inspect(t, "timeline party=PCA")
    assert tl.count > 0 and tl.monotone
    assert tl.lines()[0] == f"timeline party=PCA: {tl.count}"


@pytest.mark.parametrize("bad", ["", "frobnicate", "count colour=red", "search", "timeline", "search hex:zz", "count 'open"])
def test_inspect_bad_queries(bad):
    with pytest.raises(BadQuery):
        inspect(Transcript(), bad)


# -- configuration ------------------------------------------------------------------


def test_parse_groups():
    (g,) = parse_groups("7:25:impact_factor=2;priority=3")
    assert (g.group_id, g.price, g.attributes) == (7, 25, {"impact_factor": "2", "priority": "3"})
    assert [x.group_id for x in parse_groups("3")] == [1, 2, 3]
    for bad in ("0", "x", "1:5:novalue", "1:x"):
        with pytest.raises(BadConfig):
            parse_groups(bad)
    for bad in ("1:-5", "1:5,1:6"):
        with pytest.raises(BadConfig):
            ScenarioConfig(groups=parse_groups(bad))


@pytest.mark.parametrize(
    "kw",
    [{"agents": -1}, {"groups": []}, {"charging": "LATER"}, {"transport": "pigeon"},
     {"agreement": {"CP": "0.5"}}, {"schedule": {"kind": "FLAT"}}, {"messages": -1}, {"devices": 0}],
)
def test_bad_config(kw):
    with pytest.raises(BadConfig):
        small(**kw)


def test_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"agents": 4, "groups": "2", "schedule": {"kind": "FLAT", "base": 5}}))
    cfg = ScenarioConfig.from_file(path)
    assert cfg.agents == 4 and len(cfg.groups) == 2
    path.write_text(json.dumps({"agnets": 4}))
    with pytest.raises(BadConfig):
        ScenarioConfig.from_file(path)
    path.write_text("{not json")
    with pytest.raises(BadConfig):
        ScenarioConfig.from_file(path)
    with pytest.raises(BadConfig):
        run_scenario("nope", small(), seed=0)
