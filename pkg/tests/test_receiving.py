import threading

import pytest

import oracles
from conftest import deploy, redeem_many
from trusted_tickets.credentials import verify_ack
from trusted_tickets.crypto import hash_bytes
from trusted_tickets.errors import AlreadySpent, ChainReject, GroupNotAccepted, MalformedEncoding, UnknownTicket
from trusted_tickets.receiving import RsPolicy, verify_token


def fresh_ticket(world, gid=1, payload=b"p"):
    (agent,) = world.make_agents(1, prefix=f"T{len(world.pca.escrow)}-")
    entry = agent.acquire_ticket(world.network, gid)
    return agent, entry, agent.build_ticket(entry, payload).encode()


def test_fresh_ticket_acked_then_already_spent(world):
    _, entry, ticket = fresh_ticket(world)
    ack = world.rs.redeem(ticket)
    assert verify_ack(ack, world.rs.public, b"p", entry.aik_digest)
    assert oracles.ack_ok(ack.encode(), world.rs.public, b"p", entry.aik_public)
    with pytest.raises(AlreadySpent):
        world.rs.redeem(ticket)
    assert [e.outcome for e in world.rs.ledger.journal] == ["ACK", "ALREADY_SPENT"]


def test_second_ticket_from_same_aik_is_a_double_spend(world):
    agent, entry, ticket = fresh_ticket(world)
    world.rs.redeem(ticket)
    other_payload = agent.build_ticket(entry, b"different payload").encode()
    with pytest.raises(AlreadySpent):
        world.rs.redeem(other_payload)


def test_group_not_accepted_is_journaled(world):
    world.rs.configure(RsPolicy({1, 2}, world.rs_keys))
    _, entry, ticket = fresh_ticket(world, gid=3)
    with pytest.raises(GroupNotAccepted):
        world.rs.redeem(ticket)
    (e,) = world.rs.ledger.journal
    assert e.outcome == "GROUP_NOT_ACCEPTED" and e.group_id == 3
    assert e.aik_digest == entry.aik_digest.hex()
    assert not world.rs.ledger.seen(hash_bytes(b"nope"))


def test_malformed_and_chain_rejects_journaled(world):
    _, _, ticket = fresh_ticket(world)
    with pytest.raises(MalformedEncoding):
        world.rs.redeem(ticket[:-3])
    tampered = bytearray(ticket)
    tampered[-1] ^= 1  # last byte of the group credential signature
    with pytest.raises(ChainReject) as exc:
        world.rs.redeem(bytes(tampered))
    assert exc.value.reason.value == "BadGroupCredential"
    assert [e.outcome for e in world.rs.ledger.journal] == ["MALFORMED", "CHAIN_REJECT:BadGroupCredential"]


def test_report_misbehaviour_token(world):
    (r,) = redeem_many(world, 1)
    token = world.rs.report_misbehaviour(r.entry.aik_digest, "abuse")
    assert verify_token(token, world.rs.public)
    assert world.pca.resolve_identity(r.entry.aik_digest, token) == r.agent.platform_id
    with pytest.raises(UnknownTicket):
        world.rs.report_misbehaviour(hash_bytes(b"never seen"), "abuse")


def test_concurrent_duplicates_ack_once(world):
    tickets = [fresh_ticket(world, payload=b"x")[2] for _ in range(5)]
    results = []
    lock = threading.Lock()

    def submit(t):
        try:
            world.rs.redeem(t)
            out = "ACK"
        except AlreadySpent:
            out = "SPENT"
        with lock:
            results.append(out)

    threads = [threading.Thread(target=submit, args=(t,)) for t in tickets * 8]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert results.count("ACK") == 5 and results.count("SPENT") == 35
    assert len(world.rs.ledger.journal) == 40


def test_policy_swap_never_mixes_policies(world):
    """Flip accepted groups concurrently; each journal entry must be consistent
    with the policy version it was evaluated under."""
    tickets = [fresh_ticket(world, gid=1 + i % 2)[2] for i in range(40)]
    policies = [RsPolicy({1}, world.rs_keys, version=1), RsPolicy({2}, world.rs_keys, version=2)]
    stop = threading.Event()

    def flipper():
        i = 0
        while not stop.is_set():
            world.rs.configure(policies[i % 2])
            i += 1

    th = threading.Thread(target=flipper)
    th.start()
    try:
        for t in tickets:
            try:
                world.rs.redeem(t)
            except GroupNotAccepted:
                pass
    finally:
        stop.set()
        th.join()
    for e in world.rs.ledger.journal:
        if e.policy_version == 0:
            continue
        accepted = {1: {1}, 2: {2}}[e.policy_version]
        assert (e.outcome == "ACK") == (e.group_id in accepted)


def test_journal_file_one_line_per_attempt(tmp_path):
    w = deploy(seed=8)
    w.rs.journal_path = tmp_path / "rs.jsonl"
    _, _, t = fresh_ticket(w)
    w.rs.redeem(t)
    with pytest.raises(AlreadySpent):
        w.rs.redeem(t)
    assert len((tmp_path / "rs.jsonl").read_text().splitlines()) == 2
