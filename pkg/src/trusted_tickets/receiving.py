"""Receiving system: ticket redemption with single-use enforcement.

Every ``redeem`` call is evaluated against one policy snapshot and produces
exactly one journal entry. The spend key is the digest of the ticket's AIK;
it is marked spent before the acknowledgement is signed.
"""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from . import crypto
from .credentials import Credential, VerifiedTicket, decode_ticket, make_ack, verify_ticket_chain
from .crypto import Digest, KeyPair, hash_bytes
from .errors import AlreadySpent, ChainReject, GroupNotAccepted, Rejected, Revoked, UnknownTicket
from .pca import ResolutionToken, resolution_message, sign_resolution
from .protocol import Service


@dataclass(frozen=True)
class RsPolicy:
    accepted_groups: frozenset[int]
    rs_keypair: KeyPair
    check_revocation: bool = False
    version: int = 0

    def __post_init__(self):
        object.__setattr__(self, "accepted_groups", frozenset(self.accepted_groups))


@dataclass(frozen=True)
class JournalEntry:
    aik_digest: str
    payload_digest: str
    group_id: int
    timestamp: int
    outcome: str
    policy_version: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class SpendLedger:
    spent: set[bytes] = field(default_factory=set)
    journal: list[JournalEntry] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    def try_spend(self, aik_digest: Digest) -> bool:
        """Atomic test-and-set; True if this call spent the ticket."""
        with self._lock:
            if aik_digest.bytes in self.spent:
                return False
            self.spent.add(aik_digest.bytes)
            return True

    def append(self, entry: JournalEntry) -> None:
        with self._lock:
            self.journal.append(entry)

    def seen(self, aik_digest: Digest) -> bool:
        hexd = aik_digest.hex()
        return any(e.aik_digest == hexd for e in self.journal)


class ReceivingSystem(Service):
    party = "RS"

    def __init__(
        self,
        policy: RsPolicy,
        group_keys: Mapping[int, bytes],
        *,
        rs_id: str = "RS",
        revocations: Callable[[], set[int] | tuple[int, ...]] | None = None,
        charge_hook: Callable[[VerifiedTicket], object] | None = None,
        payload_check: Callable[[VerifiedTicket], None] | None = None,
        on_accept: Callable[[VerifiedTicket, Credential], None] | None = None,
        journal_path: Path | None = None,
        clock: Callable[[], int] | None = None,
    ):
        self.rs_id = rs_id
        self.party = rs_id
        self._policy = policy
        self._policy_lock = threading.Lock()
        self.group_keys = dict(group_keys)
        self.revocations = revocations
        self.charge_hook = charge_hook
        self.payload_check = payload_check
        self.on_accept = on_accept
        self.ledger = SpendLedger()
        self.journal_path = Path(journal_path) if journal_path else None
        self.charge_failures: list[str] = []
        self._ticks = itertools.count(1)
        self._clock = clock or (lambda: next(self._ticks))

    @property
    def policy(self) -> RsPolicy:
        return self._policy

    @property
    def public(self) -> bytes:
        return self._policy.rs_keypair.public

    def configure(self, policy: RsPolicy) -> RsPolicy:
        with self._policy_lock:
            self._policy = policy
        return policy

    def redeem(self, ticket_bytes: bytes) -> Credential:
        policy = self._policy  # one snapshot for the whole evaluation
        aik_hex = payload_hex = ""
        group_id = -1
        outcome = "error"
        try:
            ticket = decode_ticket(ticket_bytes)
            group_id = ticket.group_id
            payload_hex = hash_bytes(ticket.payload).hex()
            verified = verify_ticket_chain(ticket, self.group_keys)
            aik_hex = verified.aik_digest.hex()
            if verified.group_id not in policy.accepted_groups:
                raise GroupNotAccepted(f"group {verified.group_id} not accepted")
            if policy.check_revocation and self.revocations is not None:
                if verified.serial in set(self.revocations()):
                    raise Revoked(f"credential serial {verified.serial} revoked")
            if self.payload_check is not None:
                self.payload_check(verified)
            if not self.ledger.try_spend(verified.aik_digest):
                raise AlreadySpent("ticket already redeemed")
            ack = make_ack(policy.rs_keypair, verified.payload, verified.aik_digest)
            outcome = "ACK"
        except ChainReject as exc:
            outcome = f"{exc.code}:{exc.reason.value}"
            raise
        except Rejected as exc:
            outcome = exc.code
            raise
        finally:
            entry = JournalEntry(aik_hex, payload_hex, group_id, self._clock(), outcome, policy.version)
            self.ledger.append(entry)
            if self.journal_path is not None:
                with self.journal_path.open("a") as fh:
                    fh.write(entry.to_json() + "\n")

        if self.charge_hook is not None:
            try:
                self.charge_hook(verified)
            except Rejected as exc:
                self.charge_failures.append(f"{aik_hex}:{exc.code}")
        if self.on_accept is not None:
            self.on_accept(verified, ack)
        return ack

    def report_misbehaviour(self, aik_digest: Digest, reason: str) -> ResolutionToken:
        if not self.ledger.seen(aik_digest):
            raise UnknownTicket("no redemption attempt with this AIK")
        return sign_resolution(self.rs_id, self._policy.rs_keypair, aik_digest, reason)

    def acks(self) -> list[JournalEntry]:
        return [e for e in self.ledger.journal if e.outcome == "ACK"]

    # -- wire ---------------------------------------------------------------

    def on_ticket(self, f, sender):
        (ticket_bytes,) = f
        return "ACK", [self.redeem(ticket_bytes).encode()]


def verify_token(token: ResolutionToken, rs_public: bytes) -> bool:
    return crypto.verify(rs_public, token.signature, resolution_message(token.aik_digest, token.reason))
