"""Charging provider: double-entry accounts, idempotent charges and
revenue-share distribution.

Amounts are integer minor units. Share weights are exact fractions; the
charging provider's own share absorbs integer rounding so a distribution
always posts exactly the distributed amount.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping

from .errors import BadAgreement, InsufficientFunds, UnknownAccount
from .protocol import Service, dec_int, enc_int

CP = "CP"
PCA = "PCA"
RS = "RS"
SUSPENSE = "SUSPENSE"
EXTERNAL = "EXTERNAL"
ROLES = (CP, PCA, RS)


@dataclass(frozen=True)
class RevenueShareAgreement:
    shares: Mapping[str, Fraction]

    def __post_init__(self):
        shares = {role: Fraction(w) for role, w in self.shares.items()}
        if any(w < 0 for w in shares.values()):
            raise BadAgreement("negative share weight")
        if sum(shares.values(), Fraction(0)) != 1:
            raise BadAgreement(f"weights sum to {sum(shares.values(), Fraction(0))}, not 1")
        if CP not in shares:
            raise BadAgreement("agreement must name the charging provider")
        object.__setattr__(self, "shares", shares)

    @classmethod
    def parse(cls, spec: Mapping[str, object]) -> "RevenueShareAgreement":
        try:
            return cls({role: Fraction(str(w)) for role, w in spec.items()})
        except (ValueError, ZeroDivisionError) as exc:
            raise BadAgreement(f"unparseable weight: {exc}") from exc


DEFAULT_AGREEMENT = RevenueShareAgreement({CP: Fraction(1, 5), PCA: Fraction(3, 10), RS: Fraction(1, 2)})


def split(amount: int, agreement: RevenueShareAgreement) -> dict[str, int]:
    """Integer shares of ``amount``; non-CP roles are floored, CP takes the rest."""
    out = {}
    for role in sorted(agreement.shares):
        if role != CP:
            out[role] = math.floor(amount * agreement.shares[role])
    out[CP] = amount - sum(out.values())
    return dict(sorted(out.items()))


@dataclass(frozen=True)
class Posting:
    account: str
    delta: int


@dataclass(frozen=True)
class Transaction:
    txn_id: int
    kind: str
    ref: str
    postings: tuple[Posting, ...]
    timestamp: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "txn": self.txn_id,
                "kind": self.kind,
                "ref": self.ref,
                "ts": self.timestamp,
                "postings": [[p.account, p.delta] for p in self.postings],
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class Receipt:
    ticket_ref: str
    payer: str
    amount: int
    charge_txn: int
    settle_txn: int | None = None

    def fields(self) -> list[bytes]:
        settle = -1 if self.settle_txn is None else self.settle_txn
        return [
            self.ticket_ref.encode(),
            self.payer.encode(),
            enc_int(self.amount),
            enc_int(self.charge_txn),
            enc_int(settle),
        ]

    @classmethod
    def from_fields(cls, f: list[bytes]) -> "Receipt":
        ref, payer, amount, charge, settle = f
        s = dec_int(settle)
        return cls(ref.decode(), payer.decode(), dec_int(amount), dec_int(charge), None if s < 0 else s)


@dataclass
class Account:
    owner_ref: str
    balance: int = 0


class ChargingProvider(Service):
    party = "CP"

    def __init__(
        self,
        agreement: RevenueShareAgreement | None = DEFAULT_AGREEMENT,
        *,
        allow_negative: bool = True,
        journal_path: Path | None = None,
        clock: Callable[[], int] | None = None,
    ):
        self.agreement = agreement
        self.allow_negative = allow_negative
        self.accounts: dict[str, Account] = {}
        self.journal: list[Transaction] = []
        self.receipts: dict[str, Receipt] = {}
        self.journal_path = Path(journal_path) if journal_path else None
        self._clock = clock or (lambda: len(self.journal))
        self._lock = threading.RLock()
        for name in (*ROLES, SUSPENSE, EXTERNAL):
            self.accounts[name] = Account(name)

    def open_account(self, owner_ref: str, deposit: int = 0) -> Account:
        with self._lock:
            acct = self.accounts.setdefault(owner_ref, Account(owner_ref))
            if deposit:
                self._post("deposit", owner_ref, [Posting(EXTERNAL, -deposit), Posting(owner_ref, deposit)])
            return acct

    def balance(self, owner_ref: str) -> int:
        acct = self.accounts.get(owner_ref)
        if acct is None:
            raise UnknownAccount(owner_ref)
        return acct.balance

    def _post(self, kind: str, ref: str, postings: list[Posting]) -> Transaction:
        if sum(p.delta for p in postings) != 0:
            raise AssertionError("unbalanced transaction")
        txn = Transaction(len(self.journal) + 1, kind, ref, tuple(postings), self._clock())
        for p in postings:
            self.accounts.setdefault(p.account, Account(p.account)).balance += p.delta
        self.journal.append(txn)
        if self.journal_path is not None:
            with self.journal_path.open("a") as fh:
                fh.write(txn.to_json() + "\n")
        return txn

    def charge(self, payer: str, amount: int, ticket_ref: str) -> Receipt:
        """Debit ``payer``; a negative amount credits it (an incentive).

        Replaying a ``ticket_ref`` returns the original receipt and posts
        nothing. When an agreement is configured the charge is settled to the
        role accounts immediately.
        """
        with self._lock:
            if ticket_ref in self.receipts:
                return self.receipts[ticket_ref]
            if payer not in self.accounts or payer in (SUSPENSE, EXTERNAL):
                raise UnknownAccount(payer)
            if not self.allow_negative and amount > 0 and self.accounts[payer].balance < amount:
                raise InsufficientFunds(f"{payer} balance below {amount}")
            txn = self._post("charge", ticket_ref, [Posting(payer, -amount), Posting(SUSPENSE, amount)])
            settle = None
            if self.agreement is not None:
                settle = self._settle(amount, self.agreement, ticket_ref)
            receipt = Receipt(ticket_ref, payer, amount, txn.txn_id, settle)
            self.receipts[ticket_ref] = receipt
            return receipt

    def distribute(self, amount: int, agreement: RevenueShareAgreement, ref: str = "") -> list[Posting]:
        """Move ``amount`` out of suspense into the role accounts."""
        with self._lock:
            txn_id = self._settle(amount, agreement, ref)
            return [p for p in self.journal[txn_id - 1].postings if p.account != SUSPENSE]

    def _settle(self, amount: int, agreement: RevenueShareAgreement, ref: str) -> int:
        shares = split(amount, agreement)
        postings = [Posting(SUSPENSE, -amount)] + [Posting(role, v) for role, v in shares.items()]
        return self._post("distribute", ref, postings).txn_id

    def negative_balances(self) -> dict[str, int]:
        return {
            name: a.balance
            for name, a in sorted(self.accounts.items())
            if a.balance < 0 and name != EXTERNAL
        }

    # -- wire ---------------------------------------------------------------

    def on_charge(self, f, sender):
        payer, amount, ref = f
        return "RECEIPT", self.charge(payer.decode(), dec_int(amount), ref.decode()).fields()

    def on_balance(self, f, sender):
        (owner,) = f
        return "BALANCE", [owner, enc_int(self.balance(owner.decode()))]


def journal_balanced(journal) -> bool:
    return all(sum(p.delta for p in t.postings) == 0 for t in journal)
