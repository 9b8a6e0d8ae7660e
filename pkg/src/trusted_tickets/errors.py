"""Protocol-level rejections.

Every refusal a service can send over the wire is a :class:`Rejected`
subclass with a stable ``code``. The transport turns a raised rejection into a
REJECT message and the receiving side re-raises the same class.
"""

from __future__ import annotations

REGISTRY: dict[str, type["Rejected"]] = {}


class Rejected(Exception):
    code = "REJECTED"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if "code" in cls.__dict__:
            REGISTRY[cls.code] = cls

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.code)
        self.detail = detail


REGISTRY[Rejected.code] = Rejected


def from_wire(code: str, detail: str) -> Rejected:
    cls = REGISTRY.get(code, Rejected)
    if cls is ChainReject:
        return ChainReject(detail)
    exc = cls(detail)
    if cls is Rejected:
        exc.detail = f"{code}: {detail}"
    return exc


class MalformedEncoding(Rejected):
    code = "MALFORMED"


class ChainReject(Rejected):
    """A ticket's credential chain failed; ``reason`` names the first bad link."""

    code = "CHAIN_REJECT"

    def __init__(self, reason):
        from .credentials import RejectReason

        self.reason = RejectReason(reason)
        super().__init__(self.reason.value)


# receiving system
class GroupNotAccepted(Rejected):
    code = "GROUP_NOT_ACCEPTED"


class Revoked(Rejected):
    code = "REVOKED"


class AlreadySpent(Rejected):
    code = "ALREADY_SPENT"


class UnknownTicket(Rejected):
    code = "UNKNOWN_TICKET"


# privacy CA
class UnknownGroup(Rejected):
    code = "UNKNOWN_GROUP"


class DuplicateGroup(Rejected):
    code = "DUPLICATE_GROUP"


class BadPlatformCredential(Rejected):
    code = "BAD_PLATFORM_CREDENTIAL"


class BadAikBinding(Rejected):
    code = "BAD_AIK_BINDING"


class Blacklisted(Rejected):
    code = "BLACKLISTED"


class AuthorisationDenied(Rejected):
    code = "AUTHORISATION_DENIED"


class Refused(Rejected):
    code = "REFUSED"


class UnknownEscrow(Rejected):
    code = "UNKNOWN_ESCROW"


class BadQuote(Rejected):
    code = "BAD_QUOTE"


class StaleNonce(Rejected):
    code = "STALE_NONCE"


class CompositeMismatch(Rejected):
    code = "COMPOSITE_MISMATCH"


class UnknownAik(Rejected):
    code = "UNKNOWN_AIK"


class BadBindingCredential(Rejected):
    code = "BAD_BINDING_CREDENTIAL"


# charging provider
class ChargeRefused(Rejected):
    code = "CHARGE_REFUSED"


class UnknownAccount(ChargeRefused):
    code = "UNKNOWN_ACCOUNT"


class InsufficientFunds(ChargeRefused):
    code = "INSUFFICIENT_FUNDS"


class BadAgreement(Rejected):
    code = "BAD_AGREEMENT"


# trusted agent
class AlreadySpentLocally(Rejected):
    code = "ALREADY_SPENT_LOCALLY"


class BadAck(Rejected):
    code = "BAD_ACK"


class ActivationFailure(Rejected):
    code = "ACTIVATION_FAILURE"


# scenarios
class BadSchedule(Rejected):
    code = "BAD_SCHEDULE"


class NoRatings(Rejected):
    code = "NO_RATINGS"


class DeliveryAborted(Rejected):
    code = "DELIVERY_ABORTED"


# harness
class MessageDropped(Rejected):
    code = "DROPPED"


class BadConfig(Rejected):
    code = "BAD_CONFIG"


class BadQuery(Rejected):
    code = "BAD_QUERY"
