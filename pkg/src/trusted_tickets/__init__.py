"""Pseudonymous, pre-paid tickets built from TPM group credentials.

A trusted agent obtains an attestation identity key certified by a privacy CA
for a price/value *group*, then redeems it once at a receiving system by
signing a payload with a freshly certified signing key. The privacy CA holds
the only link from a ticket back to a platform.
"""

from .agent import HeldTicket, TrustedAgent
from .charging import ChargingProvider, RevenueShareAgreement
from .credentials import Credential, Ticket, verify_ticket_chain
from .pca import PrivacyCA
from .receiving import ReceivingSystem, RsPolicy
from .tpm import Tpm, create_tpm

__version__ = "0.1.0"

__all__ = [
    "ChargingProvider",
    "Credential",
    "HeldTicket",
    "PrivacyCA",
    "ReceivingSystem",
    "RevenueShareAgreement",
    "RsPolicy",
    "Ticket",
    "Tpm",
    "TrustedAgent",
    "create_tpm",
    "verify_ticket_chain",
]
