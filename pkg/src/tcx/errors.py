"""Exception hierarchy and the accept/reject verdict type shared by verifiers."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional


class TcxError(Exception):
    """Base class for every error raised by this package."""

    code = "Error"


class WireError(TcxError):
    code = "Malformed"


# -- mock TEE --------------------------------------------------------------


class InvalidBootPayload(TcxError):
    code = "InvalidBootPayload"


class NoSuchVm(TcxError):
    code = "NoSuchVm"


class DecryptFailure(TcxError):
    code = "DecryptFailure"


# -- PKI -------------------------------------------------------------------


class RoleViolation(TcxError):
    code = "RoleViolation"


class InvalidLifetime(TcxError):
    code = "InvalidLifetime"


class InvalidValidList(TcxError):
    code = "InvalidValidList"


# -- images / boot ---------------------------------------------------------


class IntegrityFailure(TcxError):
    """A block (or the header when ``block`` is None) failed authentication."""

    code = "IntegrityFailure"

    def __init__(self, block: Optional[int], message: str = ""):
        self.block = block
        where = "header" if block is None else f"block {block}"
        super().__init__(message or f"integrity check failed at {where}")


class WrongKey(IntegrityFailure):
    """The image key does not belong to this image.

    Subclass of IntegrityFailure: to a consumer that only asks "did the image
    authenticate", a wrong key and a tampered image are the same outcome.
    """

    code = "WrongKey"

    def __init__(self, message: str = "image key does not match this image"):
        super().__init__(None, message)


class IndexOutOfRange(TcxError):
    code = "IndexOutOfRange"


class ImageFormatError(WireError):
    code = "ImageFormatError"


class BootRejected(TcxError):
    """Measured boot refused to continue; ``stage`` names the failing check."""

    code = "BootRejected"

    def __init__(self, stage: str):
        self.stage = stage
        super().__init__(stage)


# -- transport / channel ---------------------------------------------------


class StreamClosed(TcxError):
    code = "StreamClosed"


class HandshakeFailure(TcxError):
    code = "HandshakeFailure"


class OwnerMismatch(HandshakeFailure):
    code = "OwnerMismatch"


class OwnerRejected(HandshakeFailure):
    code = "OwnerRejected"


class CertificateRejected(HandshakeFailure):
    """The peer's certificate failed chain or role verification."""

    code = "CertificateRejected"

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {message}" if message else reason)


class ChannelAborted(TcxError):
    """A record failed authentication or arrived out of order; the channel is dead."""

    code = "ChannelAborted"


class ReplayedRecord(TcxError):
    code = "ReplayedRecord"


class ChannelClosed(TcxError):
    code = "ChannelClosed"


class ChannelDown(TcxError):
    code = "ChannelDown"


# -- control plane ---------------------------------------------------------


class AttestationFailed(TcxError):
    code = "AttestationFailed"

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {message}" if message else reason)


class LaunchFailed(TcxError):
    code = "LaunchFailed"


class InvalidOwnerCert(TcxError):
    code = "InvalidOwnerCert"


class UnknownDestination(TcxError):
    code = "UnknownDestination"


class UnknownImage(TcxError):
    code = "UnknownImage"


class NameTaken(TcxError):
    code = "NameTaken"


class UnknownName(TcxError):
    code = "UnknownName"


class UnauthenticatedRegistration(TcxError):
    code = "UnauthenticatedRegistration"


class NotProvisioned(TcxError):
    code = "NotProvisioned"


class RootVmNotValid(TcxError):
    code = "RootVmNotValid"


# -- agent -----------------------------------------------------------------


class WrongPhase(TcxError):
    code = "WrongPhase"


class ReplayedCommand(TcxError):
    code = "ReplayedCommand"


class WorkloadError(TcxError):
    code = "WorkloadError"


class LivenessError(TcxError):
    code = "LivenessError"


def _all_error_classes(cls=TcxError):
    yield cls
    for sub in cls.__subclasses__():
        yield from _all_error_classes(sub)


_STRUCTURED = (IntegrityFailure, WrongKey, BootRejected, AttestationFailed, CertificateRejected)


def error_from_code(code: str, message: str = "") -> TcxError:
    """Rebuild a local exception from an error code received on the wire."""
    for cls in _all_error_classes():
        if cls.code == code and cls not in _STRUCTURED:
            return cls(message)
    if code == "WrongKey":
        return WrongKey(message or "image key does not match this image")
    if code == "IntegrityFailure":
        return IntegrityFailure(None, message)
    if code in ("AttestationFailed", "CertificateRejected"):
        reason, _, rest = message.partition(":")
        cls = AttestationFailed if code == "AttestationFailed" else CertificateRejected
        return cls(reason.strip() or "unknown", rest.strip())
    if code == "BootRejected":
        return BootRejected(message)
    return TcxError(f"{code}: {message}")


class Reason(str, enum.Enum):
    BAD_SIGNATURE = "BadSignature"
    WRONG_MEASUREMENT = "WrongMeasurement"
    STALE_NONCE = "StaleNonce"
    EXPIRED = "Expired"
    WRONG_ROLE = "WrongRole"
    UNTRUSTED_ROOT = "UntrustedRoot"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Optional[Reason] = None

    def __bool__(self) -> bool:
        return self.accepted

    def __str__(self) -> str:
        return "accept" if self.accepted else f"reject({self.reason.value})"


ACCEPT = Verdict(True)


def reject(reason: Reason) -> Verdict:
    return Verdict(False, reason)
