"""Software stand-in for the platform security processor.

The platform owns a vendor-endorsed signing key (CEK) and a Diffie-Hellman
share (PDH). It measures each VM's boot payload, signs attestation reports
over (measurement, verifier nonce, platform identity), and accepts secrets
encrypted to its PDH, re-sealing them under a per-VM key before the guest
sees them. Memory encryption itself is not simulated.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

from . import crypto
from .crypto import Entropy
from .errors import (
    ACCEPT,
    DecryptFailure,
    InvalidBootPayload,
    NoSuchVm,
    Reason,
    Verdict,
    reject,
)
from .wire import decode_fields, encode_fields, expect_len

logger = logging.getLogger(__name__)

TRANSPORT_LABEL = b"tcx-transport-v1"
SEAL_LABEL = b"tcx-seal-v1"

_ENDORSE_CTX = b"tcx-vendor-endorsement-v1"
_REPORT_CTX = b"tcx-attestation-report-v1"
_INJECT_AAD = b"tcx-inject-v1"

NONCE_SIZE = 16
VM_ID_SIZE = 16
PLATFORM_ID_SIZE = 16


@dataclass(frozen=True)
class VendorRoot:
    """Simulated silicon vendor: endorses each platform's CEK."""

    key: object = field(repr=False)

    @classmethod
    def generate(cls, seed: crypto.SeedLike = None) -> "VendorRoot":
        return cls(crypto.signing_key(Entropy(seed).child("vendor-root")))

    @classmethod
    def default(cls) -> "VendorRoot":
        return cls.generate(b"tcx simulated vendor root")

    @property
    def public_key(self) -> bytes:
        return crypto.public_bytes(self.key)

    def endorse(self, platform_id: bytes, cek_public: bytes) -> bytes:
        return crypto.sign(self.key, _ENDORSE_CTX, encode_fields(platform_id, cek_public))


@dataclass(frozen=True)
class PlatformIdentity:
    cek_key: object = field(repr=False)
    pdh_key: object = field(repr=False)
    platform_id: bytes
    vendor_signature: bytes

    @property
    def cek_public(self) -> bytes:
        return crypto.public_bytes(self.cek_key)

    @property
    def pdh_public(self) -> bytes:
        return crypto.public_bytes(self.pdh_key)

    def public_bytes(self) -> bytes:
        return encode_fields(self.platform_id, self.cek_public, self.pdh_public, self.vendor_signature)

    def endorsement_valid(self, vendor_root: bytes) -> bool:
        return crypto.verify(
            vendor_root, self.vendor_signature, _ENDORSE_CTX, encode_fields(self.platform_id, self.cek_public)
        )


def create_platform(seed: crypto.SeedLike = None, vendor: Optional[VendorRoot] = None) -> PlatformIdentity:
    """Manufacture a platform identity. Deterministic for a given seed and vendor."""
    vendor = vendor or VendorRoot.default()
    ent = Entropy(seed)
    cek = crypto.signing_key(ent.child("cek"))
    pdh = crypto.dh_key(ent.child("pdh"))
    platform_id = ent.child("platform-id").bytes(PLATFORM_ID_SIZE)
    sig = vendor.endorse(platform_id, crypto.public_bytes(cek))
    return PlatformIdentity(cek, pdh, platform_id, sig)


@dataclass(frozen=True)
class LaunchMeasurement:
    digest: bytes
    vm_id: bytes

    def to_bytes(self) -> bytes:
        return encode_fields(self.digest, self.vm_id)

    @classmethod
    def from_bytes(cls, data: bytes) -> "LaunchMeasurement":
        digest, vm_id = decode_fields(data, 2)
        return cls(expect_len(digest, 32, "digest"), expect_len(vm_id, VM_ID_SIZE, "vm_id"))


@dataclass(frozen=True)
class SealingKey:
    vm_id: bytes
    key: bytes = field(repr=False)


@dataclass(frozen=True)
class AttestationReport:
    """Signed statement binding a launch measurement to a platform and a nonce.

    ``cek_public`` and ``vendor_signature`` carry the platform endorsement so a
    verifier needs nothing but the vendor root key.
    """

    measurement: LaunchMeasurement
    nonce: bytes
    platform_id: bytes
    pdh_public: bytes
    cek_public: bytes
    vendor_signature: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return encode_fields(
            self.measurement.to_bytes(),
            self.nonce,
            self.platform_id,
            self.pdh_public,
            self.cek_public,
            self.vendor_signature,
        )

    def to_bytes(self) -> bytes:
        return encode_fields(self.signed_bytes(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationReport":
        signed, signature = decode_fields(data, 2)
        m, nonce, pid, pdh, cek, vsig = decode_fields(signed, 6)
        return cls(
            LaunchMeasurement.from_bytes(m),
            expect_len(nonce, NONCE_SIZE, "nonce"),
            expect_len(pid, PLATFORM_ID_SIZE, "platform_id"),
            expect_len(pdh, 32, "pdh_public"),
            expect_len(cek, 32, "cek_public"),
            vsig,
            signature,
        )


@dataclass(frozen=True)
class TransportContext:
    shared_secret: bytes = field(repr=False)
    transport_key: bytes = field(repr=False)

    @classmethod
    def derive(cls, private, peer_public: bytes) -> "TransportContext":
        shared = crypto.dh(private, peer_public)
        return cls(shared, crypto.hkdf(shared, TRANSPORT_LABEL))


@dataclass(frozen=True)
class SealedInjection:
    sender_public: bytes
    platform_id: bytes
    vm_id: bytes
    nonce: bytes
    ciphertext: bytes

    def aad(self) -> bytes:
        return encode_fields(_INJECT_AAD, self.platform_id, self.vm_id, self.sender_public)

    def to_bytes(self) -> bytes:
        return encode_fields(self.sender_public, self.platform_id, self.vm_id, self.nonce, self.ciphertext)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedInjection":
        sender, pid, vm_id, nonce, ct = decode_fields(data, 5)
        return cls(
            expect_len(sender, 32, "sender_public"),
            expect_len(pid, PLATFORM_ID_SIZE, "platform_id"),
            expect_len(vm_id, VM_ID_SIZE, "vm_id"),
            expect_len(nonce, crypto.AEAD_NONCE, "nonce"),
            ct,
        )


def verify_report(
    report: AttestationReport,
    expected_measurement: bytes,
    nonce: bytes,
    vendor_root: bytes,
) -> Verdict:
    """Check endorsement, report signature, freshness and measurement, in that order.

    Never raises.
    """
    try:
        endorsed = crypto.verify(
            vendor_root,
            report.vendor_signature,
            _ENDORSE_CTX,
            encode_fields(report.platform_id, report.cek_public),
        )
        if not endorsed or not crypto.verify(report.cek_public, report.signature, _REPORT_CTX, report.signed_bytes()):
            return reject(Reason.BAD_SIGNATURE)
        if not crypto.ct_equal(report.nonce, nonce):
            return reject(Reason.STALE_NONCE)
        if not crypto.ct_equal(report.measurement.digest, expected_measurement):
            return reject(Reason.WRONG_MEASUREMENT)
    except Exception:  # malformed fields of any kind are a signature failure
        logger.debug("report verification raised", exc_info=True)
        return reject(Reason.BAD_SIGNATURE)
    return ACCEPT


def inject_secret(
    report: AttestationReport,
    plaintext: bytes,
    sender_dh,
    entropy: Optional[Entropy] = None,
) -> SealedInjection:
    """Encrypt ``plaintext`` so only the attested platform can deliver it to the attested VM."""
    entropy = entropy or Entropy()
    ctx = TransportContext.derive(sender_dh, report.pdh_public)
    draft = SealedInjection(
        crypto.public_bytes(sender_dh),
        report.platform_id,
        report.measurement.vm_id,
        entropy.bytes(crypto.AEAD_NONCE),
        b"",
    )
    ct = crypto.aead_seal(ctx.transport_key, draft.nonce, plaintext, draft.aad())
    return SealedInjection(draft.sender_public, draft.platform_id, draft.vm_id, draft.nonce, ct)


class VmContext:
    """What a guest can see of its own TEE state: its id, its measurement, and unsealing.

    The sealing key lives only here; the platform hands this object to the
    guest program and nothing else keeps a reference to the key.
    """

    def __init__(self, vm_id: bytes, measurement: LaunchMeasurement, sealing_key: SealingKey):
        self.vm_id = vm_id
        self.measurement = measurement
        self._sealing_key = sealing_key
        self._secret_handler: Optional[Callable[[bytes], None]] = None

    @property
    def vm_name(self) -> str:
        return self.vm_id.hex()

    def on_secret(self, handler: Callable[[bytes], None]) -> None:
        self._secret_handler = handler

    def unseal(self, blob: bytes) -> bytes:
        return _unseal(self._sealing_key, blob)

    def _deliver(self, blob: bytes) -> None:
        plaintext = self.unseal(blob)
        if self._secret_handler is not None:
            self._secret_handler(plaintext)


def _seal_key(sk: SealingKey) -> bytes:
    return crypto.hkdf(sk.key, SEAL_LABEL)


def _seal(sk: SealingKey, nonce: bytes, plaintext: bytes) -> bytes:
    return nonce + crypto.aead_seal(_seal_key(sk), nonce, plaintext, sk.vm_id)


def _unseal(sk: SealingKey, blob: bytes) -> bytes:
    if len(blob) < crypto.AEAD_NONCE:
        raise DecryptFailure("sealed blob too short")
    return crypto.aead_open(_seal_key(sk), blob[: crypto.AEAD_NONCE], blob[crypto.AEAD_NONCE :], sk.vm_id)


@dataclass
class _VmRecord:
    measurement: LaunchMeasurement
    sealing_key: SealingKey
    context: Optional[VmContext] = None


class Platform:
    """A running security processor. Thread-safe."""

    def __init__(self, identity: PlatformIdentity, entropy: Optional[Entropy] = None):
        self.identity = identity
        self._entropy = entropy or Entropy()
        self._vms: Dict[bytes, _VmRecord] = {}
        self._lock = threading.RLock()

    @property
    def platform_id(self) -> bytes:
        return self.identity.platform_id

    def launch_vm(self, boot_payload: bytes) -> Tuple[bytes, LaunchMeasurement, SealingKey]:
        if not boot_payload:
            raise InvalidBootPayload("boot payload is empty")
        with self._lock:
            vm_id = self._entropy.bytes(VM_ID_SIZE)
            while vm_id in self._vms:
                vm_id = self._entropy.bytes(VM_ID_SIZE)
            measurement = LaunchMeasurement(crypto.sha256(boot_payload), vm_id)
            sk = SealingKey(vm_id, self._entropy.bytes(32))
            self._vms[vm_id] = _VmRecord(measurement, sk)
        logger.debug("launched vm %s measurement %s", vm_id.hex(), measurement.digest.hex())
        return vm_id, measurement, sk

    def launch_guest(self, boot_payload: bytes) -> VmContext:
        """Launch a VM and return the guest-side context holding its sealing key."""
        vm_id, measurement, sk = self.launch_vm(boot_payload)
        ctx = VmContext(vm_id, measurement, sk)
        with self._lock:
            self._vms[vm_id].context = ctx
        return ctx

    def _record(self, vm_id: bytes) -> _VmRecord:
        with self._lock:
            rec = self._vms.get(bytes(vm_id))
        if rec is None:
            raise NoSuchVm(f"no VM {bytes(vm_id).hex()} on this platform")
        return rec

    def attest(self, vm_id: bytes, nonce: bytes) -> AttestationReport:
        rec = self._record(vm_id)
        expect_len(nonce, NONCE_SIZE, "nonce")
        ident = self.identity
        draft = AttestationReport(
            rec.measurement, bytes(nonce), ident.platform_id, ident.pdh_public,
            ident.cek_public, ident.vendor_signature, b"",
        )
        sig = crypto.sign(ident.cek_key, _REPORT_CTX, draft.signed_bytes())
        return AttestationReport(
            draft.measurement, draft.nonce, draft.platform_id, draft.pdh_public,
            draft.cek_public, draft.vendor_signature, sig,
        )

    def _unwrap_and_reseal(self, vm_id: bytes, sealed: SealedInjection) -> bytes:
        rec = self._record(vm_id)
        # AAD is rebuilt from *this* platform and the *requested* VM, so an
        # injection aimed anywhere else fails authentication here.
        aad = encode_fields(_INJECT_AAD, self.platform_id, rec.sealing_key.vm_id, sealed.sender_public)
        ctx = TransportContext.derive(self.identity.pdh_key, sealed.sender_public)
        plaintext = crypto.aead_open(ctx.transport_key, sealed.nonce, sealed.ciphertext, aad)
        return _seal(rec.sealing_key, self._entropy.bytes(crypto.AEAD_NONCE), plaintext)

    def receive_secret(self, vm_id: bytes, sealed: SealedInjection) -> bytes:
        rec = self._record(vm_id)
        return _unseal(rec.sealing_key, self._unwrap_and_reseal(vm_id, sealed))

    def deliver(self, vm_id: bytes, sealed: SealedInjection) -> None:
        """Hand an injected secret to the running guest for ``vm_id``."""
        rec = self._record(vm_id)
        blob = self._unwrap_and_reseal(vm_id, sealed)
        if rec.context is None:
            raise NoSuchVm(f"VM {bytes(vm_id).hex()} has no running guest")
        rec.context._deliver(blob)
