"""Certificate hierarchy encoding system roles, plus allow-list revocation.

Certificates use a small canonical binary format instead of X.509. Each
certificate carries its issuer chain up to the Root CA; its fingerprint is
SHA-256 over the signed body (chain excluded), so attaching or re-encoding
the chain never changes a certificate's identity.

Issuance is constrained by role::

    RootCA        -> DeployCA, RootVmCA, OwnerCA
    DeployCA      -> DeploySystem, HostSystem
    RootVmCA      -> RootVm            (one CA per Root VM instance)
    RootVm        -> ScVm
    OwnerCA       -> ContainerOwner

The same table is enforced again at verification time, so a chain that was
hand-built around :func:`issue_certificate` still fails.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

from . import crypto
from .crypto import Entropy
from .errors import (
    ACCEPT,
    InvalidLifetime,
    Reason,
    RoleViolation,
    Verdict,
    WireError,
    reject,
)
from .wire import (
    decode_fields,
    encode_fields,
    expect_len,
    read_text,
    read_u8,
    read_u64,
    text,
    u8,
    u64,
)

CERT_MAGIC = b"TCXCERT1"
LIST_MAGIC = b"TCXVALIDLIST1"
_CERT_CTX = b"tcx-cert-v1"
_LIST_CTX = b"tcx-valid-list-v1"
NO_ISSUER = b"\x00" * 32

HOUR = 3600
ROOTVM_LIFETIME = 24 * HOUR
SCVM_LIFETIME = 1 * HOUR
ENTITY_LIFETIME = 365 * 24 * HOUR
CA_LIFETIME = 20 * 365 * 24 * HOUR
HIERARCHY_EPOCH = 1_600_000_000


class Role(enum.IntEnum):
    ROOT_CA = 1
    DEPLOY_CA = 2
    ROOTVM_CA = 3
    OWNER_CA = 4
    DEPLOY_SYSTEM = 5
    HOST_SYSTEM = 6
    ROOT_VM = 7
    CONTAINER_OWNER = 8
    SC_VM = 9


ISSUABLE = {
    Role.ROOT_CA: frozenset({Role.DEPLOY_CA, Role.ROOTVM_CA, Role.OWNER_CA}),
    Role.DEPLOY_CA: frozenset({Role.DEPLOY_SYSTEM, Role.HOST_SYSTEM}),
    Role.ROOTVM_CA: frozenset({Role.ROOT_VM}),
    Role.ROOT_VM: frozenset({Role.SC_VM}),
    Role.OWNER_CA: frozenset({Role.CONTAINER_OWNER}),
}

CA_ROLES = frozenset(ISSUABLE)


@dataclass(frozen=True)
class RoleCertificate:
    serial: bytes
    subject_name: str
    role: Role
    public_key: bytes
    not_before: int
    not_after: int
    issuer_fingerprint: bytes
    signature: bytes
    issuer_chain: Tuple["RoleCertificate", ...] = ()

    @property
    def is_ca(self) -> bool:
        return self.role in CA_ROLES

    @property
    def self_signed(self) -> bool:
        return self.issuer_fingerprint == NO_ISSUER

    def tbs_bytes(self) -> bytes:
        return encode_fields(
            CERT_MAGIC,
            self.serial,
            text(self.subject_name),
            u8(int(self.role)),
            self.public_key,
            u64(self.not_before),
            u64(self.not_after),
            self.issuer_fingerprint,
        )

    def body_bytes(self) -> bytes:
        return encode_fields(self.tbs_bytes(), self.signature)

    @property
    def fingerprint(self) -> bytes:
        return crypto.sha256(self.body_bytes())

    def to_bytes(self) -> bytes:
        return encode_fields(self.body_bytes(), encode_fields(*(c.body_bytes() for c in self.issuer_chain)))

    @classmethod
    def from_bytes(cls, data: bytes) -> "RoleCertificate":
        body, chain = decode_fields(data, 2)
        bodies = decode_fields(chain)
        parsed = [_parse_body(b) for b in bodies]
        # Rebuild nested chains from the top down.
        linked: list = []
        for cert in reversed(parsed):
            linked.insert(0, _with_chain(cert, tuple(linked)))
        return _with_chain(_parse_body(body), tuple(linked))

    def with_chain(self, chain: Sequence["RoleCertificate"]) -> "RoleCertificate":
        return _with_chain(self, tuple(chain))

    def path(self) -> Tuple["RoleCertificate", ...]:
        return (self,) + tuple(self.issuer_chain)

    def describe(self) -> str:
        lines = [
            f"subject:     {self.subject_name}",
            f"role:        {self.role.name}",
            f"serial:      {self.serial.hex()}",
            f"public_key:  {self.public_key.hex()}",
            f"not_before:  {self.not_before}",
            f"not_after:   {self.not_after}",
            f"fingerprint: {self.fingerprint.hex()}",
            f"issuer:      {'(self-signed)' if self.self_signed else self.issuer_fingerprint.hex()}",
        ]
        for i, c in enumerate(self.issuer_chain, 1):
            lines.append(f"chain[{i}]:    {c.role.name} {c.subject_name} {c.fingerprint.hex()[:16]}")
        return "\n".join(lines)


def _with_chain(cert: RoleCertificate, chain: Tuple[RoleCertificate, ...]) -> RoleCertificate:
    return RoleCertificate(
        cert.serial, cert.subject_name, cert.role, cert.public_key,
        cert.not_before, cert.not_after, cert.issuer_fingerprint, cert.signature, chain,
    )


def _parse_body(body: bytes) -> RoleCertificate:
    tbs, signature = decode_fields(body, 2)
    magic, serial, subject, role, pub, nb, na, issuer = decode_fields(tbs, 8)
    if magic != CERT_MAGIC:
        raise WireError("not a certificate")
    try:
        role_v = Role(read_u8(role))
    except ValueError as exc:
        raise WireError("unknown role") from exc
    return RoleCertificate(
        expect_len(serial, 16, "serial"),
        read_text(subject),
        role_v,
        expect_len(pub, 32, "public_key"),
        read_u64(nb),
        read_u64(na),
        expect_len(issuer, 32, "issuer_fingerprint"),
        expect_len(signature, 64, "signature"),
    )


@dataclass
class Credential:
    """A certificate together with the private key it certifies.

    When the certificate is CA-flagged this is the CA handle used for
    issuance; issuance through one handle is serialized.
    """

    certificate: RoleCertificate
    signing_key: object = field(repr=False)
    _serial_counter: int = field(default=0, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def role(self) -> Role:
        return self.certificate.role

    @property
    def fingerprint(self) -> bytes:
        return self.certificate.fingerprint

    def private_bytes(self) -> bytes:
        return crypto.private_bytes(self.signing_key)

    @classmethod
    def from_parts(cls, cert: RoleCertificate, private_key: bytes) -> "Credential":
        key = crypto.signing_key_from_bytes(private_key)
        if crypto.public_bytes(key) != cert.public_key:
            raise RoleViolation("private key does not match certificate")
        return cls(cert, key)

    def _next_serial(self, subject_name: str, role: Role, public_key: bytes) -> bytes:
        with self._lock:
            n = self._serial_counter
            self._serial_counter += 1
        return crypto.sha256(self.fingerprint, u64(n), text(subject_name), u8(int(role)), public_key)[:16]


CaHandle = Credential


def _sign_cert(
    issuer_key,
    issuer_cert: Optional[RoleCertificate],
    serial: bytes,
    subject_name: str,
    role: Role,
    public_key: bytes,
    not_before: int,
    not_after: int,
) -> RoleCertificate:
    issuer_fp = issuer_cert.fingerprint if issuer_cert is not None else NO_ISSUER
    draft = RoleCertificate(serial, subject_name, role, public_key, not_before, not_after, issuer_fp, b"")
    sig = crypto.sign(issuer_key, _CERT_CTX, draft.tbs_bytes())
    chain = issuer_cert.path() if issuer_cert is not None else ()
    return RoleCertificate(serial, subject_name, role, public_key, not_before, not_after, issuer_fp, sig, chain)


def issue_certificate(
    ca: Credential,
    subject_name: str,
    role: Role,
    public_key: bytes,
    lifetime: Tuple[int, int],
) -> RoleCertificate:
    """Issue ``role`` to ``public_key`` for the ``(not_before, not_after)`` window."""
    not_before, not_after = lifetime
    if not_after <= not_before:
        raise InvalidLifetime(f"not_after {not_after} <= not_before {not_before}")
    role = Role(role)
    issuer_role = ca.certificate.role
    if role not in ISSUABLE.get(issuer_role, ()):
        raise RoleViolation(f"{issuer_role.name} may not issue {role.name}")
    if len(public_key) != 32:
        raise RoleViolation("public key must be 32 bytes")
    serial = ca._next_serial(subject_name, role, public_key)
    return _sign_cert(
        ca.signing_key, ca.certificate, serial, subject_name, role, public_key, not_before, not_after
    )


def new_credential(
    ca: Credential,
    subject_name: str,
    role: Role,
    lifetime: Tuple[int, int],
    entropy: Optional[Entropy] = None,
) -> Credential:
    key = crypto.signing_key(entropy or Entropy())
    cert = issue_certificate(ca, subject_name, role, crypto.public_bytes(key), lifetime)
    return Credential(cert, key)


def default_lifetime(role: Role, now: int) -> Tuple[int, int]:
    span = {
        Role.ROOT_VM: ROOTVM_LIFETIME,
        Role.SC_VM: SCVM_LIFETIME,
    }.get(role, CA_LIFETIME if role in CA_ROLES else ENTITY_LIFETIME)
    return (now, now + span)


@dataclass
class Hierarchy:
    root_ca: Credential
    deploy_ca: Credential
    rootvm_ca: Credential
    owner_ca: Credential

    @property
    def trust_root(self) -> RoleCertificate:
        return self.root_ca.certificate


def build_hierarchy(seed: crypto.SeedLike = None, not_before: int = HIERARCHY_EPOCH) -> Hierarchy:
    ent = Entropy(seed)
    lifetime = (not_before, not_before + CA_LIFETIME)
    root_key = crypto.signing_key(ent.child("root-ca"))
    root_pub = crypto.public_bytes(root_key)
    serial = crypto.sha256(b"root-ca", root_pub)[:16]
    root_cert = _sign_cert(root_key, None, serial, "TCX Root CA", Role.ROOT_CA, root_pub, *lifetime)
    root = Credential(root_cert, root_key)

    def intermediate(label: str, name: str, role: Role) -> Credential:
        return new_credential(root, name, role, lifetime, ent.child(label))

    return Hierarchy(
        root,
        intermediate("deploy-ca", "TCX Deploy System CA", Role.DEPLOY_CA),
        intermediate("rootvm-ca", "TCX Root VM CA", Role.ROOTVM_CA),
        intermediate("owner-ca", "TCX Container Owner CA", Role.OWNER_CA),
    )


def verify_chain(
    cert: RoleCertificate,
    trust_root: RoleCertificate,
    at_time: int,
    expected_role: Optional[Role] = None,
) -> Verdict:
    """Verify every link from ``cert`` up to ``trust_root``. Never raises."""
    try:
        path = cert.path()
        top = path[-1]
        if not top.self_signed or top.body_bytes() != trust_root.body_bytes():
            return reject(Reason.UNTRUSTED_ROOT)
        for i, c in enumerate(path):
            issuer = path[i + 1] if i + 1 < len(path) else c
            if i + 1 < len(path) and c.issuer_fingerprint != issuer.fingerprint:
                return reject(Reason.BAD_SIGNATURE)
            if i + 1 == len(path) and not c.self_signed:
                return reject(Reason.UNTRUSTED_ROOT)
            if not crypto.verify(issuer.public_key, c.signature, _CERT_CTX, c.tbs_bytes()):
                return reject(Reason.BAD_SIGNATURE)
        for c in path:
            if c.not_after <= c.not_before or not (c.not_before <= at_time < c.not_after):
                return reject(Reason.EXPIRED)
        for i in range(len(path) - 1):
            if path[i].role not in ISSUABLE.get(path[i + 1].role, ()):
                return reject(Reason.WRONG_ROLE)
        if top.role != Role.ROOT_CA:
            return reject(Reason.UNTRUSTED_ROOT)
        if expected_role is not None and cert.role != expected_role:
            return reject(Reason.WRONG_ROLE)
    except Exception:
        return reject(Reason.BAD_SIGNATURE)
    return ACCEPT


def issued_by(cert: RoleCertificate, issuer: RoleCertificate) -> bool:
    """True when ``issuer`` directly signed ``cert``."""
    return cert.issuer_fingerprint == issuer.fingerprint and crypto.verify(
        issuer.public_key, cert.signature, _CERT_CTX, cert.tbs_bytes()
    )


@dataclass(frozen=True)
class ValidRootVmList:
    entries: Tuple[bytes, ...]
    issued_at: int
    signer: RoleCertificate
    signature: bytes

    def signed_bytes(self) -> bytes:
        return encode_fields(
            LIST_MAGIC, u64(self.issued_at), encode_fields(*self.entries), self.signer.fingerprint
        )

    def to_bytes(self) -> bytes:
        return encode_fields(self.signed_bytes(), self.signer.to_bytes(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ValidRootVmList":
        signed, signer, sig = decode_fields(data, 3)
        magic, issued_at, entries, signer_fp = decode_fields(signed, 4)
        if magic != LIST_MAGIC:
            raise WireError("not a valid-list")
        signer_cert = RoleCertificate.from_bytes(signer)
        if signer_cert.fingerprint != signer_fp:
            raise WireError("signer fingerprint mismatch")
        fps = tuple(expect_len(e, 32, "fingerprint") for e in decode_fields(entries))
        if list(fps) != sorted(set(fps)):
            raise WireError("valid-list entries not in canonical order")
        return cls(fps, read_u64(issued_at), signer_cert, sig)

    def __contains__(self, fingerprint: bytes) -> bool:
        return fingerprint in self.entries


def publish_valid_list(deploy_key: Credential, fingerprints: Iterable[bytes], issued_at: int) -> ValidRootVmList:
    entries = tuple(sorted(set(bytes(f) for f in fingerprints)))
    draft = ValidRootVmList(entries, issued_at, deploy_key.certificate, b"")
    sig = crypto.sign(deploy_key.signing_key, _LIST_CTX, draft.signed_bytes())
    return ValidRootVmList(entries, issued_at, deploy_key.certificate, sig)


def verify_valid_list(vlist: ValidRootVmList, trust_root: RoleCertificate, at_time: int) -> Verdict:
    signer_ok = verify_chain(vlist.signer, trust_root, at_time, Role.DEPLOY_SYSTEM)
    if not signer_ok:
        return signer_ok
    if not crypto.verify(vlist.signer.public_key, vlist.signature, _LIST_CTX, vlist.signed_bytes()):
        return reject(Reason.BAD_SIGNATURE)
    return ACCEPT


def check_rootvm_valid(
    cert: RoleCertificate,
    vlist: ValidRootVmList,
    trust_root: RoleCertificate,
    at_time: int,
) -> bool:
    """A Root VM is live iff its chain verifies and a Deploy-System-signed list names it."""
    if not verify_valid_list(vlist, trust_root, at_time):
        return False
    if not verify_chain(cert, trust_root, at_time, Role.ROOT_VM):
        return False
    return cert.fingerprint in vlist.entries
