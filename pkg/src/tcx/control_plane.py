"""Deploy Service, Host Service and Root VM.

The Host Service is untrusted: it stores opaque images, launches VMs on its
platform, relays attestation requests and sealed injections, and switches
connections (each connection opens with ``ROUTE(destination)``). Nothing it
holds can carry an image key or a secret bundle in the clear.

The Deploy Service attests and provisions Root VMs and publishes the signed
list of live Root VM certificates. Each Root VM attests and certifies the
SC-VMs on its host and brokers the name registry used by the secure channel
library.
"""

from __future__ import annotations

import asyncio
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from . import crypto
from .boot import FirmwareBlob, assemble, boot, build_verity, kernel_program, unpack_rootfs
from .channel import PeerCheck, SecureChannel, client_handshake, serve_requests, server_handshake
from .crypto import Entropy
from .errors import (
    AttestationFailed,
    BootRejected,
    CertificateRejected,
    HandshakeFailure,
    InvalidOwnerCert,
    LaunchFailed,
    NameTaken,
    NotProvisioned,
    RoleViolation,
    StreamClosed,
    TcxError,
    UnauthenticatedRegistration,
    UnknownDestination,
    UnknownImage,
    UnknownName,
    WireError,
)
from .images import ImageKey
from .mock_tee import (
    NONCE_SIZE,
    AttestationReport,
    Platform,
    SealedInjection,
    VmContext,
    inject_secret,
    verify_report,
)
from .pki import (
    Credential,
    Hierarchy,
    Role,
    RoleCertificate,
    ValidRootVmList,
    default_lifetime,
    issue_certificate,
    issued_by,
    new_credential,
    publish_valid_list,
    verify_chain,
)
from .protocol import Msg, pack, unpack
from .transport import LocalCarrier, Stream

logger = logging.getLogger(__name__)

SIM_EPOCH = 1_700_000_000
Clock = Callable[[], int]

_PROVISION_CTX = b"tcx-rootvm-provision-v1"
_BUNDLE_CTX = b"tcx-secret-bundle-v1"
_ENROLL_CTX = b"tcx-owner-enroll-v1"

ROOT_CA_PATH = "etc/tcx/root_ca.cert"
VENDOR_ROOT_PATH = "etc/tcx/vendor_root.pub"
SCVM_MEASUREMENT_PATH = "etc/tcx/scvm.measurement"


def fixed_clock(t: int = SIM_EPOCH) -> Clock:
    return lambda: t


def peer_check(
    trust_root: RoleCertificate,
    clock: Clock,
    role: Optional[Role] = None,
    allow_anonymous: bool = False,
) -> PeerCheck:
    """Handshake callback: the peer must chain to ``trust_root`` with ``role``."""

    def check(cert: Optional[RoleCertificate]) -> None:
        if cert is None:
            if allow_anonymous:
                return
            raise HandshakeFailure("peer presented no certificate")
        verdict = verify_chain(cert, trust_root, clock(), role)
        if not verdict:
            raise CertificateRejected(verdict.reason.value, cert.subject_name)

    return check


async def route_preamble(stream: Stream, destination: str) -> Stream:
    await stream.send(pack(Msg.ROUTE, destination=destination), "ROUTE")
    try:
        unpack(await stream.recv(), Msg.ROUTE_OK)
    except StreamClosed as exc:
        raise UnknownDestination(f"host closed the connection to {destination}") from exc
    return stream


async def open_route(carrier: LocalCarrier, origin: str, address: str, destination: str) -> Stream:
    stream = await carrier.connect(origin, address)
    return await route_preamble(stream, destination)


# -- boot artifacts ----------------------------------------------------------


@dataclass(frozen=True)
class BootImage:
    """Everything the host hands the platform to start one kind of VM.

    ``firmware_payload`` pins the measured payload; when absent it is built
    from the other artifacts. A host that swaps a kernel but keeps the
    honest payload is caught by measured boot; one that rebuilds the payload
    is caught by attestation.
    """

    firmware_code: bytes
    kernel: bytes
    params: bytes
    fs_image: bytes
    firmware_payload: Optional[bytes] = None

    def payload(self) -> bytes:
        if self.firmware_payload is not None:
            return self.firmware_payload
        return assemble(self.firmware_code, self.kernel, self.params, build_verity(self.fs_image).root)[1]

    @property
    def measurement(self) -> bytes:
        return crypto.sha256(self.payload())

    def pinned(self) -> "BootImage":
        return BootImage(self.firmware_code, self.kernel, self.params, self.fs_image, self.payload())

    def replace(self, **changes) -> "BootImage":
        fields = dict(
            firmware_code=self.firmware_code, kernel=self.kernel, params=self.params,
            fs_image=self.fs_image, firmware_payload=self.firmware_payload,
        )
        fields.update(changes)
        return BootImage(**fields)


# -- secrets -----------------------------------------------------------------


@dataclass(frozen=True)
class SecretBundle:
    cert_rootvm: RoleCertificate
    cert_vm_n: RoleCertificate
    cert_owner: RoleCertificate
    vm_private_key: bytes = field(repr=False)
    image_key: Optional[ImageKey] = field(default=None, repr=False)

    def _signed(self, vm_id: bytes) -> bytes:
        return crypto.sha256(
            vm_id, self.cert_rootvm.to_bytes(), self.cert_vm_n.to_bytes(), self.vm_private_key, self.cert_owner.to_bytes()
        )

    def to_payload(self, signer: Credential, vm_id: bytes) -> bytes:
        return pack(
            Msg.SECRET_BUNDLE,
            cert_rootvm=self.cert_rootvm.to_bytes(),
            cert_vm=self.cert_vm_n.to_bytes(),
            private_key=self.vm_private_key,
            cert_owner=self.cert_owner.to_bytes(),
            signature=crypto.sign(signer.signing_key, _BUNDLE_CTX, self._signed(vm_id)),
        )

    @classmethod
    def from_payload(cls, data: bytes, vm_id: bytes, trust_root: RoleCertificate, at_time: int) -> "SecretBundle":
        _, f = unpack(data, Msg.SECRET_BUNDLE)
        bundle = cls(
            RoleCertificate.from_bytes(f["cert_rootvm"]),
            RoleCertificate.from_bytes(f["cert_vm"]),
            RoleCertificate.from_bytes(f["cert_owner"]),
            f["private_key"],
        )
        if not verify_chain(bundle.cert_rootvm, trust_root, at_time, Role.ROOT_VM):
            raise RoleViolation("bundle signer is not a valid root VM")
        if not crypto.verify(bundle.cert_rootvm.public_key, f["signature"], _BUNDLE_CTX, bundle._signed(vm_id)):
            raise RoleViolation("secret bundle signature invalid")
        if not issued_by(bundle.cert_vm_n, bundle.cert_rootvm) or bundle.cert_vm_n.subject_name != vm_id.hex():
            raise RoleViolation("VM certificate does not belong to this VM")
        if not verify_chain(bundle.cert_owner, trust_root, at_time, Role.CONTAINER_OWNER):
            raise RoleViolation("owner certificate invalid")
        bundle.credential()  # key must match certificate
        return bundle

    def credential(self) -> Credential:
        return Credential.from_parts(self.cert_vm_n, self.vm_private_key)


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    cert_vm: RoleCertificate
    cert_owner: RoleCertificate


class NameRegistry:
    """name -> (VM cert, owner cert); entries die with the registering session."""

    def __init__(self):
        self._entries: Dict[str, RegistryEntry] = {}
        self._sessions: Dict[str, int] = {}
        self._lock = threading.Lock()

    def register(self, entry: RegistryEntry, session: int) -> None:
        with self._lock:
            if entry.name in self._entries:
                raise NameTaken(entry.name)
            self._entries[entry.name] = entry
            self._sessions[entry.name] = session

    def lookup(self, name: str) -> RegistryEntry:
        with self._lock:
            entry = self._entries.get(name)
        if entry is None:
            raise UnknownName(name)
        return entry

    def names(self) -> List[str]:
        with self._lock:
            return sorted(self._entries)

    def drop_session(self, session: int) -> None:
        with self._lock:
            for name in [n for n, s in self._sessions.items() if s == session]:
                del self._entries[name]
                del self._sessions[name]


# -- host --------------------------------------------------------------------


@dataclass
class HostInventory:
    images: Dict[str, bytes] = field(default_factory=dict)
    running: Dict[str, object] = field(default_factory=dict)


class GuestContext:
    """What a guest program sees: its TEE context, booted artifacts, disk, and a way out."""

    def __init__(self, vm: VmContext, booted, disk: Optional[bytes], host: "HostService", entropy: Entropy, clock: Clock):
        self.vm = vm
        self.booted = booted
        self.files = unpack_rootfs(booted.fs_image)
        self.disk = disk
        self.entropy = entropy
        self.clock = clock
        self._host = host

    @property
    def vm_name(self) -> str:
        return self.vm.vm_name

    async def connect(self, destination: str) -> Stream:
        return await self._host.guest_connect(self.vm_name, destination)


class HostService:
    def __init__(
        self,
        platform: Platform,
        credential: Credential,
        carrier: LocalCarrier,
        boot_images: Dict[str, BootImage],
        programs: Dict[str, Callable[[GuestContext], object]],
        entropy: Optional[Entropy] = None,
        clock: Clock = fixed_clock(),
        address: str = "host",
    ):
        self.platform = platform
        self.credential = credential
        self.carrier = carrier
        self.boot_images = dict(boot_images)
        self.programs = programs
        self.entropy = entropy or Entropy()
        self.clock = clock
        self.address = address
        self.inventory = HostInventory()
        self.rootvm_id: Optional[str] = None
        self.visible: List[bytes] = []  # every payload the host code handled
        self.route_overrides: Dict[str, Callable[[Stream], object]] = {}
        self.boot_log: List[Tuple[str, str]] = []
        self.injections: List[Tuple[str, SealedInjection]] = []

    async def start(self) -> None:
        await self.carrier.listen(self.address, self.handle_connection)

    async def handle_connection(self, stream: Stream) -> None:
        first = await stream.recv()
        self.visible.append(first)
        try:
            _, m = unpack(first, Msg.ROUTE)
        except WireError:
            stream.close()
            return
        dest = m["destination"]
        if dest in self.route_overrides:
            await stream.send(pack(Msg.ROUTE_OK), "ROUTE_OK")
            await self.route_overrides[dest](stream)
            return
        if dest == "host":
            await stream.send(pack(Msg.ROUTE_OK), "ROUTE_OK")
            await self._serve_api(stream)
            return
        try:
            guest_end = self.route(dest)
        except UnknownDestination as exc:
            await stream.send(pack(Msg.ROUTE_ERR, code=exc.code, message=str(exc)), "ROUTE_ERR")
            return
        await stream.send(pack(Msg.ROUTE_OK), "ROUTE_OK")
        await self._proxy(stream, guest_end)

    def route(self, destination: str) -> Stream:
        """Open a link to a running guest; returns the host's end."""
        vm = self.rootvm_id if destination == "rootvm" else destination
        guest = self.inventory.running.get(vm) if vm else None
        if guest is None:
            raise UnknownDestination(f"no running VM {destination!r}")
        near, far = self.carrier.pipe(self.address, vm)
        self.carrier.spawn(_serve_stream(guest.serve, far))
        return near

    async def _proxy(self, a: Stream, b: Stream) -> None:
        async def pump(src: Stream, dst: Stream):
            try:
                while True:
                    frame, label = await src.recv_labeled()
                    self.visible.append(frame)
                    await dst.send(frame, label)
            except StreamClosed:
                pass
            finally:
                src.close()
                dst.close()

        await asyncio.gather(pump(a, b), pump(b, a))

    async def guest_connect(self, origin: str, destination: str) -> Stream:
        near, far = self.carrier.pipe(origin, self.address)
        self.carrier.spawn(_serve_stream(self.handle_connection, far))
        return await route_preamble(near, destination)

    async def _serve_api(self, stream: Stream) -> None:
        channel = await server_handshake(stream, self.credential, None, self.entropy)
        await serve_requests(channel, self._dispatch)

    async def _dispatch(self, data: bytes) -> bytes:
        self.visible.append(data)
        msg, f = unpack(data)
        if msg == Msg.UPLOAD_IMAGE:
            return pack(Msg.IMAGE_STORED, image_id=self.upload_image(f["data"]))
        if msg == Msg.FETCH_IMAGE:
            return pack(Msg.IMAGE_DATA, data=self.fetch_image(f["image_id"]))
        if msg == Msg.LAUNCH_VM:
            return pack(Msg.VM_LAUNCHED, vm_id=await self.launch(f["kind"], f["image_id"]))
        if msg == Msg.ATTEST:
            report = await self.attest(f["vm_id"], f["nonce"])
            return pack(Msg.REPORT, report=report.to_bytes())
        if msg == Msg.INJECT:
            await self.inject(f["vm_id"], SealedInjection.from_bytes(f["sealed"]))
            return pack(Msg.OK)
        raise WireError(f"host does not serve {msg.name}")

    def upload_image(self, data: bytes) -> str:
        image_id = crypto.sha256(data).hex()
        self.inventory.images[image_id] = bytes(data)
        return image_id

    def fetch_image(self, image_id: str) -> bytes:
        try:
            return self.inventory.images[image_id]
        except KeyError:
            raise UnknownImage(image_id) from None

    async def launch(self, kind: str, image_id: str = "") -> str:
        image = self.boot_images.get(kind)
        if image is None:
            raise LaunchFailed(f"no boot image for VM kind {kind!r}")
        disk = self.fetch_image(image_id) if image_id else None
        payload = image.payload()
        ctx = self.platform.launch_guest(payload)
        # measured boot runs inside the guest; the host only observes the outcome
        try:
            booted = boot(FirmwareBlob.from_bytes(payload), image.kernel, image.params, image.fs_image)
        except BootRejected as exc:
            self.boot_log.append((ctx.vm_name, exc.stage))
            raise
        program = kernel_program(booted.kernel)
        factory = self.programs.get(program)
        if factory is None:
            raise LaunchFailed(f"kernel runs unknown program {program!r}")
        guest = factory(GuestContext(ctx, booted, disk, self, self.entropy.child(ctx.vm_name), self.clock))
        self.inventory.running[ctx.vm_name] = guest
        self.boot_log.append((ctx.vm_name, "ok"))
        if kind == "rootvm":
            self.rootvm_id = ctx.vm_name
        return ctx.vm_name

    async def attest(self, vm_id: str, nonce: bytes) -> AttestationReport:
        return self.platform.attest(bytes.fromhex(vm_id), nonce)

    async def inject(self, vm_id: str, sealed: SealedInjection) -> None:
        self.injections.append((vm_id, sealed))
        self.platform.deliver(bytes.fromhex(vm_id), sealed)


async def _serve_stream(handler, stream: Stream) -> None:
    try:
        await handler(stream)
    except (StreamClosed, HandshakeFailure, NotProvisioned) as exc:
        logger.debug("guest connection ended: %r", exc)
    finally:
        stream.close()


class HostClient:
    """Client for the Host Service API (server-authenticated channel)."""

    def __init__(self, channel: SecureChannel):
        self.channel = channel

    @classmethod
    async def over(
        cls, stream: Stream, trust_root: Optional[RoleCertificate], clock: Clock, entropy: Optional[Entropy] = None
    ) -> "HostClient":
        check = peer_check(trust_root, clock, Role.HOST_SYSTEM) if trust_root is not None else None
        return cls(await client_handshake(stream, None, check, entropy))

    @classmethod
    async def connect(
        cls,
        carrier: LocalCarrier,
        origin: str,
        address: str,
        trust_root: Optional[RoleCertificate],
        clock: Clock,
        entropy: Optional[Entropy] = None,
    ) -> "HostClient":
        stream = await open_route(carrier, origin, address, "host")
        return await cls.over(stream, trust_root, clock, entropy)

    async def upload_image(self, data: bytes) -> str:
        return (await self.channel.request(pack(Msg.UPLOAD_IMAGE, data=data), Msg.IMAGE_STORED))["image_id"]

    async def fetch_image(self, image_id: str) -> bytes:
        return (await self.channel.request(pack(Msg.FETCH_IMAGE, image_id=image_id), Msg.IMAGE_DATA))["data"]

    async def launch(self, kind: str, image_id: str = "") -> str:
        reply = await self.channel.request(pack(Msg.LAUNCH_VM, kind=kind, image_id=image_id), Msg.VM_LAUNCHED)
        return reply["vm_id"]

    async def attest(self, vm_id: str, nonce: bytes) -> AttestationReport:
        reply = await self.channel.request(pack(Msg.ATTEST, vm_id=vm_id, nonce=nonce), Msg.REPORT)
        return AttestationReport.from_bytes(reply["report"])

    async def inject(self, vm_id: str, sealed: SealedInjection) -> None:
        await self.channel.request(pack(Msg.INJECT, vm_id=vm_id, sealed=sealed.to_bytes()), Msg.OK)

    async def close(self) -> None:
        await self.channel.close()


# -- deploy service ----------------------------------------------------------


@dataclass(frozen=True)
class RootVmHandle:
    vm_id: str
    certificate: RoleCertificate
    report: AttestationReport


def enrollment_proof(signing_key, name: str, public_key: bytes) -> bytes:
    return crypto.sign(signing_key, _ENROLL_CTX, name.encode() + b"\x00" + public_key)


class DeployService:
    def __init__(
        self,
        hierarchy: Hierarchy,
        carrier: LocalCarrier,
        vendor_root: bytes,
        rootvm_measurement: bytes,
        entropy: Optional[Entropy] = None,
        clock: Clock = fixed_clock(),
        address: str = "deploy",
    ):
        self.hierarchy = hierarchy
        self.carrier = carrier
        self.vendor_root = vendor_root
        self.rootvm_measurement = rootvm_measurement
        self.entropy = entropy or Entropy()
        self.clock = clock
        self.address = address
        self.credential = new_credential(
            hierarchy.deploy_ca, "deploy-service", Role.DEPLOY_SYSTEM,
            default_lifetime(Role.DEPLOY_SYSTEM, clock()), self.entropy.child("credential"),
        )
        self._valid: set = set()
        self.valid_list = publish_valid_list(self.credential, (), clock())
        self.deployed: List[RootVmHandle] = []

    @property
    def trust_root(self) -> RoleCertificate:
        return self.hierarchy.trust_root

    async def start(self) -> None:
        await self.carrier.listen(self.address, self.handle_connection)

    def issue_host_credential(self, name: str) -> Credential:
        return new_credential(
            self.hierarchy.deploy_ca, name, Role.HOST_SYSTEM,
            default_lifetime(Role.HOST_SYSTEM, self.clock()), self.entropy.child("host:" + name),
        )

    def publish(self) -> ValidRootVmList:
        self.valid_list = publish_valid_list(self.credential, self._valid, self.clock())
        return self.valid_list

    def revoke(self, fingerprint: bytes) -> ValidRootVmList:
        self._valid.discard(fingerprint)
        return self.publish()

    def enroll_owner(self, name: str, public_key: bytes, proof: bytes) -> RoleCertificate:
        if not crypto.verify(public_key, proof, _ENROLL_CTX, name.encode() + b"\x00" + public_key):
            raise RoleViolation("enrollment proof does not verify")
        return issue_certificate(
            self.hierarchy.owner_ca, name, Role.CONTAINER_OWNER, public_key,
            default_lifetime(Role.CONTAINER_OWNER, self.clock()),
        )

    async def deploy_rootvm(self, host_address: str = "host") -> RootVmHandle:
        """Launch, attest and provision a Root VM on the host at ``host_address``."""
        host = await HostClient.connect(
            self.carrier, self.address, host_address, self.trust_root, self.clock, self.entropy
        )
        try:
            vm_id = await host.launch("rootvm")
            nonce = self.entropy.bytes(NONCE_SIZE)
            report = await host.attest(vm_id, nonce)
            verdict = verify_report(report, self.rootvm_measurement, nonce, self.vendor_root)
            if not verdict:
                raise AttestationFailed(verdict.reason.value, f"root VM {vm_id}")
            if report.measurement.vm_id.hex() != vm_id:
                raise AttestationFailed("WrongMeasurement", "report names a different VM")
            key = crypto.signing_key(self.entropy)
            cert = issue_certificate(
                self.hierarchy.rootvm_ca, f"rootvm-{vm_id}", Role.ROOT_VM, crypto.public_bytes(key),
                default_lifetime(Role.ROOT_VM, self.clock()),
            )
            private = crypto.private_bytes(key)
            payload = pack(
                Msg.ROOTVM_PROVISION,
                cert_rootvm=cert.to_bytes(),
                private_key=private,
                signer=self.credential.certificate.to_bytes(),
                signature=crypto.sign(
                    self.credential.signing_key, _PROVISION_CTX, crypto.sha256(bytes.fromhex(vm_id), cert.to_bytes(), private)
                ),
            )
            sealed = inject_secret(report, payload, crypto.dh_key(self.entropy), self.entropy)
            await host.inject(vm_id, sealed)
        finally:
            await host.close()
        self._valid.add(cert.fingerprint)
        self.publish()
        handle = RootVmHandle(vm_id, cert, report)
        self.deployed.append(handle)
        logger.info("deployed root VM %s", vm_id)
        return handle

    async def handle_connection(self, stream: Stream) -> None:
        try:
            _, m = unpack(await stream.recv(), Msg.ROUTE)
        except WireError:
            return
        if m["destination"] != "deploy":
            await stream.send(pack(Msg.ROUTE_ERR, code=UnknownDestination.code, message=m["destination"]), "ROUTE_ERR")
            return
        await stream.send(pack(Msg.ROUTE_OK), "ROUTE_OK")
        await self.serve_channel(stream)

    async def serve_channel(self, stream: Stream) -> None:
        channel = await server_handshake(stream, self.credential, None, self.entropy)
        await serve_requests(channel, self._dispatch)

    async def _dispatch(self, data: bytes) -> bytes:
        msg, f = unpack(data)
        if msg == Msg.ENROLL_OWNER:
            cert = self.enroll_owner(f["name"], f["public_key"], f["proof"])
            return pack(Msg.CERTIFICATE, certificate=cert.to_bytes())
        if msg == Msg.GET_VALID_LIST:
            return pack(Msg.VALID_LIST, valid_list=self.valid_list.to_bytes())
        if msg == Msg.GET_TRUST_BUNDLE:
            return pack(Msg.TRUST_BUNDLE, root_ca=self.trust_root.to_bytes(), vendor_root=self.vendor_root)
        raise WireError(f"deploy service does not serve {msg.name}")


def verify_provision(data: bytes, vm_id: bytes, trust_root: RoleCertificate, at_time: int) -> Credential:
    _, f = unpack(data, Msg.ROOTVM_PROVISION)
    signer = RoleCertificate.from_bytes(f["signer"])
    if not verify_chain(signer, trust_root, at_time, Role.DEPLOY_SYSTEM):
        raise RoleViolation("provisioning not signed by a deploy system")
    if not crypto.verify(
        signer.public_key, f["signature"], _PROVISION_CTX, crypto.sha256(vm_id, f["cert_rootvm"], f["private_key"])
    ):
        raise RoleViolation("provisioning signature invalid")
    cert = RoleCertificate.from_bytes(f["cert_rootvm"])
    if not verify_chain(cert, trust_root, at_time, Role.ROOT_VM):
        raise RoleViolation("provisioned certificate is not a valid root VM certificate")
    return Credential.from_parts(cert, f["private_key"])


# -- root VM -----------------------------------------------------------------


class RootVm:
    """Guest program of the Root VM."""

    def __init__(self, ctx: GuestContext):
        self.ctx = ctx
        self.trust_root = RoleCertificate.from_bytes(ctx.files[ROOT_CA_PATH])
        self.vendor_root = ctx.files[VENDOR_ROOT_PATH]
        self.scvm_measurement = ctx.files[SCVM_MEASUREMENT_PATH]
        self.entropy = ctx.entropy
        self.clock = ctx.clock
        self.credential: Optional[Credential] = None
        self.registry = NameRegistry()
        self.owners: Dict[bytes, RoleCertificate] = {}  # SC-VM cert fingerprint -> owner cert
        self.issued: List[Tuple[str, str]] = []  # audit log of (event, vm_id)
        self._sessions = 0
        ctx.vm.on_secret(self._provision)

    def _provision(self, plaintext: bytes) -> None:
        self.credential = verify_provision(plaintext, self.ctx.vm.vm_id, self.trust_root, self.clock())
        logger.info("root VM %s provisioned", self.ctx.vm_name)

    def _check_peer(self, cert: Optional[RoleCertificate]) -> None:
        if cert is None:
            return
        if cert.role == Role.SC_VM:
            if not issued_by(cert, self.credential.certificate):
                raise CertificateRejected("UntrustedRoot", "SC-VM certificate from another root VM")
        elif cert.role != Role.CONTAINER_OWNER:
            raise CertificateRejected("WrongRole", cert.subject_name)
        verdict = verify_chain(cert, self.trust_root, self.clock(), cert.role)
        if not verdict:
            raise CertificateRejected(verdict.reason.value, cert.subject_name)

    async def serve(self, stream: Stream) -> None:
        if self.credential is None:
            raise NotProvisioned("root VM has no identity yet")
        channel = await server_handshake(stream, self.credential, self._check_peer, self.entropy)
        self._sessions += 1
        session = self._sessions
        peer = channel.peer_certificate

        async def dispatch(data: bytes) -> bytes:
            return await self._dispatch(data, peer, session)

        try:
            await serve_requests(channel, dispatch)
        finally:
            self.registry.drop_session(session)

    async def _dispatch(self, data: bytes, peer: Optional[RoleCertificate], session: int) -> bytes:
        msg, f = unpack(data)
        if msg == Msg.GET_ROOTVM_CERT:
            return pack(Msg.CERTIFICATE, certificate=self.credential.certificate.to_bytes())
        if msg == Msg.CREATE_SCVM:
            if peer is None or peer.role != Role.CONTAINER_OWNER:
                raise InvalidOwnerCert("CREATE_SCVM requires an authenticated container owner")
            vm_id, cert_vm, report = await self.create_scvm(peer, f["image_id"], f["owner_nonce"])
            return pack(Msg.SCVM_CREATED, vm_id=vm_id, cert_vm=cert_vm.to_bytes(), report=report.to_bytes())
        if msg == Msg.REGISTER:
            self.register_name(f["name"], peer, session)
            return pack(Msg.OK)
        if msg == Msg.LOOKUP:
            entry = self.lookup(f["name"])
            return pack(Msg.BINDING, name=entry.name, cert_vm=entry.cert_vm.to_bytes(), cert_owner=entry.cert_owner.to_bytes())
        if msg == Msg.LIST_NAMES:
            return pack(Msg.NAMES, names=self.list_names())
        if msg == Msg.OWNER_OF:
            owner = self.owners.get(f["vm_fingerprint"])
            if owner is None:
                raise UnknownName("no SC-VM with that certificate")
            return pack(Msg.CERTIFICATE, certificate=owner.to_bytes())
        raise WireError(f"root VM does not serve {msg.name}")

    async def _host(self) -> HostClient:
        stream = await self.ctx.connect("host")
        return await HostClient.over(stream, self.trust_root, self.clock, self.entropy)

    async def create_scvm(
        self, owner_cert: RoleCertificate, image_id: str, owner_nonce: bytes
    ) -> Tuple[str, RoleCertificate, AttestationReport]:
        verdict = verify_chain(owner_cert, self.trust_root, self.clock(), Role.CONTAINER_OWNER)
        if not verdict:
            raise InvalidOwnerCert(f"{owner_cert.subject_name}: {verdict.reason.value}")
        if len(owner_nonce) != NONCE_SIZE:
            raise WireError(f"owner nonce must be {NONCE_SIZE} bytes")
        host = await self._host()
        try:
            vm_id = await host.launch("scvm", image_id)
            nonce = self.entropy.bytes(NONCE_SIZE)
            report = await host.attest(vm_id, nonce)
            verdict = verify_report(report, self.scvm_measurement, nonce, self.vendor_root)
            if not verdict:
                self.issued.append(("attestation-failed", vm_id))
                raise AttestationFailed(verdict.reason.value, f"SC-VM {vm_id}")
            if report.measurement.vm_id.hex() != vm_id:
                raise AttestationFailed("WrongMeasurement", "report names a different VM")
            self.issued.append(("attested", vm_id))
            key = crypto.signing_key(self.entropy)
            cert_vm = issue_certificate(
                self.credential, vm_id, Role.SC_VM, crypto.public_bytes(key),
                default_lifetime(Role.SC_VM, self.clock()),
            )
            self.issued.append(("certified", vm_id))
            bundle = SecretBundle(self.credential.certificate, cert_vm, owner_cert, crypto.private_bytes(key))
            payload = bundle.to_payload(self.credential, bytes.fromhex(vm_id))
            await host.inject(vm_id, inject_secret(report, payload, crypto.dh_key(self.entropy), self.entropy))
            evidence = await host.attest(vm_id, owner_nonce)
        finally:
            await host.close()
        self.owners[cert_vm.fingerprint] = owner_cert
        return vm_id, cert_vm, evidence

    def register_name(self, name: str, peer: Optional[RoleCertificate], session: int) -> None:
        if peer is None or peer.role != Role.SC_VM or not issued_by(peer, self.credential.certificate):
            raise UnauthenticatedRegistration("only SC-VMs certified by this root VM may register")
        owner = self.owners.get(peer.fingerprint)
        if owner is None:
            raise UnauthenticatedRegistration("SC-VM has no recorded owner")
        if not name:
            raise WireError("empty name")
        self.registry.register(RegistryEntry(name, peer, owner), session)

    def lookup(self, name: str) -> RegistryEntry:
        return self.registry.lookup(name)

    def list_names(self) -> List[str]:
        return self.registry.names()


class RootVmClient:
    """Client for the Root VM API, reached through the host's switch."""

    def __init__(self, channel: SecureChannel):
        self.channel = channel

    @property
    def certificate(self) -> RoleCertificate:
        return self.channel.peer_certificate

    @classmethod
    async def over(
        cls,
        stream: Stream,
        credential: Optional[Credential],
        trust_root: RoleCertificate,
        clock: Clock,
        entropy: Optional[Entropy] = None,
        extra_check: Optional[PeerCheck] = None,
    ) -> "RootVmClient":
        base = peer_check(trust_root, clock, Role.ROOT_VM)

        async def check(cert):
            base(cert)
            if extra_check is not None:
                result = extra_check(cert)
                if asyncio.iscoroutine(result):
                    await result

        return cls(await client_handshake(stream, credential, check, entropy))

    async def get_certificate(self) -> RoleCertificate:
        reply = await self.channel.request(pack(Msg.GET_ROOTVM_CERT), Msg.CERTIFICATE)
        return RoleCertificate.from_bytes(reply["certificate"])

    async def create_scvm(self, image_id: str, owner_nonce: bytes) -> Tuple[str, RoleCertificate, AttestationReport]:
        reply = await self.channel.request(pack(Msg.CREATE_SCVM, image_id=image_id, owner_nonce=owner_nonce), Msg.SCVM_CREATED)
        return reply["vm_id"], RoleCertificate.from_bytes(reply["cert_vm"]), AttestationReport.from_bytes(reply["report"])

    async def register(self, name: str) -> None:
        await self.channel.request(pack(Msg.REGISTER, name=name), Msg.OK)

    async def lookup(self, name: str) -> RegistryEntry:
        reply = await self.channel.request(pack(Msg.LOOKUP, name=name), Msg.BINDING)
        return RegistryEntry(reply["name"], RoleCertificate.from_bytes(reply["cert_vm"]), RoleCertificate.from_bytes(reply["cert_owner"]))

    async def list_names(self) -> List[str]:
        return (await self.channel.request(pack(Msg.LIST_NAMES), Msg.NAMES))["names"]

    async def owner_of(self, cert_vm: RoleCertificate) -> RoleCertificate:
        reply = await self.channel.request(pack(Msg.OWNER_OF, vm_fingerprint=cert_vm.fingerprint), Msg.CERTIFICATE)
        return RoleCertificate.from_bytes(reply["certificate"])

    async def close(self) -> None:
        await self.channel.close()
