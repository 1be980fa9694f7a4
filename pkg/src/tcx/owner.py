"""Container Owner client: enrollment, upload, SC-VM creation and control.

The owner trusts nothing the host says. SC-VM creation returns raw
attestation evidence that is re-verified here against the expected
measurement, a fresh owner nonce, the Root VM certificate and the signed
list of live Root VMs. The image key only leaves this process inside a
LoadImage command on a channel to the exact VM certificate that verified.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

from . import crypto
from .agent import RemoteRuntime, RuntimeProxy
from .channel import SecureChannel, client_handshake
from .control_plane import (
    Clock,
    HostClient,
    RootVmClient,
    enrollment_proof,
    fixed_clock,
    open_route,
    peer_check,
)
from .crypto import Entropy
from .errors import AttestationFailed, HandshakeFailure, InvalidValidList, RootVmNotValid
from .mock_tee import NONCE_SIZE, AttestationReport, verify_report
from .pki import (
    Credential,
    Role,
    RoleCertificate,
    ValidRootVmList,
    check_rootvm_valid,
    issued_by,
    verify_chain,
    verify_valid_list,
)
from .protocol import Msg, label as msg_label, pack
from .transport import LocalCarrier

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VmRecord:
    vm_id: str
    image_id: str
    cert_vm: RoleCertificate
    cert_rootvm: RoleCertificate
    report: AttestationReport

    def to_json(self) -> str:
        return json.dumps(
            {
                "vm_id": self.vm_id,
                "image_id": self.image_id,
                "cert_vm": self.cert_vm.to_bytes().hex(),
                "cert_rootvm": self.cert_rootvm.to_bytes().hex(),
                "report": self.report.to_bytes().hex(),
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "VmRecord":
        d = json.loads(text)
        return cls(
            d["vm_id"],
            d["image_id"],
            RoleCertificate.from_bytes(bytes.fromhex(d["cert_vm"])),
            RoleCertificate.from_bytes(bytes.fromhex(d["cert_rootvm"])),
            AttestationReport.from_bytes(bytes.fromhex(d["report"])),
        )


async def fetch_trust_bundle(
    carrier: LocalCarrier, deploy_address: str, entropy: Optional[Entropy] = None, origin: str = "owner"
) -> Tuple[RoleCertificate, bytes]:
    """Trust-on-first-use fetch of the Root CA certificate and vendor root key."""
    stream = await open_route(carrier, origin, deploy_address, "deploy")
    channel = await client_handshake(stream, None, None, entropy)
    try:
        reply = await channel.request(pack(Msg.GET_TRUST_BUNDLE), Msg.TRUST_BUNDLE)
    finally:
        await channel.close()
    return RoleCertificate.from_bytes(reply["root_ca"]), reply["vendor_root"]


def verify_evidence(
    vm_id: str,
    cert_vm: RoleCertificate,
    cert_rootvm: RoleCertificate,
    report: AttestationReport,
    nonce: bytes,
    expected_measurement: bytes,
    vendor_root: bytes,
    trust_root: RoleCertificate,
    at_time: int,
) -> None:
    """Raise unless the evidence proves ``cert_vm`` belongs to a VM running the expected payload."""
    verdict = verify_report(report, expected_measurement, nonce, vendor_root)
    if not verdict:
        raise AttestationFailed(verdict.reason.value, f"SC-VM {vm_id}")
    if report.measurement.vm_id.hex() != vm_id or cert_vm.subject_name != vm_id:
        raise AttestationFailed("WrongMeasurement", "evidence names a different VM")
    if not issued_by(cert_vm, cert_rootvm):
        raise AttestationFailed("BadSignature", "VM certificate not issued by this root VM")
    chain = verify_chain(cert_vm, trust_root, at_time, Role.SC_VM)
    if not chain:
        raise AttestationFailed(chain.reason.value, "VM certificate chain")


class OwnerClient:
    def __init__(
        self,
        credential: Credential,
        trust_root: RoleCertificate,
        vendor_root: bytes,
        carrier: LocalCarrier,
        host_address: str = "host",
        deploy_address: str = "deploy",
        entropy: Optional[Entropy] = None,
        clock: Clock = fixed_clock(),
        origin: str = "owner",
    ):
        self.credential = credential
        self.trust_root = trust_root
        self.vendor_root = vendor_root
        self.carrier = carrier
        self.host_address = host_address
        self.deploy_address = deploy_address
        self.entropy = entropy or Entropy()
        self.clock = clock
        self.origin = origin
        self.sent: List[Tuple[str, bytes]] = []  # every plaintext message this owner sent

    @property
    def certificate(self) -> RoleCertificate:
        return self.credential.certificate

    @classmethod
    async def enroll(
        cls,
        carrier: LocalCarrier,
        name: str,
        deploy_address: str = "deploy",
        entropy: Optional[Entropy] = None,
        clock: Clock = fixed_clock(),
        **kwargs,
    ) -> "OwnerClient":
        entropy = entropy or Entropy()
        origin = kwargs.get("origin", "owner")
        trust_root, vendor_root = await fetch_trust_bundle(carrier, deploy_address, entropy, origin)
        key = crypto.signing_key(entropy)
        public = crypto.public_bytes(key)
        client = cls(None, trust_root, vendor_root, carrier, deploy_address=deploy_address, entropy=entropy, clock=clock, **kwargs)
        channel = await client._deploy()
        try:
            reply = await channel.request(
                pack(Msg.ENROLL_OWNER, name=name, public_key=public, proof=enrollment_proof(key, name, public)),
                Msg.CERTIFICATE,
            )
        finally:
            await channel.close()
        cert = RoleCertificate.from_bytes(reply["certificate"])
        if not verify_chain(cert, trust_root, clock(), Role.CONTAINER_OWNER) or cert.public_key != public:
            raise HandshakeFailure("deploy service returned an unusable owner certificate")
        client.credential = Credential(cert, key)
        return client

    def _record(self, channel: SecureChannel) -> SecureChannel:
        channel.on_send = lambda data: self.sent.append((msg_label(data), data))
        return channel

    async def _deploy(self) -> SecureChannel:
        stream = await open_route(self.carrier, self.origin, self.deploy_address, "deploy")
        channel = await client_handshake(
            stream, None, peer_check(self.trust_root, self.clock, Role.DEPLOY_SYSTEM), self.entropy
        )
        return self._record(channel)

    async def fetch_valid_list(self) -> ValidRootVmList:
        channel = await self._deploy()
        try:
            reply = await channel.request(pack(Msg.GET_VALID_LIST), Msg.VALID_LIST)
        finally:
            await channel.close()
        vlist = ValidRootVmList.from_bytes(reply["valid_list"])
        verdict = verify_valid_list(vlist, self.trust_root, self.clock())
        if not verdict:
            raise InvalidValidList(f"valid list rejected: {verdict.reason.value}")
        return vlist

    async def upload_image(self, data: bytes) -> str:
        host = await HostClient.connect(
            self.carrier, self.origin, self.host_address, self.trust_root, self.clock, self.entropy
        )
        self._record(host.channel)
        try:
            return await host.upload_image(data)
        finally:
            await host.close()

    async def _rootvm_listed(self, cert: RoleCertificate) -> None:
        vlist = await self.fetch_valid_list()
        if not check_rootvm_valid(cert, vlist, self.trust_root, self.clock()):
            raise RootVmNotValid(f"root VM not in valid list: {cert.subject_name}")

    async def rootvm(self) -> RootVmClient:
        stream = await open_route(self.carrier, self.origin, self.host_address, "rootvm")
        client = await RootVmClient.over(
            stream, self.credential, self.trust_root, self.clock, self.entropy, extra_check=self._rootvm_listed
        )
        self._record(client.channel)
        return client

    async def create_vm(self, image_id: str, expected_measurement: bytes) -> VmRecord:
        root = await self.rootvm()
        nonce = self.entropy.bytes(NONCE_SIZE)
        try:
            vm_id, cert_vm, report = await root.create_scvm(image_id, nonce)
        finally:
            await root.close()
        verify_evidence(
            vm_id, cert_vm, root.certificate, report, nonce, expected_measurement,
            self.vendor_root, self.trust_root, self.clock(),
        )
        return VmRecord(vm_id, image_id, cert_vm, root.certificate, report)

    async def connect_vm(self, record: VmRecord) -> RuntimeProxy:
        def is_record_vm(cert: RoleCertificate) -> None:
            if cert.fingerprint != record.cert_vm.fingerprint:
                raise HandshakeFailure("peer is not the attested SC-VM")

        stream = await open_route(self.carrier, self.origin, self.host_address, record.vm_id)
        channel = await client_handshake(stream, self.credential, is_record_vm, self.entropy)
        return RuntimeProxy(RemoteRuntime(self._record(channel)))
