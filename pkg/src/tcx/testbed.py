"""One-call assembly of a complete deployment on any carrier."""

from __future__ import annotations

import logging
from typing import Dict, Optional, Tuple, Type

from .agent import ScVmAgent
from .control_plane import (
    BootImage,
    Clock,
    DeployService,
    HostService,
    RootVm,
    RootVmHandle,
    fixed_clock,
)
from .crypto import Entropy
from .errors import error_from_code
from .fixtures import REFERENCE_ENTRY, reference_boot_images, reference_layers
from .images import ImageKey, SealedImage, seal_image
from .mock_tee import Platform, VendorRoot, create_platform
from .owner import OwnerClient, VmRecord
from .pki import build_hierarchy
from .simnet import Adversary, SimNetwork
from .transport import LocalCarrier

logger = logging.getLogger(__name__)

PROGRAMS = {"rootvm": RootVm, "scvm-agent": ScVmAgent}


class Testbed:
    """Deploy Service plus one Host Service on a shared carrier.

    Every key and nonce derives from ``seed``. ``boot_overrides`` replaces
    the artifacts the host launches, while verifiers keep the reference
    measurements in ``known_good``.
    """

    __test__ = False  # not a pytest class

    def __init__(
        self,
        seed: int = 0,
        carrier: Optional[LocalCarrier] = None,
        adversary: Optional[Adversary] = None,
        host_cls: Type[HostService] = HostService,
        boot_overrides: Optional[Dict[str, BootImage]] = None,
        clock: Optional[Clock] = None,
        vendor: Optional[VendorRoot] = None,
    ):
        self.seed = seed
        self.entropy = Entropy(seed).child("testbed")
        self.carrier = carrier if carrier is not None else SimNetwork(seed, adversary)
        if adversary is not None and isinstance(self.carrier, SimNetwork):
            self.carrier.attach_adversary(adversary)
        self.clock = clock or fixed_clock()
        self.vendor = vendor or VendorRoot.default()
        self.hierarchy = build_hierarchy(self.entropy.child("pki").bytes(32))
        if adversary is not None and adversary.fake_platform is not None:
            identity = adversary.fake_platform
        else:
            identity = create_platform(self.entropy.child("platform").bytes(32), self.vendor)
        self.platform = Platform(identity, self.entropy.child("platform-runtime"))
        self.boot_images = reference_boot_images(self.hierarchy.trust_root, self.vendor.public_key)
        self.known_good = {kind: image.measurement for kind, image in self.boot_images.items()}
        host_images = dict(self.boot_images)
        host_images.update(boot_overrides or {})
        self.deploy = DeployService(
            self.hierarchy, self.carrier, self.vendor.public_key, self.known_good["rootvm"],
            self.entropy.child("deploy"), self.clock,
        )
        self.host = host_cls(
            self.platform, self.deploy.issue_host_credential("host-1"), self.carrier, host_images,
            PROGRAMS, self.entropy.child("host"), self.clock,
        )
        self._owners = 0

    @property
    def network(self) -> Optional[SimNetwork]:
        return self.carrier if isinstance(self.carrier, SimNetwork) else None

    @property
    def trust_root(self):
        return self.hierarchy.trust_root

    async def start(self) -> "Testbed":
        await self.deploy.start()
        await self.host.start()
        return self

    async def close(self) -> None:
        await self.carrier.shutdown()

    async def __aenter__(self) -> "Testbed":
        return await self.start()

    async def __aexit__(self, *exc) -> None:
        await self.close()

    async def deploy_rootvm(self) -> RootVmHandle:
        return await self.deploy.deploy_rootvm(self.host.address)

    async def new_owner(self, name: str) -> OwnerClient:
        self._owners += 1
        return await OwnerClient.enroll(
            self.carrier, name, self.deploy.address, self.entropy.child(f"owner:{name}"), self.clock,
            host_address=self.host.address, origin=f"owner-{name}",
        )

    def seal_reference(self, label: str = "reference") -> Tuple[SealedImage, ImageKey]:
        key = ImageKey.generate(self.entropy.child(f"image:{label}"))
        return seal_image(reference_layers(), key), key

    def agent(self, vm_id: str) -> ScVmAgent:
        return self.host.inventory.running[vm_id]

    @property
    def rootvm(self) -> RootVm:
        return self.host.inventory.running[self.host.rootvm_id]

    async def provision_vm(self, owner: OwnerClient, label: str = "reference") -> Tuple[VmRecord, ImageKey]:
        """Seal and upload the reference image, then create an attested SC-VM for it."""
        image, key = self.seal_reference(label)
        image_id = await owner.upload_image(image.to_bytes())
        record = await owner.create_vm(image_id, self.known_good["scvm"])
        return record, key

    async def run_reference(self, owner: OwnerClient) -> bytes:
        """Full lifecycle on the reference image; returns the workload output."""
        record, key = await self.provision_vm(owner)
        proxy = await owner.connect_vm(record)
        try:
            for step in (lambda: proxy.create(key), lambda: proxy.start(REFERENCE_ENTRY)):
                result = await step()
                if not result.ok:
                    raise error_from_code(result.code, result.output.decode(errors="replace"))
            return result.output
        finally:
            await proxy.runtime.close()
