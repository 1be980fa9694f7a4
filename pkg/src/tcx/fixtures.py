"""Reference artifacts: guest boot images and the sample container image.

Guest root filesystems embed the Root CA certificate and the vendor root
key, so measurements (and the known-good values verifiers hold) depend on
the hierarchy in use. ``boot_measurements`` recomputes them from scratch.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Tuple

from .boot import make_kernel, pack_rootfs
from .control_plane import (
    ROOT_CA_PATH,
    SCVM_MEASUREMENT_PATH,
    VENDOR_ROOT_PATH,
    BootImage,
)
from .images import layers_from_directory
from .pki import RoleCertificate

DATA_DIR = Path(__file__).parent / "data"
REFERENCE_DIR = DATA_DIR / "reference"
REFERENCE_IMAGE_DIR = REFERENCE_DIR / "image"
REFERENCE_ENTRY = "bin/app.tcx"

FIRMWARE_CODE = b"TCX reference guest firmware v1\n" + bytes(range(256))
ROOTVM_PARAMS = b"console=hvc0 root=/dev/vda ro tcx.verity=on tcx.role=rootvm"
SCVM_PARAMS = b"console=hvc0 root=/dev/vda ro tcx.verity=on tcx.role=scvm"


def scvm_boot_image(trust_root: RoleCertificate, vendor_root: bytes) -> BootImage:
    fs = pack_rootfs(
        {
            ROOT_CA_PATH: trust_root.to_bytes(),
            VENDOR_ROOT_PATH: vendor_root,
            "sbin/init": b"exec /sbin/tcx-agent\n",
            "sbin/tcx-agent": b"scvm agent build 1\n",
        }
    )
    return BootImage(FIRMWARE_CODE, make_kernel("scvm-agent", b"build 1\n"), SCVM_PARAMS, fs)


def rootvm_boot_image(trust_root: RoleCertificate, vendor_root: bytes, scvm_measurement: bytes) -> BootImage:
    fs = pack_rootfs(
        {
            ROOT_CA_PATH: trust_root.to_bytes(),
            VENDOR_ROOT_PATH: vendor_root,
            SCVM_MEASUREMENT_PATH: scvm_measurement,
            "sbin/init": b"exec /sbin/tcx-rootvm\n",
            "sbin/tcx-rootvm": b"root VM service build 1\n",
        }
    )
    return BootImage(FIRMWARE_CODE, make_kernel("rootvm", b"build 1\n"), ROOTVM_PARAMS, fs)


def reference_boot_images(trust_root: RoleCertificate, vendor_root: bytes) -> Dict[str, BootImage]:
    scvm = scvm_boot_image(trust_root, vendor_root)
    rootvm = rootvm_boot_image(trust_root, vendor_root, scvm.measurement)
    return {"rootvm": rootvm, "scvm": scvm}


def boot_measurements(trust_root: RoleCertificate, vendor_root: bytes) -> Dict[str, bytes]:
    return {kind: image.measurement for kind, image in reference_boot_images(trust_root, vendor_root).items()}


def reference_layers() -> List[Tuple[str, bytes]]:
    return layers_from_directory(REFERENCE_IMAGE_DIR)


def reference_expected_output() -> bytes:
    return (REFERENCE_DIR / "expected_output.txt").read_bytes()
