"""Measured boot: firmware with embedded kernel/params/verity digests.

The firmware blob is the whole measured payload. It refuses to start a
kernel, command line or root filesystem whose digest differs from the one
baked into it, so the launch measurement transitively covers all four.

Verity tree: ``leaves[i] = SHA-256(block_i)``; tree leaf node
``SHA-256(0x00 || leaves[i])``; interior node ``SHA-256(0x01 || left || right)``;
an odd trailing node is promoted unchanged to the next level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

from .crypto import ct_equal, sha256
from .errors import BootRejected, IndexOutOfRange, WireError
from .wire import decode_fields, encode_fields, expect_len

LEAF_SIZE = 4096
FIRMWARE_MAGIC = b"TCXFW1"

KERNEL_MISMATCH = "KernelMismatch"
PARAM_MISMATCH = "ParamMismatch"
VERITY_MISMATCH = "VerityMismatch"


def _split(fs_image: bytes) -> List[bytes]:
    padded = fs_image + b"\x00" * (-len(fs_image) % LEAF_SIZE)
    return [padded[i : i + LEAF_SIZE] for i in range(0, len(padded), LEAF_SIZE)]


def leaf_node(leaf_hash: bytes) -> bytes:
    return sha256(b"\x00", leaf_hash)


def interior_node(left: bytes, right: bytes) -> bytes:
    return sha256(b"\x01", left, right)


@dataclass(frozen=True)
class VerityTree:
    leaves: Tuple[bytes, ...]
    levels: Tuple[Tuple[bytes, ...], ...]

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    def audit_path(self, index: int) -> List[Tuple[bool, bytes]]:
        """Siblings from leaf level upwards as (sibling_is_left, hash)."""
        path = []
        for level in self.levels[:-1]:
            sibling = index ^ 1
            if sibling < len(level):
                path.append((sibling < index, level[sibling]))
            index //= 2
        return path


def build_verity(fs_image: bytes) -> VerityTree:
    if not fs_image:
        raise ValueError("filesystem image is empty")
    leaves = tuple(sha256(b) for b in _split(fs_image))
    level = tuple(leaf_node(h) for h in leaves)
    levels = [level]
    while len(level) > 1:
        nxt = [interior_node(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = tuple(nxt)
        levels.append(level)
    return VerityTree(leaves, tuple(levels))


def verify_block(tree: VerityTree, index: int, block: bytes) -> bool:
    if not 0 <= index < len(tree.leaves):
        raise IndexOutOfRange(f"block {index} outside 0..{len(tree.leaves) - 1}")
    if len(block) < LEAF_SIZE:
        block = block + b"\x00" * (LEAF_SIZE - len(block))
    leaf = sha256(block)
    if not ct_equal(leaf, tree.leaves[index]):
        return False
    node = leaf_node(leaf)
    for sibling_is_left, sibling in tree.audit_path(index):
        node = interior_node(sibling, node) if sibling_is_left else interior_node(node, sibling)
    return ct_equal(node, tree.root)


@dataclass(frozen=True)
class FirmwareBlob:
    firmware_code: bytes
    embedded_kernel_hash: bytes
    embedded_param_hash: bytes
    embedded_verity_root: bytes

    def __post_init__(self):
        for name in ("embedded_kernel_hash", "embedded_param_hash", "embedded_verity_root"):
            if len(getattr(self, name)) != 32:
                raise WireError(f"{name} must be a 32-byte digest")

    def to_bytes(self) -> bytes:
        return encode_fields(
            FIRMWARE_MAGIC,
            self.firmware_code,
            self.embedded_kernel_hash,
            self.embedded_param_hash,
            self.embedded_verity_root,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "FirmwareBlob":
        magic, code, kh, ph, vr = decode_fields(data, 5)
        if magic != FIRMWARE_MAGIC:
            raise WireError("not a firmware blob")
        return cls(code, expect_len(kh, 32, "kernel hash"), expect_len(ph, 32, "param hash"), expect_len(vr, 32, "verity root"))

    @property
    def measurement(self) -> bytes:
        return sha256(self.to_bytes())


def assemble(firmware_code: bytes, kernel: bytes, params: bytes, verity_root: bytes) -> Tuple[FirmwareBlob, bytes]:
    blob = FirmwareBlob(firmware_code, sha256(kernel), sha256(params), verity_root)
    return blob, blob.to_bytes()


@dataclass(frozen=True)
class BootedState:
    kernel: bytes
    params: bytes
    fs_image: bytes
    verity: VerityTree

    @property
    def param_map(self) -> dict:
        out = {}
        for token in self.params.decode("utf-8", "replace").split():
            key, _, value = token.partition("=")
            out[key] = value
        return out


def boot(blob: FirmwareBlob, kernel: bytes, params: bytes, fs_image: bytes) -> BootedState:
    """Run the firmware's checks; raises BootRejected naming the first failing stage."""
    if not ct_equal(sha256(kernel), blob.embedded_kernel_hash):
        raise BootRejected(KERNEL_MISMATCH)
    if not ct_equal(sha256(params), blob.embedded_param_hash):
        raise BootRejected(PARAM_MISMATCH)
    if not fs_image:
        raise BootRejected(VERITY_MISMATCH)
    tree = build_verity(fs_image)
    if not ct_equal(tree.root, blob.embedded_verity_root):
        raise BootRejected(VERITY_MISMATCH)
    return BootedState(kernel, params, fs_image, tree)


def measure(firmware_code: bytes, kernel: bytes, params: bytes, fs_image: bytes) -> bytes:
    """Expected launch measurement for a set of boot artifacts."""
    _, payload = assemble(firmware_code, kernel, params, build_verity(fs_image).root)
    return sha256(payload)


# -- guest artifacts ---------------------------------------------------------
# A simulated kernel names the guest program it runs; a root filesystem is a
# canonical list of (path, content) pairs.

KERNEL_MAGIC = b"TCXKERNEL1\n"


def make_kernel(program: str, build: bytes = b"") -> bytes:
    return KERNEL_MAGIC + b"program=" + program.encode() + b"\n" + build


def kernel_program(kernel: bytes) -> str:
    if not kernel.startswith(KERNEL_MAGIC):
        raise WireError("not a simulated kernel")
    line = kernel[len(KERNEL_MAGIC):].split(b"\n", 1)[0]
    if not line.startswith(b"program="):
        raise WireError("kernel names no program")
    return line[len(b"program="):].decode()


def pack_rootfs(files: dict) -> bytes:
    return encode_fields(*(encode_fields(p.encode(), files[p]) for p in sorted(files)))


def unpack_rootfs(fs_image: bytes) -> dict:
    out = {}
    for entry in decode_fields(fs_image):
        path, content = decode_fields(entry, 2)
        out[path.decode()] = content
    return out
