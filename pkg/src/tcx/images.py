"""Authenticated encrypted container images with a writable block overlay.

Layout of a sealed image file (all integers big-endian)::

    magic      "TCXIMG1"                      7 bytes
    version    u8 = 1
    image_id   16 bytes
    block_size u32 = 4096
    block_count u64
    key_check  32 bytes   HMAC(mac_key, "key-check" || image_id)
    layer_count u32
    layers     layer_count x (u16 id_len, id, u64 first_block, u64 blocks, u64 length)
    header_tag 32 bytes   HMAC(mac_key, "header" || header bytes above || SHA-256(tags))
    blocks     block_count x 4096 bytes   AES-256-XTS, tweak = block index
    tags       block_count x 32 bytes     HMAC(mac_key, "base" || image_id || index || ciphertext)

Each layer is zero-padded to a whole number of blocks; its true length lives
in the authenticated header. Reads authenticate before they decrypt.

Overlay file::

    magic "TCXOVL1" | base_fingerprint 32 | block_count u64 | dirty_count u32 |
    dirty_count x (u64 index, 4096 ciphertext, 32 tag)

Overlay tags bind the base image fingerprint instead of the image id, so an
overlay cannot be replayed onto a different base.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import crypto
from .crypto import Entropy
from .errors import (
    ImageFormatError,
    IndexOutOfRange,
    IntegrityFailure,
    WrongKey,
)

MAGIC = b"TCXIMG1"
OVERLAY_MAGIC = b"TCXOVL1"
VERSION = 1
BLOCK_SIZE = 4096
TAG_SIZE = 32
IMAGE_ID_SIZE = 16


@dataclass(frozen=True)
class ImageKey:
    key: bytes = field(repr=False)
    image_id: bytes

    @classmethod
    def generate(cls, entropy: Optional[Entropy] = None) -> "ImageKey":
        entropy = entropy or Entropy()
        return cls(entropy.bytes(32), entropy.bytes(IMAGE_ID_SIZE))

    def to_bytes(self) -> bytes:
        return self.image_id + self.key

    @classmethod
    def from_bytes(cls, data: bytes) -> "ImageKey":
        if len(data) != IMAGE_ID_SIZE + 32:
            raise ImageFormatError("image key must be 48 bytes")
        return cls(bytes(data[IMAGE_ID_SIZE:]), bytes(data[:IMAGE_ID_SIZE]))


def _tags_digest(tags: Sequence[bytes]) -> bytes:
    return crypto.sha256(*tags)


class _Keys:
    def __init__(self, key: ImageKey):
        self.xts = crypto.hkdf(key.key, b"tcx-image-xts-v1", 64)
        self.mac = crypto.hkdf(key.key, b"tcx-image-mac-v1", 32)

    @staticmethod
    def _tweak(index: int) -> bytes:
        return index.to_bytes(16, "little")

    def encrypt(self, index: int, block: bytes) -> bytes:
        enc = Cipher(algorithms.AES(self.xts), modes.XTS(self._tweak(index))).encryptor()
        return enc.update(block) + enc.finalize()

    def decrypt(self, index: int, block: bytes) -> bytes:
        dec = Cipher(algorithms.AES(self.xts), modes.XTS(self._tweak(index))).decryptor()
        return dec.update(block) + dec.finalize()

    def tag(self, domain: bytes, binding: bytes, index: int, ciphertext: bytes) -> bytes:
        return crypto.hmac_sha256(self.mac, domain + binding + struct.pack(">Q", index) + ciphertext)

    def key_check(self, image_id: bytes) -> bytes:
        return crypto.hmac_sha256(self.mac, b"key-check" + image_id)

    def header_tag(self, header: bytes, tags: Sequence[bytes]) -> bytes:
        return crypto.hmac_sha256(self.mac, b"header" + header + _tags_digest(tags))


@dataclass(frozen=True)
class LayerEntry:
    layer_id: str
    first_block: int
    block_count: int
    length: int


@dataclass(frozen=True)
class ImageHeader:
    image_id: bytes
    block_count: int
    key_check: bytes
    layers: Tuple[LayerEntry, ...]
    block_size: int = BLOCK_SIZE

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack(">B", VERSION)
        out += self.image_id
        out += struct.pack(">IQ", self.block_size, self.block_count)
        out += self.key_check
        out += struct.pack(">I", len(self.layers))
        for layer in self.layers:
            lid = layer.layer_id.encode("utf-8")
            out += struct.pack(">H", len(lid)) + lid
            out += struct.pack(">QQQ", layer.first_block, layer.block_count, layer.length)
        return bytes(out)

    @classmethod
    def parse(cls, data: bytes) -> Tuple["ImageHeader", int]:
        """Parse a header from the front of ``data``; returns (header, bytes consumed)."""
        try:
            if data[:7] != MAGIC:
                raise ImageFormatError("bad magic")
            pos = 7
            (version,) = struct.unpack_from(">B", data, pos)
            pos += 1
            if version != VERSION:
                raise ImageFormatError(f"unsupported version {version}")
            image_id = data[pos : pos + IMAGE_ID_SIZE]
            pos += IMAGE_ID_SIZE
            block_size, block_count = struct.unpack_from(">IQ", data, pos)
            pos += 12
            key_check = data[pos : pos + 32]
            pos += 32
            (n_layers,) = struct.unpack_from(">I", data, pos)
            pos += 4
            layers = []
            for _ in range(n_layers):
                (lid_len,) = struct.unpack_from(">H", data, pos)
                pos += 2
                lid = data[pos : pos + lid_len].decode("utf-8")
                pos += lid_len
                first, count, length = struct.unpack_from(">QQQ", data, pos)
                pos += 24
                layers.append(LayerEntry(lid, first, count, length))
        except (struct.error, UnicodeDecodeError) as exc:
            raise ImageFormatError("truncated or corrupt header") from exc
        if len(image_id) != IMAGE_ID_SIZE or len(key_check) != 32:
            raise ImageFormatError("truncated header")
        if block_size != BLOCK_SIZE:
            raise ImageFormatError(f"unsupported block size {block_size}")
        return cls(bytes(image_id), block_count, bytes(key_check), tuple(layers), block_size), pos


@dataclass(frozen=True)
class SealedImage:
    header: ImageHeader
    header_tag: bytes
    blocks: Tuple[bytes, ...]
    tags: Tuple[bytes, ...]

    @property
    def image_id(self) -> bytes:
        return self.header.image_id

    @property
    def block_count(self) -> int:
        return self.header.block_count

    @property
    def fingerprint(self) -> bytes:
        return crypto.sha256(self.header.to_bytes(), self.header_tag, _tags_digest(self.tags))

    def to_bytes(self) -> bytes:
        return b"".join([self.header.to_bytes(), self.header_tag, *self.blocks, *self.tags])

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedImage":
        data = bytes(data)
        header, pos = ImageHeader.parse(data)
        n = header.block_count
        expected = pos + TAG_SIZE + n * (BLOCK_SIZE + TAG_SIZE)
        if len(data) != expected:
            raise ImageFormatError(f"image is {len(data)} bytes, header implies {expected}")
        header_tag = data[pos : pos + TAG_SIZE]
        pos += TAG_SIZE
        blocks = tuple(data[pos + i * BLOCK_SIZE : pos + (i + 1) * BLOCK_SIZE] for i in range(n))
        pos += n * BLOCK_SIZE
        tags = tuple(data[pos + i * TAG_SIZE : pos + (i + 1) * TAG_SIZE] for i in range(n))
        return cls(header, header_tag, blocks, tags)

    def describe(self) -> str:
        lines = [
            f"magic:       {MAGIC.decode()}",
            f"image_id:    {self.image_id.hex()}",
            f"fingerprint: {self.fingerprint.hex()}",
            f"block_size:  {self.header.block_size}",
            f"block_count: {self.block_count}",
            f"layers:      {len(self.header.layers)}",
        ]
        for layer in self.header.layers:
            lines.append(
                f"  {layer.layer_id}: blocks {layer.first_block}..{layer.first_block + layer.block_count - 1}"
                f" ({layer.length} bytes)"
            )
        return "\n".join(lines)


def _blocks_for(length: int) -> int:
    return max(1, -(-length // BLOCK_SIZE))


def seal_image(layers: Sequence[Tuple[str, bytes]], key: ImageKey) -> SealedImage:
    if not layers:
        raise ValueError("an image needs at least one layer")
    ids = [layer_id for layer_id, _ in layers]
    if len(set(ids)) != len(ids):
        raise ValueError("layer ids must be unique")
    keys = _Keys(key)
    entries = []
    blocks: List[bytes] = []
    tags: List[bytes] = []
    for layer_id, data in layers:
        count = _blocks_for(len(data))
        entries.append(LayerEntry(layer_id, len(blocks), count, len(data)))
        padded = bytes(data) + b"\x00" * (count * BLOCK_SIZE - len(data))
        for j in range(count):
            index = len(blocks)
            ct = keys.encrypt(index, padded[j * BLOCK_SIZE : (j + 1) * BLOCK_SIZE])
            blocks.append(ct)
            tags.append(keys.tag(b"base", key.image_id, index, ct))
    header = ImageHeader(key.image_id, len(blocks), keys.key_check(key.image_id), tuple(entries))
    return SealedImage(header, keys.header_tag(header.to_bytes(), tags), tuple(blocks), tuple(tags))


@dataclass(frozen=True)
class OverlayFile:
    base_image_id: bytes
    block_count: int
    dirty_blocks: Mapping[int, Tuple[bytes, bytes]] = field(default_factory=dict)

    @classmethod
    def for_image(cls, image: SealedImage) -> "OverlayFile":
        return cls(image.fingerprint, image.block_count, {})

    def to_bytes(self) -> bytes:
        out = bytearray(OVERLAY_MAGIC)
        out += self.base_image_id
        out += struct.pack(">QI", self.block_count, len(self.dirty_blocks))
        for index in sorted(self.dirty_blocks):
            ct, tag = self.dirty_blocks[index]
            out += struct.pack(">Q", index) + ct + tag
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "OverlayFile":
        data = bytes(data)
        head = len(OVERLAY_MAGIC) + 32 + 12
        if len(data) < head or data[: len(OVERLAY_MAGIC)] != OVERLAY_MAGIC:
            raise ImageFormatError("not an overlay file")
        base = data[len(OVERLAY_MAGIC) : len(OVERLAY_MAGIC) + 32]
        block_count, n = struct.unpack_from(">QI", data, len(OVERLAY_MAGIC) + 32)
        entry = 8 + BLOCK_SIZE + TAG_SIZE
        if len(data) != head + n * entry:
            raise ImageFormatError("overlay length mismatch")
        dirty = {}
        last = -1
        for i in range(n):
            off = head + i * entry
            (index,) = struct.unpack_from(">Q", data, off)
            if index <= last:
                raise ImageFormatError("overlay entries not in canonical order")
            last = index
            dirty[index] = (data[off + 8 : off + 8 + BLOCK_SIZE], data[off + 8 + BLOCK_SIZE : off + entry])
        return cls(base, block_count, dirty)


def snapshot_write(overlay: OverlayFile, block_index: int, plaintext_block: bytes, key: ImageKey) -> OverlayFile:
    """Return a new overlay with ``block_index`` replaced. Short blocks are zero-padded."""
    if not 0 <= block_index < overlay.block_count:
        raise IndexOutOfRange(f"block {block_index} outside 0..{overlay.block_count - 1}")
    if len(plaintext_block) > BLOCK_SIZE:
        raise ValueError("block larger than block size")
    keys = _Keys(key)
    padded = bytes(plaintext_block) + b"\x00" * (BLOCK_SIZE - len(plaintext_block))
    ct = keys.encrypt(block_index, padded)
    tag = keys.tag(b"overlay", overlay.base_image_id, block_index, ct)
    dirty = dict(overlay.dirty_blocks)
    dirty[block_index] = (ct, tag)
    return OverlayFile(overlay.base_image_id, overlay.block_count, dirty)


class BlockDevice:
    """Read view of a sealed image plus optional overlay. Every read is authenticated."""

    def __init__(self, image: SealedImage, overlay: Optional[OverlayFile], key: ImageKey):
        self.image = image
        self.key = key
        self._keys = _Keys(key)
        self.overlay = overlay if overlay is not None else OverlayFile.for_image(image)

    @property
    def block_count(self) -> int:
        return self.image.block_count

    @property
    def layers(self) -> Tuple[LayerEntry, ...]:
        return self.image.header.layers

    def read(self, index: int) -> bytes:
        if not 0 <= index < self.block_count:
            raise IndexOutOfRange(f"block {index} outside 0..{self.block_count - 1}")
        dirty = self.overlay.dirty_blocks.get(index)
        if dirty is not None:
            ct, tag = dirty
            expected = self._keys.tag(b"overlay", self.image.fingerprint, index, ct)
        else:
            ct, tag = self.image.blocks[index], self.image.tags[index]
            expected = self._keys.tag(b"base", self.image.image_id, index, ct)
        if not crypto.ct_equal(expected, tag):
            raise IntegrityFailure(index)
        return self._keys.decrypt(index, ct)

    def write(self, index: int, plaintext_block: bytes) -> None:
        self.overlay = snapshot_write(self.overlay, index, plaintext_block, self.key)

    def layer(self, layer_id: str) -> LayerEntry:
        for entry in self.layers:
            if entry.layer_id == layer_id:
                return entry
        raise KeyError(layer_id)

    def read_layer(self, layer_id: str) -> bytes:
        entry = self.layer(layer_id)
        data = b"".join(self.read(entry.first_block + i) for i in range(entry.block_count))
        return data[: entry.length]

    def verify_all(self) -> None:
        for i in range(self.block_count):
            self.read(i)

    def read_all_layers(self) -> List[Tuple[str, bytes]]:
        return [(e.layer_id, self.read_layer(e.layer_id)) for e in self.layers]


def open_image(image: SealedImage, overlay: Optional[OverlayFile], key: ImageKey) -> BlockDevice:
    """Authenticate the header under ``key`` and return a lazily verifying block device."""
    keys = _Keys(key)
    if key.image_id != image.image_id or not crypto.ct_equal(keys.key_check(image.image_id), image.header.key_check):
        raise WrongKey()
    if not crypto.ct_equal(keys.header_tag(image.header.to_bytes(), image.tags), image.header_tag):
        raise IntegrityFailure(None, "image header or tag table failed authentication")
    header = image.header
    if len(image.blocks) != header.block_count or len(image.tags) != header.block_count:
        raise IntegrityFailure(None, "block/tag count disagrees with header")
    covered = 0
    for layer in header.layers:
        if layer.first_block != covered or layer.length > layer.block_count * BLOCK_SIZE:
            raise IntegrityFailure(None, "layer table inconsistent")
        covered += layer.block_count
    if covered != header.block_count:
        raise IntegrityFailure(None, "layer table does not cover image")
    if overlay is not None:
        if overlay.base_image_id != image.fingerprint:
            raise IntegrityFailure(None, "overlay belongs to a different base image")
        if overlay.block_count != header.block_count:
            raise IntegrityFailure(None, "overlay block count disagrees with base")
    return BlockDevice(image, overlay, key)


def layers_from_directory(path) -> List[Tuple[str, bytes]]:
    """One layer per regular file, ordered by relative POSIX path."""
    from pathlib import Path

    root = Path(path)
    files = sorted(p for p in root.rglob("*") if p.is_file())
    return [(p.relative_to(root).as_posix(), p.read_bytes()) for p in files]
