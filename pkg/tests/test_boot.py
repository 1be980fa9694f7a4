import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from tcx.boot import (
    KERNEL_MISMATCH,
    PARAM_MISMATCH,
    VERITY_MISMATCH,
    FirmwareBlob,
    assemble,
    boot,
    build_verity,
    measure,
    verify_block,
)
from tcx.errors import BootRejected, IndexOutOfRange
from tcx.mock_tee import Platform, create_platform

FW, KERNEL, PARAMS = b"ovmf", b"kernel image", b"console=hvc0 ro"
FS = bytes(range(256)) * 40  # 10240 bytes -> 3 blocks


def sha(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def oracle_root(blocks):
    """Independent recursive recomputation of the verity root."""
    nodes = [sha(b"\x00", sha(b)) for b in blocks]

    def reduce(level):
        if len(level) == 1:
            return level[0]
        pairs = [sha(b"\x01", level[i], level[i + 1]) for i in range(0, len(level) // 2 * 2, 2)]
        return reduce(pairs + level[len(level) // 2 * 2 :])

    return reduce(nodes)


def test_one_block_root_frozen():
    # sha256(0x00 || sha256(4096 zero bytes)), computed with coreutils sha256sum
    assert build_verity(bytes(4096)).root.hex() == "2919376fc34ba39c59dbe2901404d55488926de03477c29c19ad48f48f82536d"
    assert build_verity(bytes(8192)).root.hex() == "a9a803b82dd479e5af61c533efb4e63aa92e080de74f9b0123d5e8fd3a5667f7"


@pytest.mark.parametrize("n", range(1, 9))
def test_brute_force_equivalence(n):
    blocks = [bytes([i]) * 4096 for i in range(n)]
    assert build_verity(b"".join(blocks)).root == oracle_root(blocks)


def test_identical_blocks():
    four = build_verity(bytes(4 * 4096))
    assert len(set(four.leaves)) == 1
    assert four.root != build_verity(bytes(2 * 4096)).root


def test_flip_one_block_is_local():
    blocks = [bytes([i + 1]) * 4096 for i in range(4)]
    tree = build_verity(b"".join(blocks))
    bad = bytearray(blocks[2])
    bad[0] ^= 1
    assert not verify_block(tree, 2, bytes(bad))
    for i in (0, 1, 3):
        assert verify_block(tree, i, blocks[i])


def test_verify_block_range():
    with pytest.raises(IndexOutOfRange):
        verify_block(build_verity(b"x"), 1, b"x")


@given(st.binary(min_size=1, max_size=9 * 4096))
@settings(max_examples=30, deadline=None)
def test_every_block_verifies(fs):
    tree = build_verity(fs)
    padded = fs + bytes(-len(fs) % 4096)
    for i in range(len(tree.leaves)):
        assert verify_block(tree, i, padded[i * 4096 : (i + 1) * 4096])


def test_assemble_deterministic_and_sensitive():
    root = build_verity(FS).root
    _, p1 = assemble(FW, KERNEL, PARAMS, root)
    _, p2 = assemble(FW, KERNEL, PARAMS, root)
    _, p3 = assemble(FW, KERNEL, b"console=hvc0 rw", root)
    assert p1 == p2
    assert sha(p1) != sha(p3)
    assert FirmwareBlob.from_bytes(p1).to_bytes() == p1


def test_measurement_matches_platform():
    blob, payload = assemble(FW, KERNEL, PARAMS, build_verity(FS).root)
    _, m, _ = Platform(create_platform(b"b" * 32)).launch_vm(payload)
    assert m.digest == measure(FW, KERNEL, PARAMS, FS) == blob.measurement


def test_measurement_completeness():
    base = measure(FW, KERNEL, PARAMS, FS)
    assert measure(FW + b"!", KERNEL, PARAMS, FS) != base
    assert measure(FW, KERNEL + b"!", PARAMS, FS) != base
    assert measure(FW, KERNEL, PARAMS + b"!", FS) != base
    fs = bytearray(FS)
    fs[5000] ^= 1
    assert measure(FW, KERNEL, PARAMS, bytes(fs)) != base


def test_boot_paths():
    blob, _ = assemble(FW, KERNEL, PARAMS, build_verity(FS).root)
    assert boot(blob, KERNEL, PARAMS, FS).kernel == KERNEL
    for args, stage in [
        ((b"evil kernel", PARAMS, FS), KERNEL_MISMATCH),
        ((KERNEL, b"init=/bin/sh", FS), PARAM_MISMATCH),
        ((KERNEL, PARAMS, FS[:-1] + b"\x00"), VERITY_MISMATCH),
    ]:
        with pytest.raises(BootRejected) as exc:
            boot(blob, *args)
        assert exc.value.stage == stage


def test_corrupt_any_fs_block_rejects():
    blob, _ = assemble(FW, KERNEL, PARAMS, build_verity(FS).root)
    for offset in range(0, len(FS), 997):
        fs = bytearray(FS)
        fs[offset] ^= 0x80
        with pytest.raises(BootRejected) as exc:
            boot(blob, KERNEL, PARAMS, bytes(fs))
        assert exc.value.stage == VERITY_MISMATCH
