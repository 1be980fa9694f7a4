import hashlib
import os
import threading

import pytest
from hypothesis import given, settings, strategies as st

from tcx import crypto
from tcx.crypto import Entropy
from tcx.errors import DecryptFailure, InvalidBootPayload, NoSuchVm, Reason, WireError
from tcx.mock_tee import (
    AttestationReport,
    Platform,
    SealedInjection,
    TransportContext,
    VendorRoot,
    create_platform,
    inject_secret,
    verify_report,
)

VENDOR = VendorRoot.default()


@pytest.fixture
def platform():
    return Platform(create_platform(b"p" * 32), Entropy(1))


def test_zero_seed_identity_is_endorsed():
    ident = create_platform(bytes(32))
    assert ident.endorsement_valid(VENDOR.public_key)
    assert len(ident.pdh_public) == 32
    assert len(ident.platform_id) == 16


def test_distinct_seeds_distinct_ids():
    assert create_platform(b"a" * 32).platform_id != create_platform(b"b" * 32).platform_id


def test_same_seed_identical_identity():
    a, b = create_platform(b"s" * 32), create_platform(b"s" * 32)
    assert a.public_bytes() == b.public_bytes()
    assert crypto.private_bytes(a.cek_key) == crypto.private_bytes(b.cek_key)
    assert crypto.private_bytes(a.pdh_key) == crypto.private_bytes(b.pdh_key)


def test_unseeded_identities_differ():
    assert create_platform().public_bytes() != create_platform().public_bytes()


def test_launch_measures_sha256(platform):
    _, m, _ = platform.launch_vm(b"abc")
    # FIPS 180-2 test vector, also checked with coreutils sha256sum
    assert m.digest.hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_same_payload_twice(platform):
    a = platform.launch_vm(b"payload")
    b = platform.launch_vm(b"payload")
    assert a[1].digest == b[1].digest
    assert a[0] != b[0]
    assert a[2].key != b[2].key


def test_empty_payload(platform):
    with pytest.raises(InvalidBootPayload):
        platform.launch_vm(b"")


def test_attest_round_trip(platform):
    vm, m, _ = platform.launch_vm(b"abc")
    nonce = os.urandom(16)
    report = platform.attest(vm, nonce)
    assert verify_report(report, m.digest, nonce, VENDOR.public_key)
    assert AttestationReport.from_bytes(report.to_bytes()) == report


def test_attest_unknown_vm(platform):
    with pytest.raises(NoSuchVm):
        platform.attest(b"\x00" * 16, b"\x00" * 16)


def test_stale_nonce(platform):
    vm, m, _ = platform.launch_vm(b"abc")
    report = platform.attest(vm, b"\x01" * 16)
    v = verify_report(report, m.digest, b"\x02" * 16, VENDOR.public_key)
    assert v.reason == Reason.STALE_NONCE


def test_wrong_measurement(platform):
    vm, _, _ = platform.launch_vm(b"abc")
    report = platform.attest(vm, b"\x01" * 16)
    v = verify_report(report, hashlib.sha256(b"abd").digest(), b"\x01" * 16, VENDOR.public_key)
    assert v.reason == Reason.WRONG_MEASUREMENT


def test_every_byte_flip_rejected(platform):
    vm, m, _ = platform.launch_vm(b"abc")
    nonce = b"\x07" * 16
    raw = platform.attest(vm, nonce).to_bytes()
    sig_start = len(raw) - 64
    for i in range(len(raw)):
        bad = bytearray(raw)
        bad[i] ^= 0x01
        try:
            report = AttestationReport.from_bytes(bytes(bad))
        except WireError:
            continue
        verdict = verify_report(report, m.digest, nonce, VENDOR.public_key)
        assert not verdict, i
        if i >= sig_start:
            assert verdict.reason == Reason.BAD_SIGNATURE


def test_digest_bit_flip_rejected(platform):
    vm, m, _ = platform.launch_vm(b"xyz")
    report = platform.attest(vm, b"\x00" * 16)
    for bit in range(256):
        d = bytearray(m.digest)
        d[bit // 8] ^= 1 << (bit % 8)
        assert verify_report(report, bytes(d), b"\x00" * 16, VENDOR.public_key).reason == Reason.WRONG_MEASUREMENT


def test_report_from_unendorsed_platform():
    rogue = VendorRoot.generate(b"rogue")
    fake = Platform(create_platform(b"f" * 32, vendor=rogue))
    vm, m, _ = fake.launch_vm(b"abc")
    report = fake.attest(vm, b"\x00" * 16)
    assert verify_report(report, m.digest, b"\x00" * 16, VENDOR.public_key).reason == Reason.BAD_SIGNATURE


def test_report_resigned_by_unrelated_key(platform):
    vm, m, _ = platform.launch_vm(b"abc")
    report = platform.attest(vm, b"\x00" * 16)
    forger = crypto.signing_key(Entropy(99))
    forged = AttestationReport(
        report.measurement, report.nonce, report.platform_id, report.pdh_public,
        crypto.public_bytes(forger), report.vendor_signature,
        crypto.sign(forger, b"tcx-attestation-report-v1", report.signed_bytes()),
    )
    assert verify_report(forged, m.digest, b"\x00" * 16, VENDOR.public_key).reason == Reason.BAD_SIGNATURE


@given(st.binary(min_size=1, max_size=256))
@settings(max_examples=50, deadline=None)
def test_launch_attest_verify_property(payload):
    p = Platform(create_platform(b"q" * 32))
    vm, m, _ = p.launch_vm(payload)
    assert m.digest == hashlib.sha256(payload).digest()
    assert verify_report(p.attest(vm, b"\x09" * 16), m.digest, b"\x09" * 16, VENDOR.public_key)


@given(st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32))
@settings(max_examples=30)
def test_transport_keys_symmetric(a, b):
    ka, kb = crypto.dh_key_from_bytes(a), crypto.dh_key_from_bytes(b)
    left = TransportContext.derive(ka, crypto.public_bytes(kb))
    right = TransportContext.derive(kb, crypto.public_bytes(ka))
    assert left.transport_key == right.transport_key


def _inject(platform, vm, plaintext):
    report = platform.attest(vm, b"\x00" * 16)
    return inject_secret(report, plaintext, crypto.dh_key(Entropy()))


def test_inject_round_trip(platform):
    vm, _, _ = platform.launch_vm(b"abc")
    sealed = _inject(platform, vm, b"secret")
    assert platform.receive_secret(vm, sealed) == b"secret"
    assert SealedInjection.from_bytes(sealed.to_bytes()) == sealed


def test_inject_wrong_vm(platform):
    vm1, _, _ = platform.launch_vm(b"abc")
    vm2, _, _ = platform.launch_vm(b"abc")
    sealed = _inject(platform, vm1, b"secret")
    with pytest.raises(DecryptFailure):
        platform.receive_secret(vm2, sealed)


def test_inject_replayed_to_other_platform(platform):
    vm, _, _ = platform.launch_vm(b"abc")
    sealed = _inject(platform, vm, b"secret")
    other = Platform(create_platform(b"o" * 32))
    vm_other, _, _ = other.launch_vm(b"abc")
    with pytest.raises((DecryptFailure, NoSuchVm)):
        other.receive_secret(vm, sealed)
    retargeted = SealedInjection(sealed.sender_public, other.platform_id, vm_other, sealed.nonce, sealed.ciphertext)
    with pytest.raises(DecryptFailure):
        other.receive_secret(vm_other, retargeted)


def test_inject_tampered_ciphertext(platform):
    vm, _, _ = platform.launch_vm(b"abc")
    sealed = _inject(platform, vm, b"secret")
    ct = bytearray(sealed.ciphertext)
    ct[0] ^= 0xFF
    bad = SealedInjection(sealed.sender_public, sealed.platform_id, sealed.vm_id, sealed.nonce, bytes(ct))
    with pytest.raises(DecryptFailure):
        platform.receive_secret(vm, bad)


def test_empty_and_large_plaintext(platform):
    vm, _, _ = platform.launch_vm(b"abc")
    assert platform.receive_secret(vm, _inject(platform, vm, b"")) == b""
    big = os.urandom(1 << 20)
    out = platform.receive_secret(vm, _inject(platform, vm, big))
    assert hashlib.sha256(out).digest() == hashlib.sha256(big).digest()


def test_guest_delivery_goes_through_sealing_key(platform):
    ctx = platform.launch_guest(b"abc")
    got = []
    ctx.on_secret(got.append)
    platform.deliver(ctx.vm_id, _inject(platform, ctx.vm_id, b"bundle"))
    assert got == [b"bundle"]


def test_concurrent_launches(platform):
    ids = []
    lock = threading.Lock()

    def worker():
        for _ in range(50):
            vm, _, _ = platform.launch_vm(b"x")
            with lock:
                ids.append(vm)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(ids)) == 400
