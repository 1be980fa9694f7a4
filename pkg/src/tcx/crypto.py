"""Thin wrappers around the ``cryptography`` primitives plus a seedable DRBG.

All key generation in the package goes through :class:`Entropy` so a whole
simulated deployment can be replayed bit-for-bit from one seed.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
import threading
from typing import Optional, Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import DecryptFailure

SeedLike = Union[bytes, int, str, None]

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw
_RAW_PRIV = serialization.PrivateFormat.Raw
_NOENC = serialization.NoEncryption()


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def hmac_sha256(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def ct_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)


def hkdf(ikm: bytes, info: bytes, length: int = 32, salt: Optional[bytes] = None) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(ikm)


class Entropy:
    """HMAC-SHA256 counter-mode DRBG, or system entropy when unseeded.

    ``child(label)`` derives an independent stream whose output does not
    depend on how much the parent has already produced.
    """

    def __init__(self, seed: SeedLike = None):
        if seed is None:
            self._key = None
        else:
            if isinstance(seed, int):
                seed = struct.pack(">Q", seed & 0xFFFFFFFFFFFFFFFF)
            elif isinstance(seed, str):
                seed = seed.encode()
            self._key = sha256(b"tcx-drbg-v1", seed)
        self._counter = 0
        self._lock = threading.Lock()

    @property
    def seeded(self) -> bool:
        return self._key is not None

    def bytes(self, n: int) -> bytes:
        if self._key is None:
            return os.urandom(n)
        out = bytearray()
        with self._lock:
            while len(out) < n:
                out += hmac_sha256(self._key, b"out" + struct.pack(">Q", self._counter))
                self._counter += 1
        return bytes(out[:n])

    def child(self, label: Union[str, bytes]) -> "Entropy":
        if self._key is None:
            return Entropy()
        if isinstance(label, str):
            label = label.encode()
        child = Entropy()
        child._key = hmac_sha256(self._key, b"child" + label)
        return child

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi]."""
        span = hi - lo + 1
        return lo + int.from_bytes(self.bytes(8), "big") % span


# -- signatures ------------------------------------------------------------


def signing_key(entropy: Entropy) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(entropy.bytes(32))


def signing_key_from_bytes(raw: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(raw)


def public_bytes(key) -> bytes:
    if hasattr(key, "public_key"):
        key = key.public_key()
    return key.public_bytes(_RAW, _RAW_PUB)


def private_bytes(key) -> bytes:
    return key.private_bytes(_RAW, _RAW_PRIV, _NOENC)


def sign(key: Ed25519PrivateKey, context: bytes, data: bytes) -> bytes:
    return key.sign(context + b"\x00" + data)


def verify(public_key: bytes, signature: bytes, context: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, context + b"\x00" + data)
    except (InvalidSignature, ValueError):
        return False
    return True


# -- Diffie-Hellman --------------------------------------------------------


def dh_key(entropy: Entropy) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(entropy.bytes(32))


def dh_key_from_bytes(raw: bytes) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(raw)


def dh(private: X25519PrivateKey, peer_public: bytes) -> bytes:
    try:
        return private.exchange(X25519PublicKey.from_public_bytes(peer_public))
    except ValueError as exc:
        raise DecryptFailure("invalid Diffie-Hellman share") from exc


# -- AEAD ------------------------------------------------------------------

AEAD_NONCE = 12


def aead_seal(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def aead_open(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
    except (InvalidTag, ValueError) as exc:
        raise DecryptFailure("AEAD authentication failed") from exc
