"""Cryptographic primitives: hashing, authenticated symmetric encryption,
public-key encryption, signatures, and threshold secret sharing.

Concrete choices (the rest of the package depends only on the contracts):

* hashing        SHA-256 (32-byte digests)
* symmetric      AES-256-GCM; decrypting with the wrong key or a modified
                 ciphertext fails the authentication tag
* asymmetric     ephemeral X25519 + HKDF-SHA256 + AES-256-GCM, bounded to
                 short payloads (it carries wrapped keys and control
                 messages, never bulk data)
* signatures     Ed25519
* secret sharing byte-wise polynomial sharing over GF(2^8) with
                 index-tagged shards

A :class:`KeyPair` bundles an encryption half and a signing half so a
single party identity can both receive wrapped keys and sign messages.

All operations are stateless; pass a seeded ``numpy.random.Generator`` to
the generators when reproducible key material is needed (enrollment does
this so a deployment can be rebuilt from its seed).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .encoding import lp

DIGEST_LEN = 32
SYM_KEY_LEN = 32
SYM_NONCE_LEN = 12
KEY_HALF_LEN = 32

# The asymmetric channel carries symmetric keys and short control
# messages only; anything larger belongs in a symmetric payload.
ASYM_MAX_PAYLOAD = 1024

_ECIES_INFO = b"biochain/ecies/v1"


class CryptoError(Exception):
    """Base class for all failures raised by this module."""


class AuthenticationFailure(CryptoError):
    """Symmetric decryption failed its authentication check."""


class DecryptionFailure(CryptoError):
    """Asymmetric decryption failed (wrong key or damaged ciphertext)."""


class PayloadTooLarge(CryptoError):
    """Asymmetric payload exceeds the declared bound."""


class InvalidConfig(CryptoError):
    """A configuration violates its own arithmetic constraints."""


class InsufficientShards(CryptoError):
    """Fewer shards supplied than the reconstruction threshold."""


class DuplicateIndex(CryptoError):
    """Two shards in one reconstruction carry the same index."""


def _random_bytes(rng: Optional[np.random.Generator], n: int) -> bytes:
    if rng is None:
        return os.urandom(n)
    return rng.bytes(n)


# ---------------------------------------------------------------------------
# Hashing
# ---------------------------------------------------------------------------

def digest(data: bytes) -> bytes:
    """Hash an arbitrary byte string to a fixed-length digest."""
    return hashlib.sha256(data).digest()


def digest_parts(*parts: bytes) -> bytes:
    """Hash several byte strings as one length-prefixed sequence.

    The length prefixes make the combination unambiguous: no two distinct
    part sequences can serialize to the same input.
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(lp(part))
    return h.digest()


# ---------------------------------------------------------------------------
# Key pairs (X25519 encryption half + Ed25519 signing half)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    """Composite key pair: 32 encryption bytes then 32 signing bytes."""

    public: bytes
    private: bytes


def generate_keypair(rng: Optional[np.random.Generator] = None) -> KeyPair:
    enc_seed = _random_bytes(rng, KEY_HALF_LEN)
    sig_seed = _random_bytes(rng, KEY_HALF_LEN)
    enc_priv = X25519PrivateKey.from_private_bytes(enc_seed)
    sig_priv = Ed25519PrivateKey.from_private_bytes(sig_seed)
    raw = serialization.Encoding.Raw
    pub_fmt = serialization.PublicFormat.Raw
    public = (
        enc_priv.public_key().public_bytes(raw, pub_fmt)
        + sig_priv.public_key().public_bytes(raw, pub_fmt)
    )
    return KeyPair(public=public, private=enc_seed + sig_seed)


def derive_public(private: bytes) -> bytes:
    """Recompute the composite public key from private key bytes.

    Note: X25519 clamps five bits of its scalar, so corruptions confined
    to those bits of the encryption half are not observable here; the
    signing half is injective in practice.
    """
    enc_priv = X25519PrivateKey.from_private_bytes(private[:KEY_HALF_LEN])
    sig_priv = Ed25519PrivateKey.from_private_bytes(private[KEY_HALF_LEN:])
    raw = serialization.Encoding.Raw
    pub_fmt = serialization.PublicFormat.Raw
    return (
        enc_priv.public_key().public_bytes(raw, pub_fmt)
        + sig_priv.public_key().public_bytes(raw, pub_fmt)
    )


def _enc_public(public: bytes) -> X25519PublicKey:
    return X25519PublicKey.from_public_bytes(public[:KEY_HALF_LEN])


def _enc_private(private: bytes) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(private[:KEY_HALF_LEN])


def _sig_public(public: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public[KEY_HALF_LEN:])


def _sig_private(private: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(private[KEY_HALF_LEN:])


# ---------------------------------------------------------------------------
# Symmetric cipher
# ---------------------------------------------------------------------------

def generate_sym_key(rng: Optional[np.random.Generator] = None) -> bytes:
    return _random_bytes(rng, SYM_KEY_LEN)


def sym_encrypt(message: bytes, key: bytes) -> bytes:
    """Encrypt with AES-256-GCM; output is nonce followed by ciphertext."""
    nonce = os.urandom(SYM_NONCE_LEN)
    return nonce + AESGCM(key).encrypt(nonce, message, None)


def sym_decrypt(ciphertext: bytes, key: bytes) -> bytes:
    """Invert :func:`sym_encrypt`.

    Raises:
        AuthenticationFailure: wrong key, or the ciphertext was modified.
    """
    if len(ciphertext) < SYM_NONCE_LEN + 16:
        raise AuthenticationFailure("ciphertext too short")
    nonce, body = ciphertext[:SYM_NONCE_LEN], ciphertext[SYM_NONCE_LEN:]
    try:
        return AESGCM(key).decrypt(nonce, body, None)
    except InvalidTag as exc:
        raise AuthenticationFailure("authentication tag mismatch") from exc


# ---------------------------------------------------------------------------
# Asymmetric cipher and signatures
# ---------------------------------------------------------------------------

def asym_encrypt(message: bytes, public: bytes) -> bytes:
    """Encrypt a short message to the holder of ``public``.

    An ephemeral X25519 key agrees a shared secret with the recipient's
    encryption key; HKDF turns it into an AES-GCM key. Output layout:
    ephemeral public key, nonce, ciphertext.

    Raises:
        PayloadTooLarge: message longer than ``ASYM_MAX_PAYLOAD``.
    """
    if len(message) > ASYM_MAX_PAYLOAD:
        raise PayloadTooLarge(
            f"{len(message)} bytes exceeds the {ASYM_MAX_PAYLOAD}-byte bound"
        )
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    shared = eph.exchange(_enc_public(public))
    key = HKDF(
        algorithm=hashes.SHA256(), length=SYM_KEY_LEN, salt=None, info=_ECIES_INFO
    ).derive(shared)
    nonce = os.urandom(SYM_NONCE_LEN)
    return eph_pub + nonce + AESGCM(key).encrypt(nonce, message, eph_pub)


def asym_decrypt(ciphertext: bytes, private: bytes) -> bytes:
    """Invert :func:`asym_encrypt` with the matching private key.

    Raises:
        DecryptionFailure: wrong private key or damaged ciphertext.
    """
    header = KEY_HALF_LEN + SYM_NONCE_LEN
    if len(ciphertext) < header + 16:
        raise DecryptionFailure("ciphertext too short")
    eph_pub = ciphertext[:KEY_HALF_LEN]
    nonce = ciphertext[KEY_HALF_LEN:header]
    body = ciphertext[header:]
    try:
        shared = _enc_private(private).exchange(
            X25519PublicKey.from_public_bytes(eph_pub)
        )
        key = HKDF(
            algorithm=hashes.SHA256(), length=SYM_KEY_LEN, salt=None, info=_ECIES_INFO
        ).derive(shared)
        return AESGCM(key).decrypt(nonce, body, eph_pub)
    except (InvalidTag, ValueError) as exc:
        raise DecryptionFailure("not the intended recipient") from exc


def sign(private: bytes, message: bytes) -> bytes:
    return _sig_private(private).sign(message)


def verify(public: bytes, signature: bytes, message: bytes) -> bool:
    """True iff ``signature`` was produced over exactly ``message`` by the
    signing half matching ``public``. Never raises."""
    try:
        _sig_public(public).verify(signature, message)
        return True
    except Exception:
        return False


# ---------------------------------------------------------------------------
# Hybrid envelope (symmetric payload, asymmetric key wrap)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    """Sealed payload: ``ed`` is the symmetric ciphertext, ``ek`` wraps the
    symmetric key for the intended recipient."""

    ed: bytes
    ek: bytes


def seal(
    payload: bytes,
    recipient_public: bytes,
    sym_key: Optional[bytes] = None,
    rng: Optional[np.random.Generator] = None,
) -> Envelope:
    key = sym_key if sym_key is not None else generate_sym_key(rng)
    return Envelope(ed=sym_encrypt(payload, key), ek=asym_encrypt(key, recipient_public))


def open_envelope(envelope: Envelope, private: bytes) -> bytes:
    key = asym_decrypt(envelope.ek, private)
    return sym_decrypt(envelope.ed, key)


# ---------------------------------------------------------------------------
# Shamir threshold secret sharing over GF(2^8)
# ---------------------------------------------------------------------------

# Field tables for the AES polynomial x^8 + x^4 + x^3 + x + 1 (0x11B).
_GF_EXP = np.zeros(512, dtype=np.uint8)
_GF_LOG = np.zeros(256, dtype=np.int64)


def _init_tables() -> None:
    # Generator 3 (x + 1); 2 does not generate the full multiplicative group.
    x = 1
    for i in range(255):
        _GF_EXP[i] = x
        _GF_LOG[x] = i
        doubled = x << 1
        if doubled & 0x100:
            doubled ^= 0x11B
        x = doubled ^ x
    _GF_EXP[255:510] = _GF_EXP[:255]


_init_tables()


def _gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return int(_GF_EXP[_GF_LOG[a] + _GF_LOG[b]])


def _gf_div(a: int, b: int) -> int:
    if b == 0:
        raise ZeroDivisionError("division by zero in GF(2^8)")
    if a == 0:
        return 0
    return int(_GF_EXP[(_GF_LOG[a] - _GF_LOG[b]) % 255])


def _gf_mul_vec(vec: np.ndarray, scalar: int) -> np.ndarray:
    """Multiply every byte of ``vec`` by ``scalar`` in GF(2^8)."""
    if scalar == 0:
        return np.zeros_like(vec)
    out = _GF_EXP[(_GF_LOG[vec] + _GF_LOG[scalar]) % 255]
    out[vec == 0] = 0
    return out


@dataclass(frozen=True)
class Shard:
    """One piece of a split secret. ``index`` is the field point (1-based),
    ``payload`` has the same length as the secret."""

    index: int
    payload: bytes


@dataclass(frozen=True)
class SharingConfig:
    """Sharing arithmetic for a group of ``n`` participants: the secret is
    split into ``2n + 1`` shards and any ``n + 2`` of them reconstruct it."""

    total: int
    threshold: int
    n: int

    @classmethod
    def for_group(cls, n: int) -> "SharingConfig":
        return cls(total=2 * n + 1, threshold=n + 2, n=n)

    def validate(self) -> None:
        if self.n < 1:
            raise InvalidConfig(f"group size must be >= 1, got {self.n}")
        if self.total != 2 * self.n + 1:
            raise InvalidConfig(
                f"total must be 2n+1 = {2 * self.n + 1}, got {self.total}"
            )
        if self.threshold != self.n + 2:
            raise InvalidConfig(
                f"threshold must be n+2 = {self.n + 2}, got {self.threshold}"
            )
        if self.total > 255:
            raise InvalidConfig("GF(2^8) sharing supports at most 255 shards")


def shamir_split(
    secret: bytes,
    config: SharingConfig,
    rng: Optional[np.random.Generator] = None,
) -> list[Shard]:
    """Split ``secret`` into ``config.total`` shards at ``config.threshold``.

    Each byte of the secret becomes the constant term of a random
    polynomial of degree ``threshold - 1``; shard ``i`` holds the
    polynomial values at field point ``i``.
    """
    config.validate()
    if not secret:
        raise ValueError("cannot split an empty secret")
    length = len(secret)
    coeffs = np.empty((config.threshold, length), dtype=np.uint8)
    coeffs[0] = np.frombuffer(secret, dtype=np.uint8)
    rand = _random_bytes(rng, (config.threshold - 1) * length)
    coeffs[1:] = np.frombuffer(rand, dtype=np.uint8).reshape(
        config.threshold - 1, length
    )
    shards = []
    for x in range(1, config.total + 1):
        acc = np.zeros(length, dtype=np.uint8)
        for row in coeffs[::-1]:
            acc = _gf_mul_vec(acc, x) ^ row
        shards.append(Shard(index=x, payload=acc.tobytes()))
    return shards


@lru_cache(maxsize=4096)
def _lagrange_weights(indices: tuple[int, ...]) -> tuple[int, ...]:
    """Lagrange basis values at zero for the given field points."""
    weights = []
    for i, xi in enumerate(indices):
        num, den = 1, 1
        for j, xj in enumerate(indices):
            if i == j:
                continue
            num = _gf_mul(num, xj)
            den = _gf_mul(den, xi ^ xj)
        weights.append(_gf_div(num, den))
    return tuple(weights)


def shamir_reconstruct(shards: Sequence[Shard], config: SharingConfig) -> bytes:
    """Recombine shards into the original secret.

    Rejection below threshold happens by count, before any interpolation,
    so an under-sized pool can never "accidentally" reconstruct.

    Raises:
        InsufficientShards: fewer shards than ``config.threshold``.
        DuplicateIndex: two shards share an index.
    """
    config.validate()
    if len(shards) < config.threshold:
        raise InsufficientShards(
            f"{len(shards)} shards supplied, {config.threshold} required"
        )
    indices = tuple(s.index for s in shards)
    if len(set(indices)) != len(indices):
        raise DuplicateIndex("shard indices must be distinct")
    for idx in indices:
        if not 1 <= idx <= config.total:
            raise InvalidConfig(f"shard index {idx} outside 1..{config.total}")
    lengths = {len(s.payload) for s in shards}
    if len(lengths) != 1:
        raise InvalidConfig("shard payloads must have equal length")
    weights = _lagrange_weights(indices)
    secret = np.zeros(lengths.pop(), dtype=np.uint8)
    for shard, w in zip(shards, weights):
        secret ^= _gf_mul_vec(np.frombuffer(shard.payload, dtype=np.uint8), w)
    return secret.tobytes()
