"""Hashing, key generation and signatures.

SHA-256 for content digests, Ed25519 for signatures.  Keys and signatures are
handled as raw bytes (32-byte public keys, 32-byte private seeds, 64-byte
signatures) so they can be embedded directly in canonical encodings.

``generate_keypair`` draws from ``os.urandom`` by default; simulations that
need reproducible identities may pass a seeded ``random.Random`` instead.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from random import Random

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

DIGEST_SIZE = 32
KEY_SIZE = 32
SIGNATURE_SIZE = 64

#: Digest value used as the predecessor link of the very first block header.
ZERO_DIGEST = bytes(DIGEST_SIZE)


def sha256(data: bytes) -> bytes:
    """32-byte SHA-256 digest of ``data``."""
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    """An Ed25519 identity: raw public key and private seed."""

    public: bytes
    secret: bytes

    def __repr__(self) -> str:  # keep secrets out of logs
        return f"KeyPair(public={self.public.hex()[:16]}..)"


def generate_keypair(rng: Random | None = None) -> KeyPair:
    """Create a fresh keypair.

    With ``rng`` the private seed is drawn from that generator, which makes
    identities reproducible for a fixed simulation seed.  Without it the seed
    comes from the operating system's CSPRNG.
    """
    seed = rng.randbytes(KEY_SIZE) if rng is not None else os.urandom(KEY_SIZE)
    private = Ed25519PrivateKey.from_private_bytes(seed)
    public = private.public_key().public_bytes_raw()
    return KeyPair(public=public, secret=seed)


def sign(secret: bytes, message: bytes) -> bytes:
    """Deterministic Ed25519 signature of ``message`` under ``secret``."""
    return Ed25519PrivateKey.from_private_bytes(secret).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid signature of ``message``.

    Malformed keys or signature bytes simply yield ``False``; this function
    never raises on untrusted input.
    """
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True
