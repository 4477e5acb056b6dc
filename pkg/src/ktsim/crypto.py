"""Deterministic cryptographic primitives with fixed byte encodings.

Hashing is SHA-256 behind a one-byte domain tag, so structurally different
inputs (leaf nodes, interior nodes, identity indices, key bindings, chain
links) can never collide with each other. Signatures are Ed25519: 32-byte
public keys and 64-byte signatures, which is what the traffic and memory
accounting assumes.

All hash inputs go through :func:`encode_fields`, which length-prefixes
variable-length fields and fixes integers at 8 bytes, so concatenation is
unambiguous.

Everything here is a pure function of its inputs; signing keys derived from
the same seed always produce the same signatures (Ed25519 is deterministic),
which keeps whole simulation runs byte-for-byte reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

DIGEST_LEN = 32
SIGNATURE_LEN = 64
VERIFYING_KEY_LEN = 32

# Domain tags. One byte, prepended to every hash input.
TAG_LEAF = 0x00       # leaf-node context (leaf hashes and leaf nonces)
TAG_INTERIOR = 0x01   # interior-node context (interior hashes and nonces)
TAG_INDEX = 0x02      # identity index: index = hash(TAG_INDEX, client_id)
TAG_BINDING = 0x03    # identity-to-key binding inner hash
TAG_STR = 0x04        # chain hash over a serialized signed tree root


def encode_fields(*fields: int | bytes | str) -> bytes:
    """Unambiguous framing for hash/signature inputs.

    bytes/str fields get a 4-byte big-endian length prefix; integers are
    encoded as 8-byte big-endian (signed, so pre-genesis epoch -1 is legal).
    """
    out = bytearray()
    for f in fields:
        if isinstance(f, bool):
            raise TypeError("bool is not a framed field type")
        if isinstance(f, int):
            out += f.to_bytes(8, "big", signed=True)
        elif isinstance(f, str):
            b = f.encode("utf-8")
            out += len(b).to_bytes(4, "big")
            out += b
        elif isinstance(f, (bytes, bytearray, memoryview)):
            b = bytes(f)
            out += len(b).to_bytes(4, "big")
            out += b
        else:
            raise TypeError(f"cannot frame field of type {type(f).__name__}")
    return bytes(out)


def hash_tagged(tag: int, payload: bytes) -> bytes:
    """32-byte digest of a domain tag byte followed by the payload."""
    if not 0 <= tag <= 0xFF:
        raise ValueError("domain tag must be a single byte")
    return hashlib.sha256(bytes([tag]) + payload).digest()


def hash_fields(tag: int, *fields: int | bytes | str) -> bytes:
    """hash_tagged over framed fields; the workhorse for all tree hashing."""
    return hash_tagged(tag, encode_fields(*fields))


def derive(label: str, *fields: int | bytes | str) -> bytes:
    """Derive 32 bytes of keyed-by-label pseudorandomness.

    Used for seed-stream splitting and deterministic key generation, never
    for values that appear inside proofs (those use the tagged hashes).
    """
    return hashlib.sha256(b"ktsim.derive/" + encode_fields(label, *fields)).digest()


@lru_cache(maxsize=1 << 14)
def _private_key_from_seed(seed: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(seed)


@dataclass(frozen=True)
class KeyPair:
    """An Ed25519 key pair; the secret side is the 32-byte seed.

    Holding the seed (rather than a key object) keeps the pair hashable and
    lets repeated signatures of identical messages be cached.
    """

    seed: bytes = field(repr=False)
    verifying_key: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        if len(seed) != 32:
            raise ValueError(f"seed must be 32 bytes, got {len(seed)}")
        priv = _private_key_from_seed(seed)
        pub = priv.public_key().public_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PublicFormat.Raw,
        )
        return cls(seed=seed, verifying_key=pub)

    def sign(self, message: bytes) -> bytes:
        return sign(self, message)


@lru_cache(maxsize=1 << 16)
def _sign_cached(seed: bytes, message: bytes) -> bytes:
    return _private_key_from_seed(seed).sign(message)


def sign(key: KeyPair, message: bytes) -> bytes:
    """Sign a message; 64-byte deterministic Ed25519 signature."""
    sig = _sign_cached(key.seed, bytes(message))
    assert len(sig) == SIGNATURE_LEN
    return sig


@lru_cache(maxsize=1 << 17)
def _verify_cached(pub: bytes, message: bytes, sig: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(pub).verify(sig, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def verify(pub: bytes, message: bytes, sig: bytes) -> bool:
    """True iff sig is a valid signature of message under pub.

    Results are memoized: the simulator re-verifies the same signed tree
    roots and key responses thousands of times per run.
    """
    if len(sig) != SIGNATURE_LEN or len(pub) != VERIFYING_KEY_LEN:
        return False
    return _verify_cached(bytes(pub), bytes(message), bytes(sig))
