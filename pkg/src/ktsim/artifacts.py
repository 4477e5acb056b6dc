"""Signed artifacts: tree roots, key responses, and proofs of misbehavior.

A signed tree root (STR) commits the server to one log per epoch; chaining
each STR to the hash of its predecessor commits it to a single linear
history. A proof of misbehavior (PoM) is evidence any third party can check
with nothing but the server's public key:

  * two validly signed STRs for the same epoch with different roots, or
  * two validly signed key responses giving one identity the same public key
    with two different upload epochs (keys are never legitimately reused, so
    a repeated key can only be an attack that was later rolled back).

Construction helpers refuse to build a PoM from evidence that does not
actually prove anything, so no false PoM can be created from honest traffic.

Byte sizes used by traffic accounting: an exchanged STR counts as its 64-byte
signature (`STR_WIRE_BYTES`), while a stored STR counts signature + root +
timestamp = 104 bytes (`STR_STORED_BYTES`). The two conventions are
deliberately kept side by side and flagged in reports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Union

from . import crypto
from .crypto import TAG_STR, encode_fields, hash_tagged
from .tree import MerkleTree, ProofOfInclusion, prove_inclusion, verify_poi

STR_WIRE_BYTES = 64     # what one exchanged STR costs on the wire
STR_STORED_BYTES = 104  # signature (64) + root (32) + timestamp (8)

GENESIS_PREV_HASH = b"\x00" * 32


class EpochGap(ValueError):
    """STRs must be generated for consecutive epochs."""


class PoMConstructionError(ValueError):
    """Offered evidence does not prove misbehavior."""


class NotConflicting(PoMConstructionError):
    pass


class NotDuplicate(PoMConstructionError):
    pass


@dataclass(frozen=True)
class SignedTreeRoot:
    epoch: int
    root_hash: bytes
    prev_str_hash: bytes
    timestamp: int
    signature: bytes

    def signing_payload(self) -> bytes:
        return encode_fields(self.epoch, self.root_hash, self.prev_str_hash, self.timestamp)

    def chain_hash(self) -> bytes:
        """hash(TAG_STR, serialized STR); what the next STR's prev field holds."""
        return _chain_hash_cached(self)


@lru_cache(maxsize=1 << 14)
def _chain_hash_cached(s: "SignedTreeRoot") -> bytes:
    return hash_tagged(TAG_STR, serialize_str(s))


def generate_str(
    tree: MerkleTree,
    prev: Optional[SignedTreeRoot],
    server_key: crypto.KeyPair,
    timestamp: int,
) -> SignedTreeRoot:
    """Sign the tree root, chained to prev (genesis: epoch 0, zero prev hash)."""
    if prev is None:
        if tree.epoch != 0:
            raise EpochGap(f"genesis STR must be epoch 0, tree is epoch {tree.epoch}")
        prev_hash = GENESIS_PREV_HASH
    else:
        if tree.epoch != prev.epoch + 1:
            raise EpochGap(f"tree epoch {tree.epoch} does not follow STR epoch {prev.epoch}")
        prev_hash = prev.chain_hash()
    unsigned = SignedTreeRoot(tree.epoch, tree.root_hash, prev_hash, timestamp, b"")
    sig = crypto.sign(server_key, unsigned.signing_payload())
    return SignedTreeRoot(tree.epoch, tree.root_hash, prev_hash, timestamp, sig)


@lru_cache(maxsize=1 << 16)
def verify_str(str_: SignedTreeRoot, server_pub: bytes) -> bool:
    return crypto.verify(server_pub, str_.signing_payload(), str_.signature)


def verify_str_chain(prev: SignedTreeRoot, curr: SignedTreeRoot, server_pub: bytes) -> bool:
    """Both signatures valid, consecutive epochs, and curr links to prev."""
    return (
        verify_str(prev, server_pub)
        and verify_str(curr, server_pub)
        and curr.epoch == prev.epoch + 1
        and curr.prev_str_hash == prev.chain_hash()
    )


def verify_poi_against_str(
    str_: SignedTreeRoot,
    poi: ProofOfInclusion,
    client_id: str,
    public_key: bytes,
    server_pub: bytes,
) -> bool:
    """Full client-side check: STR signature plus proof-path folding."""
    if not verify_str(str_, server_pub):
        return False
    return verify_poi(str_.root_hash, poi, client_id, public_key)


@dataclass(frozen=True)
class KeyResponse:
    """A server-signed key statement: identity, key, and when it was uploaded.

    ``poi``/``str_`` ride along on transparency-log defenses and are absent
    on bare anonymous-monitoring responses. The signature covers the whole
    response (core fields plus the attached STR/proof digests).
    """

    client_id: str
    public_key: bytes
    upload_epoch: int
    epoch: int
    str_: Optional[SignedTreeRoot]
    poi: Optional[ProofOfInclusion]
    signature: bytes

    def signing_payload(self) -> bytes:
        str_part = self.str_.chain_hash() if self.str_ is not None else b""
        poi_part = b"" if self.poi is None else _poi_digest(self.poi)
        return encode_fields(
            self.client_id, self.public_key, self.upload_epoch, self.epoch,
            str_part, poi_part,
        )


def _poi_digest(poi: ProofOfInclusion) -> bytes:
    # Proofs are shared, immutable-by-convention objects handed out by the
    # tree's proof cache, so the digest is computed once and kept on them.
    if poi._digest is None:
        poi._digest = hash_tagged(TAG_STR, serialize_poi(poi))
    return poi._digest


@lru_cache(maxsize=1 << 14)
def make_key_response(
    server_key: crypto.KeyPair,
    client_id: str,
    public_key: bytes,
    upload_epoch: int,
    epoch: int,
    str_: Optional[SignedTreeRoot] = None,
    poi: Optional[ProofOfInclusion] = None,
) -> KeyResponse:
    unsigned = KeyResponse(client_id, public_key, upload_epoch, epoch, str_, poi, b"")
    return KeyResponse(
        client_id, public_key, upload_epoch, epoch, str_, poi,
        crypto.sign(server_key, unsigned.signing_payload()),
    )


@lru_cache(maxsize=1 << 16)
def verify_key_response(resp: KeyResponse, server_pub: bytes) -> bool:
    return crypto.verify(server_pub, resp.signing_payload(), resp.signature)


@lru_cache(maxsize=1 << 15)
def response_wire_len(resp: KeyResponse) -> int:
    """Length of the canonical binary form; memoized for byte accounting."""
    return len(serialize_key_response(resp))


Evidence = Union[SignedTreeRoot, KeyResponse]


@dataclass(frozen=True)
class ProofOfMisbehavior:
    KIND_CONFLICTING_STRS = "conflicting_strs"
    KIND_DUPLICATE_KEY = "duplicate_key"

    kind: str
    evidence_a: Evidence
    evidence_b: Evidence


def make_pom_conflict(
    a: SignedTreeRoot, b: SignedTreeRoot, server_pub: bytes
) -> ProofOfMisbehavior:
    """PoM from two conflicting signed STRs; raises NotConflicting otherwise."""
    if not (verify_str(a, server_pub) and verify_str(b, server_pub)):
        raise NotConflicting("an STR signature does not verify")
    if a.epoch != b.epoch:
        raise NotConflicting("STRs are for different epochs")
    if a.root_hash == b.root_hash:
        raise NotConflicting("STRs agree on the root")
    return ProofOfMisbehavior(ProofOfMisbehavior.KIND_CONFLICTING_STRS, a, b)


def make_pom_duplicate(
    a: KeyResponse, b: KeyResponse, server_pub: bytes
) -> ProofOfMisbehavior:
    """PoM from a reused key: same identity and key, two upload epochs."""
    if not (verify_key_response(a, server_pub) and verify_key_response(b, server_pub)):
        raise NotDuplicate("a response signature does not verify")
    if a.client_id != b.client_id:
        raise NotDuplicate("responses are for different identities")
    if a.public_key != b.public_key:
        raise NotDuplicate("responses carry different keys")
    if a.upload_epoch == b.upload_epoch:
        raise NotDuplicate("same upload epoch; a re-delivery is not key reuse")
    return ProofOfMisbehavior(ProofOfMisbehavior.KIND_DUPLICATE_KEY, a, b)


def adjudicate(pom: ProofOfMisbehavior, server_pub: bytes) -> bool:
    """Third-party verdict on a PoM; depends only on the PoM and public key."""
    a, b = pom.evidence_a, pom.evidence_b
    if pom.kind == ProofOfMisbehavior.KIND_CONFLICTING_STRS:
        return (
            isinstance(a, SignedTreeRoot)
            and isinstance(b, SignedTreeRoot)
            and verify_str(a, server_pub)
            and verify_str(b, server_pub)
            and a.epoch == b.epoch
            and a.root_hash != b.root_hash
        )
    if pom.kind == ProofOfMisbehavior.KIND_DUPLICATE_KEY:
        return (
            isinstance(a, KeyResponse)
            and isinstance(b, KeyResponse)
            and verify_key_response(a, server_pub)
            and verify_key_response(b, server_pub)
            and a.client_id == b.client_id
            and a.public_key == b.public_key
            and a.upload_epoch != b.upload_epoch
        )
    return False


def pom_fingerprint(pom: ProofOfMisbehavior) -> bytes:
    """Stable identity for gossip dedup."""
    return hash_tagged(TAG_STR, serialize_pom(pom))


# ---------------------------------------------------------------------------
# Canonical serialization: length-prefixed binary plus a JSON debug form.
# ---------------------------------------------------------------------------

def serialize_str(s: SignedTreeRoot) -> bytes:
    return encode_fields(s.epoch, s.root_hash, s.prev_str_hash, s.timestamp, s.signature)


def serialize_poi(poi: ProofOfInclusion) -> bytes:
    parts = [
        encode_fields(
            poi.leaf.nonce, poi.leaf.index, poi.leaf.depth, poi.leaf.binding,
            int(poi.leaf.is_empty), poi.leaf.random_fill, poi.depth,
        )
    ]
    for (h, side), nonce in zip(poi.sibling_hashes, poi.nonces_on_path):
        parts.append(encode_fields(h, side, nonce))
    return b"".join(parts)


def serialize_key_response(r: KeyResponse) -> bytes:
    return encode_fields(
        r.client_id, r.public_key, r.upload_epoch, r.epoch,
        serialize_str(r.str_) if r.str_ is not None else b"",
        serialize_poi(r.poi) if r.poi is not None else b"",
        r.signature,
    )


def serialize_pom(pom: ProofOfMisbehavior) -> bytes:
    def one(ev: Evidence) -> bytes:
        if isinstance(ev, SignedTreeRoot):
            return encode_fields(b"str", serialize_str(ev))
        return encode_fields(b"resp", serialize_key_response(ev))

    return encode_fields(pom.kind, one(pom.evidence_a), one(pom.evidence_b))


def str_debug_dict(s: SignedTreeRoot) -> dict:
    return {
        "epoch": s.epoch,
        "root_hash": s.root_hash.hex(),
        "prev_str_hash": s.prev_str_hash.hex(),
        "timestamp": s.timestamp,
        "signature": s.signature.hex(),
    }


def poi_debug_dict(poi: ProofOfInclusion) -> dict:
    return {
        "depth": poi.depth,
        "leaf": {
            "nonce": poi.leaf.nonce.hex(),
            "index": poi.leaf.index.hex(),
            "depth": poi.leaf.depth,
            "binding": poi.leaf.binding.hex(),
            "is_empty": poi.leaf.is_empty,
        },
        "siblings": [{"hash": h.hex(), "side": side} for h, side in poi.sibling_hashes],
        "nonces": [n.hex() for n in poi.nonces_on_path],
    }


def pom_debug_dict(pom: ProofOfMisbehavior) -> dict:
    def one(ev: Evidence) -> dict:
        if isinstance(ev, SignedTreeRoot):
            return {"type": "str", **str_debug_dict(ev)}
        return {
            "type": "key_response",
            "client_id": ev.client_id,
            "public_key": ev.public_key.hex(),
            "upload_epoch": ev.upload_epoch,
            "epoch": ev.epoch,
            "signature": ev.signature.hex(),
        }

    return {"kind": pom.kind, "evidence_a": one(pom.evidence_a), "evidence_b": one(pom.evidence_b)}


def debug_json(obj) -> str:
    if isinstance(obj, SignedTreeRoot):
        d = str_debug_dict(obj)
    elif isinstance(obj, ProofOfInclusion):
        d = poi_debug_dict(obj)
    elif isinstance(obj, ProofOfMisbehavior):
        d = pom_debug_dict(obj)
    else:
        raise TypeError(type(obj).__name__)
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def make_poi(tree: MerkleTree, client_id: str) -> ProofOfInclusion:
    """Convenience re-export used by the server role."""
    return prove_inclusion(tree, client_id)
