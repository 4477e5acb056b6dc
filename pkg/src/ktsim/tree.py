"""Merkle binary prefix tree over registered public keys, with inclusion proofs.

Every node corresponds to a bit-string prefix; the left child appends 0, the
right child appends 1. A registered client's leaf sits at the first
``ell + r`` bits of its index ``hash(TAG_INDEX, client_id)``, where ``ell``
is the length of the shortest prefix unique among all registered indices and
``r`` is drawn uniformly from ``[1, max(ell, 1)]``. The extension by ``r``
plus random-valued empty leaves keeps tree shape from leaking which nearby
identities exist, and guarantees a non-empty leaf's sibling is always an
interior node or a random-valued empty leaf.

Node hashing:

    leaf      = H_leaf(k_leaf, index, depth, H_binding(client_id, public_key))
    interior  = H_interior(k_interior, left, right, prefix, depth)
    empty     = 32 random-looking bytes (derived, indistinguishable from hashes)

The per-node nonces ``k_leaf`` / ``k_interior`` are derived deterministically
from the tree seed, node prefix, and epoch, so a rebuild from the same inputs
is byte-identical while verifiers (who receive nonces inside proofs) cannot
tell them from fresh randomness.

Trees are rebuilt from the record set each epoch rather than updated in
place; this keeps the random-depth distribution fresh and makes the builder
easy to check against a naive reference implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional

from .crypto import (
    TAG_BINDING,
    TAG_INDEX,
    TAG_INTERIOR,
    TAG_LEAF,
    hash_fields,
)


class DuplicateClient(ValueError):
    """Two records share a client_id."""


class NotRegistered(KeyError):
    """Inclusion proof requested for an identity not in the tree."""


@dataclass(frozen=True)
class PublicKeyRecord:
    """One identity-to-key binding as stored in the transparency log."""

    client_id: str
    public_key: bytes
    upload_epoch: int

    def __post_init__(self):
        if not self.client_id:
            raise ValueError("client_id must be non-empty")


def identity_index(client_id: str) -> bytes:
    """index = hash(TAG_INDEX, client_id); the leaf placement key."""
    return hash_fields(TAG_INDEX, client_id)


def binding_hash(client_id: str, public_key: bytes) -> bytes:
    """Inner hash binding an identity to a public key."""
    return hash_fields(TAG_BINDING, client_id, public_key)


def index_bits(index: bytes) -> str:
    """The 256-bit index as a '0'/'1' string, most significant bit first."""
    return format(int.from_bytes(index, "big"), "0256b")


def pack_bits(bits: str) -> bytes:
    """Pack a bit-string prefix into bytes (zero-padded to a byte boundary)."""
    if not bits:
        return b""
    n = (len(bits) + 7) // 8
    return int(bits.ljust(n * 8, "0"), 2).to_bytes(n, "big")


def leaf_nonce(seed: bytes, prefix: str, epoch: int) -> bytes:
    return hash_fields(TAG_LEAF, seed, pack_bits(prefix), len(prefix), epoch)


def interior_nonce(seed: bytes, prefix: str, epoch: int) -> bytes:
    return hash_fields(TAG_INTERIOR, seed, pack_bits(prefix), len(prefix), epoch)


def empty_leaf_fill(seed: bytes, prefix: str, epoch: int) -> bytes:
    # Extra marker field keeps this framed distinctly from leaf_nonce.
    return hash_fields(TAG_LEAF, seed, pack_bits(prefix), len(prefix), epoch, b"empty")


def leaf_hash(nonce: bytes, index: bytes, depth: int, binding: bytes) -> bytes:
    return hash_fields(TAG_LEAF, nonce, index, depth, binding)


def interior_hash(nonce: bytes, left: bytes, right: bytes, prefix: str) -> bytes:
    return hash_fields(TAG_INTERIOR, nonce, left, right, pack_bits(prefix), len(prefix))


@dataclass(frozen=True)
class LeafNode:
    """A materialized leaf; empty leaves carry only their random fill."""

    nonce: bytes
    index: bytes
    depth: int
    binding: bytes
    is_empty: bool = False
    random_fill: bytes = b""

    def node_hash(self) -> bytes:
        if self.is_empty:
            return self.random_fill
        return leaf_hash(self.nonce, self.index, self.depth, self.binding)


@dataclass(frozen=True)
class InteriorNode:
    nonce: bytes
    prefix: str
    left_hash: bytes
    right_hash: bytes

    @property
    def depth(self) -> int:
        return len(self.prefix)

    def node_hash(self) -> bytes:
        return interior_hash(self.nonce, self.left_hash, self.right_hash, self.prefix)


@dataclass(eq=False)
class ProofOfInclusion:
    """Leaf payload plus the sibling-hash path up to the root.

    ``sibling_hashes`` is ordered from the leaf's own level upward; each
    entry is ``(digest, side)`` where side is the bit position the sibling
    occupies (0 = left child). ``nonces_on_path`` carries the interior-node
    nonce for each parent, same order. Both lists have ``depth`` entries.
    """

    leaf: LeafNode
    sibling_hashes: tuple[tuple[bytes, int], ...]
    nonces_on_path: tuple[bytes, ...]
    depth: int
    _verdicts: dict = field(default_factory=dict, repr=False)
    _digest: Optional[bytes] = field(default=None, repr=False)

    def accounted_bytes(self, hash_bytes: int = 32) -> int:
        """Wire size convention: depth sibling hashes plus the leaf hash."""
        return hash_bytes * (self.depth + 1)


def _unique_prefix_lengths(bits_by_id: dict[str, str]) -> dict[str, int]:
    """Shortest-unique-prefix length for every index.

    Sorting the bit strings makes each string's longest common prefix with
    any other equal to the max against its two sorted neighbours.
    """
    ids = sorted(bits_by_id, key=bits_by_id.__getitem__)
    if len(ids) <= 1:
        return {cid: 0 for cid in ids}

    def lcp(a: str, b: str) -> int:
        n = 0
        for x, y in zip(a, b):
            if x != y:
                break
            n += 1
        return n

    # A prefix one bit longer than the longest prefix shared with any other
    # index is unique; with a single record the empty prefix already is.
    out: dict[str, int] = {}
    for i, cid in enumerate(ids):
        best = 0
        if i > 0:
            best = max(best, lcp(bits_by_id[cid], bits_by_id[ids[i - 1]]))
        if i < len(ids) - 1:
            best = max(best, lcp(bits_by_id[cid], bits_by_id[ids[i + 1]]))
        out[cid] = best + 1
    return out


def depth_extension(seed: bytes, client_id: str, ell: int) -> int:
    """r drawn uniformly from [1, max(ell, 1)], derived from seed and identity.

    Deriving per-identity (not from a sequential stream) makes placement
    independent of build order, so a naive reference builder lands on the
    same tree.
    """
    span = max(ell, 1)
    if span == 1:
        return 1
    draw = int.from_bytes(hash_fields(TAG_LEAF, seed, b"depth-extension", client_id)[:8], "big")
    return 1 + draw % span


class MerkleTree:
    """A built tree: node map, record positions, root hash."""

    __slots__ = (
        "epoch", "seed", "records", "root_hash",
        "_node_hashes", "_interior", "_leaves", "_positions", "_poi_cache",
    )

    def __init__(self, epoch: int, seed: bytes, records: dict[str, PublicKeyRecord]):
        self.epoch = epoch
        self.seed = seed
        self.records = records
        self._node_hashes: dict[str, bytes] = {}
        self._interior: dict[str, InteriorNode] = {}
        self._leaves: dict[str, LeafNode] = {}
        self._positions: dict[str, str] = {}
        self._poi_cache: dict[str, "ProofOfInclusion"] = {}
        self.root_hash = self._build()

    def _build(self) -> bytes:
        if not self.records:
            fill = empty_leaf_fill(self.seed, "", self.epoch)
            self._leaves[""] = LeafNode(b"", b"", 0, b"", is_empty=True, random_fill=fill)
            self._node_hashes[""] = fill
            return fill

        bits_by_id = {cid: index_bits(identity_index(cid)) for cid in self.records}
        ells = _unique_prefix_lengths(bits_by_id)
        for cid, rec in self.records.items():
            r = depth_extension(self.seed, cid, ells[cid])
            pos = bits_by_id[cid][: ells[cid] + r]
            self._positions[cid] = pos
            self._leaves[pos] = LeafNode(
                nonce=leaf_nonce(self.seed, pos, self.epoch),
                index=identity_index(cid),
                depth=len(pos),
                binding=binding_hash(cid, rec.public_key),
            )

        # Interior nodes: every proper prefix of every leaf position.
        interior_prefixes: set[str] = set()
        for pos in self._leaves:
            for k in range(len(pos)):
                interior_prefixes.add(pos[:k])

        # Fill unoccupied children with random-valued empty leaves.
        for p in interior_prefixes:
            for b in ("0", "1"):
                child = p + b
                if child not in interior_prefixes and child not in self._leaves:
                    fill = empty_leaf_fill(self.seed, child, self.epoch)
                    self._leaves[child] = LeafNode(
                        b"", b"", len(child), b"", is_empty=True, random_fill=fill
                    )

        for pos, leaf in self._leaves.items():
            self._node_hashes[pos] = leaf.node_hash()

        for p in sorted(interior_prefixes, key=len, reverse=True):
            node = InteriorNode(
                nonce=interior_nonce(self.seed, p, self.epoch),
                prefix=p,
                left_hash=self._node_hashes[p + "0"],
                right_hash=self._node_hashes[p + "1"],
            )
            self._interior[p] = node
            self._node_hashes[p] = node.node_hash()

        return self._node_hashes[""]

    def position_of(self, client_id: str) -> str:
        try:
            return self._positions[client_id]
        except KeyError:
            raise NotRegistered(client_id) from None

    def leaf_depths(self) -> dict[str, int]:
        return {cid: len(pos) for cid, pos in self._positions.items()}

    def walk_leaves(self) -> Iterable[LeafNode]:
        return self._leaves.values()

    def sibling_of(self, pos: str) -> str:
        return pos[:-1] + ("1" if pos[-1] == "0" else "0")


def build_tree(records: Iterable[PublicKeyRecord], seed: bytes, epoch: int = 0) -> MerkleTree:
    """Build the epoch tree; deterministic in (records, seed, epoch).

    Raises DuplicateClient if two records share an identity.
    """
    by_id: dict[str, PublicKeyRecord] = {}
    for rec in records:
        if rec.client_id in by_id:
            raise DuplicateClient(rec.client_id)
        by_id[rec.client_id] = rec
    return MerkleTree(epoch=epoch, seed=seed, records=by_id)


@lru_cache(maxsize=48)
def build_tree_cached(
    records: tuple[tuple[str, bytes, int], ...], seed: bytes, epoch: int
) -> MerkleTree:
    """Memoized builder keyed by the exact record tuple.

    Monte-Carlo trials that share the scenario seed rebuild identical trees;
    caching them is free because trees are immutable after construction.
    """
    return build_tree(
        (PublicKeyRecord(cid, key, ue) for cid, key, ue in records), seed, epoch
    )


def prove_inclusion(tree: MerkleTree, client_id: str) -> ProofOfInclusion:
    """Inclusion proof for a registered identity against tree.root_hash.

    Proofs are memoized on the tree; trees are immutable once built.
    """
    cached = tree._poi_cache.get(client_id)
    if cached is not None:
        return cached
    pos = tree.position_of(client_id)
    leaf = tree._leaves[pos]
    siblings: list[tuple[bytes, int]] = []
    nonces: list[bytes] = []
    cur = pos
    while cur:
        sib = tree.sibling_of(cur)
        siblings.append((tree._node_hashes[sib], int(sib[-1])))
        nonces.append(tree._interior[cur[:-1]].nonce)
        cur = cur[:-1]
    poi = ProofOfInclusion(
        leaf=leaf,
        sibling_hashes=tuple(siblings),
        nonces_on_path=tuple(nonces),
        depth=len(pos),
    )
    tree._poi_cache[client_id] = poi
    return poi


def recompute_root(poi: ProofOfInclusion, client_id: str, public_key: bytes) -> Optional[bytes]:
    """Fold the proof path for the claimed binding; None if malformed.

    The leaf hash is recomputed from the claimed identity and key, never
    taken from the proof, so a proof can only validate the binding it was
    built for. The fold orientation comes from the identity's own index
    bits; stored side bits must agree.
    """
    depth = poi.depth
    if depth < 1:
        return None
    if len(poi.sibling_hashes) != depth or len(poi.nonces_on_path) != depth:
        return None
    index = identity_index(client_id)
    if poi.leaf.index != index or poi.leaf.depth != depth:
        return None
    bits = index_bits(index)
    h = leaf_hash(poi.leaf.nonce, index, depth, binding_hash(client_id, public_key))
    for i in range(depth):
        level = depth - i
        own_bit = int(bits[level - 1])
        sib_hash, sib_side = poi.sibling_hashes[i]
        if sib_side != 1 - own_bit:
            return None
        left, right = (sib_hash, h) if sib_side == 0 else (h, sib_hash)
        h = interior_hash(poi.nonces_on_path[i], left, right, bits[: level - 1])
    return h


def verify_poi(
    str_root_hash: bytes,
    poi: ProofOfInclusion,
    client_id: str,
    public_key: bytes,
) -> bool:
    """True iff the proof binds (client_id, public_key) to the given root.

    Signature checking on the signed tree root is the caller's job (see
    artifacts.verify_str); this function is pure hash folding.
    """
    key = (str_root_hash, client_id, bytes(public_key))
    cached = poi._verdicts.get(key)
    if cached is not None:
        return cached
    root = recompute_root(poi, client_id, public_key)
    ok = root is not None and root == str_root_hash
    if len(poi._verdicts) < 64:
        poi._verdicts[key] = ok
    return ok
