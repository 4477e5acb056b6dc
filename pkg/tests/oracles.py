"""Independent reference implementations the main code is checked against.

These are deliberately naive: the tree builder recomputes unique-prefix
lengths by brute-force pairwise comparison and assembles node hashes in a
flat dict, and the diameter oracle is Floyd-Warshall. They share only the
crypto primitives with the production code.
"""

from __future__ import annotations

from ktsim import tree as t


def naive_tree_root(records, seed: bytes, epoch: int = 0) -> bytes:
    """O(N^2 * depth) rebuild of the prefix tree, hash for hash."""
    recs = {r.client_id: r for r in records}
    if not recs:
        return t.empty_leaf_fill(seed, "", epoch)

    bits = {cid: t.index_bits(t.identity_index(cid)) for cid in recs}

    # Unique prefix length by comparing against every other index.
    ells = {}
    for cid in recs:
        best = 0
        for other in recs:
            if other == cid:
                continue
            shared = 0
            for a, b in zip(bits[cid], bits[other]):
                if a != b:
                    break
                shared += 1
            best = max(best, shared + 1)
        ells[cid] = best

    positions = {}
    for cid in recs:
        r = t.depth_extension(seed, cid, ells[cid])
        positions[cid] = bits[cid][: ells[cid] + r]

    node_hash: dict[str, bytes] = {}
    for cid, pos in positions.items():
        node_hash[pos] = t.leaf_hash(
            t.leaf_nonce(seed, pos, epoch),
            t.identity_index(cid),
            len(pos),
            t.binding_hash(cid, recs[cid].public_key),
        )

    interiors = set()
    for pos in positions.values():
        for k in range(len(pos)):
            interiors.add(pos[:k])

    for p in interiors:
        for b in "01":
            child = p + b
            if child not in interiors and child not in node_hash:
                node_hash[child] = t.empty_leaf_fill(seed, child, epoch)

    for p in sorted(interiors, key=len, reverse=True):
        node_hash[p] = t.interior_hash(
            t.interior_nonce(seed, p, epoch), node_hash[p + "0"], node_hash[p + "1"], p
        )
    return node_hash[""]


def floyd_warshall_diameter(n: int, edges) -> int:
    """All-pairs shortest paths; returns the max finite distance.

    Raises ValueError if the graph is disconnected.
    """
    INF = float("inf")
    dist = [[INF] * n for _ in range(n)]
    for i in range(n):
        dist[i][i] = 0
    for a, b in edges:
        dist[a][b] = 1
        dist[b][a] = 1
    for k in range(n):
        dk = dist[k]
        for i in range(n):
            dik = dist[i][k]
            if dik == INF:
                continue
            di = dist[i]
            for j in range(n):
                alt = dik + dk[j]
                if alt < di[j]:
                    di[j] = alt
    diam = max(max(row) for row in dist)
    if diam == INF:
        raise ValueError("disconnected")
    return int(diam)
