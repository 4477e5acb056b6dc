"""Server role: registration, commitment, lookups, and the adversary's choices."""

import random

import pytest

from ktsim import artifacts, crypto
from ktsim.server import (
    AdversaryKind,
    AdversaryStrategy,
    AttackScope,
    RateLimited,
    ServerState,
    UnknownSubject,
)

KEY = crypto.KeyPair.from_seed(b"\x05" * 32)


def make_server(strategy=None, clients=4, contacts=None, maintain_log=True, m=10, rng_seed=0):
    srv = ServerState(
        server_key=KEY,
        strategy=strategy or AdversaryStrategy(),
        rng=random.Random(rng_seed),
        tree_seed_for_epoch=lambda e: crypto.derive("t", e),
        maintain_log=maintain_log,
        monitor_m=m,
    )
    names = [f"c{i}" for i in range(clients)]
    for cid in names:
        srv.register(cid, crypto.derive("pk", cid), epoch=-1)
    if contacts:
        srv.contacts = {k: set(v) for k, v in contacts.items()}
    srv.online = frozenset(names)
    return srv, names


def test_register_rate_limited_per_epoch():
    srv, names = make_server()
    srv.epoch_commit(0, 0)
    srv.register("c0", b"new-key-1", epoch=0)
    with pytest.raises(RateLimited):
        srv.register("c0", b"new-key-2", epoch=0)
    srv.epoch_commit(1, 1000)
    srv.register("c0", b"new-key-2", epoch=1)  # next epoch is fine


def test_update_lands_in_next_epoch_tree():
    srv, _ = make_server()
    srv.epoch_commit(0, 0)
    srv.register("c0", b"new-key", epoch=0)
    srv.epoch_commit(1, 1000)
    tree1 = srv._branch_tree(srv.main_branch, 1)
    assert tree1.records["c0"].public_key == b"new-key"
    tree0 = srv._branch_tree(srv.main_branch, 0)
    assert tree0.records["c0"].public_key != b"new-key"


def test_honest_chain_verifies():
    srv, _ = make_server()
    strs = [srv.epoch_commit(e, e * 1000)["main"] for e in range(3)]
    for prev, curr in zip(strs, strs[1:]):
        assert artifacts.verify_str_chain(prev, curr, KEY.verifying_key)


def test_honest_lookup_poi_verifies():
    srv, _ = make_server()
    srv.epoch_commit(0, 0)
    resp = srv.lookup_key("c1", "c0", 0)
    assert artifacts.verify_key_response(resp, KEY.verifying_key)
    assert artifacts.verify_poi_against_str(
        resp.str_, resp.poi, "c0", resp.public_key, KEY.verifying_key
    )
    with pytest.raises(UnknownSubject):
        srv.lookup_key("c1", "nobody", 0)


def client_mitm(equivocate=True):
    return AdversaryStrategy(
        kind=AdversaryKind.CLIENT_MITM, target="c0", equivocate=equivocate, attack_epoch=1
    )


def test_equivocation_builds_two_conflicting_branches():
    srv, names = make_server(client_mitm(), contacts={"c0": {"c1", "c2"}})
    srv.epoch_commit(0, 0)
    strs = srv.epoch_commit(1, 1000)
    assert set(strs) == {"main", "view:c0"}
    assert strs["main"].root_hash != strs["view:c0"].root_hash
    # each branch is internally linear for its audience
    for branch in srv.branches:
        pairs = list(zip(branch.chain, branch.chain[1:]))
        assert all(
            artifacts.verify_str_chain(p, c, KEY.verifying_key) for p, c in pairs
        )
    # the victim's own view binds its real key; the wide view binds the fake
    poi_victim = srv.own_key_poi("c0", 1)
    assert artifacts.verify_poi_against_str(
        strs["view:c0"], poi_victim, "c0", srv.directory["c0"].public_key, KEY.verifying_key
    )
    poi_wide = srv._branch_tree(srv.main_branch, 1)
    assert poi_wide.records["c0"].public_key == srv.fake_key_for("c0")


def test_non_equivocating_attack_uses_single_tree():
    srv, _ = make_server(client_mitm(equivocate=False), contacts={"c0": {"c1"}})
    srv.epoch_commit(0, 0)
    strs = srv.epoch_commit(1, 1000)
    assert set(strs) == {"main"}
    tree = srv._branch_tree(srv.main_branch, 1)
    assert tree.records["c0"].public_key == srv.fake_key_for("c0")


def test_lookup_serves_fake_to_victim_audience():
    srv, _ = make_server(client_mitm(), contacts={"c0": {"c1", "c2"}})
    srv.epoch_commit(0, 0)
    srv.epoch_commit(1, 1000)
    got = srv.lookup_key("c1", "c0", 1)
    assert got.public_key == srv.fake_key_for("c0")
    assert artifacts.verify_poi_against_str(
        got.str_, got.poi, "c0", got.public_key, KEY.verifying_key
    )
    # a client outside the attack and the victim itself get the real key
    assert srv.lookup_key("c3", "c0", 1).public_key != srv.fake_key_for("c0")
    pair = srv.lookup_key("c0", "c1", 1)
    assert pair.public_key == srv.fake_key_for("c1")  # MITM is bidirectional


def test_short_lived_pushes_never_touch_trees():
    strategy = AdversaryStrategy(
        kind=AdversaryKind.PAIR_IMPERSONATION, target="c0", peer="c1",
        attack_epoch=1, short_lived_restore_after_ms=0.0,
    )
    srv, _ = make_server(strategy, contacts={"c0": {"c1"}})
    srv.epoch_commit(0, 0)
    srv.epoch_commit(1, 1000)
    fake, restore = srv.short_lived_pair("c0", 1)
    assert fake.public_key == srv.fake_key_for("c0")
    assert restore.public_key == srv.directory["c0"].public_key
    assert fake.upload_epoch == restore.upload_epoch == 1
    for e in (1, 2):
        if e == 2:
            srv.epoch_commit(2, 2000)
        tree = srv._branch_tree(srv.main_branch, e)
        assert tree.records["c0"].public_key == srv.directory["c0"].public_key


def akm_attack_server(c=1, m=10):
    contacts = {"c0": {f"c{i}" for i in range(1, c + 1)}}
    strategy = AdversaryStrategy(
        kind=AdversaryKind.CLIENT_IMPERSONATION, target="c0", attack_epoch=1
    )
    srv, names = make_server(strategy, clients=c + 1, contacts=contacts,
                             maintain_log=False, m=m)
    srv.epoch_commit(0, 0)
    srv.epoch_commit(1, 1000)
    for holder in sorted(srv.fake_holders["c0"]):
        srv.update_push_for(holder, "c0", 1)  # records the handout epoch
    return srv


def test_anonymous_decision_honest_returns_real_to_all():
    srv, _ = make_server(maintain_log=False)
    out = srv.decide_anonymous_response("c0", 5, 0)
    assert len(out) == 5
    assert all(r.public_key == srv.directory["c0"].public_key for r in out)


def test_anonymous_decision_guess_frequency_c1():
    """c=1: two indistinguishable requests, one real key; right guess 1/2."""
    srv = akm_attack_server(c=1)
    fake = srv.fake_key_for("c0")
    trials = 10_000
    correct = 0
    for _ in range(trials):
        out = srv.decide_anonymous_response("c0", 2, 2)
        # position 0 is the owner by convention of this test's permutation
        correct += out[0].public_key != fake
    assert abs(correct / trials - 0.5) < 0.02


def test_anonymous_decision_full_assignment_frequency():
    """f=2, r=2, k=5: the exact assignment has probability 1/C(5,2)."""
    contacts = {"c0": {"c1", "c2", "c3", "c4"}}
    strategy = AdversaryStrategy(
        kind=AdversaryKind.CLIENT_IMPERSONATION, target="c0",
        attack_epoch=1, coverage_f=2, coverage_r=2,
    )
    srv, _ = make_server(strategy, clients=5, contacts=contacts, maintain_log=False, m=4)
    srv.epoch_commit(0, 0)
    srv.register("c0", b"k-updated", epoch=1)
    srv.epoch_commit(1, 1000)
    for holder in sorted(srv.fake_holders["c0"]):
        srv.update_push_for(holder, "c0", 1)
    fake = srv.fake_key_for("c0")
    trials = 10_000
    exact = 0
    for _ in range(trials):
        out = srv.decide_anonymous_response("c0", 5, 2)
        # the "correct" assignment in this fixed ordering: fakes at 0 and 1
        got_fake = [r.public_key == fake for r in out]
        assert sum(got_fake) == 2
        exact += got_fake == [True, True, False, False, False]
    assert abs(exact / trials - 0.1) < 0.01


def test_anonymous_decision_protects_before_monitoring_starts():
    srv = akm_attack_server(c=1)
    out = srv.decide_anonymous_response("c0", 1, 1)  # attack epoch: owner only
    assert out[0].public_key == srv.directory["c0"].public_key
    out = srv.decide_anonymous_response("c0", 1, 12)  # window over (m=10)
    assert out[0].public_key == srv.directory["c0"].public_key


def test_serve_asr_honest_all_identical():
    srv, _ = make_server()
    srv.epoch_commit(0, 0)
    roots = srv.serve_asr(7, 0)
    assert len({s.root_hash for s in roots}) == 1


def test_serve_asr_identification_frequency():
    """With N online clients, the victim's request is matched w.p. 1/N."""
    n = 50
    contacts = {f"c{i}": set() for i in range(n)}
    contacts["c0"] = {"c1"}
    srv, names = make_server(client_mitm(), clients=n, contacts=contacts)
    srv.epoch_commit(0, 0)
    srv.epoch_commit(1, 1000)
    branch_root = srv.branch_of("c0").chain[-1].root_hash
    trials = 10_000
    hit = 0
    for _ in range(trials):
        roots = srv.serve_asr(n, 1)
        assert sum(s.root_hash == branch_root for s in roots) == 1
        hit += roots[0].root_hash == branch_root
    assert abs(hit / trials - 1 / n) < 0.01


def test_serve_asr_single_client_always_identified():
    contacts = {"c0": {"c1"}}
    srv, _ = make_server(client_mitm(), clients=2, contacts=contacts)
    srv.online = frozenset({"c0"})
    srv.epoch_commit(0, 0)
    srv.epoch_commit(1, 1000)
    branch_root = srv.branch_of("c0").chain[-1].root_hash
    for _ in range(50):
        roots = srv.serve_asr(1, 1)
        assert roots[0].root_hash == branch_root


def test_partition_components_and_cuts():
    cut = frozenset({frozenset(("c0", "c1")), frozenset(("c2", "c3"))})
    strategy = AdversaryStrategy(
        kind=AdversaryKind.PARTITION_MITM, attack_epoch=1, partition_cut=cut
    )
    ring = {"c0": {"c1", "c3"}, "c1": {"c0", "c2"}, "c2": {"c1", "c3"}, "c3": {"c2", "c0"}}
    srv, _ = make_server(strategy, clients=4, contacts=ring)
    srv.epoch_commit(0, 0)
    strs = srv.epoch_commit(1, 1000)
    assert len(strs) == 2
    assert srv.cuts_edge("c0", "c1") and srv.cuts_edge("c3", "c2")
    assert not srv.cuts_edge("c1", "c2")
    # cross-component lookups are intercepted; within-component ones are not
    assert srv.lookup_key("c1", "c3", 1).public_key == srv.fake_key_for("c3")
    assert srv.lookup_key("c1", "c2", 1).public_key == srv.directory["c2"].public_key


def test_new_connection_scope_serves_bare_fake():
    strategy = AdversaryStrategy(
        kind=AdversaryKind.CLIENT_IMPERSONATION, target="c0",
        scope=AttackScope.NEW_CONNECTIONS, attack_epoch=1,
    )
    srv, _ = make_server(strategy, contacts={"c0": {"c1"}})
    srv.epoch_commit(0, 0)
    srv.epoch_commit(1, 1000)
    # the existing contact keeps getting the real key
    assert srv.lookup_key("c1", "c0", 1).public_key == srv.directory["c0"].public_key
    srv.note_new_edge("c0", "c3")
    got = srv.lookup_key("c3", "c0", 1)
    assert got.public_key == srv.fake_key_for("c0")
    assert got.poi is None  # tree still binds the real key
    assert got.upload_epoch == srv.directory["c0"].upload_epoch


def test_withheld_str_flag():
    strategy = AdversaryStrategy(
        kind=AdversaryKind.CLIENT_IMPERSONATION, target="c0", attack_epoch=1,
        withhold_str_from=frozenset({"c0"}),
    )
    srv, _ = make_server(strategy, contacts={"c0": {"c1"}})
    srv.epoch_commit(0, 0)
    assert not srv.withholds_str("c0")
    srv.epoch_commit(1, 1000)
    assert srv.withholds_str("c0")
    assert not srv.withholds_str("c1")
