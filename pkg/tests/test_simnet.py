"""Engine-level guarantees: delays, ordering, anonymity shape, churn, graphs."""

import json

import pytest

from ktsim.simnet import (
    ChurnModel,
    ClockConfig,
    ConfigInvalid,
    Engine,
    EV_DELIVER,
    complete_topology,
    gnp_topology,
    graph_diameter,
    ring_topology,
    star_topology,
    stream,
)

from oracles import floyd_warshall_diameter


def engine(delta=1.0, big=2.0, epoch=20.0, trial=0):
    return Engine(master_seed=42, trial=trial, clock=ClockConfig(epoch, delta, big))


def test_direct_delay_bounds_hold_over_many_draws():
    eng = engine()
    draws = [eng._draw_delay(2 * eng.clock.delta_ms) for _ in range(100_000)]
    assert max(draws) < 2 * eng.clock.delta_ms
    assert min(draws) > 0.0
    # and they actually spread over the interval
    assert max(draws) > 1.9 and min(draws) < 0.1


def test_anonymous_round_trip_bounds():
    eng = engine()
    total = [
        eng._draw_delay(eng.clock.big_delta_ms) + eng.clock.big_delta_ms
        for _ in range(100_000)
    ]
    assert max(total) <= 2 * eng.clock.big_delta_ms


def test_events_process_in_time_then_seq_order():
    eng = engine()
    seen = []
    eng.online = frozenset({"a"})
    eng.deliver_client_msg = lambda cid, msg: seen.append(msg)
    eng.schedule(5.0, EV_DELIVER, ("a", "first-at-5"))
    eng.schedule(5.0, EV_DELIVER, ("a", "second-at-5"))
    eng.schedule(1.0, EV_DELIVER, ("a", "at-1"))
    eng.run()
    assert seen == ["at-1", "first-at-5", "second-at-5"]


def test_timer_cancellation():
    eng = engine()
    fired = []
    eng.on_timer = lambda owner, key, data: fired.append(key)
    eng.set_timer("a", ("x",), at=3.0)
    eng.set_timer("a", ("y",), at=4.0)
    eng.cancel_timer("a", ("x",))
    eng.run()
    assert fired == [("y",)]


def test_batch_exposes_no_sender_identities():
    eng = engine()
    batches = []
    eng.on_anon_batch = lambda batch, senders: batches.append((batch, senders))
    eng.online = frozenset({"alice", "bob", "carol"})
    eng.epoch = 0
    for sender in ("alice", "bob", "carol"):
        eng.send_anonymous(sender, "akr", "subject-x")
    eng._process_anon_batches()
    (batch, senders), = batches
    assert batch.count == 3
    assert sorted(senders) == ["alice", "bob", "carol"]
    rendered = json.dumps(batch.debug_dict())
    for sender in senders:
        assert sender not in rendered
    assert "subject-x" in rendered  # the request content is all the server sees
    assert not hasattr(batch, "senders")


def test_batch_permutation_is_seed_deterministic():
    def orders(trial):
        eng = engine(trial=trial)
        got = []
        eng.on_anon_batch = lambda batch, senders: got.append(list(senders))
        eng.epoch = 0
        for sender in [f"s{i}" for i in range(8)]:
            eng.send_anonymous(sender, "akr", "t")
        eng._process_anon_batches()
        return got[0]

    assert orders(3) == orders(3)
    assert orders(3) != orders(4)


def test_churn_respects_min_online_fraction():
    clients = tuple(f"c{i}" for i in range(40))
    churn = ChurnModel(offline_prob=0.9, min_online_fraction=0.5)
    rng = stream(1, "churn-test")
    for epoch in range(50):
        online = churn.online_set(clients, epoch, rng)
        assert len(online) >= 20


def test_churn_explicit_schedule():
    clients = ("a", "b", "c", "d")
    churn = ChurnModel(schedule={"a": frozenset({2, 3})})
    rng = stream(2, "churn-test")
    assert "a" in churn.online_set(clients, 1, rng)
    assert "a" not in churn.online_set(clients, 2, rng)
    assert "a" not in churn.online_set(clients, 3, rng)
    assert "a" in churn.online_set(clients, 4, rng)


def test_clock_invariants():
    ClockConfig(20, 1, 2).validate(4)  # bound 10 < 20
    with pytest.raises(ConfigInvalid):
        ClockConfig(20, 1, 2).validate(9)  # 2*(9+1)*1 = 20, not < 20
    with pytest.raises(ConfigInvalid):
        ClockConfig(20, 2, 2).validate(1)  # big_delta must exceed delta
    with pytest.raises(ConfigInvalid):
        ClockConfig(7, 1, 2).validate(1)  # epoch must dwarf big_delta


def test_ring_and_star_diameters():
    ring = ring_topology(10)
    assert graph_diameter(ring, set(ring.clients)) == 5
    star = star_topology(101)
    assert graph_diameter(star, set(star.clients)) == 2
    comp = complete_topology(5)
    assert graph_diameter(comp, set(comp.clients)) == 1


def test_gnp_diameter_matches_floyd_warshall():
    topo = gnp_topology(50, 0.2, stream(9, "topo"))
    idx = {c: i for i, c in enumerate(topo.clients)}
    edges = [(idx[a], idx[b]) for a, b in (sorted(e) for e in topo.edges)]
    assert graph_diameter(topo, set(topo.clients)) == floyd_warshall_diameter(50, edges)


def test_disconnected_graph_returns_none():
    topo = ring_topology(6)
    online = set(topo.clients) - {topo.clients[0], topo.clients[3]}
    assert graph_diameter(topo, online) is None


def test_offline_clients_do_not_receive():
    eng = engine()
    seen = []
    eng.deliver_client_msg = lambda cid, msg: seen.append(cid)
    eng.online = frozenset({"a"})
    eng.deliver_to_client("a", "hi", bound=1.0, klass="x")
    eng.deliver_to_client("b", "hi", bound=1.0, klass="x")
    eng.run()
    assert seen == ["a"]


def test_exchange_event_counted_once_per_edge_and_root():
    class Msg:
        def __init__(self, root):
            self.str_ = type("S", (), {"root_hash": root})()

    from ktsim.simnet import GossipStr

    eng = engine()
    eng.epoch = 0
    m = GossipStr.__new__(GossipStr)
    object.__setattr__(m, "str_", type("S", (), {"root_hash": b"r1"})())
    object.__setattr__(m, "sender", "a")
    eng.send_client_to_client("a", "b", m, "str_exchange", 64)
    eng.send_client_to_client("b", "a", m, "str_exchange", 64)  # crossing message
    assert eng.exchange_events == 1
    assert eng.message_counts["str_exchange"] == 2
