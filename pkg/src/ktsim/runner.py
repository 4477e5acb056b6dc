"""Scenario execution: build a world per trial, run it, aggregate trials.

Seed discipline: client identities, key material, topology, and per-epoch
tree placement derive from the scenario seed alone, so every Monte-Carlo
trial shares the same signed artifacts (and the process-wide caches make
re-verifying them free). Delays, churn draws, adversary guesses, and the
anonymity permutation derive from (seed, trial), which is exactly the
randomness the detection probabilities and bounds are stated over.

Trials can fan out over a process pool; per-trial seeds make the result
independent of scheduling order and the reduction is a plain sort-by-trial.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Optional

from . import crypto, predict
from .artifacts import STR_WIRE_BYTES, make_key_response, response_wire_len, serialize_pom
from .client import CORE_CAUSES, ClientState, Defense, DetectionEvent
from .metrics import Metrics, TrialResult, aggregate, check_expectations, resolve_scope
from .scenario import Scenario
from .server import AttackScope, RateLimited, ServerState
from .simnet import (
    AkrResponse,
    AsrResponse,
    ConfigInvalid,
    Engine,
    GossipStr,
    KeyUpdatePush,
    LookupResponse,
    MissedEpochsBundle,
    StrDelivery,
    Topology,
    complete_topology,
    explicit_topology,
    gnp_topology,
    graph_diameter,
    ring_topology,
    star_topology,
    stream,
)


def build_topology(scenario: Scenario) -> Topology:
    spec = scenario.topology
    if spec.kind == "ring":
        return ring_topology(spec.n)
    if spec.kind == "star":
        return star_topology(spec.n)
    if spec.kind == "complete":
        return complete_topology(spec.n)
    if spec.kind == "gnp":
        return gnp_topology(spec.n, spec.p, stream(scenario.seed, "topology"))
    if spec.kind == "explicit":
        clients = sorted({c for e in spec.edges for c in e} | set(spec.clients))
        return explicit_topology(clients, spec.edges)
    raise ConfigInvalid(f"topology: unknown kind {spec.kind!r}")


def validate(scenario: Scenario) -> Topology:
    """Full config validation, including clock bounds on the real topology."""
    topo = build_topology(scenario)
    diam = graph_diameter(topo, set(topo.clients))
    scenario.clock.validate(diam)
    known = set(topo.clients)
    adv = scenario.adversary
    for cid in filter(None, (adv.target, adv.peer)):
        if cid not in known:
            raise ConfigInvalid(f"adversary: unknown client {cid!r}")
    for pair in adv.partition_cut:
        if not pair <= known:
            raise ConfigInvalid(f"adversary: partition cut names unknown clients {sorted(pair)}")
    for epoch, cid in scenario.updates.scripted:
        if cid not in known:
            raise ConfigInvalid(f"updates: unknown client {cid!r}")
        if not 0 <= epoch < scenario.epochs:
            raise ConfigInvalid(f"updates: epoch {epoch} outside run")
    for epoch, a, b in scenario.topology.add_edges:
        if a not in known or b not in known:
            raise ConfigInvalid("topology.add_edges names unknown clients")
    return topo


class ClientEnv:
    """The network facade a client state machine sees."""

    def __init__(self, world: "World"):
        self.w = world
        self.clock = world.engine.clock

    def now(self) -> float:
        return self.w.engine.now

    def current_epoch(self) -> int:
        return self.w.engine.epoch

    def emit(self, ev: DetectionEvent) -> None:
        self.w.record_event(ev)

    def send_gossip(self, src: str, dst: str, msg) -> None:
        cut = self.w.server.cuts_edge(src, dst) or self.w.isolates(src, dst)
        if isinstance(msg, GossipStr):
            klass, nbytes = "str_exchange", STR_WIRE_BYTES
        else:
            klass, nbytes = "pom_gossip", len(serialize_pom(msg.pom))
        self.w.engine.send_client_to_client(src, dst, msg, klass, nbytes, cut)

    def send_probe(self, src: str, dst: str, msg) -> None:
        cut = self.w.server.cuts_edge(src, dst) or self.w.isolates(src, dst)
        self.w.engine.send_client_to_client(src, dst, msg, "probe", 0, cut)

    def lookup(self, src: str, subject: str, deferred: bool = False) -> None:
        w = self.w
        klass = "deferred_lookup" if deferred else "poi_lookup"
        resp = w.server.lookup_key(src, subject, w.engine.epoch)
        if resp is None:
            w.engine.count(klass + "_dropped")
            return
        nbytes = resp.poi.accounted_bytes() if resp.poi is not None else len(resp.public_key)
        w.engine.deliver_to_client(
            src, LookupResponse(subject, resp), 2 * self.clock.delta_ms, klass, nbytes
        )

    def send_akr(self, src: str, subject: str) -> None:
        if subject != src:
            self.w.engine.count("akr_monitor")
        self.w.engine.send_anonymous(src, "akr", subject)

    def send_asr(self, src: str) -> None:
        self.w.engine.send_anonymous(src, "asr", None)

    def send_oob(self, src: str, dst: str, msg, nbytes: int = 0) -> None:
        self.w.engine.send_oob(src, dst, msg, dropped=self.w.scenario.prevention.drop_oob,
                               nbytes=nbytes)

    def send_app(self, src: str, dst: str, note: str = "") -> None:
        self.w.engine.send_app_message(src, dst, note)

    def set_timer(self, owner: str, key, at: float, data=None) -> None:
        self.w.engine.set_timer(owner, key, at, data)

    def cancel_timer(self, owner: str, key) -> None:
        self.w.engine.cancel_timer(owner, key)


def clone_topology(t: Topology) -> Topology:
    return Topology(t.clients, set(t.edges), t.kind)


class World:
    """One trial: engine + server + clients, fully wired."""

    def __init__(self, scenario: Scenario, trial: int,
                 topology: Optional[Topology] = None, diameter: Optional[int] = None):
        self.scenario = scenario
        self.trial = trial
        self.topology = topology if topology is not None else build_topology(scenario)
        self.engine = Engine(scenario.seed, trial, scenario.clock)
        self.churn_rng = stream(scenario.seed, "churn", trial)
        self.detections: list[DetectionEvent] = []
        self.new_connection_events = 0
        self.min_online_fraction = 1.0
        self._last_delivered: dict[str, int] = {}
        self._attack_pushed = False
        self._stealthy_sent = 0

        seed = scenario.seed
        server_key = crypto.KeyPair.from_seed(crypto.derive("server-key", seed))
        self.server = ServerState(
            server_key=server_key,
            strategy=scenario.adversary,
            rng=stream(seed, "adversary", trial),
            tree_seed_for_epoch=lambda e: crypto.derive("placement", seed, e),
            maintain_log=scenario.defense is not Defense.AKM,
            monitor_m=scenario.monitor.m,
        )
        self.server.contacts = {c: set(self.topology.neighbors(c)) for c in self.topology.clients}

        env = ClientEnv(self)
        self.clients: dict[str, ClientState] = {}
        if diameter is None:
            diameter = graph_diameter(self.topology, set(self.topology.clients)) or 1
        policy = scenario.monitor
        policy.diameter_hint = diameter
        for cid in self.topology.clients:
            kp = crypto.KeyPair.from_seed(crypto.derive("client-key", seed, cid))
            self.server.register(cid, kp.verifying_key, epoch=-1)
            self.clients[cid] = ClientState(
                cid=cid,
                keypair=kp,
                defense=scenario.defense,
                policy=policy,
                server_pub=server_key.verifying_key,
                env=env,
                rng=(stream(seed, "client", trial, cid)
                     if scenario.monitor.isolation_enabled else None),
                prevention_enabled=scenario.prevention.enabled,
                attack_tag=scenario.name,
            )

        # contacts bootstrap: both ends of every edge start with the real key,
        # recorded with a signed statement (the earliest evidence in history)
        for edge in sorted(self.topology.edges, key=sorted):
            a, b = sorted(edge)
            for x, y in ((a, b), (b, a)):
                resp = make_key_response(
                    server_key, y, self.clients[y].keypair.verifying_key, -1, -1
                )
                self.clients[x].seed_contact(resp)

        if scenario.prevention.enabled:
            pairs = scenario.prevention.oob_pairs or tuple(
                tuple(sorted(e)) for e in sorted(self.topology.edges, key=sorted)
            )
            for a, b in pairs:
                shared = crypto.derive("oob", seed, *sorted((a, b)))
                self.clients[a].establish_oob(b, shared)
                self.clients[b].establish_oob(a, shared)

        eng = self.engine
        eng.deliver_client_msg = self._deliver
        eng.on_epoch_boundary = self._boundary
        eng.on_anon_batch = self._anon_batch
        eng.on_timer = self._timer
        eng.on_client_online = self._set_online_flag(True)
        eng.on_client_offline = self._set_online_flag(False)
        eng.schedule_epochs(scenario.epochs)

    # -- wiring ------------------------------------------------------------

    def record_event(self, ev: DetectionEvent) -> None:
        self.detections.append(ev)

    def isolates(self, src: str, dst: str) -> bool:
        t = self.scenario.adversary.target
        return (
            self.scenario.isolate_target
            and self.server.attack_active
            and t in (src, dst)
        )

    def _set_online_flag(self, value: bool):
        def apply(cid: str, epoch: int) -> None:
            self.clients[cid].online = value

        return apply

    def _deliver(self, cid: str, msg) -> None:
        self.clients[cid].on_message(msg)

    def _timer(self, owner: str, key, data) -> None:
        self.clients[owner].on_timer(key, data)

    def _anon_batch(self, batch, senders) -> None:
        if self.scenario.drop_anonymous and self.server.attack_active:
            return
        if batch.kind == "akr":
            responses = self.server.decide_anonymous_response(
                batch.subject, batch.count, batch.epoch
            )
            for sender, resp in zip(senders, responses):
                self.engine.deliver_anon_response(sender, AkrResponse(batch.subject, resp))
        else:
            roots = self.server.serve_asr(batch.count, batch.epoch)
            for sender, str_ in zip(senders, roots):
                self.engine.deliver_anon_response(sender, AsrResponse(batch.epoch, str_))

    # -- epoch boundary -----------------------------------------------------

    def _boundary(self, epoch: int) -> None:
        sc = self.scenario
        eng = self.engine
        online = sc.churn.online_set(self.topology.clients, epoch, self.churn_rng)
        eng.set_online(online, epoch)
        self.server.online = online
        self.min_online_fraction = min(
            self.min_online_fraction, len(online) / len(self.topology.clients)
        )

        strs = self.server.epoch_commit(epoch, timestamp=int(eng.now))

        # scripted and random legitimate re-keys happen mid-epoch
        rekeyers = [cid for (e, cid) in sc.updates.scripted if e == epoch]
        if sc.updates.per_epoch_fraction > 0:
            candidates = sorted(online - set(rekeyers))
            k = int(len(self.topology.clients) * sc.updates.per_epoch_fraction)
            picks = stream(sc.seed, "rekeys", self.trial, epoch)
            rekeyers += [candidates[i] for i in sorted(picks.sample(range(len(candidates)), min(k, len(candidates))))]
        for cid in rekeyers:
            eng.call_later(0.25 * eng.clock.epoch_len_ms, self._make_rekey(cid, epoch))

        # adversary-initiated fake update distribution (no legitimate trigger)
        adv = sc.adversary
        if (
            self.server.attack_active
            and adv.stealthy_update_rate is not None
            and adv.scope is not AttackScope.NEW_CONNECTIONS
        ):
            eng.call_later(0.3 * eng.clock.epoch_len_ms,
                           self._make_stealthy_pushes(epoch))
        elif (
            self.server.attack_active
            and not self._attack_pushed
            and epoch >= adv.attack_epoch
            and adv.short_lived_restore_after_ms is None
            and adv.scope is not AttackScope.NEW_CONNECTIONS
            and adv.target not in rekeyers
            and (adv.peer is None or adv.peer not in rekeyers)
        ):
            self._attack_pushed = True
            eng.call_later(0.3 * eng.clock.epoch_len_ms, self._push_attack_updates)

        if self.server.attack_active and not self._attack_pushed and (
            adv.target in rekeyers or (adv.peer is not None and adv.peer in rekeyers)
        ):
            self._attack_pushed = True  # the re-key push carries the split

        if adv.short_lived_restore_after_ms is not None and epoch == adv.attack_epoch:
            eng.call_later(0.3 * eng.clock.epoch_len_ms, self._short_lived_attack)

        # signed tree root distribution with per-client catch-up bundles
        if self.server.maintain_log:
            for cid in self.topology.clients:
                if cid not in online:
                    continue
                client = self.clients[cid]
                if client.disconnected or self.server.withholds_str(cid):
                    continue
                last = self._last_delivered.get(cid, -1)
                if last >= epoch:
                    continue
                items = []
                for e in range(last + 1, epoch + 1):
                    s = self.server.str_for_epoch(cid, e)
                    if s is None:
                        continue
                    poi = self.server.own_key_poi(cid, e)
                    items.append((e, s, poi))
                    eng.count("own_monitor")
                self._last_delivered[cid] = epoch
                if len(items) == 1:
                    msg = StrDelivery(epoch, items[0][1], items[0][2])
                else:
                    msg = MissedEpochsBundle(tuple(items))
                eng.deliver_to_client(cid, msg, 2 * eng.clock.delta_ms, "str_delivery")

        for cid in self.topology.clients:
            if cid in online:
                self.clients[cid].on_epoch_start(epoch)

        for e, a, b in sc.topology.add_edges:
            if e == epoch:
                self.topology.add_edge(a, b)
                self.server.contacts[a].add(b)
                self.server.contacts[b].add(a)
                self.server.note_new_edge(a, b)
                self.new_connection_events += 2
                for x, y in ((a, b), (b, a)):
                    if x in online:
                        self.clients[x].on_new_contact(y)

        for e, offset, src, dst in sc.prevention.app_sends:
            if e == epoch:
                eng.call_later(offset, self._make_app_send(src, dst))

    def _make_rekey(self, cid: str, epoch: int):
        def run():
            new_key = crypto.derive("rekey", self.scenario.seed, cid, epoch)
            try:
                self.server.register(cid, new_key, epoch)
            except RateLimited:
                return
            self.clients[cid].rekey(new_key, epoch)
            self._push_update_to_contacts(cid, epoch)

        return run

    def _push_update_to_contacts(self, subject: str, epoch: int) -> None:
        for contact in sorted(self.server.contacts.get(subject, ())):
            if contact not in self.engine.online:
                continue
            resp = self.server.update_push_for(contact, subject, epoch)
            self.engine.deliver_to_client(
                contact, KeyUpdatePush(resp), 2 * self.engine.clock.delta_ms,
                "update_push", response_wire_len(resp),
            )

    def _push_attack_updates(self) -> None:
        epoch = self.engine.epoch
        for subject in sorted(self.server.fake_holders):
            for holder in sorted(self.server.fake_holders[subject]):
                if holder not in self.engine.online:
                    continue
                resp = self.server.update_push_for(holder, subject, epoch)
                self.engine.deliver_to_client(
                    holder, KeyUpdatePush(resp), 2 * self.engine.clock.delta_ms,
                    "update_push", response_wire_len(resp),
                )

    def _make_stealthy_pushes(self, epoch: int):
        """Spread the fake updates out instead of blasting them all at once.

        Up to rate*(epochs since the attack began) pairs have been pushed in
        total; each epoch sends only the newly due ones.
        """

        def run():
            adv = self.scenario.adversary
            pairs = sorted(
                (subject, holder)
                for subject, holders in self.server.fake_holders.items()
                for holder in holders
            )
            due = int((epoch - adv.attack_epoch + 1) * adv.stealthy_update_rate)
            for subject, holder in pairs[self._stealthy_sent:due]:
                if holder in self.engine.online:
                    resp = self.server.update_push_for(holder, subject, epoch)
                    self.engine.deliver_to_client(
                        holder, KeyUpdatePush(resp), 2 * self.engine.clock.delta_ms,
                        "update_push", response_wire_len(resp),
                    )
            self._stealthy_sent = max(self._stealthy_sent, min(due, len(pairs)))

        return run

    def _short_lived_attack(self) -> None:
        adv = self.scenario.adversary
        epoch = self.engine.epoch
        subject = adv.target
        audience = sorted(self.server.contacts.get(subject, ()))
        if adv.peer is not None:
            audience = [adv.peer]
        fake, restore = self.server.short_lived_pair(subject, epoch)
        delta2 = 2 * self.engine.clock.delta_ms
        for cid in audience:
            if cid in self.engine.online:
                self.engine.deliver_to_client(cid, KeyUpdatePush(fake), delta2,
                                              "update_push", response_wire_len(fake))

        def restore_push():
            for cid in audience:
                if cid in self.engine.online:
                    self.engine.deliver_to_client(
                        cid, KeyUpdatePush(restore), delta2,
                        "update_push", response_wire_len(restore),
                    )

        self.engine.call_later(delta2 + adv.short_lived_restore_after_ms, restore_push)

    def _make_app_send(self, src: str, dst: str):
        def run():
            if src in self.engine.online:
                self.clients[src].try_send_app(dst)

        return run

    # -- result extraction --------------------------------------------------

    def run(self) -> TrialResult:
        self.engine.run()
        return self._result()

    def _result(self) -> TrialResult:
        core = {c.value for c in CORE_CAUSES}
        first_core: dict[str, dict] = {}
        det_dicts = []
        for ev in self.detections:
            d = {
                "detector": ev.detector,
                "epoch": ev.epoch,
                "time_ms": ev.sim_time,
                "cause": ev.cause.value,
                "pom": ev.pom is not None,
                "pom_kind": ev.pom.kind if ev.pom is not None else None,
                "attack_tag": ev.attack_tag,
            }
            det_dicts.append(d)
            if ev.cause.value in core and ev.detector not in first_core:
                first_core[ev.detector] = d
        pom_holders = sorted(
            cid for cid, c in self.clients.items() if c.held_pom is not None
        )
        pom_times = {}
        for cid in pom_holders:
            times = [e.sim_time for e in self.clients[cid].events if e.pom is not None]
            if times:
                pom_times[cid] = min(times)
        history_bytes = sum(
            response_wire_len(r)
            for c in self.clients.values()
            for hist in c.update_history.values()
            for r in hist
        )
        return TrialResult(
            trial=self.trial,
            epochs=self.scenario.epochs,
            clients=len(self.clients),
            detections=det_dicts,
            first_core=first_core,
            pom_holders=pom_holders,
            pom_hold_time_ms=pom_times,
            message_counts=dict(sorted(self.engine.message_counts.items())),
            physical_bytes=dict(sorted(self.engine.physical_bytes.items())),
            exchange_events=self.engine.exchange_events,
            new_connection_events=self.new_connection_events,
            app_messages=list(self.engine.app_messages),
            blocked_app_sends={
                cid: len(c.blocked_app_sends)
                for cid, c in self.clients.items()
                if c.blocked_app_sends
            },
            history_bytes=history_bytes,
            min_online_fraction=self.min_online_fraction,
        )


def run_trial(scenario: Scenario, trial: int) -> TrialResult:
    return World(scenario, trial).run()


_WORKER_STATE: dict = {}


def _pool_worker(args) -> TrialResult:
    scenario, trial = args
    key = (scenario.name, scenario.seed)
    base = _WORKER_STATE.get(key)
    if base is None:
        topo = build_topology(scenario)
        diam = graph_diameter(topo, set(topo.clients))
        _WORKER_STATE.clear()
        _WORKER_STATE[key] = base = (topo, diam)
    topo, diam = base
    return World(scenario, trial, clone_topology(topo), diam).run()


def run(scenario: Scenario, workers: int = 1) -> Metrics:
    """Run all trials of a scenario and aggregate."""
    base_topo = validate(scenario)
    diam = graph_diameter(base_topo, set(base_topo.clients))
    trials: list[TrialResult]
    if workers > 1 and scenario.trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(
                pool.map(
                    _pool_worker,
                    ((scenario, t) for t in range(scenario.trials)),
                    chunksize=max(1, scenario.trials // (workers * 8)),
                )
            )
    else:
        trials = [
            World(scenario, t, clone_topology(base_topo), diam).run()
            for t in range(scenario.trials)
        ]

    scope = resolve_scope(
        scenario.detection_scope,
        scenario.adversary.target,
        scenario.adversary.peer,
        tuple(),
    )
    m = aggregate(
        scenario_name=scenario.name,
        seed=scenario.seed,
        defense=scenario.defense.value,
        params={
            "epochs": scenario.epochs,
            "trials": scenario.trials,
            "detection_scope": scenario.detection_scope,
            "adversary": scenario.adversary.kind.value,
        },
        trials=trials,
        scope_ids=scope,
        attack_epoch=scenario.adversary.attack_epoch,
    )
    check_expectations(m, scenario.expect, predict.evaluate)
    return m
