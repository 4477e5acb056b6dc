"""Deterministic discrete-event network: epochs, bounded delays, anonymity.

One engine instance simulates one trial. All randomness flows from a master
seed through named substreams (topology, churn, delays, adversary,
anonymity permutation), so two runs of the same scenario are byte-identical.
Events are processed in (fire_time, sequence) order with sequence numbers
assigned at scheduling time.

Delay model: a client-server hop takes at most delta, a client-client
message (relayed through the server) at most 2*delta, and anything through
the anonymous network at most big_delta each way. Delays are drawn from the
open interval (0, bound) so a delivery can never tie with the timeout that
fires exactly at its bound.

The anonymity layer collects all same-epoch anonymous requests per subject,
strips sender identities, shuffles the order, and hands the server nothing
but request contents and a count. Responses are routed back positionally;
the mapping lives only on this side of the interface.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import crypto
from .artifacts import KeyResponse, ProofOfMisbehavior, SignedTreeRoot
from .tree import ProofOfInclusion


def stream(master: int, *labels) -> random.Random:
    """An independent, reproducible RNG substream of the master seed."""
    seed = crypto.derive("stream", master, *labels)
    return random.Random(int.from_bytes(seed, "big"))


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

@dataclass
class Topology:
    clients: tuple[str, ...]
    edges: set[frozenset]
    kind: str = "explicit"

    def __post_init__(self):
        self._adj: dict[str, set[str]] = {c: set() for c in self.clients}
        for e in self.edges:
            a, b = sorted(e)
            self._adj[a].add(b)
            self._adj[b].add(a)

    def neighbors(self, cid: str) -> set[str]:
        return self._adj[cid]

    def add_edge(self, a: str, b: str) -> None:
        self.edges.add(frozenset((a, b)))
        self._adj[a].add(b)
        self._adj[b].add(a)


def client_name(i: int) -> str:
    return f"c{i:04d}"


def ring_topology(n: int) -> Topology:
    names = tuple(client_name(i) for i in range(n))
    edges = {frozenset((names[i], names[(i + 1) % n])) for i in range(n)}
    return Topology(names, edges, "ring")


def star_topology(n: int) -> Topology:
    """Hub plus n-1 spokes."""
    names = tuple(client_name(i) for i in range(n))
    edges = {frozenset((names[0], names[i])) for i in range(1, n)}
    return Topology(names, edges, "star")


def gnp_topology(n: int, p: float, rng: random.Random, require_connected: bool = True) -> Topology:
    """Erdos-Renyi G(n, p); resamples (deterministically) until connected."""
    names = tuple(client_name(i) for i in range(n))
    for _ in range(200):
        edges = set()
        for i in range(n):
            for j in range(i + 1, n):
                if rng.random() < p:
                    edges.add(frozenset((names[i], names[j])))
        topo = Topology(names, edges, "gnp")
        if not require_connected or graph_diameter(topo, set(names)) is not None:
            return topo
    raise ValueError(f"G({n},{p}) failed to produce a connected graph")


def explicit_topology(clients: Iterable[str], edges: Iterable[tuple[str, str]]) -> Topology:
    return Topology(tuple(clients), {frozenset(e) for e in edges}, "explicit")


def complete_topology(n: int) -> Topology:
    names = tuple(client_name(i) for i in range(n))
    edges = {
        frozenset((names[i], names[j])) for i in range(n) for j in range(i + 1, n)
    }
    return Topology(names, edges, "complete")


def graph_diameter(topology: Topology, online: set[str]) -> Optional[int]:
    """Exact diameter of the online subgraph via BFS; None if disconnected."""
    nodes = [c for c in topology.clients if c in online]
    if not nodes:
        return None
    diam = 0
    nodeset = set(nodes)
    for src in nodes:
        dist = {src: 0}
        frontier = [src]
        while frontier:
            nxt = []
            for u in frontier:
                for v in topology.neighbors(u):
                    if v in nodeset and v not in dist:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
            frontier = nxt
        if len(dist) < len(nodes):
            return None
        diam = max(diam, max(dist.values()))
    return diam


# ---------------------------------------------------------------------------
# Clock and churn
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClockConfig:
    epoch_len_ms: float = 20.0
    delta_ms: float = 1.0          # max direct client<->server delay
    big_delta_ms: float = 2.0      # max one-way delay through the anonymous net

    def validate(self, diameter: Optional[int]) -> None:
        if self.big_delta_ms <= self.delta_ms:
            raise ConfigInvalid("clock: big_delta must exceed delta")
        if self.epoch_len_ms <= 4 * self.big_delta_ms:
            raise ConfigInvalid("clock: epoch_len must dwarf big_delta (need > 4*big_delta)")
        if diameter is not None:
            bound = 2 * (diameter + 1) * self.delta_ms
            if bound >= self.epoch_len_ms:
                raise ConfigInvalid(
                    f"clock: 2*(diam+1)*delta = {bound} must be < epoch_len = {self.epoch_len_ms}"
                )


@dataclass(frozen=True)
class ChurnModel:
    offline_prob: float = 0.0
    min_online_fraction: float = 0.5
    # explicit schedules win over the random draw: client -> offline epochs
    schedule: dict = field(default_factory=dict)

    def online_set(self, clients: tuple[str, ...], epoch: int, rng: random.Random) -> frozenset:
        online = set()
        scheduled = []
        for c in clients:
            sched = self.schedule.get(c)
            if sched is not None:
                scheduled.append(c)
                if epoch not in sched:
                    online.add(c)
            elif self.offline_prob <= 0.0 or rng.random() >= self.offline_prob:
                online.add(c)
        floor = math.ceil(len(clients) * self.min_online_fraction)
        if len(online) < floor:
            offline = sorted(set(clients) - online - set(scheduled))
            while len(online) < floor and offline:
                online.add(offline.pop(rng.randrange(len(offline))))
        return frozenset(online)


class ConfigInvalid(ValueError):
    pass


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StrDelivery:
    epoch: int
    str_: SignedTreeRoot
    poi: Optional[ProofOfInclusion]


@dataclass(frozen=True)
class MissedEpochsBundle:
    items: tuple  # ((epoch, str_, poi), ...)


@dataclass(frozen=True)
class GossipStr:
    str_: SignedTreeRoot
    sender: str


@dataclass(frozen=True)
class GossipPom:
    pom: ProofOfMisbehavior
    sender: str


@dataclass(frozen=True)
class KeyUpdatePush:
    resp: KeyResponse


@dataclass(frozen=True)
class LookupResponse:
    subject: str
    resp: Optional[KeyResponse]


@dataclass(frozen=True)
class AkrResponse:
    subject: str
    resp: KeyResponse


@dataclass(frozen=True)
class AsrResponse:
    epoch: int
    str_: SignedTreeRoot


@dataclass(frozen=True)
class IsolationProbe:
    sender: str
    epoch: int


@dataclass(frozen=True)
class IsolationReply:
    sender: str
    epoch: int


@dataclass(frozen=True)
class OobConfirmRequest:
    sender: str
    claimed_key: bytes
    mac: bytes


@dataclass(frozen=True)
class OobConfirmReply:
    sender: str
    current_key: bytes
    mac: bytes


@dataclass(frozen=True)
class AppMessage:
    sender: str
    note: str = ""


@dataclass(frozen=True)
class AnonymousBatch:
    """What the server sees of anonymous traffic: contents and a count only.

    There is deliberately no sender field anywhere in this structure; the
    position-to-sender mapping never crosses the interface.
    """

    kind: str          # "akr" | "asr"
    epoch: int
    subject: Optional[str]
    count: int

    def debug_dict(self) -> dict:
        return {
            "kind": self.kind,
            "epoch": self.epoch,
            "subject": self.subject,
            "count": self.count,
        }


# Event payload kinds
EV_BOUNDARY = 0
EV_DELIVER = 1
EV_TIMER = 2
EV_ANON = 3
EV_GO_ONLINE = 4
EV_GO_OFFLINE = 5
EV_CALL = 6


class Engine:
    """The event loop plus the network facade offered to clients.

    The protocol roles (server state machine, per-client state machines) are
    plugged in by the runner; the engine owns time, delivery, anonymity
    batching, churn, timers, and byte counters.
    """

    def __init__(self, master_seed: int, trial: int, clock: ClockConfig):
        self.clock = clock
        self.now = 0.0
        self.epoch = -1
        self._seq = 0
        self._heap: list = []
        self._timers: dict = {}
        self._timer_token = 0
        self.delay_rng = stream(master_seed, "delays", trial)
        self.anon_rng = stream(master_seed, "anonper", trial)
        self.online: frozenset = frozenset()
        self._anon_pending: dict = {}
        self._anon_senders: dict = {}
        # accounting
        self.message_counts: dict[str, int] = {}
        self.physical_bytes: dict[str, int] = {}
        self._exchange_seen: set = set()
        self.exchange_events = 0
        self.app_messages: list = []

        self.deliver_client_msg: Callable = lambda cid, msg: None
        self.on_epoch_boundary: Callable = lambda epoch: None
        self.on_anon_batch: Callable = lambda batch, senders: None
        self.on_timer: Callable = lambda owner, key, data: None
        self.on_client_online: Callable = lambda cid, epoch: None
        self.on_client_offline: Callable = lambda cid, epoch: None

    # -- scheduling ------------------------------------------------------

    def schedule(self, at: float, kind: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, kind, payload))

    def call_later(self, delay: float, fn: Callable) -> None:
        self.schedule(self.now + delay, EV_CALL, fn)

    def _draw_delay(self, bound: float) -> float:
        u = self.delay_rng.random()
        while u == 0.0:
            u = self.delay_rng.random()
        return bound * u

    def count(self, klass: str, nbytes: int = 0) -> None:
        self.message_counts[klass] = self.message_counts.get(klass, 0) + 1
        if nbytes:
            self.physical_bytes[klass] = self.physical_bytes.get(klass, 0) + nbytes

    # -- direct messaging --------------------------------------------------

    def deliver_to_client(self, cid: str, msg, bound: float, klass: str, nbytes: int = 0) -> None:
        """Server-to-client delivery within the given bound."""
        self.count(klass, nbytes)
        self.schedule(self.now + self._draw_delay(bound), EV_DELIVER, (cid, msg))

    def send_client_to_client(self, src: str, dst: str, msg, klass: str,
                              nbytes: int = 0, cut: bool = False) -> None:
        """Client-to-client message relayed through the server: bound 2*delta.

        A cut edge silently swallows the message (the adversary controls the
        relay); the sender cannot tell.
        """
        self.count(klass, nbytes)
        if klass == "str_exchange":
            root = msg.str_.root_hash if isinstance(msg, GossipStr) else None
            key = (frozenset((src, dst)), root, self.epoch)
            if key not in self._exchange_seen:
                self._exchange_seen.add(key)
                self.exchange_events += 1
        if cut:
            return
        self.schedule(self.now + self._draw_delay(2 * self.clock.delta_ms),
                      EV_DELIVER, (dst, msg))

    def send_oob(self, src: str, dst: str, msg, dropped: bool = False, nbytes: int = 0) -> None:
        """Out-of-band channel: reliable delta-delay link, droppable, unforgeable."""
        self.count("oob", nbytes)
        if dropped:
            return
        self.schedule(self.now + self._draw_delay(self.clock.delta_ms),
                      EV_DELIVER, (dst, msg))

    def send_app_message(self, src: str, dst: str, note: str = "") -> None:
        self.app_messages.append((self.now, src, dst, note))
        self.schedule(self.now + self._draw_delay(2 * self.clock.delta_ms),
                      EV_DELIVER, (dst, AppMessage(src, note)))

    # -- anonymous messaging ----------------------------------------------

    def send_anonymous(self, sender: str, kind: str, subject: Optional[str]) -> None:
        """Queue an anonymous request; batched per (kind, subject) per epoch."""
        key = (kind, subject, self.epoch)
        self._anon_pending.setdefault(key, []).append(sender)
        self.count("akr" if kind == "akr" else "asr")

    def _process_anon_batches(self) -> None:
        pending, self._anon_pending = self._anon_pending, {}
        for (kind, subject, epoch), senders in sorted(
            pending.items(), key=lambda kv: (kv[0][0], kv[0][1] or "")
        ):
            order = list(senders)
            self.anon_rng.shuffle(order)
            batch = AnonymousBatch(kind=kind, epoch=epoch, subject=subject, count=len(order))
            self.on_anon_batch(batch, order)

    def deliver_anon_response(self, sender: str, msg) -> None:
        """Response leg of an anonymous round trip: one more big_delta hop."""
        self.schedule(self.now + self._draw_delay(self.clock.big_delta_ms),
                      EV_DELIVER, (sender, msg))

    # -- timers ------------------------------------------------------------

    def set_timer(self, owner: str, key, at: float, data=None) -> None:
        self._timer_token += 1
        self._timers[(owner, key)] = self._timer_token
        self.schedule(at, EV_TIMER, (owner, key, self._timer_token, data))

    def cancel_timer(self, owner: str, key) -> None:
        self._timers.pop((owner, key), None)

    # -- run ----------------------------------------------------------------

    def schedule_epochs(self, epochs: int) -> None:
        for e in range(epochs):
            self.schedule(e * self.clock.epoch_len_ms, EV_BOUNDARY, e)

    def set_online(self, online: frozenset, epoch: int) -> None:
        """Apply churn; emits explicit online/offline transition events."""
        for cid in sorted(self.online - online):
            self.schedule(self.now, EV_GO_OFFLINE, (cid, epoch))
        for cid in sorted(online - self.online):
            self.schedule(self.now, EV_GO_ONLINE, (cid, epoch))
        self.online = online

    def run(self) -> None:
        heap = self._heap
        while heap:
            at, _seq, kind, payload = heapq.heappop(heap)
            self.now = at
            if kind == EV_DELIVER:
                cid, msg = payload
                if cid in self.online:
                    self.deliver_client_msg(cid, msg)
            elif kind == EV_TIMER:
                owner, key, token, data = payload
                if self._timers.get((owner, key)) == token:
                    del self._timers[(owner, key)]
                    self.on_timer(owner, key, data)
            elif kind == EV_BOUNDARY:
                self.epoch = payload
                self._exchange_seen.clear()
                self.on_epoch_boundary(payload)
                self.schedule(self.now + self.clock.big_delta_ms, EV_ANON, payload)
            elif kind == EV_ANON:
                self._process_anon_batches()
            elif kind == EV_GO_ONLINE:
                self.on_client_online(*payload)
            elif kind == EV_GO_OFFLINE:
                self.on_client_offline(*payload)
            elif kind == EV_CALL:
                payload()
