"""Per-client defense state machines.

One ClientState instance runs one of three defenses:

  KTCA   verify own key against the signed tree root each epoch, exchange
         tree roots with contacts, turn any conflict into a proof of
         misbehavior and flood it.
  AKM    monitor own key (and recently changed contact keys, for m epochs)
         with anonymous key requests; any mismatch or timeout is detection.
  KTACA  verify own key directly each epoch and additionally fetch the tree
         root anonymously; a mismatch between the two is a proof of
         misbehavior.

All defenses run short-lived-attack monitoring on every signed key statement
they ingest: a key that reappears under a different upload epoch is key
reuse, which yields a duplicate-key proof of misbehavior on the spot.

Optional layers: mass-key-update and isolation heuristics (no proofs; their
false-positive rates are reported separately) and prevention mode, which
holds traffic to a peer until verification completes and confirms key
updates over a MAC-authenticated out-of-band channel.

Event-handling rules that keep honest runs event-free under churn:

  * A signed key statement older than what we hold (lower upload epoch) is
    ignored; reordered deliveries are not attacks and real attacks stay
    catchable through proofs of inclusion.
  * A statement with a newer upload epoch is a key update and goes through
    the full ingestion path (duplicate scan, adoption, deferred proof).
  * A key uploaded in epoch e is promised for the next tree; it is verified
    against the first tree root we see from epoch e+1 on, and a broken
    promise is an invalid-proof detection.
"""

from __future__ import annotations

import hmac as hmac_mod
import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from . import artifacts, crypto, tree
from .artifacts import (
    KeyResponse,
    ProofOfMisbehavior,
    SignedTreeRoot,
    adjudicate,
    make_pom_conflict,
    make_pom_duplicate,
    pom_fingerprint,
    verify_key_response,
    verify_str,
    verify_str_chain,
)
from .simnet import (
    AkrResponse,
    AppMessage,
    AsrResponse,
    GossipPom,
    GossipStr,
    IsolationProbe,
    IsolationReply,
    KeyUpdatePush,
    LookupResponse,
    MissedEpochsBundle,
    OobConfirmReply,
    OobConfirmRequest,
    StrDelivery,
)


class Defense(str, Enum):
    KTCA = "ktca"
    AKM = "akm"
    KTACA = "ktaca"


class Cause(str, Enum):
    CONFLICTING_STR = "conflicting_str"
    INVALID_POI = "invalid_poi"
    MISSING_STR = "missing_str"
    MISSING_POI = "missing_poi"
    AKR_MISMATCH = "akr_mismatch"
    AKR_TIMEOUT = "akr_timeout"
    ASR_MISMATCH = "asr_mismatch"
    DUPLICATE_KEY = "duplicate_key"
    MASS_KEY_UPDATE = "mass_key_update"
    ISOLATION = "isolation"
    OOB_TIMEOUT = "oob_timeout"
    OOB_MISMATCH = "oob_mismatch"


# Causes backed by cryptographic checks or hard timing bounds; the heuristic
# monitors (mass update, isolation) are reported but carry no guarantee.
CORE_CAUSES = frozenset(
    {
        Cause.CONFLICTING_STR,
        Cause.INVALID_POI,
        Cause.MISSING_STR,
        Cause.MISSING_POI,
        Cause.AKR_MISMATCH,
        Cause.AKR_TIMEOUT,
        Cause.ASR_MISMATCH,
        Cause.DUPLICATE_KEY,
        Cause.OOB_TIMEOUT,
        Cause.OOB_MISMATCH,
    }
)


@dataclass(frozen=True)
class DetectionEvent:
    detector: str
    epoch: int
    sim_time: float
    cause: Cause
    pom: Optional[ProofOfMisbehavior] = None
    attack_tag: str = ""


@dataclass
class MonitorPolicy:
    m: int = 10
    mass_update_threshold: float = 0.20
    mass_update_window_epochs: int = 1
    mass_update_min_count: int = 3
    mass_update_enabled: bool = False
    isolation_enabled: bool = False
    diameter_hint: int = 1  # used only to size prevention hold windows


@dataclass
class HeldKey:
    key: bytes
    upload_epoch: int


def oob_mac(key: bytes, *fields) -> bytes:
    return hmac_mod.new(key, crypto.encode_fields(*fields), hashlib.sha256).digest()


class ClientState:
    """One client's defense state machine; driven by the engine via env."""

    def __init__(
        self,
        cid: str,
        keypair: crypto.KeyPair,
        defense: Defense,
        policy: MonitorPolicy,
        server_pub: bytes,
        env,
        rng,
        prevention_enabled: bool = False,
        attack_tag: str = "",
    ):
        self.id = cid
        self.keypair = keypair
        self.defense = defense
        self.policy = policy
        self.server_pub = server_pub
        self.env = env
        self.rng = rng
        self.prevention_enabled = prevention_enabled
        self.attack_tag = attack_tag

        self.contacts: set[str] = set()
        self.held_keys: dict[str, HeldKey] = {}
        self.update_history: dict[str, list[KeyResponse]] = {}
        self.own_keys: list[tuple[bytes, int]] = [(keypair.verifying_key, -1)]

        self.str_by_epoch: dict[int, SignedTreeRoot] = {}
        self.seen_roots: dict[int, dict[bytes, SignedTreeRoot]] = {}
        self.received_from: dict[tuple, set[str]] = {}
        self.sent_to: dict[tuple, set[str]] = {}
        self.pending_asr: dict[int, SignedTreeRoot] = {}
        self.has_server_str = False
        self.relayed_fallback = False

        self.held_pom: Optional[ProofOfMisbehavior] = None
        self.detected = False
        self.pom_seen: set[bytes] = set()
        self.events: list[DetectionEvent] = []

        self.monitor_schedule: dict[str, int] = {}
        self.pending_checks: dict[str, KeyResponse] = {}
        self.online = True
        self.disconnected = False

        self.updates_seen: list[tuple[int, str]] = []   # (epoch, contact)
        self.key_changed_this_epoch: set[str] = set()
        self.isolation_ok: dict[int, bool] = {}
        self.isolation_probes = 0

        self.oob_channels: dict[str, bytes] = {}
        self.gate: dict[str, str] = {}              # peer -> allow|hold|detected
        self.hold_until: dict[str, float] = {}
        self.pending_oob: dict[str, bytes] = {}     # peer -> claimed key
        self.blocked_app_sends: list[tuple[float, str]] = []

    # ------------------------------------------------------------------
    # bootstrap helpers (used by the runner, not message-driven)
    # ------------------------------------------------------------------

    def seed_contact(self, resp: KeyResponse) -> None:
        """Trusted initial key for a contact, recorded with its evidence."""
        cid = resp.client_id
        self.contacts.add(cid)
        self.held_keys[cid] = HeldKey(resp.public_key, resp.upload_epoch)
        self.update_history.setdefault(cid, []).append(resp)
        if self.prevention_enabled:
            self.gate[cid] = "allow"

    def current_own_key(self) -> bytes:
        return self.own_keys[-1][0]

    def expected_tree_key(self, epoch: int) -> bytes:
        """My key as the epoch-e tree must bind it (uploads lag one epoch)."""
        for key, ue in reversed(self.own_keys):
            if ue <= epoch - 1:
                return key
        return self.own_keys[0][0]

    def rekey(self, new_key: bytes, epoch: int) -> None:
        self.own_keys.append((new_key, epoch))

    # ------------------------------------------------------------------
    # events
    # ------------------------------------------------------------------

    def _emit(self, cause: Cause, pom: Optional[ProofOfMisbehavior] = None,
              epoch: Optional[int] = None) -> None:
        if pom is not None and self.held_pom is None:
            self.held_pom = pom
        ev = DetectionEvent(
            detector=self.id,
            epoch=self.env.current_epoch() if epoch is None else epoch,
            sim_time=self.env.now(),
            cause=cause,
            pom=pom,
            attack_tag=self.attack_tag,
        )
        self.events.append(ev)
        if cause in CORE_CAUSES:
            self.detected = True
        self.env.emit(ev)

    def _hold_and_flood_pom(self, pom: ProofOfMisbehavior, cause: Cause) -> None:
        fp = pom_fingerprint(pom)
        if fp in self.pom_seen:
            return
        self.pom_seen.add(fp)
        self._emit(cause, pom)
        if self.defense is Defense.KTCA:
            for contact in sorted(self.contacts):
                self.env.send_gossip(self.id, contact, GossipPom(pom, self.id))

    # ------------------------------------------------------------------
    # epoch protocol
    # ------------------------------------------------------------------

    def on_epoch_start(self, epoch: int) -> None:
        self.key_changed_this_epoch.clear()
        self.has_server_str = False
        self.relayed_fallback = False
        clock = self.env.clock
        t0 = self.env.now()

        if self.defense in (Defense.KTCA, Defense.KTACA) and not self.disconnected:
            bound = 2 * (clock.delta_ms if self.defense is Defense.KTCA else clock.big_delta_ms)
            self.env.set_timer(self.id, ("str", epoch), t0 + bound)
        if self.defense is Defense.KTACA and not self.disconnected:
            self.env.send_asr(self.id)
            self.env.set_timer(self.id, ("asr", epoch), t0 + 2 * clock.big_delta_ms)
        if self.defense is Defense.AKM and not self.disconnected:
            self.env.send_akr(self.id, self.id)
            self.env.set_timer(self.id, ("akr", self.id, epoch), t0 + 2 * clock.big_delta_ms)
            # monitor_schedule maps subject -> last epoch of its m-epoch
            # window; the window is fixed in time, so epochs spent offline
            # are simply lost (they don't extend monitoring)
            for subject in [s for s, until in self.monitor_schedule.items() if epoch > until]:
                del self.monitor_schedule[subject]
            for subject in sorted(self.monitor_schedule):
                self.env.send_akr(self.id, subject)
                self.env.set_timer(self.id, ("akr", subject, epoch), t0 + 2 * clock.big_delta_ms)

        for subject in sorted(self.pending_checks):
            promise = self.pending_checks[subject]
            if promise.upload_epoch < epoch and not self.disconnected:
                self.env.lookup(self.id, subject, deferred=True)
                self.env.set_timer(self.id, ("lookup", subject), t0 + 2 * clock.delta_ms)

        if self.policy.isolation_enabled and self.contacts:
            # verdicts are per epoch: the end-of-epoch check fires at the next
            # boundary, after this state machine has already moved on
            self.isolation_ok[epoch] = False
            self.isolation_probes = 0
            x = len(self.contacts)
            sub = clock.epoch_len_ms / x
            self.env.set_timer(self.id, ("probe", epoch), t0, data=(epoch, sub))
            self.env.set_timer(self.id, ("isolation-end", epoch), t0 + clock.epoch_len_ms,
                               data=epoch)
            if len(self.isolation_ok) > 4:
                del self.isolation_ok[min(self.isolation_ok)]

        for peer, until in list(self.hold_until.items()):
            if t0 >= until and self.gate.get(peer) == "hold":
                self.gate[peer] = "allow"
                del self.hold_until[peer]

    # ------------------------------------------------------------------
    # signed tree roots: direct, gossiped, and anonymous
    # ------------------------------------------------------------------

    def _observe_root(self, str_: SignedTreeRoot) -> bool:
        """Record a validly signed root; returns False on a conflict (PoM)."""
        roots = self.seen_roots.setdefault(str_.epoch, {})
        if str_.root_hash not in roots:
            if roots:
                other = next(iter(roots.values()))
                pom = make_pom_conflict(other, str_, self.server_pub)
                roots[str_.root_hash] = str_
                self._hold_and_flood_pom(pom, Cause.CONFLICTING_STR)
                return False
            roots[str_.root_hash] = str_
        return True

    def _accept_own_str(self, epoch: int, str_: SignedTreeRoot,
                        poi: Optional[tree.ProofOfInclusion]) -> bool:
        """Chain, signature, and own-key checks for a directly fetched root."""
        if not verify_str(str_, self.server_pub) or str_.epoch != epoch:
            self._emit(Cause.MISSING_STR)
            self.disconnected = True
            return False
        prev = self.str_by_epoch.get(epoch - 1)
        if prev is not None and not verify_str_chain(prev, str_, self.server_pub):
            self._emit(Cause.MISSING_STR)
            self.disconnected = True
            return False
        expected = self.expected_tree_key(epoch)
        if poi is None or not tree.verify_poi(str_.root_hash, poi, self.id, expected):
            self._emit(Cause.INVALID_POI)
            self.disconnected = True
            return False
        self.str_by_epoch[epoch] = str_
        if not self._observe_root(str_):
            return False
        return True

    def on_str_delivery(self, msg: StrDelivery) -> None:
        self.env.cancel_timer(self.id, ("str", msg.epoch))
        if not self._accept_own_str(msg.epoch, msg.str_, msg.poi):
            return
        self.has_server_str = True
        self._after_str_accepted(msg.epoch, msg.str_)

    def _after_str_accepted(self, epoch: int, str_: SignedTreeRoot) -> None:
        if self.defense is Defense.KTCA:
            key = (epoch, str_.root_hash)
            already = self.received_from.get(key, set())
            sent = self.sent_to.setdefault(key, set())
            for contact in sorted(self.contacts):
                if contact not in already and contact not in sent:
                    sent.add(contact)
                    self.env.send_gossip(self.id, contact, GossipStr(str_, self.id))
        elif self.defense is Defense.KTACA:
            pending = self.pending_asr.pop(epoch, None)
            if pending is not None:
                self._compare_asr(epoch, direct=str_, anonymous=pending)

    def on_missed_bundle(self, msg: MissedEpochsBundle) -> None:
        for epoch, str_, poi in msg.items:
            self.env.cancel_timer(self.id, ("str", epoch))
            if not self._accept_own_str(epoch, str_, poi):
                return
            self.has_server_str = True
            self._after_str_accepted(epoch, str_)

    def on_gossip_str(self, msg: GossipStr) -> None:
        str_ = msg.str_
        if not verify_str(str_, self.server_pub):
            return  # unforgeable: a bad signature is noise, never evidence
        key = (str_.epoch, str_.root_hash)
        self.received_from.setdefault(key, set()).add(msg.sender)
        if not self._observe_root(str_):
            return
        if (
            str_.epoch == self.env.current_epoch()
            and not self.has_server_str
            and not self.relayed_fallback
        ):
            self.relayed_fallback = True
            received = self.received_from.get(key, set())
            sent = self.sent_to.setdefault(key, set())
            for contact in sorted(self.contacts):
                if contact not in received and contact not in sent:
                    sent.add(contact)
                    self.env.send_gossip(self.id, contact, GossipStr(str_, self.id))

    def on_gossip_pom(self, msg: GossipPom) -> None:
        fp = pom_fingerprint(msg.pom)
        if fp in self.pom_seen:
            return
        if not adjudicate(msg.pom, self.server_pub):
            self.pom_seen.add(fp)
            return
        cause = (
            Cause.CONFLICTING_STR
            if msg.pom.kind == ProofOfMisbehavior.KIND_CONFLICTING_STRS
            else Cause.DUPLICATE_KEY
        )
        self._hold_and_flood_pom(msg.pom, cause)

    def on_asr_response(self, msg: AsrResponse) -> None:
        self.env.cancel_timer(self.id, ("asr", msg.epoch))
        if not verify_str(msg.str_, self.server_pub):
            return
        direct = self.str_by_epoch.get(msg.epoch)
        if direct is not None:
            self._compare_asr(msg.epoch, direct=direct, anonymous=msg.str_)
        else:
            self.pending_asr[msg.epoch] = msg.str_

    def _compare_asr(self, epoch: int, direct: SignedTreeRoot, anonymous: SignedTreeRoot) -> None:
        if direct.root_hash == anonymous.root_hash:
            return
        pom = make_pom_conflict(direct, anonymous, self.server_pub)
        self._hold_and_flood_pom(pom, Cause.ASR_MISMATCH)

    # ------------------------------------------------------------------
    # signed key statements: pushes, lookups, anonymous monitoring
    # ------------------------------------------------------------------

    def _duplicate_scan(self, resp: KeyResponse) -> bool:
        """Short-lived attack check; True when a reuse PoM was raised."""
        for prior in self.update_history.get(resp.client_id, ()):
            if prior.public_key == resp.public_key and prior.upload_epoch != resp.upload_epoch:
                pom = make_pom_duplicate(prior, resp, self.server_pub)
                self._hold_and_flood_pom(pom, Cause.DUPLICATE_KEY)
                return True
        return False

    def ingest_key_statement(self, resp: KeyResponse) -> None:
        """Common path for every signed key statement about a contact."""
        if not verify_key_response(resp, self.server_pub):
            return
        subject = resp.client_id
        if subject == self.id:
            if resp.public_key != self.current_own_key():
                self._emit(Cause.AKR_MISMATCH)
            return
        if subject not in self.contacts:
            return
        if resp.str_ is not None and verify_str(resp.str_, self.server_pub):
            self._observe_root(resp.str_)
        if self._duplicate_scan(resp):
            return
        held = self.held_keys.get(subject)
        if held is not None and resp.public_key == held.key and resp.upload_epoch == held.upload_epoch:
            return  # re-delivery
        if held is not None and resp.upload_epoch < held.upload_epoch:
            return  # stale, reordered delivery
        if held is not None and resp.upload_epoch == held.upload_epoch:
            # two different keys claiming the same upload epoch
            self._emit(Cause.INVALID_POI)
            return
        self._adopt_update(resp)

    def _adopt_update(self, resp: KeyResponse) -> None:
        subject = resp.client_id
        self.update_history.setdefault(subject, []).append(resp)
        self.held_keys[subject] = HeldKey(resp.public_key, resp.upload_epoch)
        self.key_changed_this_epoch.add(subject)
        self._note_update_for_mass_monitor(subject)
        if self.prevention_enabled and subject in self.oob_channels:
            self._gate_key_update(subject, resp.public_key)

        if resp.poi is not None and resp.str_ is not None:
            if not artifacts.verify_poi_against_str(
                resp.str_, resp.poi, subject, resp.public_key, self.server_pub
            ):
                self._emit(Cause.INVALID_POI)
                return
            self.pending_checks.pop(subject, None)
        elif self.defense in (Defense.KTCA, Defense.KTACA):
            # promised for the next tree; verified from epoch+1 on
            self.pending_checks[subject] = resp
        if self.defense is Defense.AKM:
            self.monitor_schedule[subject] = self.env.current_epoch() + self.policy.m

    def on_key_update_push(self, msg: KeyUpdatePush) -> None:
        self.ingest_key_statement(msg.resp)

    def on_lookup_response(self, msg: LookupResponse) -> None:
        self.env.cancel_timer(self.id, ("lookup", msg.subject))
        if msg.resp is None:
            self._emit(Cause.MISSING_POI)
            return
        resp = msg.resp
        if not verify_key_response(resp, self.server_pub):
            return
        promise = self.pending_checks.get(msg.subject)
        if promise is not None and resp.client_id == msg.subject:
            if resp.public_key == promise.public_key:
                ok = (
                    resp.poi is not None
                    and resp.str_ is not None
                    and artifacts.verify_poi_against_str(
                        resp.str_, resp.poi, msg.subject, resp.public_key, self.server_pub
                    )
                )
                if ok:
                    del self.pending_checks[msg.subject]
                    if resp.str_ is not None:
                        self._observe_root(resp.str_)
                else:
                    self._emit(Cause.INVALID_POI)
                return
            if resp.upload_epoch > promise.upload_epoch:
                self.ingest_key_statement(resp)  # superseded by a newer update
                return
            self._emit(Cause.INVALID_POI)  # the promised key never landed
            return
        self.ingest_key_statement(resp)

    def on_akr_response(self, msg: AkrResponse) -> None:
        epoch = self.env.current_epoch()
        self.env.cancel_timer(self.id, ("akr", msg.subject, epoch))
        resp = msg.resp
        if not verify_key_response(resp, self.server_pub):
            return
        if msg.subject == self.id:
            if resp.public_key != self.current_own_key():
                self._emit(Cause.AKR_MISMATCH)
            return
        held = self.held_keys.get(msg.subject)
        if held is None:
            return
        if resp.public_key == held.key:
            return
        if self._duplicate_scan(resp):
            return
        if resp.upload_epoch > held.upload_epoch:
            self.ingest_key_statement(resp)  # a legitimate newer update
            return
        self._emit(Cause.AKR_MISMATCH)

    # ------------------------------------------------------------------
    # new connections
    # ------------------------------------------------------------------

    def on_new_contact(self, peer: str) -> None:
        self.contacts.add(peer)
        clock = self.env.clock
        if self.prevention_enabled:
            self.gate[peer] = "hold"
            self.hold_until[peer] = self._verification_horizon()
        if not self.disconnected:
            self.env.lookup(self.id, peer)
            self.env.set_timer(self.id, ("lookup", peer),
                               self.env.now() + 2 * clock.delta_ms)
        if self.defense is Defense.AKM:
            self.monitor_schedule[peer] = self.env.current_epoch() + self.policy.m

    def _verification_horizon(self) -> float:
        """How long prevention mode holds a brand-new connection."""
        clock = self.env.clock
        epoch_start = self.env.current_epoch() * clock.epoch_len_ms
        next_epoch = epoch_start + clock.epoch_len_ms
        if self.defense is Defense.KTCA:
            return next_epoch + 2 * (self.policy.diameter_hint + 1) * clock.delta_ms
        if self.defense is Defense.KTACA:
            return next_epoch + 2 * clock.big_delta_ms
        return epoch_start + self.policy.m * clock.epoch_len_ms

    # ------------------------------------------------------------------
    # prevention mode
    # ------------------------------------------------------------------

    def establish_oob(self, peer: str, shared_key: bytes) -> None:
        self.oob_channels[peer] = shared_key
        self.gate.setdefault(peer, "allow")

    def _gate_key_update(self, peer: str, claimed_key: bytes) -> None:
        self.gate[peer] = "hold"
        self.pending_oob[peer] = claimed_key
        mac = oob_mac(self.oob_channels[peer], self.id, peer, b"confirm?", claimed_key)
        self.env.send_oob(self.id, peer, OobConfirmRequest(self.id, claimed_key, mac),
                          nbytes=len(claimed_key) + 32)
        self.env.set_timer(self.id, ("oob", peer),
                           self.env.now() + 2 * self.env.clock.delta_ms, data=peer)

    def on_oob_confirm_request(self, msg: OobConfirmRequest) -> None:
        shared = self.oob_channels.get(msg.sender)
        if shared is None:
            return
        if msg.mac != oob_mac(shared, msg.sender, self.id, b"confirm?", msg.claimed_key):
            return  # unforgeable channel: a bad MAC is dropped on the floor
        key = self.current_own_key()
        reply_mac = oob_mac(shared, self.id, msg.sender, b"current", key)
        self.env.send_oob(self.id, msg.sender, OobConfirmReply(self.id, key, reply_mac),
                          nbytes=len(key) + 32)

    def on_oob_confirm_reply(self, msg: OobConfirmReply) -> None:
        shared = self.oob_channels.get(msg.sender)
        claimed = self.pending_oob.get(msg.sender)
        if shared is None or claimed is None:
            return
        if msg.mac != oob_mac(shared, msg.sender, self.id, b"current", msg.current_key):
            return
        self.env.cancel_timer(self.id, ("oob", msg.sender))
        del self.pending_oob[msg.sender]
        if msg.current_key == claimed:
            self.gate[msg.sender] = "allow"
        else:
            self.gate[msg.sender] = "detected"
            self._emit(Cause.OOB_MISMATCH)

    def prevention_gate(self, peer: str) -> str:
        """Current decision for traffic to peer: allow, hold, or detected."""
        if not self.prevention_enabled:
            return "allow"
        state = self.gate.get(peer, "allow")
        if state == "hold":
            until = self.hold_until.get(peer)
            if until is not None and self.env.now() >= until:
                self.gate[peer] = "allow"
                del self.hold_until[peer]
                return "allow"
        return self.gate.get(peer, "allow")

    def try_send_app(self, peer: str, note: str = "") -> bool:
        decision = self.prevention_gate(peer)
        if decision != "allow":
            self.blocked_app_sends.append((self.env.now(), peer))
            return False
        self.env.send_app(self.id, peer, note)
        return True

    # ------------------------------------------------------------------
    # heuristics
    # ------------------------------------------------------------------

    def _note_update_for_mass_monitor(self, subject: str) -> None:
        if not self.policy.mass_update_enabled:
            return
        epoch = self.env.current_epoch()
        self.updates_seen.append((epoch, subject))
        window = self.policy.mass_update_window_epochs
        lo = epoch - window + 1
        in_window = {cid for (e, cid) in self.updates_seen if e >= lo}
        # allowance scales with window length: the threshold is a sustained
        # per-epoch re-key fraction, so slow stealthy attacks stay under it
        allowance = max(
            self.policy.mass_update_threshold * len(self.contacts) * window,
            self.policy.mass_update_min_count,
        )
        if len(in_window) > allowance:
            self._emit(Cause.MASS_KEY_UPDATE)

    def on_isolation_probe(self, msg: IsolationProbe) -> None:
        self.env.send_probe(self.id, msg.sender, IsolationReply(self.id, msg.epoch))

    def on_isolation_reply(self, msg: IsolationReply) -> None:
        if msg.sender in self.key_changed_this_epoch:
            return  # a fresh key update could itself be the impersonation
        self.isolation_ok[msg.epoch] = True

    def _next_probe(self, epoch: int, sub: float) -> None:
        if self.isolation_ok.get(epoch, True) or not self.contacts:
            return
        target = sorted(self.contacts)[self.rng.randrange(len(self.contacts))]
        self.isolation_probes += 1
        self.env.send_probe(self.id, target, IsolationProbe(self.id, epoch))
        if self.isolation_probes < len(self.contacts):
            self.env.set_timer(self.id, ("probe", epoch), self.env.now() + sub,
                               data=(epoch, sub))

    # ------------------------------------------------------------------
    # timers and message dispatch
    # ------------------------------------------------------------------

    def on_timer(self, key, data) -> None:
        kind = key[0]
        if kind == "str":
            self._emit(Cause.MISSING_STR)
            self.disconnected = True
        elif kind == "akr":
            self._emit(Cause.AKR_TIMEOUT)
        elif kind == "asr":
            self._emit(Cause.AKR_TIMEOUT)
        elif kind == "lookup":
            self._emit(Cause.MISSING_POI)
        elif kind == "oob":
            self.gate[data] = "detected"
            self.pending_oob.pop(data, None)
            self._emit(Cause.OOB_TIMEOUT)
        elif kind == "probe":
            self._next_probe(*data)
        elif kind == "isolation-end":
            if not self.isolation_ok.pop(data, True) and self.contacts:
                self._emit(Cause.ISOLATION, epoch=data)

    _DISPATCH = {}

    def on_message(self, msg) -> None:
        handler = self._DISPATCH.get(type(msg))
        if handler is None:
            raise TypeError(f"unhandled message {type(msg).__name__}")
        handler(self, msg)


ClientState._DISPATCH = {
    StrDelivery: ClientState.on_str_delivery,
    MissedEpochsBundle: ClientState.on_missed_bundle,
    GossipStr: ClientState.on_gossip_str,
    GossipPom: ClientState.on_gossip_pom,
    KeyUpdatePush: ClientState.on_key_update_push,
    LookupResponse: ClientState.on_lookup_response,
    AkrResponse: ClientState.on_akr_response,
    AsrResponse: ClientState.on_asr_response,
    IsolationProbe: ClientState.on_isolation_probe,
    IsolationReply: ClientState.on_isolation_reply,
    OobConfirmRequest: ClientState.on_oob_confirm_request,
    OobConfirmReply: ClientState.on_oob_confirm_reply,
    AppMessage: lambda self, msg: None,
}
