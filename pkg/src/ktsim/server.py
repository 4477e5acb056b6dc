"""The key-server role: honest service and the pluggable adversary.

The server registers keys, commits one tree per epoch, answers identified
lookups (key + proof of inclusion against the requester's current signed
tree root) and anonymous batches (key requests and tree-root requests whose
senders it cannot see).

The adversary is the same state machine with a strategy attached. Fake keys
are handed out per audience; with equivocation enabled the server maintains
one forked, internally linear chain of signed tree roots per audience so
that every victim still sees a consistent history. Without equivocation the
fake bindings go into the single public tree, where the key owner's own
monitoring exposes them.

Anonymous batches are the only place the adversary must gamble: it sees
request contents and counts but never sender identities, so it distributes
real and fake answers (or branch tree roots) over a uniformly random choice
of request positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from . import artifacts, crypto, tree
from .artifacts import KeyResponse, SignedTreeRoot, generate_str, make_key_response
from .tree import MerkleTree, PublicKeyRecord, build_tree_cached, prove_inclusion

REGISTRATION_EPOCH = -1  # initial uploads predate the genesis tree

MAIN_BRANCH = "main"


class UnknownSubject(KeyError):
    pass


class RateLimited(ValueError):
    """Second key change for one client within one epoch."""


class AdversaryKind(str, Enum):
    HONEST = "honest"
    PAIR_MITM = "pair_mitm"
    CLIENT_MITM = "client_mitm"
    PAIR_IMPERSONATION = "pair_impersonation"
    CLIENT_IMPERSONATION = "client_impersonation"
    PARTITION_MITM = "partition_mitm"


class AttackScope(str, Enum):
    NEW_CONNECTIONS = "new_connections"
    EXISTING_CONNECTIONS = "existing_connections"
    BOTH = "both"


@dataclass(frozen=True)
class AdversaryStrategy:
    kind: AdversaryKind = AdversaryKind.HONEST
    target: Optional[str] = None
    peer: Optional[str] = None            # second victim for pair attacks
    scope: AttackScope = AttackScope.EXISTING_CONNECTIONS
    equivocate: bool = False
    attack_epoch: int = 1
    partition_cut: frozenset[frozenset[str]] = frozenset()
    short_lived_restore_after_ms: Optional[float] = None
    stealthy_update_rate: Optional[float] = None   # fake updates per epoch
    coverage_f: Optional[int] = None      # contacts handed the fake key
    coverage_r: int = 0                   # contacts handed the real key
    withhold_str_from: frozenset[str] = frozenset()
    drop_lookups_for: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.kind in (AdversaryKind.PAIR_MITM, AdversaryKind.PAIR_IMPERSONATION):
            if not self.target or not self.peer or self.target == self.peer:
                raise ValueError("pair attacks need two distinct targets")
        elif self.kind is AdversaryKind.PARTITION_MITM:
            if not self.partition_cut:
                raise ValueError("partition attack needs a cut set")
        elif self.kind is not AdversaryKind.HONEST and not self.target:
            raise ValueError("client attacks need a target")

    @property
    def is_honest(self) -> bool:
        return self.kind is AdversaryKind.HONEST


@dataclass
class Branch:
    """One audience's view of the log: substitutions plus a linear STR chain."""

    name: str
    substitutions: dict[str, bytes] = field(default_factory=dict)
    audience: Optional[frozenset[str]] = None  # None: everyone not claimed elsewhere
    chain: list[SignedTreeRoot] = field(default_factory=list)
    trees: dict[int, MerkleTree] = field(default_factory=dict, repr=False)
    fork_epoch: int = 0  # substitutions apply to trees from this epoch on


class ServerState:
    """Directory, per-branch STR chains, and adversary bookkeeping."""

    def __init__(
        self,
        server_key: crypto.KeyPair,
        strategy: AdversaryStrategy,
        rng,
        tree_seed_for_epoch,
        maintain_log: bool = True,
        monitor_m: int = 10,
    ):
        self.server_key = server_key
        self.strategy = strategy
        self.rng = rng
        self.tree_seed_for_epoch = tree_seed_for_epoch
        self.maintain_log = maintain_log
        # the monitoring horizon is a public protocol parameter; the
        # adversary uses it to predict who is asking anonymously each epoch
        self.monitor_m = monitor_m

        self.directory: dict[str, PublicKeyRecord] = {}
        self.key_history: dict[str, list[PublicKeyRecord]] = {}
        self.contacts: dict[str, set[str]] = {}
        self.online: frozenset[str] = frozenset()

        self.epoch = -1
        self.updated_this_epoch: set[str] = set()
        self.branches: list[Branch] = [Branch(MAIN_BRANCH)]
        self.snapshots: dict[int, tuple] = {}
        self.attack_active = False

        # fabricated key material and who holds what, per attacked subject
        self.fake_keys: dict[str, bytes] = {}
        self.fake_holders: dict[str, set[str]] = {}
        self.real_holders: dict[str, set[str]] = {}
        self.fake_response: dict[str, KeyResponse] = {}
        self.attacked_subjects: set[str] = set()
        self.fake_handed: dict[tuple[str, str], int] = {}  # (subject, holder) -> epoch

    # -- registration and directory -------------------------------------

    @property
    def verifying_key(self) -> bytes:
        return self.server_key.verifying_key

    def register(self, client_id: str, public_key: bytes, epoch: int) -> PublicKeyRecord:
        """Stage a key for inclusion in the next epoch's tree."""
        if epoch > REGISTRATION_EPOCH:
            if client_id in self.updated_this_epoch:
                raise RateLimited(client_id)
            self.updated_this_epoch.add(client_id)
        rec = PublicKeyRecord(client_id, bytes(public_key), epoch)
        self.directory[client_id] = rec
        self.key_history.setdefault(client_id, []).append(rec)
        return rec

    def record_for_tree(self, client_id: str, epoch: int) -> Optional[PublicKeyRecord]:
        """Latest record uploaded before the given epoch started."""
        hist = self.key_history.get(client_id)
        if not hist:
            return None
        for rec in reversed(hist):
            if rec.upload_epoch <= epoch - 1:
                return rec
        return None

    # -- epoch commitment ------------------------------------------------

    def epoch_commit(self, epoch: int, timestamp: int) -> dict[str, SignedTreeRoot]:
        """Advance one epoch; returns the newly signed root per branch."""
        if epoch != self.epoch + 1:
            raise artifacts.EpochGap(f"commit for epoch {epoch} after {self.epoch}")
        self.epoch = epoch
        self.updated_this_epoch.clear()
        if self.strategy.attack_epoch == epoch and not self.strategy.is_honest:
            self._activate_attack()
            # substituted bindings exist only from the fork on; trees for
            # earlier epochs must rebuild exactly as they were committed
            for b in self.branches:
                if b.substitutions:
                    b.fork_epoch = epoch
                    b.trees.clear()

        if not self.maintain_log:
            return {}

        snapshot = tuple(
            sorted(
                (rec.client_id, rec.public_key, rec.upload_epoch)
                for rec in (self.record_for_tree(cid, epoch) for cid in self.directory)
                if rec is not None
            )
        )
        self.snapshots[epoch] = snapshot

        out: dict[str, SignedTreeRoot] = {}
        for branch in self.branches:
            tr = self._branch_tree(branch, epoch)
            prev = branch.chain[-1] if branch.chain else None
            str_ = generate_str(tr, prev, self.server_key, timestamp)
            branch.chain.append(str_)
            out[branch.name] = str_
        return out

    def _branch_tree(self, branch: Branch, epoch: int) -> MerkleTree:
        tree_ = branch.trees.get(epoch)
        if tree_ is not None:
            return tree_
        snapshot = self.snapshots[epoch]
        if branch.substitutions and epoch >= branch.fork_epoch:
            snapshot = tuple(
                (cid, branch.substitutions.get(cid, key), ue) for cid, key, ue in snapshot
            )
        tree_ = build_tree_cached(snapshot, self.tree_seed_for_epoch(epoch), epoch)
        branch.trees[epoch] = tree_
        while len(branch.trees) > 24:  # recent epochs only; old ones rebuild on demand
            del branch.trees[min(branch.trees)]
        return tree_

    def branch_of(self, client_id: str) -> Branch:
        for b in self.branches:
            if b.audience is not None and client_id in b.audience:
                return b
        return self.main_branch

    @property
    def main_branch(self) -> Branch:
        return self.branches[0]

    def current_str(self, client_id: str) -> Optional[SignedTreeRoot]:
        chain = self.branch_of(client_id).chain
        return chain[-1] if chain else None

    def str_for_epoch(self, client_id: str, epoch: int) -> Optional[SignedTreeRoot]:
        branch = self.branch_of(client_id)
        for s in reversed(branch.chain):
            if s.epoch == epoch:
                return s
        # before the branch forked, its history is the main chain
        for s in reversed(self.main_branch.chain):
            if s.epoch == epoch:
                return s
        return None

    def own_key_poi(self, client_id: str, epoch: int):
        """Proof for whatever the client's branch tree binds for them."""
        branch = self.branch_of(client_id)
        tr = self._branch_tree(branch, epoch)
        try:
            return prove_inclusion(tr, client_id)
        except tree.NotRegistered:
            return None

    # -- attack wiring -----------------------------------------------------

    def fake_key_for(self, subject: str) -> bytes:
        key = self.fake_keys.get(subject)
        if key is None:
            key = crypto.derive("fake-key", subject)
            self.fake_keys[subject] = key
        return key

    def _activate_attack(self) -> None:
        s = self.strategy
        self.attack_active = True
        if s.short_lived_restore_after_ms is not None:
            # the fake key lives only in two update pushes within one epoch;
            # no branch, no directory change, nothing in any tree
            self.attacked_subjects.add(s.target)
            return
        if s.kind is AdversaryKind.PARTITION_MITM:
            self._activate_partition()
            return
        if s.scope is AttackScope.NEW_CONNECTIONS:
            # victims accrue only as new edges form; note_new_edge fills in
            for subject in filter(None, (s.target, s.peer)):
                self.attacked_subjects.add(subject)
            return
        if s.kind is AdversaryKind.PAIR_MITM:
            a, b = s.target, s.peer
            self._start_distribution(subject=b, holders={a})
            self._start_distribution(subject=a, holders={b})
            if s.equivocate:
                self.branches = [
                    Branch(MAIN_BRANCH, {}, None, list(self.main_branch.chain)),
                    Branch("view:" + a, {b: self.fake_key_for(b)}, frozenset({a}),
                           list(self.main_branch.chain)),
                    Branch("view:" + b, {a: self.fake_key_for(a)}, frozenset({b}),
                           list(self.main_branch.chain)),
                ]
            else:
                self.main_branch.substitutions.update(
                    {a: self.fake_key_for(a), b: self.fake_key_for(b)}
                )
        elif s.kind is AdversaryKind.PAIR_IMPERSONATION:
            # impersonate target to peer: peer holds a fake key for target
            self._start_distribution(subject=s.target, holders={s.peer})
            if s.equivocate:
                self.branches = [
                    Branch(MAIN_BRANCH, {}, None, list(self.main_branch.chain)),
                    Branch("view:" + s.peer, {s.target: self.fake_key_for(s.target)},
                           frozenset({s.peer}), list(self.main_branch.chain)),
                ]
            else:
                self.main_branch.substitutions[s.target] = self.fake_key_for(s.target)
        elif s.kind is AdversaryKind.CLIENT_MITM:
            victim = s.target
            contacts = self._attacked_contacts(victim)
            self._start_distribution(subject=victim, holders=contacts)
            victim_subs = {c: self.fake_key_for(c) for c in contacts}
            for c in contacts:
                self._start_distribution(subject=c, holders={victim})
            if s.equivocate:
                self.branches = [
                    Branch(MAIN_BRANCH, {victim: self.fake_key_for(victim)}, None,
                           list(self.main_branch.chain)),
                    Branch("view:" + victim, victim_subs, frozenset({victim}),
                           list(self.main_branch.chain)),
                ]
            else:
                self.main_branch.substitutions[victim] = self.fake_key_for(victim)
                self.main_branch.substitutions.update(victim_subs)
        elif s.kind is AdversaryKind.CLIENT_IMPERSONATION:
            # impersonate target to its contacts: contacts hold the fake key
            victim = s.target
            contacts = self._attacked_contacts(victim)
            self._start_distribution(subject=victim, holders=contacts)
            if s.equivocate:
                self.branches = [
                    Branch(MAIN_BRANCH, {victim: self.fake_key_for(victim)}, None,
                           list(self.main_branch.chain)),
                    Branch("view:" + victim, {}, frozenset({victim}),
                           list(self.main_branch.chain)),
                ]
            else:
                self.main_branch.substitutions[victim] = self.fake_key_for(victim)

    def _activate_partition(self) -> None:
        """Cut the graph and MITM every cross-component connection.

        Each connected component of the contact graph minus the cut becomes
        one audience; its tree substitutes fake keys for everyone outside
        the component, so every view stays internally consistent while all
        cross-cut conversations are intercepted.
        """
        comps = self._components_without_cut()
        main_chain = self.main_branch.chain
        branches = []
        for i, comp in enumerate(comps):
            subs = {
                cid: self.fake_key_for(cid)
                for cid in self.directory
                if cid not in comp
            }
            branches.append(
                Branch(
                    MAIN_BRANCH if i == 0 else f"part:{min(comp)}",
                    subs,
                    None if i == 0 else frozenset(comp),
                    main_chain if i == 0 else list(main_chain),
                )
            )
        self.branches = branches
        all_ids = set(self.directory)
        for comp in comps:
            for cid in comp:
                self.attacked_subjects.add(cid)
                self.fake_holders.setdefault(cid, set()).update(all_ids - comp)

    def _components_without_cut(self) -> list[set[str]]:
        cut = self.strategy.partition_cut
        seen: set[str] = set()
        comps: list[set[str]] = []
        for start in sorted(self.contacts):
            if start in seen:
                continue
            comp = {start}
            frontier = [start]
            while frontier:
                u = frontier.pop()
                for v in self.contacts.get(u, ()):
                    if v not in comp and frozenset((u, v)) not in cut:
                        comp.add(v)
                        frontier.append(v)
            seen |= comp
            comps.append(comp)
        return comps

    def _attacked_contacts(self, victim: str) -> set[str]:
        contacts = set(self.contacts.get(victim, ()))
        f = self.strategy.coverage_f
        if f is not None:
            ordered = sorted(contacts)
            chosen = set(ordered[:f])
            self.real_holders[victim] = set(ordered[f : f + self.strategy.coverage_r])
            return chosen
        return contacts

    def _start_distribution(self, subject: str, holders: set[str]) -> None:
        self.attacked_subjects.add(subject)
        self.fake_holders.setdefault(subject, set()).update(holders)

    def serves_fake(self, requester: str, subject: str) -> bool:
        return self.attack_active and requester in self.fake_holders.get(subject, ())

    def fake_binding(self, subject: str) -> tuple[bytes, int]:
        """The fabricated key plus the upload epoch it is claimed under.

        Existing-connection attacks masquerade as a key update (uploaded at
        the attack epoch); new-connection attacks pretend the fake was the
        key all along.
        """
        rec = self.directory[subject]
        key = self.fake_key_for(subject)
        if self.strategy.scope is AttackScope.NEW_CONNECTIONS:
            return key, rec.upload_epoch
        return key, max(rec.upload_epoch, self.strategy.attack_epoch)

    def note_new_edge(self, a: str, b: str) -> None:
        """A new contact pair formed; new-connection attacks claim it here."""
        if not self.attack_active or self.strategy.scope is AttackScope.EXISTING_CONNECTIONS:
            return
        for requester, subject in ((a, b), (b, a)):
            if subject in self.attacked_subjects and requester != subject:
                self.fake_holders.setdefault(subject, set()).add(requester)
                if self.strategy.equivocate:
                    self._ensure_view_branch(requester, {subject: self.fake_key_for(subject)})

    def _ensure_view_branch(self, cid: str, subs: dict[str, bytes]) -> None:
        # substitutions added mid-epoch take effect at the next commit; the
        # current epoch's tree is already built and cached on the branch
        for branch in self.branches[1:]:
            if branch.audience is not None and cid in branch.audience:
                branch.substitutions.update(subs)
                return
        src = self.branch_of(cid)
        self.branches.append(
            Branch("view:" + cid, dict(subs), frozenset({cid}),
                   list(src.chain), dict(src.trees), fork_epoch=self.epoch + 1)
        )

    # -- lookups -----------------------------------------------------------

    def lookup_key(self, requester: str, subject: str, epoch: int) -> Optional[KeyResponse]:
        """Identified key lookup; None models a deliberately dropped response."""
        if subject not in self.directory:
            raise UnknownSubject(subject)
        if self.attack_active and subject in self.strategy.drop_lookups_for:
            return None
        real = self.directory[subject]
        if self.serves_fake(requester, subject):
            key, upload_epoch = self.fake_binding(subject)
            self.fake_handed[(subject, requester)] = epoch
        else:
            key, upload_epoch = real.public_key, real.upload_epoch
        str_, poi = self._attachments(requester, subject, key, epoch)
        return make_key_response(
            self.server_key, subject, key, upload_epoch, epoch, str_, poi
        )

    def _attachments(self, requester: str, subject: str, key: bytes, epoch: int):
        """STR and proof for the requester's branch, when the log is live.

        A proof is attached only when the branch tree actually binds the key
        being served; a key uploaded this epoch is promised for the next tree
        and travels bare.
        """
        if not self.maintain_log:
            return None, None
        branch = self.branch_of(requester)
        if not branch.chain:
            return None, None
        str_ = branch.chain[-1]
        tr = self._branch_tree(branch, str_.epoch)
        rec = tr.records.get(subject)
        if rec is not None and rec.public_key == key:
            return str_, prove_inclusion(tr, subject)
        return str_, None

    def push_update_response(
        self, recipient: str, subject: str, key: bytes, upload_epoch: int, epoch: int
    ) -> KeyResponse:
        """Signed key-update notification as delivered to one contact."""
        str_, poi = self._attachments(recipient, subject, key, epoch)
        return make_key_response(self.server_key, subject, key, upload_epoch, epoch, str_, poi)

    def update_push_for(self, recipient: str, subject: str, epoch: int) -> KeyResponse:
        """The update push one contact receives; the adversary substitutes."""
        rec = self.directory[subject]
        if self.serves_fake(recipient, subject):
            key, ue = self.fake_binding(subject)
            self.fake_handed[(subject, recipient)] = epoch
        else:
            key, ue = rec.public_key, rec.upload_epoch
        return self.push_update_response(recipient, subject, key, ue, epoch)

    # -- anonymous batches ---------------------------------------------------

    def expected_fake_monitors(self, subject: str, epoch: int) -> int:
        """Fake-key holders who are online and inside their monitoring window.

        A contact handed a fake binding in epoch e monitors it anonymously
        from e+1 through e+m; the adversary knows both facts (it delivered
        the fake, and the horizon is a protocol constant).
        """
        n = 0
        for (subj, holder), handed in self.fake_handed.items():
            if subj != subject or holder not in self.online:
                continue
            if handed < epoch <= handed + self.monitor_m:
                n += 1
        return n

    def decide_anonymous_response(self, subject: str, k: int, epoch: int) -> list[KeyResponse]:
        """Answer k indistinguishable key requests for one subject.

        The honest server returns the real key to all. Under attack the
        adversary knows how many of this epoch's requesters must be holding
        the fake key and picks, uniformly at random, which positions receive
        it; everyone else (the owner included, if it guesses right) gets the
        real key. Sender identities are never available here.
        """
        if subject not in self.directory:
            raise UnknownSubject(subject)
        real = self.directory[subject]
        real_resp = make_key_response(
            self.server_key, subject, real.public_key, real.upload_epoch, epoch
        )
        if not self.attack_active or not self.fake_holders.get(subject):
            return [real_resp] * k

        n_fake = min(self.expected_fake_monitors(subject, epoch), k)
        if n_fake == 0:
            return [real_resp] * k
        fake_resp = self.fake_response.get(subject)
        if fake_resp is None or fake_resp.epoch != epoch:
            fake_key, fake_ue = self.fake_binding(subject)
            fake_resp = make_key_response(
                self.server_key, subject, fake_key, fake_ue, epoch
            )
            self.fake_response[subject] = fake_resp
        out = [real_resp] * k
        for pos in self.rng.sample(range(k), n_fake):
            out[pos] = fake_resp
        return out

    def serve_asr(self, k: int, epoch: int) -> list[SignedTreeRoot]:
        """Answer k anonymous tree-root requests for the current epoch.

        With forked chains the adversary must guess which anonymous requests
        belong to each branch audience; it assigns branch roots to uniformly
        chosen positions and the main root to the rest.
        """
        main = self.main_branch.chain[-1]
        out = [main] * k
        if len(self.branches) == 1:
            return out
        positions = list(range(k))
        for branch in self.branches[1:]:
            audience_online = sum(1 for c in branch.audience or () if c in self.online)
            take = min(audience_online, len(positions))
            if take == 0:
                continue
            chosen = self.rng.sample(positions, take)
            for pos in chosen:
                out[pos] = branch.chain[-1]
                positions.remove(pos)
        return out

    # -- misc adversary behaviour ---------------------------------------------

    def cuts_edge(self, a: str, b: str) -> bool:
        if not self.attack_active or not self.strategy.partition_cut:
            return False
        return frozenset((a, b)) in self.strategy.partition_cut

    def withholds_str(self, client_id: str) -> bool:
        return self.attack_active and client_id in self.strategy.withhold_str_from

    def short_lived_pair(self, subject: str, epoch: int) -> tuple[KeyResponse, KeyResponse]:
        """The fake update and the restoring update of a short-lived attack.

        Both are proper-looking updates uploaded in this epoch; the restore
        reuses the original key, which is exactly what the key-update
        history check catches.
        """
        real = self.directory[subject]
        fake = make_key_response(
            self.server_key, subject, self.fake_key_for(subject), epoch, epoch
        )
        restore = make_key_response(
            self.server_key, subject, real.public_key, epoch, epoch
        )
        return fake, restore
