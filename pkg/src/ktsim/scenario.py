"""Scenario configs: what to simulate, under which adversary, and what to expect.

Configs are human-editable TOML (flat keys plus nested tables) or the exact
same structure as JSON; both load into the same Scenario object and are
validated against a published JSON schema plus cross-field checks (the clock
invariants are checked against the actual generated topology before a run).

A scenario may declare expected outcomes (fixed values or named closed-form
predictions with a tolerance); the runner compares measured results against
them and the command line reports predictions-met versus violated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

import jsonschema

from .client import Defense, MonitorPolicy
from .server import AdversaryKind, AdversaryStrategy, AttackScope
from .simnet import ChurnModel, ClockConfig, ConfigInvalid


@dataclass(frozen=True)
class TopologySpec:
    kind: str = "ring"           # ring | star | gnp | complete | explicit
    n: int = 10
    p: float = 0.2
    edges: tuple = ()
    clients: tuple = ()          # extra (possibly isolated) clients, explicit kind
    add_edges: tuple = ()        # ((epoch, a, b), ...)


@dataclass(frozen=True)
class UpdatesSpec:
    per_epoch_fraction: float = 0.0
    scripted: tuple = ()         # ((epoch, client_id), ...)


@dataclass(frozen=True)
class PreventionSpec:
    enabled: bool = False
    oob_pairs: tuple = ()        # ((a, b), ...); empty means every edge
    drop_oob: bool = False
    app_sends: tuple = ()        # ((epoch, offset_ms, src, dst), ...)


@dataclass(frozen=True)
class AccountingSpec:
    """Constants behind the traffic/memory accounting report.

    The anonymous-retrieval cost is an empirical constant (a measured Tor
    round trip), not a formula. The per-epoch extra term for the combined
    anonymous-auditing defense is likewise carried as a constant.
    """

    N_total: int = 2 ** 32
    n_updates_per_epoch: int = 2 ** 21
    contacts: int = 100
    akr_bytes: int = 32768
    str_wire_bytes: int = 64
    str_stored_bytes: int = 104
    hash_bytes: int = 32
    sig_bytes: int = 64
    ktaca_epoch_extra_bytes: int = 1216
    epochs_per_month: int = 30
    new_contacts_per_month: int = 5
    key_updates_per_month: int = 1
    oob_identity_bytes: int = 16
    oob_mac_key_bytes: int = 32


@dataclass(frozen=True)
class Expectation:
    metric: str                      # e.g. "detection_rate", "first_epoch_detection_rate"
    tol: float
    value: Optional[float] = None    # fixed expectation
    formula: Optional[str] = None    # name understood by predict.evaluate
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int = 1
    defense: Defense = Defense.KTCA
    epochs: int = 3
    trials: int = 1
    detection_scope: str = "any"     # any | victim | explicit client id
    topology: TopologySpec = TopologySpec()
    clock: ClockConfig = ClockConfig()
    churn: ChurnModel = ChurnModel()
    adversary: AdversaryStrategy = AdversaryStrategy()
    monitor: MonitorPolicy = field(default_factory=MonitorPolicy)
    updates: UpdatesSpec = UpdatesSpec()
    prevention: PreventionSpec = PreventionSpec()
    accounting: AccountingSpec = AccountingSpec()
    expect: tuple[Expectation, ...] = ()
    drop_anonymous: bool = False
    isolate_target: bool = False


SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "seed": {"type": "integer"},
        "defense": {"enum": ["ktca", "akm", "ktaca"]},
        "epochs": {"type": "integer", "minimum": 1},
        "trials": {"type": "integer", "minimum": 1},
        "detection_scope": {"type": "string"},
        "drop_anonymous": {"type": "boolean"},
        "isolate_target": {"type": "boolean"},
        "topology": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["ring", "star", "gnp", "complete", "explicit"]},
                "n": {"type": "integer", "minimum": 1},
                "p": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "edges": {"type": "array", "items": {
                    "type": "array", "items": {"type": "string"},
                    "minItems": 2, "maxItems": 2}},
                "clients": {"type": "array", "items": {"type": "string"}},
                "add_edges": {"type": "array", "items": {
                    "type": "object", "required": ["epoch", "a", "b"],
                    "additionalProperties": False,
                    "properties": {"epoch": {"type": "integer"},
                                   "a": {"type": "string"}, "b": {"type": "string"}}}},
            },
        },
        "clock": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epoch_len_ms": {"type": "number", "exclusiveMinimum": 0},
                "delta_ms": {"type": "number", "exclusiveMinimum": 0},
                "big_delta_ms": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "churn": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "offline_prob": {"type": "number", "minimum": 0, "maximum": 1},
                "min_online_fraction": {"type": "number", "minimum": 0.5, "maximum": 1},
                "schedule": {"type": "object",
                             "additionalProperties": {"type": "array",
                                                      "items": {"type": "integer"}}},
            },
        },
        "adversary": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": [k.value for k in AdversaryKind]},
                "target": {"type": "string"},
                "peer": {"type": "string"},
                "scope": {"enum": [s.value for s in AttackScope]},
                "equivocate": {"type": "boolean"},
                "attack_epoch": {"type": "integer", "minimum": 0},
                "coverage_f": {"type": "integer", "minimum": 0},
                "coverage_r": {"type": "integer", "minimum": 0},
                "partition_cut": {"type": "array", "items": {
                    "type": "array", "items": {"type": "string"},
                    "minItems": 2, "maxItems": 2}},
                "short_lived_restore_after_ms": {"type": "number", "minimum": 0},
                "stealthy_update_rate": {"type": "number", "exclusiveMinimum": 0},
                "withhold_str_from": {"type": "array", "items": {"type": "string"}},
                "drop_lookups_for": {"type": "array", "items": {"type": "string"}},
            },
        },
        "monitor": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "m": {"type": "integer", "minimum": 1},
                "mass_update_threshold": {"type": "number",
                                          "exclusiveMinimum": 0, "maximum": 1},
                "mass_update_window_epochs": {"type": "integer", "minimum": 1},
                "mass_update_min_count": {"type": "integer", "minimum": 1},
                "mass_update_enabled": {"type": "boolean"},
                "isolation_enabled": {"type": "boolean"},
            },
        },
        "updates": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "per_epoch_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "scripted": {"type": "array", "items": {
                    "type": "object", "required": ["epoch", "client"],
                    "additionalProperties": False,
                    "properties": {"epoch": {"type": "integer"},
                                   "client": {"type": "string"}}}},
            },
        },
        "prevention": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "oob_pairs": {"type": "array", "items": {
                    "type": "array", "items": {"type": "string"},
                    "minItems": 2, "maxItems": 2}},
                "drop_oob": {"type": "boolean"},
                "app_sends": {"type": "array", "items": {
                    "type": "object", "required": ["epoch", "offset_ms", "src", "dst"],
                    "additionalProperties": False,
                    "properties": {"epoch": {"type": "integer"},
                                   "offset_ms": {"type": "number"},
                                   "src": {"type": "string"},
                                   "dst": {"type": "string"}}}},
            },
        },
        "accounting": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                k: {"type": "integer", "minimum": 0}
                for k in (
                    "N_total", "n_updates_per_epoch", "contacts", "akr_bytes",
                    "str_wire_bytes", "str_stored_bytes", "hash_bytes", "sig_bytes",
                    "ktaca_epoch_extra_bytes", "epochs_per_month",
                    "new_contacts_per_month", "key_updates_per_month",
                    "oob_identity_bytes", "oob_mac_key_bytes",
                )
            },
        },
        "expect": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["metric", "tol"],
                "additionalProperties": False,
                "properties": {
                    "metric": {"type": "string"},
                    "tol": {"type": "number", "minimum": 0},
                    "value": {"type": "number"},
                    "formula": {"type": "string"},
                    "params": {"type": "object"},
                },
            },
        },
    },
}


def _from_dict(raw: dict) -> Scenario:
    topo = raw.get("topology", {})
    adv = raw.get("adversary", {})
    churn = raw.get("churn", {})
    try:
        strategy = AdversaryStrategy(
            kind=AdversaryKind(adv.get("kind", "honest")),
            target=adv.get("target"),
            peer=adv.get("peer"),
            scope=AttackScope(adv.get("scope", "existing_connections")),
            equivocate=adv.get("equivocate", False),
            attack_epoch=adv.get("attack_epoch", 1),
            partition_cut=frozenset(
                frozenset(pair) for pair in adv.get("partition_cut", ())
            ),
            short_lived_restore_after_ms=adv.get("short_lived_restore_after_ms"),
            stealthy_update_rate=adv.get("stealthy_update_rate"),
            coverage_f=adv.get("coverage_f"),
            coverage_r=adv.get("coverage_r", 0),
            withhold_str_from=frozenset(adv.get("withhold_str_from", ())),
            drop_lookups_for=frozenset(adv.get("drop_lookups_for", ())),
        )
    except ValueError as e:
        raise ConfigInvalid(f"adversary: {e}") from e
    return Scenario(
        name=raw["name"],
        seed=raw.get("seed", 1),
        defense=Defense(raw.get("defense", "ktca")),
        epochs=raw.get("epochs", 3),
        trials=raw.get("trials", 1),
        detection_scope=raw.get("detection_scope", "any"),
        drop_anonymous=raw.get("drop_anonymous", False),
        isolate_target=raw.get("isolate_target", False),
        topology=TopologySpec(
            kind=topo.get("kind", "ring"),
            n=topo.get("n", 10),
            p=topo.get("p", 0.2),
            edges=tuple(tuple(e) for e in topo.get("edges", ())),
            clients=tuple(topo.get("clients", ())),
            add_edges=tuple(
                (d["epoch"], d["a"], d["b"]) for d in topo.get("add_edges", ())
            ),
        ),
        clock=ClockConfig(**raw.get("clock", {})),
        churn=ChurnModel(
            offline_prob=churn.get("offline_prob", 0.0),
            min_online_fraction=churn.get("min_online_fraction", 0.5),
            schedule={
                cid: frozenset(epochs) for cid, epochs in churn.get("schedule", {}).items()
            },
        ),
        adversary=strategy,
        monitor=MonitorPolicy(**raw.get("monitor", {})),
        updates=UpdatesSpec(
            per_epoch_fraction=raw.get("updates", {}).get("per_epoch_fraction", 0.0),
            scripted=tuple(
                (d["epoch"], d["client"])
                for d in raw.get("updates", {}).get("scripted", ())
            ),
        ),
        prevention=PreventionSpec(
            enabled=raw.get("prevention", {}).get("enabled", False),
            oob_pairs=tuple(
                tuple(p) for p in raw.get("prevention", {}).get("oob_pairs", ())
            ),
            drop_oob=raw.get("prevention", {}).get("drop_oob", False),
            app_sends=tuple(
                (d["epoch"], d["offset_ms"], d["src"], d["dst"])
                for d in raw.get("prevention", {}).get("app_sends", ())
            ),
        ),
        accounting=AccountingSpec(**raw.get("accounting", {})),
        expect=tuple(
            Expectation(
                metric=d["metric"],
                tol=d["tol"],
                value=d.get("value"),
                formula=d.get("formula"),
                params=d.get("params", {}),
            )
            for d in raw.get("expect", ())
        ),
    )


def parse(raw: dict, overrides: Optional[dict] = None) -> Scenario:
    """Validate a raw config dict against the schema and build a Scenario."""
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigInvalid(f"{path}: {e.message}") from e
    return _from_dict(raw)


def load(path: str | Path, overrides: Optional[dict] = None) -> Scenario:
    p = Path(path)
    data = p.read_bytes()
    if p.suffix == ".json":
        raw = json.loads(data)
    else:
        raw = tomllib.loads(data.decode("utf-8"))
    return parse(raw, overrides)


def bundled_names() -> list[str]:
    root = resources.files("ktsim") / "scenarios"
    return sorted(f.name[: -len(".toml")] for f in root.iterdir() if f.name.endswith(".toml"))


def load_bundled(name: str, overrides: Optional[dict] = None) -> Scenario:
    root = resources.files("ktsim") / "scenarios"
    f = root / f"{name}.toml"
    if not f.is_file():
        raise ConfigInvalid(f"no bundled scenario named {name!r}; see list-scenarios")
    raw = tomllib.loads(f.read_text(encoding="utf-8"))
    return parse(raw, overrides)
