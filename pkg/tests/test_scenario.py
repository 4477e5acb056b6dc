"""Config loading: schema validation, TOML/JSON parity, bundled registry."""

import json

import pytest

from ktsim import runner
from ktsim.client import Defense
from ktsim.scenario import ConfigInvalid, bundled_names, load, load_bundled, parse
from ktsim.server import AdversaryKind

MINIMAL = {"name": "t", "topology": {"kind": "ring", "n": 4}}


def test_minimal_config_fills_defaults():
    sc = parse(MINIMAL)
    assert sc.defense is Defense.KTCA
    assert sc.adversary.kind is AdversaryKind.HONEST
    assert sc.trials == 1 and sc.epochs == 3


def test_unknown_field_named_in_error():
    with pytest.raises(ConfigInvalid) as e:
        parse({**MINIMAL, "bogus": 1})
    assert "bogus" in str(e.value)


def test_bad_value_named_with_path():
    with pytest.raises(ConfigInvalid) as e:
        parse({**MINIMAL, "churn": {"offline_prob": 2.0}})
    assert "churn.offline_prob" in str(e.value)


def test_pair_attack_needs_two_targets():
    with pytest.raises(ConfigInvalid):
        parse({**MINIMAL, "adversary": {"kind": "pair_mitm", "target": "c0000"}})


def test_toml_and_json_forms_agree(tmp_path):
    toml_text = """
name = "same"
seed = 5
defense = "akm"

[topology]
kind = "star"
n = 4

[adversary]
kind = "client_impersonation"
target = "c0000"
"""
    json_doc = {
        "name": "same",
        "seed": 5,
        "defense": "akm",
        "topology": {"kind": "star", "n": 4},
        "adversary": {"kind": "client_impersonation", "target": "c0000"},
    }
    t = tmp_path / "s.toml"
    t.write_text(toml_text)
    j = tmp_path / "s.json"
    j.write_text(json.dumps(json_doc))
    assert load(t) == load(j)


def test_overrides_win():
    sc = parse(MINIMAL, overrides={"seed": 99, "trials": 7, "epochs": None})
    assert sc.seed == 99 and sc.trials == 7 and sc.epochs == 3


def test_bundled_registry_loads_everything():
    names = bundled_names()
    assert "akm_c1_m10" in names and "ktca_ring10" in names
    for name in names:
        sc = load_bundled(name)
        runner.validate(sc)


def test_unknown_bundled_name():
    with pytest.raises(ConfigInvalid):
        load_bundled("no_such_scenario")


def test_clock_invariant_checked_against_real_topology():
    bad = {
        "name": "t",
        "topology": {"kind": "ring", "n": 30},  # diameter 15
        "clock": {"epoch_len_ms": 20.0, "delta_ms": 1.0, "big_delta_ms": 2.0},
    }
    with pytest.raises(ConfigInvalid) as e:
        runner.validate(parse(bad))
    assert "diam" in str(e.value)


def test_unknown_clients_rejected():
    with pytest.raises(ConfigInvalid):
        runner.validate(parse({
            **MINIMAL, "adversary": {"kind": "client_mitm", "target": "ghost"},
        }))
    with pytest.raises(ConfigInvalid):
        runner.validate(parse({
            **MINIMAL, "updates": {"scripted": [{"epoch": 1, "client": "ghost"}]},
        }))
