"""Command-line behavior: commands, outputs, exit codes."""

import json

from ktsim import cli


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_list_scenarios(capsys):
    code, out, _ = run_cli(capsys, "list-scenarios")
    assert code == 0
    assert "akm_c1_m10" in out and "ktaca_n50" in out


def test_predict_akm(capsys):
    code, out, _ = run_cli(capsys, "predict", "--defense", "akm",
                           "--params", "c=1,m=10")
    assert code == 0
    doc = json.loads(out)
    assert doc["akm_basic"]["value"] == 0.9990234375
    assert doc["akm_basic"]["exact"] == "1023/1024"


def test_predict_formula_json_params(capsys):
    code, out, _ = run_cli(capsys, "predict", "--formula", "akm_churn_owner",
                           "--params",
                           '{"contacts_online": [2,2,2,2,2], '
                           '"owner_offline": [false,true,true,false,false]}')
    assert code == 0
    assert json.loads(out)["akm_churn_owner"]["exact"] == "26/27"


def test_predict_bad_params_exit_2(capsys):
    code, _, err = run_cli(capsys, "predict", "--formula", "akm_basic",
                           "--params", "c=1")
    assert code == 2 and "error" in err


def test_run_writes_deterministic_outputs(tmp_path, capsys):
    cfg = tmp_path / "mini.toml"
    cfg.write_text(
        """
name = "mini"
seed = 4
defense = "ktca"
epochs = 3
trials = 3
detection_scope = "any"

[topology]
kind = "ring"
n = 6

[adversary]
kind = "client_mitm"
target = "c0001"
equivocate = true

[[expect]]
metric = "detection_rate"
value = 1.0
tol = 0.0
"""
    )
    out1 = tmp_path / "o1"
    out2 = tmp_path / "o2"
    code, text, _ = run_cli(capsys, "run", str(cfg), "--out", str(out1))
    assert code == 0
    assert "detection_rate=1.000000" in text
    run_cli(capsys, "run", str(cfg), "--out", str(out2))
    for name in ("metrics.json", "trials.csv", "summary.txt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    doc = json.loads((out1 / "metrics.json").read_text())
    assert doc["aggregate"]["detection_rate"] == 1.0
    assert doc["expectations"][0]["pass"] is True


def test_run_expectation_violation_exit_1(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(
        """
name = "impossible"
seed = 4
epochs = 3

[topology]
kind = "ring"
n = 6

[[expect]]
metric = "detection_rate"
value = 1.0
tol = 0.0
"""
    )
    code, text, _ = run_cli(capsys, "run", str(cfg))
    assert code == 1
    assert "VIOLATED" in text


def test_run_config_error_exit_2(tmp_path, capsys):
    cfg = tmp_path / "broken.toml"
    cfg.write_text('name = "x"\nbogus = 3\n')
    code, _, err = run_cli(capsys, "run", str(cfg))
    assert code == 2 and "bogus" in err


def test_run_overrides(capsys):
    code, out, _ = run_cli(capsys, "run", "ktca_ring10",
                           "--trials", "2", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["aggregate"]["trials"] == 2


def test_account_formulas_only(capsys):
    code, out, _ = run_cli(capsys, "account", "accounting_ktca", "--formulas-only")
    assert code == 0
    assert "7.136" in out and "220.416" in out and "flags:" in out


def test_account_with_counters(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "account", "accounting_ktaca",
                           "--out", str(tmp_path))
    assert code == 0
    doc = json.loads((tmp_path / "accounting.json").read_text())
    assert doc["formula"]["epoch_kb"] == 33.952
    assert doc["counters"]["epoch_kb"] == 33.952
