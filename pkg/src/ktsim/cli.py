"""Command-line entry point: run scenarios, evaluate predictions, account traffic.

Exit codes: 0 on success, 1 when a scenario's declared expectations are
violated, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from . import accounting, predict, runner, scenario as scenario_mod
from .metrics import metrics_json_bytes, resolve_scope, summary_text, trials_csv_bytes
from .simnet import ConfigInvalid

EXIT_OK = 0
EXIT_PREDICTIONS_VIOLATED = 1
EXIT_CONFIG_ERROR = 2


def _load_scenario(ref: str, overrides: dict):
    p = Path(ref)
    if p.suffix in (".toml", ".json") or p.exists():
        return scenario_mod.load(p, overrides)
    return scenario_mod.load_bundled(ref, overrides)


def _parse_params(text: str) -> dict:
    text = text.strip()
    if text.startswith("{"):
        return json.loads(text)
    out: dict = {}
    for token in text.replace(",", " ").split():
        k, _, v = token.partition("=")
        if not _:
            raise ValueError(f"parameter {token!r} is not key=value")
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def cmd_run(args) -> int:
    overrides = {
        "seed": args.seed,
        "trials": args.trials,
        "epochs": args.epochs,
    }
    sc = _load_scenario(args.scenario, overrides)
    metrics = runner.run(sc, workers=args.workers)
    ok = all(row["pass"] for row in metrics.expectations)
    scope = resolve_scope(sc.detection_scope, sc.adversary.target, sc.adversary.peer, ())

    text = summary_text(metrics)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_bytes(metrics_json_bytes(metrics))
        (out / "trials.csv").write_bytes(trials_csv_bytes(metrics, scope))
        (out / "summary.txt").write_text(text)
    if args.format == "json":
        sys.stdout.buffer.write(metrics_json_bytes(metrics))
    elif args.format == "csv":
        sys.stdout.buffer.write(trials_csv_bytes(metrics, scope))
    else:
        sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_PREDICTIONS_VIOLATED


def cmd_predict(args) -> int:
    params = _parse_params(args.params) if args.params else {}
    if args.formula:
        names = [args.formula]
    elif args.defense == "akm":
        names = ["akm_basic"]
    elif args.defense == "akm-general":
        names = ["akm_general_owner", "akm_general_any"]
    elif args.defense == "ktaca":
        names = ["ktaca_per_epoch"] + (["ktaca_cumulative"] if "epochs" in params else [])
    elif args.defense == "ktca":
        names = ["ktca_bound_ms"]
    else:
        print(f"predict: pass --defense or --formula (known: {predict.formula_names()})",
              file=sys.stderr)
        return EXIT_CONFIG_ERROR
    out = {}
    for name in names:
        value = predict.evaluate(name, params)
        if isinstance(value, Fraction):
            out[name] = {"exact": f"{value.numerator}/{value.denominator}", "value": float(value)}
        else:
            out[name] = {"value": float(value)}
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_account(args) -> int:
    sc = _load_scenario(args.scenario, {})
    metrics = runner.run(sc, workers=1) if not args.formulas_only else None
    report = accounting.account_traffic(
        sc.defense.value, sc.accounting, metrics, m=sc.monitor.m
    )
    text = accounting.render_report(report)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = {
            "defense": report.defense,
            "formula": {k: float(v) if isinstance(v, Fraction) else v
                        for k, v in report.formula.items()},
            "counters": {k: float(v) if isinstance(v, Fraction) else v
                         for k, v in report.counters.items()},
            "flags": list(report.flags),
        }
        (out / "accounting.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        (out / "accounting.txt").write_text(text + "\n")
    drift = {k: v for k, v in report.drift().items() if v != 0}
    if metrics is not None and drift:
        print(f"note: formula/counter drift on {sorted(drift)}", file=sys.stderr)
    return EXIT_OK


def cmd_list(_args) -> int:
    for name in scenario_mod.bundled_names():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ktsim",
        description="key-transparency fake-key-attack defenses: simulator and accounting",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario (bundled name or config path)")
    run_p.add_argument("scenario")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--trials", type=int)
    run_p.add_argument("--epochs", type=int)
    run_p.add_argument("--out", help="directory for metrics.json / trials.csv / summary.txt")
    run_p.add_argument("--format", choices=("json", "csv", "text"), default="text")
    run_p.add_argument("--workers", type=int, default=1)
    run_p.set_defaults(fn=cmd_run)

    pred_p = sub.add_parser("predict", help="evaluate a closed-form expectation")
    pred_p.add_argument("--defense", choices=("ktca", "akm", "akm-general", "ktaca"))
    pred_p.add_argument("--formula", choices=predict.formula_names())
    pred_p.add_argument("--params", help='JSON object or k=v pairs, e.g. "c=1,m=10"')
    pred_p.set_defaults(fn=cmd_predict)

    acc_p = sub.add_parser("account", help="traffic/memory accounting report")
    acc_p.add_argument("scenario")
    acc_p.add_argument("--out")
    acc_p.add_argument("--formulas-only", action="store_true",
                       help="skip the simulation; print the formula column only")
    acc_p.set_defaults(fn=cmd_account)

    list_p = sub.add_parser("list-scenarios", help="list bundled scenarios")
    list_p.set_defaults(fn=cmd_list)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigInvalid, FileNotFoundError, ValueError, predict.Unsupported) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
