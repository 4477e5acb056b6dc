"""Per-trial results, aggregation, and deterministic output writers.

A trial result records every detection event (who, when, why, with or
without a proof of misbehavior), message counters by class, and small
bookkeeping series. Aggregation computes detection rates with a 99%
binomial confidence interval, detection-time statistics, and per-cause
false-positive counts.

Output files contain no timestamps, hostnames, or paths: two runs of the
same scenario with the same seed must produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

from .client import CORE_CAUSES

Z99 = 2.5758293035489004  # two-sided 99% normal quantile


@dataclass
class TrialResult:
    trial: int
    epochs: int
    clients: int
    detections: list[dict] = field(default_factory=list)
    first_core: dict[str, dict] = field(default_factory=dict)
    pom_holders: list[str] = field(default_factory=list)
    pom_hold_time_ms: dict[str, float] = field(default_factory=dict)
    message_counts: dict[str, int] = field(default_factory=dict)
    physical_bytes: dict[str, int] = field(default_factory=dict)
    exchange_events: int = 0
    new_connection_events: int = 0
    app_messages: list = field(default_factory=list)
    blocked_app_sends: dict[str, int] = field(default_factory=dict)
    history_bytes: int = 0
    min_online_fraction: float = 1.0

    def scoped_first(self, scope_ids: Optional[frozenset]) -> Optional[dict]:
        """Earliest core detection by any client inside the scope."""
        best = None
        for cid, d in self.first_core.items():
            if scope_ids is not None and cid not in scope_ids:
                continue
            if best is None or (d["time_ms"], d["detector"]) < (best["time_ms"], best["detector"]):
                best = d
        return best


def wilson_ci(successes: int, n: int, z: float = Z99) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    phat = successes / n
    denom = 1 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def binomial_ci_halfwidth(p: float, n: int, z: float = Z99) -> float:
    """Half-width of the z-level CI around a predicted probability p."""
    if n == 0:
        return 1.0
    return z * math.sqrt(p * (1 - p) / n)


@dataclass
class Metrics:
    scenario_name: str
    seed: int
    defense: str
    params: dict
    trials: list[TrialResult]
    aggregate: dict = field(default_factory=dict)
    expectations: list[dict] = field(default_factory=list)

    @property
    def detection_rate(self) -> float:
        return self.aggregate.get("detection_rate", 0.0)


def resolve_scope(scope: str, target: Optional[str], peer: Optional[str],
                  all_clients: tuple[str, ...]) -> Optional[frozenset]:
    """None means any client counts as a detector for the headline rate."""
    if scope == "any":
        return None
    if scope in ("victim", "owner"):
        ids = {c for c in (target,) if c}
        return frozenset(ids) if ids else None
    if scope == "pair":
        ids = {c for c in (target, peer) if c}
        return frozenset(ids) if ids else None
    return frozenset({scope})


def aggregate(
    scenario_name: str,
    seed: int,
    defense: str,
    params: dict,
    trials: list[TrialResult],
    scope_ids: Optional[frozenset],
    attack_epoch: int,
) -> Metrics:
    trials = sorted(trials, key=lambda t: t.trial)
    n = len(trials)
    detected = 0
    first_epoch_detected = 0
    times = []
    cause_counts: dict[str, int] = {}
    heuristic_counts: dict[str, int] = {}
    msg_totals: dict[str, int] = {}
    phys_totals: dict[str, int] = {}
    exchange_total = 0
    new_conns = 0
    history_total = 0
    pom_trials = 0
    min_online = 1.0

    any_detected = 0
    for tr in trials:
        if tr.scoped_first(None) is not None:
            any_detected += 1
        hit = tr.scoped_first(scope_ids)
        if hit is not None:
            detected += 1
            times.append(hit["time_ms"])
            if hit["epoch"] == attack_epoch:
                first_epoch_detected += 1
            if hit["pom"]:
                pom_trials += 1
        for ev in tr.detections:
            bucket = cause_counts if ev["cause"] in {c.value for c in CORE_CAUSES} else heuristic_counts
            bucket[ev["cause"]] = bucket.get(ev["cause"], 0) + 1
        for k, v in tr.message_counts.items():
            msg_totals[k] = msg_totals.get(k, 0) + v
        for k, v in tr.physical_bytes.items():
            phys_totals[k] = phys_totals.get(k, 0) + v
        exchange_total += tr.exchange_events
        new_conns += tr.new_connection_events
        history_total += tr.history_bytes
        min_online = min(min_online, tr.min_online_fraction)

    rate = detected / n if n else 0.0
    lo, hi = wilson_ci(detected, n)
    agg = {
        "trials": n,
        "clients": trials[0].clients if trials else 0,
        "epochs": trials[0].epochs if trials else 0,
        "detection_rate": rate,
        "detection_rate_ci99": [lo, hi],
        "detected_trials": detected,
        "any_detection_rate": any_detected / n if n else 0.0,
        "first_epoch_detection_rate": first_epoch_detected / n if n else 0.0,
        "pom_rate": pom_trials / n if n else 0.0,
        "mean_detection_time_ms": (sum(times) / len(times)) if times else None,
        "max_detection_time_ms": max(times) if times else None,
        "core_event_counts": dict(sorted(cause_counts.items())),
        "heuristic_event_counts": dict(sorted(heuristic_counts.items())),
        "message_counts_total": dict(sorted(msg_totals.items())),
        "physical_bytes_total": dict(sorted(phys_totals.items())),
        "physical_bytes_per_client_epoch": {
            k: v / (n * trials[0].clients * trials[0].epochs)
            for k, v in sorted(phys_totals.items())
        } if trials else {},
        "exchange_events_total": exchange_total,
        "new_connection_events": new_conns,
        "history_bytes_per_client": (
            history_total // (len(trials) * trials[0].clients) if trials else 0
        ),
        "min_online_fraction": min_online,
    }
    return Metrics(
        scenario_name=scenario_name, seed=seed, defense=defense,
        params=params, trials=trials, aggregate=agg,
    )


def measured_metric(metrics: Metrics, name: str) -> float:
    """Named measurement for expectation checks."""
    agg = metrics.aggregate
    if name in agg and isinstance(agg[name], (int, float)) and agg[name] is not None:
        return float(agg[name])
    raise KeyError(f"unknown metric {name!r}")


def check_expectations(metrics: Metrics, expectations, evaluate_formula) -> bool:
    """Attach expectation verdicts; True when all pass."""
    ok = True
    rows = []
    for exp in expectations:
        if exp.formula is not None:
            expected = float(evaluate_formula(exp.formula, exp.params))
        else:
            expected = float(exp.value)
        got = measured_metric(metrics, exp.metric)
        passed = abs(got - expected) <= exp.tol
        ok &= passed
        rows.append(
            {
                "metric": exp.metric,
                "expected": expected,
                "measured": got,
                "tol": exp.tol,
                "pass": passed,
            }
        )
    metrics.expectations = rows
    return ok


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def metrics_json_bytes(metrics: Metrics) -> bytes:
    doc = {
        "scenario": {
            "name": metrics.scenario_name,
            "seed": metrics.seed,
            "defense": metrics.defense,
            **metrics.params,
        },
        "aggregate": metrics.aggregate,
        "expectations": metrics.expectations,
    }
    return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode()


CSV_FIELDS = (
    "trial", "detected", "detection_epoch", "detection_time_ms",
    "cause", "pom", "detectors", "events", "exchange_events",
)


def trials_csv_bytes(metrics: Metrics, scope_ids: Optional[frozenset]) -> bytes:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for tr in metrics.trials:
        hit = tr.scoped_first(scope_ids)
        w.writerow(
            {
                "trial": tr.trial,
                "detected": int(hit is not None),
                "detection_epoch": "" if hit is None else hit["epoch"],
                "detection_time_ms": "" if hit is None else f"{hit['time_ms']:.6f}",
                "cause": "" if hit is None else hit["cause"],
                "pom": "" if hit is None else int(hit["pom"]),
                "detectors": len(tr.first_core),
                "events": len(tr.detections),
                "exchange_events": tr.exchange_events,
            }
        )
    return buf.getvalue().encode()


def summary_text(metrics: Metrics) -> str:
    agg = metrics.aggregate
    lines = [
        f"scenario {metrics.scenario_name} (defense={metrics.defense}, seed={metrics.seed})",
        f"  trials={agg['trials']} clients={agg['clients']} epochs={agg['epochs']}",
        f"  detection_rate={agg['detection_rate']:.6f} "
        f"ci99=[{agg['detection_rate_ci99'][0]:.6f}, {agg['detection_rate_ci99'][1]:.6f}]",
        f"  first_epoch_detection_rate={agg['first_epoch_detection_rate']:.6f} "
        f"pom_rate={agg['pom_rate']:.6f}",
    ]
    if agg["mean_detection_time_ms"] is not None:
        lines.append(
            f"  detection_time_ms mean={agg['mean_detection_time_ms']:.3f} "
            f"max={agg['max_detection_time_ms']:.3f}"
        )
    lines.append(f"  core_events={agg['core_event_counts']}")
    lines.append(f"  heuristic_events={agg['heuristic_event_counts']}")
    for row in metrics.expectations:
        verdict = "ok" if row["pass"] else "VIOLATED"
        lines.append(
            f"  expect {row['metric']}: measured={row['measured']:.6f} "
            f"expected={row['expected']:.6f} tol={row['tol']} [{verdict}]"
        )
    return "\n".join(lines) + "\n"
