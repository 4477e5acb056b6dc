"""Traffic and memory accounting: closed-form and counter-based, side by side.

Per-epoch monitoring cost per client:

    ktca   = contacts * str_wire  +  (str_wire + hash * log2(n_updates))
    akm    = akr_cost
    ktaca  = akr_cost + (str_wire + hash * log2(n_updates)) + extra_constant

A new-connection (or key-update) verification costs one inclusion-proof
download, hash * (log2(N)+1), for the transparency-log defenses, and
m anonymous retrievals for anonymous key monitoring.

The reference figures this report is calibrated against mix two unit
conventions: protocol payload sizes (hashes, signatures) are divided by
1000 ("KB" as 10^3 bytes) while the anonymous-retrieval constant is
divided by 1024 (32768 bytes prints as "32 KB"). The mix, the defense-table rounding of the combined defense
(33.96 vs the derived 33.952), the unexplained 1.216 KB constant inside that
same figure, and the 64-byte-exchanged versus 104-byte-stored tree-root
discrepancy are all flagged in the report rather than silently resolved.

The counter-based column prices the message counts observed by the
simulator with the same constants; when a scenario uses the reference
constants the two columns must agree exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .scenario import AccountingSpec

FLAGS = (
    "unit-mix: anonymous-retrieval bytes are reported in KiB-as-KB (/1024); "
    "hash/signature payloads in decimal KB (/1000)",
    "defense table prints the combined-defense epoch cost rounded to 33.96 KB; "
    "the derived figure is 33.952 KB",
    "the 33.952 KB epoch figure includes a 1.216 KB term not derivable from "
    "the published formulas; carried as the constant ktaca_epoch_extra_bytes",
    "an exchanged signed tree root is accounted at 64 bytes (signature only) "
    "while the stored form is 104 bytes; both conventions are kept",
    "the defense table lists anonymous-monitoring client memory as zero, but "
    "the key-update history needed by short-lived attack monitoring is not "
    "free; measured history bytes are reported separately",
)


def _kb(nbytes: int | Fraction) -> Fraction:
    return Fraction(nbytes) / 1000


def _kb_anon(nbytes: int | Fraction) -> Fraction:
    return Fraction(nbytes) / 1024


def own_monitor_bytes(spec: AccountingSpec) -> int:
    """Per-epoch own-key check: root signature plus the expected changed hashes.

    With n updates per epoch only about log2(n) hashes on a proof path
    change, so that is what the client downloads.
    """
    return spec.str_wire_bytes + spec.hash_bytes * round(math.log2(spec.n_updates_per_epoch))


def poi_lookup_bytes(spec: AccountingSpec) -> int:
    """Full inclusion-proof download at the synthetic directory depth."""
    return spec.hash_bytes * (round(math.log2(spec.N_total)) + 1)


def str_exchange_bytes_per_epoch(spec: AccountingSpec) -> int:
    return spec.contacts * spec.str_wire_bytes


def epoch_kb(defense: str, spec: AccountingSpec) -> Fraction:
    """Per-client per-epoch monitoring traffic in the mixed-KB convention."""
    if defense == "ktca":
        return _kb(str_exchange_bytes_per_epoch(spec)) + _kb(own_monitor_bytes(spec))
    if defense == "akm":
        return _kb_anon(spec.akr_bytes)
    if defense == "ktaca":
        return (
            _kb_anon(spec.akr_bytes)
            + _kb(own_monitor_bytes(spec))
            + _kb(spec.ktaca_epoch_extra_bytes)
        )
    raise ValueError(defense)


def new_connection_kb(defense: str, spec: AccountingSpec, m: int = 10) -> Fraction:
    """Traffic to verify one new connection or key update."""
    if defense in ("ktca", "ktaca"):
        return _kb(poi_lookup_bytes(spec))
    if defense == "akm":
        return _kb_anon(spec.akr_bytes) * m
    raise ValueError(defense)


def monthly_kb(defense: str, spec: AccountingSpec, m: int = 10,
               table_epoch_kb: Optional[Fraction] = None) -> Fraction:
    """The worked monthly example: epochs + new contacts + one key update.

    The reference example prices the combined defense's month with the
    *rounded* table figure; pass table_epoch_kb to reproduce that exactly.
    """
    per_epoch = table_epoch_kb if table_epoch_kb is not None else epoch_kb(defense, spec)
    per_new = new_connection_kb(defense, spec, m)
    return (
        spec.epochs_per_month * per_epoch
        + spec.new_contacts_per_month * per_new
        + spec.key_updates_per_month * per_new
    )


def client_memory_bytes(defense: str, spec: AccountingSpec) -> int:
    """Stored state per client: the previous signed tree root, if any."""
    return spec.str_stored_bytes if defense in ("ktca", "ktaca") else 0


def prevention_memory_bytes(spec: AccountingSpec) -> int:
    """Out-of-band channel state: identity plus MAC key, per contact."""
    return spec.contacts * (spec.oob_identity_bytes + spec.oob_mac_key_bytes)


@dataclass(frozen=True)
class AccountingReport:
    defense: str
    formula: dict
    counters: dict
    flags: tuple[str, ...]

    def drift(self) -> dict[str, Fraction]:
        """Formula-minus-counter difference per overlapping line item."""
        out = {}
        for k, v in self.formula.items():
            if k in self.counters:
                out[k] = Fraction(v) - Fraction(self.counters[k])
        return out


def account_traffic(defense: str, spec: AccountingSpec, metrics=None, m: int = 10) -> AccountingReport:
    """Build the two-column report; the counter column needs run metrics.

    The counter column prices observed per-client-per-epoch message counts
    (tree-root exchange events, own-key checks, anonymous retrievals) and
    per-new-connection proof downloads with the same constants the formula
    column uses.
    """
    formula = {
        "epoch_kb": epoch_kb(defense, spec),
        "new_connection_kb": new_connection_kb(defense, spec, m),
        "monthly_kb": monthly_kb(defense, spec, m),
        "client_memory_bytes": client_memory_bytes(defense, spec),
        "prevention_memory_bytes": prevention_memory_bytes(spec),
    }
    counters: dict = {}
    if metrics is not None:
        agg = metrics.aggregate
        n_client_epochs = agg["clients"] * agg["epochs"] * max(agg["trials"], 1)
        per_ce = lambda count: Fraction(count, n_client_epochs)  # noqa: E731
        exchanges = agg["exchange_events_total"] * 2  # one event, both endpoints
        own = agg["message_counts_total"].get("own_monitor", 0)
        akr = agg["message_counts_total"].get("akr", 0)
        akr_monitor = agg["message_counts_total"].get("akr_monitor", 0)
        asr = agg["message_counts_total"].get("asr", 0)
        lookups = agg["message_counts_total"].get("poi_lookup", 0)
        new_conns = agg.get("new_connection_events", 0)
        # line items appear in the counter column only when the run actually
        # exercised them, so a pure-monitoring run never reports zero drift
        # against a formula it did not measure
        if defense == "ktca" and (exchanges or own):
            counters["epoch_kb"] = _kb(
                per_ce(exchanges) * spec.str_wire_bytes
                + per_ce(own) * own_monitor_bytes(spec)
            )
        elif defense == "akm" and akr:
            counters["epoch_kb"] = _kb_anon(per_ce(akr - akr_monitor) * spec.akr_bytes)
        elif defense == "ktaca" and (asr or own):
            counters["epoch_kb"] = (
                _kb_anon(per_ce(asr) * spec.akr_bytes)
                + _kb(per_ce(own) * own_monitor_bytes(spec))
                + _kb(spec.ktaca_epoch_extra_bytes)
            )
        if new_conns:
            if defense == "akm":
                counters["new_connection_kb"] = _kb_anon(
                    Fraction(akr_monitor, new_conns) * spec.akr_bytes
                )
            else:
                counters["new_connection_kb"] = _kb(
                    Fraction(lookups, new_conns) * poi_lookup_bytes(spec)
                )
        counters["measured_history_bytes_per_client"] = agg.get("history_bytes_per_client", 0)
    return AccountingReport(defense=defense, formula=formula, counters=counters, flags=FLAGS)


def render_report(report: AccountingReport) -> str:
    lines = [f"traffic accounting ({report.defense})"]
    lines.append(f"  {'item':<34}{'formula':>16}{'counters':>16}")
    for k, v in report.formula.items():
        c = report.counters.get(k, "")
        fv = f"{float(v):.6g}" if isinstance(v, Fraction) else str(v)
        cv = f"{float(c):.6g}" if isinstance(c, Fraction) else str(c)
        lines.append(f"  {k:<34}{fv:>16}{cv:>16}")
    lines.append("  flags:")
    for fl in report.flags:
        lines.append(f"    - {fl}")
    return "\n".join(lines)
