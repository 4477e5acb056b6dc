"""Closed-form detection probabilities and time bounds.

These formulas are the oracles the Monte-Carlo results are tested against;
they are evaluated in exact rational arithmetic and only converted to float
at the edge.

Anonymous key monitoring, basic model (c contacts hold the fake key, the
owner checks its own key, m monitoring epochs):

    P(owner detects) = 1 - (1/(c+1))^m

General model (f fake holders, r real holders):

    P(owner detects)      = 1 - ((r+1)/(r+f+1))^m
    P(any client detects) = 1 - (1/C(f+r+1, f))^m

Churn variants multiply per-epoch avoidance factors; an epoch with the owner
offline is a free pass for the adversary (factor 1).

Anonymous tree-root auditing with N clients: the adversary identifies the
victim's anonymous request with probability 1/N per epoch, so the victim
obtains a proof of misbehavior with probability 1 - 1/N per epoch and
1 - (1/N)^k over k epochs.

Gossip auditing detection-time bound: all online clients hold a proof of
misbehavior within 2*(diam(G)+1)*delta of the epoch start.
"""

from __future__ import annotations

from fractions import Fraction
from math import comb
from typing import Iterable


class Unsupported(ValueError):
    """No closed form for the requested defense/parameter combination."""


def akm_basic(c: int, m: int) -> Fraction:
    """Owner detection within m epochs when c contacts hold the fake key."""
    if c < 0 or m < 1:
        raise Unsupported("need c >= 0 and m >= 1")
    return 1 - Fraction(1, c + 1) ** m


def akm_general_owner(f: int, r: int, m: int) -> Fraction:
    if f < 1 or r < 0 or m < 1:
        raise Unsupported("need f >= 1, r >= 0, m >= 1")
    return 1 - Fraction(r + 1, r + f + 1) ** m


def akm_general_any(f: int, r: int, m: int) -> Fraction:
    if f < 1 or r < 0 or m < 1:
        raise Unsupported("need f >= 1, r >= 0, m >= 1")
    return 1 - Fraction(1, comb(f + r + 1, f)) ** m


def akm_churn_owner(contacts_online: Iterable[int], owner_offline: Iterable[bool]) -> Fraction:
    """Owner detection with per-epoch online counts and owner presence.

    Per epoch the adversary avoids owner detection with probability
    1/(contacts_i + 1), or 1 outright when the owner is offline.
    """
    avoid = Fraction(1)
    for c_i, off in zip(contacts_online, owner_offline, strict=True):
        factor = Fraction(1) if off else Fraction(1, c_i + 1)
        avoid *= factor
    return 1 - avoid


def akm_general_churn_owner(
    real_online: Iterable[int], fake_online: Iterable[int], owner_offline: Iterable[bool]
) -> Fraction:
    avoid = Fraction(1)
    for r_i, f_i, off in zip(real_online, fake_online, owner_offline, strict=True):
        factor = Fraction(1) if off else Fraction(r_i + 1, r_i + f_i + 1)
        avoid *= factor
    return 1 - avoid


def ktaca_per_epoch(n_clients: int) -> Fraction:
    """Victim PoM probability in one epoch of anonymous tree-root auditing."""
    if n_clients < 1:
        raise Unsupported("need at least one client")
    return 1 - Fraction(1, n_clients)


def ktaca_cumulative(n_clients: int, epochs: int) -> Fraction:
    if n_clients < 1 or epochs < 1:
        raise Unsupported("need N >= 1 and epochs >= 1")
    return 1 - Fraction(1, n_clients) ** epochs


def ktca_detection_bound_ms(diameter: int, delta_ms: float) -> float:
    """Worst-case time from epoch start until every online client holds a PoM."""
    if diameter < 0:
        raise Unsupported("diameter must be non-negative")
    return 2 * (diameter + 1) * delta_ms


_FORMULAS = {
    "akm_basic": lambda p: akm_basic(int(p["c"]), int(p["m"])),
    "akm_general_owner": lambda p: akm_general_owner(int(p["f"]), int(p["r"]), int(p["m"])),
    "akm_general_any": lambda p: akm_general_any(int(p["f"]), int(p["r"]), int(p["m"])),
    "akm_churn_owner": lambda p: akm_churn_owner(
        [int(x) for x in p["contacts_online"]],
        [bool(x) for x in p["owner_offline"]],
    ),
    "akm_general_churn_owner": lambda p: akm_general_churn_owner(
        [int(x) for x in p["real_online"]],
        [int(x) for x in p["fake_online"]],
        [bool(x) for x in p["owner_offline"]],
    ),
    "ktaca_per_epoch": lambda p: ktaca_per_epoch(int(p["n_clients"])),
    "ktaca_cumulative": lambda p: ktaca_cumulative(int(p["n_clients"]), int(p["epochs"])),
    "ktca_bound_ms": lambda p: ktca_detection_bound_ms(int(p["diameter"]), float(p["delta_ms"])),
}


def evaluate(formula: str, params: dict):
    """Evaluate a named formula; Fractions for probabilities, float for bounds."""
    try:
        fn = _FORMULAS[formula]
    except KeyError:
        raise Unsupported(f"unknown formula {formula!r}") from None
    try:
        return fn(params)
    except KeyError as e:
        raise Unsupported(f"{formula}: missing parameter {e}") from None


def formula_names() -> list[str]:
    return sorted(_FORMULAS)
