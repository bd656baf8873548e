"""Comparison schedulers: site-local planning with static cross-site WRR.

Neither baseline sees other sites' power or load; the cross-site split
is a fixed weighted round-robin proportional to each site's GPU count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import CLASSES, ProfileRow, ProfileTable, RequestClass, tp_gpus
from .plan import GlobalPlan, PlanEntry
from .planner_l import SiteBudget


def local_load_share(load: Mapping[RequestClass, float], site: SiteBudget,
                     sites: Sequence[SiteBudget]) -> dict[RequestClass, float]:
    """Static WRR split of the global load, proportional to GPU count."""
    total = sum(s.gpu_count for s in sites)
    frac = site.gpu_count / total
    return {c: load.get(c, 0.0) * frac for c in CLASSES}


def _greedy_fill(wishes: list[tuple[ProfileRow, int]], site: SiteBudget,
                 table: ProfileTable, tag: str) -> GlobalPlan:
    """Admit instances ascending by power draw until GPU/power budgets bind."""
    per_instance = []
    for row, wanted in wishes:
        watts = row.peak_power_w * table.overhead_multiplier
        per_instance.extend([(watts, row)] * wanted)
    per_instance.sort(key=lambda t: (t[0], CLASSES.index(t[1].key.cls)))
    gpus_left = site.gpu_count
    power_left = site.power_w
    admitted: dict[tuple, int] = {}
    for watts, row in per_instance:
        need_gpus = tp_gpus(row.key.tp)
        if need_gpus > gpus_left or watts > power_left + 1e-9:
            continue
        gpus_left -= need_gpus
        power_left -= watts
        k = (row.key.cls, row.key.freq, row.key.tp, row.key.load)
        admitted[k] = admitted.get(k, 0) + 1
    entries = [PlanEntry(cls, freq, tp, site.site, load, n)
               for (cls, freq, tp, load), n in admitted.items()]
    value = sum(e.instances * table.power_with_overhead(e.cls, e.freq, e.tp, e.load)
                for e in entries)
    return GlobalPlan.from_entries(entries, objective="baseline",
                                   objective_value=value, planner=tag)


def site_local_min_energy(site: SiteBudget,
                          local_load: Mapping[RequestClass, float],
                          table: ProfileTable) -> GlobalPlan:
    """Per class, the cheapest watts-per-rps configuration; greedy admission
    by ascending power when the site cannot host everything."""
    wishes: list[tuple[ProfileRow, int]] = []
    for cls in CLASSES:
        demand = local_load.get(cls, 0.0)
        if demand <= 0:
            continue
        rows = table.feasible_for(cls)
        if not rows:
            continue
        best = min(rows, key=lambda r: (
            r.peak_power_w * table.overhead_multiplier / r.key.load,
            r.key.tp, r.key.freq, r.key.load))
        wishes.append((best, math.ceil(demand / best.key.load)))
    return _greedy_fill(wishes, site, table, "wrr-minenergy")


@dataclass(frozen=True)
class KneeResult:
    load: float
    no_knee: bool = False


def knee_point(loads: Sequence[float], latencies: Sequence[float],
               flat_tol: float = 1e-9) -> KneeResult:
    """Load level of maximum curvature on a latency-vs-load series.

    Normalizes both axes, then takes the interior point farthest from
    the chord between the endpoints. A (near-)linear series has no knee;
    the highest load is returned flagged.
    """
    if len(loads) != len(latencies):
        raise ValueError("loads and latencies must pair up")
    if len(loads) < 3:
        raise ValueError("need at least 3 load levels")
    x = np.asarray(loads, dtype=float)
    y = np.asarray(latencies, dtype=float)
    if np.any(np.diff(x) <= 0):
        raise ValueError("loads must be strictly increasing")
    if abs(y[-1] - y[0]) < flat_tol:
        return KneeResult(float(x[-1]), no_knee=True)
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (y - y[0]) / (y[-1] - y[0])
    dist = np.abs(xn - yn) / math.sqrt(2.0)
    idx = int(np.argmax(dist))
    if dist[idx] < 1e-6:
        return KneeResult(float(x[-1]), no_knee=True)
    return KneeResult(float(x[idx]))


def class_knee(table: ProfileTable, cls: RequestClass, tp: int = 8,
               freq: float | None = None) -> KneeResult:
    rows = [r for r in table.feasible_for(cls) if r.key.tp == tp]
    if not rows:
        raise ValueError(f"no feasible rows for class {cls.name} at tp={tp}")
    if freq is None:
        freq = max(r.key.freq for r in rows)
    series = sorted((r for r in rows if r.key.freq == freq),
                    key=lambda r: r.key.load)
    if len(series) < 3:
        return KneeResult(series[-1].key.load, no_knee=True)
    return knee_point([r.key.load for r in series], [r.e2e_s for r in series])


def greedy_knee_min_latency(site: SiteBudget,
                            local_load: Mapping[RequestClass, float],
                            table: ProfileTable) -> GlobalPlan:
    """Highest frequency at tp=8, per-instance load capped at the knee."""
    wishes: list[tuple[ProfileRow, int]] = []
    for cls in CLASSES:
        demand = local_load.get(cls, 0.0)
        if demand <= 0:
            continue
        rows = [r for r in table.feasible_for(cls) if r.key.tp == 8]
        if not rows:
            continue
        freq = max(r.key.freq for r in rows)
        knee = class_knee(table, cls, tp=8, freq=freq)
        row = next(r for r in sorted(rows, key=lambda r: r.key.load)
                   if r.key.freq == freq and r.key.load >= knee.load)
        wishes.append((row, math.ceil(demand / row.key.load)))
    return _greedy_fill(wishes, site, table, "greedy-knee")
