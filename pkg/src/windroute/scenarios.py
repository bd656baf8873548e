"""Synthetic scenario builders for experiments and regression tests.

All builders are deterministic given their arguments (plus seed where
one applies) and sized so a full day simulates in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import (CLASSES, Bucket, ClassShape, ClassThresholds, PowerTrace,
                   Request, RequestClass, Site, SynthTableSpec, WorkloadTrace,
                   synth_profile_table)

# canonical token values per bucket, consistent with the fixed thresholds
_TOKENS = {Bucket.S: 50, Bucket.M: 200, Bucket.L: 600}
FIXED_THRESHOLDS = ClassThresholds(100, 400, 1000, 100, 400, 1000)


def small_table(classes: Sequence[RequestClass],
                freqs: Sequence[float] = (1.0, 2.0),
                tps: Sequence[int] = (8,),
                loads: Sequence[float] = (1.0, 2.0, 4.0),
                base_power_w: float = 100.0,
                knee_rps: float = 4.0):
    """Reduced synthetic table covering only the classes a scenario uses."""
    shapes = {}
    for cls in classes:
        iw = 1.0 + 0.5 * cls.input_bucket
        ow = 1.0 + 0.5 * cls.output_bucket
        shapes[cls] = ClassShape(
            base_e2e_s=0.5 * ow + 0.1 * iw,
            base_ttft_s=0.05 * iw,
            base_tbt_s=0.008,
            base_power_w=base_power_w,
            knee_rps=knee_rps)
    return synth_profile_table(SynthTableSpec(
        shapes=shapes, load_grid=tuple(loads), freqs=tuple(freqs),
        tps=tuple(tps)))


def _request(sec: int, offset_ms: int, cls: RequestClass) -> Request:
    return Request(sec * 1000 + offset_ms, _TOKENS[cls.input_bucket],
                   _TOKENS[cls.output_bucket], cls)


def steady_trace(rates: Mapping[RequestClass, int], horizon_s: int) -> WorkloadTrace:
    """Constant per-second arrivals, spread evenly inside each second."""
    requests = []
    for sec in range(horizon_s):
        for cls in CLASSES:
            n = int(rates.get(cls, 0))
            for j in range(n):
                requests.append(_request(sec, (1000 * j) // max(n, 1), cls))
    requests.sort(key=lambda r: r.arrival_ms)
    return WorkloadTrace(tuple(requests), FIXED_THRESHOLDS)


def pattern_trace(pattern: Mapping[RequestClass, Sequence[int]],
                  horizon_s: int) -> WorkloadTrace:
    """Per-second counts cycling through `pattern[cls]`."""
    requests = []
    for sec in range(horizon_s):
        for cls, counts in pattern.items():
            n = int(counts[sec % len(counts)])
            for j in range(n):
                requests.append(_request(sec, (1000 * j) // max(n, 1), cls))
    requests.sort(key=lambda r: r.arrival_ms)
    return WorkloadTrace(tuple(requests), FIXED_THRESHOLDS)


def poisson_trace(rates: Mapping[RequestClass, float], horizon_s: int,
                  seed: int) -> WorkloadTrace:
    rng = np.random.default_rng(seed)
    requests = []
    for sec in range(horizon_s):
        for cls in CLASSES:
            lam = rates.get(cls, 0.0)
            if lam <= 0:
                continue
            n = int(rng.poisson(lam))
            for j in range(n):
                requests.append(_request(sec, (1000 * j) // max(n, 1), cls))
    requests.sort(key=lambda r: r.arrival_ms)
    return WorkloadTrace(tuple(requests), FIXED_THRESHOLDS)


@dataclass
class Scenario:
    table: object
    sites: list[Site]
    workload: WorkloadTrace
    horizon_s: int
    notes: dict


def complementarity_pair(horizon_s: int = 86400, slot_s: int = 900,
                         rate_rps: int = 4, high_w: float = 12_000.0,
                         low_w: float = 1_000.0) -> Scenario:
    """Two sites whose power traces sum to a constant but alternately dip
    below local demand. Globally, the workload always fits on the healthy
    site; a site-local scheduler must drop during its dips.
    """
    table = small_table([RequestClass.SS])
    n_slots = math.ceil(horizon_s / slot_s)
    a = [high_w if (k // 2) % 2 == 0 else low_w for k in range(n_slots)]
    b = [high_w + low_w - v for v in a]
    sites = [
        Site("a", 32, PowerTrace(tuple(a), slot_s)),
        Site("b", 32, PowerTrace(tuple(b), slot_s)),
    ]
    workload = steady_trace({RequestClass.SS: rate_rps}, horizon_s)
    deficit = {
        "a": [(k * slot_s, (k + 1) * slot_s) for k in range(n_slots) if a[k] == low_w],
        "b": [(k * slot_s, (k + 1) * slot_s) for k in range(n_slots) if b[k] == low_w],
    }
    return Scenario(table, sites, workload, horizon_s,
                    {"deficit_windows": deficit, "slot_s": slot_s,
                     "rate_rps": rate_rps})


def right_sized_fleet(n_sites: int = 4, horizon_s: int = 86400,
                      slot_s: int = 900, rate_rps: int = 4,
                      capacity_w: float = 12_000.0,
                      deficit_w: float = 1_000.0, cycle: int = 24) -> Scenario:
    """Right-sized sites: generation sits at the provisioned capacity except
    for a small staggered tail of deficit slots (one site at a time), so
    even a site-local scheduler serves the workload 80+% of the time."""
    table = small_table([RequestClass.SS])
    n_slots = math.ceil(horizon_s / slot_s)
    spacing = cycle // n_sites
    sites = []
    for i in range(n_sites):
        samples = [deficit_w if k % cycle == i * spacing else capacity_w
                   for k in range(n_slots)]
        sites.append(Site(f"s{i}", 32, PowerTrace(tuple(samples), slot_s)))
    workload = steady_trace({RequestClass.SS: rate_rps}, horizon_s)
    deficit_fraction = float(n_sites) / cycle
    return Scenario(table, sites, workload, horizon_s,
                    {"slot_s": slot_s, "cycle": cycle,
                     "deficit_union_fraction": deficit_fraction})


def uplift_scenario(horizon_s: int = 900) -> Scenario:
    """Single site, power-bound slot plan, live power rising mid-slot.

    The fast planner can spend the uplift on higher frequencies; the
    packing heuristic can additionally move small-class requests into the
    big class's spare provisioned capacity.
    """
    table = small_table([RequestClass.LS, RequestClass.LL],
                        freqs=(1.0, 1.4, 2.0), loads=(1.0, 2.0))
    # budget fits LL fast + LS slow; a 1.25x uplift unlocks LS at 1.4 GHz
    site = Site("a", 32, PowerTrace((6_600.0,) * math.ceil(horizon_s / 900), 900))
    workload = pattern_trace({RequestClass.LL: [2, 1],
                              RequestClass.LS: [2, 2]}, horizon_s)
    return Scenario(table, [site], workload, horizon_s,
                    {"uplift": {"start_s": 300, "end_s": horizon_s, "factor": 1.25}})


def shock_scenario(horizon_s: int = 900) -> Scenario:
    """Single site with slack-bearing table rows: a -20% power shock makes
    the slot plan infeasible live, while a lower frequency still serves
    the full load."""
    table = small_table([RequestClass.SS], freqs=(1.0, 2.0), loads=(2.0, 4.0))
    site = Site("a", 16, PowerTrace((6_000.0,) * math.ceil(horizon_s / 900), 900))
    workload = steady_trace({RequestClass.SS: 4}, horizon_s)
    return Scenario(table, [site], workload, horizon_s,
                    {"shock": {"start_s": 300, "end_s": 400, "factor": 0.8}})


def drift_fleet(n_slots: int = 8, slot_s: int = 900, rate_rps: int = 8
                ) -> Scenario:
    """Two sites whose available power drifts gradually in opposite
    directions across slots, forcing a slow migration of instances."""
    table = small_table([RequestClass.SS], freqs=(1.0, 2.0), loads=(2.0,))
    horizon_s = n_slots * slot_s
    a = [12_000.0 - 1_200.0 * k for k in range(n_slots)]
    b = [2_000.0 + 1_200.0 * k for k in range(n_slots)]
    sites = [
        Site("a", 160, PowerTrace(tuple(a), slot_s)),
        Site("b", 160, PowerTrace(tuple(b), slot_s)),
    ]
    workload = steady_trace({RequestClass.SS: rate_rps}, horizon_s)
    return Scenario(table, sites, workload, horizon_s, {"slot_s": slot_s})
