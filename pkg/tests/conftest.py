"""Shared fixtures and independent oracles for planner verification."""

from __future__ import annotations

import itertools
import math

import pytest

from windroute.core import (CLASSES, ClassShape, ProfileTable, RequestClass,
                            SynthTableSpec, synth_profile_table)


def tiny_table(classes=(RequestClass.SS,), freqs=(1.0, 2.0), tps=(8,),
               loads=(1.0, 2.0, 4.0), base_power_w=100.0, knee=4.0) -> ProfileTable:
    shapes = {c: ClassShape(base_e2e_s=0.6 + 0.2 * CLASSES.index(c),
                            base_ttft_s=0.05, base_tbt_s=0.008,
                            base_power_w=base_power_w, knee_rps=knee)
              for c in classes}
    return synth_profile_table(SynthTableSpec(
        shapes=shapes, load_grid=tuple(loads), freqs=tuple(freqs),
        tps=tuple(tps)))


@pytest.fixture(scope="session")
def full_table() -> ProfileTable:
    return synth_profile_table()


# --------------------------------------------------------------------------
# Exhaustive enumeration oracles. These re-derive feasibility from the raw
# inputs (never through the MILP machinery) and try every assignment that
# respects the one-(freq, load)-per-(site, class, tp) rule.
# --------------------------------------------------------------------------

def _feasible_keys(table, cls):
    return sorted((r.key for r in table.rows.values() if r.slo_ok and r.key.cls is cls),
                  key=lambda k: (k.tp, k.freq, k.load))


def _cost(table, key, objective):
    row = table.rows[key]
    if objective == "min_latency":
        return row.e2e_s
    return row.peak_power_w * table.overhead_multiplier


def enumerate_planner_l(inputs):
    """Brute-force optimum of the slot-planning problem.

    Returns (objective, chosen) or (None, None) when infeasible. `chosen`
    maps (site, key) -> count.
    """
    table = inputs.table
    groups = []  # (site_budget, [keys for one (cls, tp) group])
    for budget in inputs.sites:
        per = {}
        for cls in CLASSES:
            for key in _feasible_keys(table, cls):
                per.setdefault((cls, key.tp), []).append(key)
        for (cls, tp), keys in sorted(per.items(),
                                      key=lambda kv: (CLASSES.index(kv[0][0]), kv[0][1])):
            groups.append((budget, keys))

    options = []
    for budget, keys in groups:
        opts = [None]
        for key in keys:
            ub = budget.gpu_count // key.tp
            opts.extend((key, n) for n in range(1, ub + 1))
        options.append(opts)

    old = inputs.old_plan.counts() if inputs.old_plan else {}
    best = (None, None)
    for combo in itertools.product(*options):
        gpus = {}
        power = {}
        capacity = {c: 0.0 for c in CLASSES}
        chosen = {}
        changes = dict(old)
        for (budget, _), pick in zip(groups, combo):
            if pick is None:
                continue
            key, n = pick
            site = budget.site
            gpus[site] = gpus.get(site, 0) + n * key.tp
            power[site] = power.get(site, 0.0) + n * table.rows[key].peak_power_w * table.overhead_multiplier
            capacity[key.cls] += n * key.load
            chosen[(site, key)] = n
            ident = (key.cls, key.freq, key.tp, site, key.load)
            changes[ident] = changes.get(ident, 0) - n
        ok = all(gpus.get(b.site, 0) <= b.gpu_count for b in inputs.sites)
        ok = ok and all(power.get(b.site, 0.0) <= b.power_w + 1e-9 for b in inputs.sites)
        ok = ok and all(capacity[c] >= inputs.load.get(c, 0.0) - 1e-9 for c in CLASSES)
        if ok and inputs.r_limit is not None:
            ok = sum(abs(v) for v in changes.values()) <= inputs.r_limit
        if not ok:
            continue
        value = sum(n * _cost(table, key, inputs.objective)
                    for (_, key), n in chosen.items())
        if best[0] is None or value < best[0] - 1e-12:
            best = (value, chosen)
    return best


def enumerate_planner_s(inputs):
    """Brute-force optimum of the fast re-planning problem."""
    table = inputs.table
    groups = sorted((k for k, v in inputs.budget.items() if v > 0),
                    key=lambda k: (k[0], CLASSES.index(k[1]), k[2]))
    options = []
    for site, cls, tp in groups:
        opts = [None]
        for key in _feasible_keys(table, cls):
            if key.tp != tp:
                continue
            opts.extend((key, n) for n in range(1, inputs.budget[(site, cls, tp)] + 1))
        options.append(opts)
    best = (None, None)
    for combo in itertools.product(*options):
        power = {}
        capacity = {c: 0.0 for c in CLASSES}
        chosen = {}
        for (site, cls, tp), pick in zip(groups, combo):
            if pick is None:
                continue
            key, n = pick
            power[site] = power.get(site, 0.0) + n * table.rows[key].peak_power_w * table.overhead_multiplier
            capacity[cls] += n * key.load
            chosen[(site, key)] = n
        ok = all(w <= inputs.live_power.get(site, 0.0) + 1e-9
                 for site, w in power.items())
        ok = ok and all(capacity[c] >= inputs.live_load.get(c, 0.0) - 1e-9
                        for c in CLASSES)
        if not ok:
            continue
        value = sum(n * _cost(table, key, inputs.objective)
                    for (_, key), n in chosen.items())
        if best[0] is None or value < best[0] - 1e-12:
            best = (value, chosen)
    return best
