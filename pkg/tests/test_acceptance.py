"""Acceptance gate: one test per release criterion, one printed line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the criterion
lines as they pass.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import enumerate_planner_l, enumerate_planner_s, tiny_table
from windroute import econ, scenarios, simulator
from windroute.core import CLASSES, RequestClass
from windroute.econ import EconParams
from windroute.planner_l import (PlanInfeasibleError, PlannerInputs,
                                 SiteBudget, audit_plan, evaluate_plan_cost,
                                 r_limit_from_pct, solve_planner_l)
from windroute.planner_s import PlannerSInputs, solve_planner_s
from windroute.scheduler import compatible, pack, refill_count
from windroute.scheduler import BenefitLut
from windroute.simulator import SimConfig, WindowNoise, goodput_factor, run

SS = RequestClass.SS


def report(num: int, ok: bool, detail: str) -> None:
    print(f"criterion {num:02d} {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, detail


def _random_planner_inputs(rng, table, objective="min_latency"):
    n_sites = int(rng.integers(1, 3))
    sites = [SiteBudget(f"s{i}", 16, float(rng.integers(2000, 14000)))
             for i in range(n_sites)]
    load = {SS: float(rng.integers(0, 6))}
    old = None
    r_limit = None
    if rng.random() < 0.4:
        from windroute.plan import GlobalPlan, PlanEntry
        old = GlobalPlan.from_entries(
            [PlanEntry(SS, 2.0, 8, sites[0].site, 1.0, int(rng.integers(1, 3)))])
        r_limit = int(rng.integers(0, 7))
    return PlannerInputs(table, sites, load, old, r_limit, objective)


def test_criterion_01_ilp_oracle_equivalence():
    start = time.perf_counter()
    table = tiny_table(freqs=(1.0, 2.0), tps=(8,), loads=(1.0, 2.0, 4.0))
    rng = np.random.default_rng(2025)
    checked_l = checked_s = 0
    plans = []
    for _ in range(100):
        for objective in ("min_latency", "min_power"):
            inputs = _random_planner_inputs(rng, table, objective)
            expected, _ = enumerate_planner_l(inputs)
            if expected is None:
                with pytest.raises(PlanInfeasibleError):
                    solve_planner_l(inputs)
                continue
            plan = solve_planner_l(inputs)
            assert plan.objective_value == pytest.approx(expected, abs=1e-9)
            plans.append((plan, inputs))
            checked_l += 1
            if objective == "min_latency" and plan.entries:
                s_inputs = PlannerSInputs(
                    table, plan.instance_budget(),
                    {s.site: float(rng.integers(1500, 14000)) for s in inputs.sites},
                    inputs.load, objective=objective)
                s_expected, _ = enumerate_planner_s(s_inputs)
                result = solve_planner_s(s_inputs)
                if s_expected is None:
                    assert result.shortfall
                else:
                    assert result.plan.objective_value == pytest.approx(
                        s_expected, abs=1e-9)
                    checked_s += 1
    elapsed = time.perf_counter() - start
    test_criterion_01_ilp_oracle_equivalence.plans = plans
    report(1, checked_l >= 100 and checked_s >= 30 and elapsed < 60.0,
           f"{checked_l} slot solves + {checked_s} fast solves matched "
           f"enumeration exactly in {elapsed:.1f}s")


def test_criterion_02_constraint_audit():
    plans = getattr(test_criterion_01_ilp_oracle_equivalence, "plans", None)
    if plans is None:
        test_criterion_01_ilp_oracle_equivalence()
        plans = test_criterion_01_ilp_oracle_equivalence.plans
    violations = []
    for plan, inputs in plans:
        violations.extend(audit_plan(plan, inputs, tol=1e-6).violations)
    report(2, len(plans) >= 100 and not violations,
           f"{len(plans)} solver plans re-audited independently, "
           f"{len(violations)} violations")


def test_criterion_03_complementarity_drop_avoidance():
    start = time.perf_counter()
    sc = scenarios.complementarity_pair(horizon_s=86400)
    heron = run(SimConfig(sc.table, sc.sites, sc.workload,
                          objective="min_power", scheduler="heron"))
    base = run(SimConfig(sc.table, sc.sites, sc.workload,
                         scheduler="wrr-minenergy"))
    elapsed = time.perf_counter() - start
    windows_with_drops = 0
    windows = 0
    for site, site_windows in sc.notes["deficit_windows"].items():
        for lo, hi in site_windows:
            if hi <= sc.horizon_s:
                windows += 1
                if base.site_dropped[site][lo:hi].sum() > 0:
                    windows_with_drops += 1
    ok = (heron.dropped.sum() == 0 and windows_with_drops == windows
          and windows > 0 and elapsed < 120.0)
    report(3, ok,
           f"heron dropped {heron.dropped.sum()}, baseline dropped in "
           f"{windows_with_drops}/{windows} deficit windows, "
           f"simulated day in {elapsed:.0f}s")


def test_criterion_04_goodput_factor_shape():
    sc = scenarios.right_sized_fleet(horizon_s=43200)
    heron = run(SimConfig(sc.table, sc.sites, sc.workload,
                          objective="min_power", scheduler="heron"))
    base = run(SimConfig(sc.table, sc.sites, sc.workload,
                         scheduler="wrr-minenergy"))
    rep = goodput_factor(heron, base)
    summary = rep.summary()
    slot_s = sc.notes["slot_s"]
    cycle = sc.notes["cycle"]
    # strict improvement inside every deficit window
    strict = True
    n_slots = sc.horizon_s // slot_s
    deficit_slots = [k for k in range(n_slots)
                     if any(k % cycle == i * (cycle // len(sc.sites))
                            for i in range(len(sc.sites)))]
    for k in deficit_slots:
        window = rep.ratios[k * slot_s:(k + 1) * slot_s]
        if not np.all(window > 1.0):
            strict = False
    ok = (heron.dropped.sum() == 0
          and summary["fraction_at_1"] >= 0.80
          and bool(np.all(rep.ratios >= 1.0 - 1e-12))
          and summary["percentiles"]["p95"] > 1.0
          and strict)
    report(4, ok,
           f"ratio==1 at {summary['fraction_at_1']:.1%} of seconds, "
           f"p95={summary['percentiles']['p95']:.2f}, "
           f"max={summary['max_finite_ratio']:.2f}, strict>1 in all "
           f"{len(deficit_slots)} deficit slots")


def test_criterion_05_objective_dominance():
    rng = np.random.default_rng(77)
    table = tiny_table(freqs=(1.0, 1.4, 2.0), loads=(1.0, 2.0, 4.0))
    checked = 0
    worst_inflation = 0.0
    while checked < 50:
        inputs_lat = _random_planner_inputs(rng, table, "min_latency")
        if inputs_lat.load[SS] == 0:
            continue
        inputs_pow = PlannerInputs(table, inputs_lat.sites, inputs_lat.load,
                                   inputs_lat.old_plan, inputs_lat.r_limit,
                                   "min_power")
        try:
            plan_lat = solve_planner_l(inputs_lat)
            plan_pow = solve_planner_l(inputs_pow)
        except PlanInfeasibleError:
            continue
        lat_cost = evaluate_plan_cost(plan_lat, table, "min_latency")
        lat_cost_of_pow = evaluate_plan_cost(plan_pow, table, "min_latency")
        pow_cost = evaluate_plan_cost(plan_pow, table, "min_power")
        pow_cost_of_lat = evaluate_plan_cost(plan_lat, table, "min_power")
        assert lat_cost <= lat_cost_of_pow + 1e-9
        assert pow_cost <= pow_cost_of_lat + 1e-9
        if pow_cost > 0:
            worst_inflation = max(worst_inflation,
                                  100 * (pow_cost_of_lat - pow_cost) / pow_cost)
        checked += 1
    report(5, checked == 50,
           f"{checked} seeded scenarios: latency cost and power cost both "
           f"dominated; max observed power inflation "
           f"{worst_inflation:.0f}% (reported, not asserted)")


def test_criterion_06_hierarchy_benefit():
    sc = scenarios.uplift_scenario()
    up = sc.notes["uplift"]
    noise = WindowNoise(up["start_s"], up["end_s"], up["factor"])
    runs = {}
    for name, kw in (("L", {}), ("L+S", {"use_planner_s": True}),
                     ("L+S+pack", {"use_planner_s": True,
                                   "packing": "max_benefit"})):
        runs[name] = run(SimConfig(sc.table, sc.sites, sc.workload,
                                   objective="min_latency", scheduler="heron",
                                   power_noise=noise, horizon_s=900, **kw))
    e = {k: v.mean_e2e_per_sec() for k, v in runs.items()}
    med = {k: float(np.nanmedian(v)) for k, v in e.items()}
    strict_s = int(np.nansum(e["L+S"] < e["L"] - 1e-12))
    strict_p = int(np.nansum(e["L+S+pack"] < e["L+S"] - 1e-12))
    ok = (med["L+S"] <= med["L"] + 1e-12
          and med["L+S+pack"] <= med["L+S"] + 1e-12
          and strict_s > 0 and strict_p > 0
          and all(m.dropped.sum() == 0 for m in runs.values()))
    gain_s = 100 * (med["L"] - med["L+S"]) / med["L"]
    gain_p = 100 * (med["L+S"] - med["L+S+pack"]) / med["L+S"]
    report(6, ok,
           f"median e2e {med['L']:.3f} -> {med['L+S']:.3f} (+S, {gain_s:.0f}%) "
           f"-> {med['L+S+pack']:.3f} (+packing, {gain_p:.0f}%); strictly "
           f"better on {strict_s}/{strict_p} seconds")


def test_criterion_07_power_elasticity():
    sc = scenarios.shock_scenario()
    shock = sc.notes["shock"]
    noise = WindowNoise(shock["start_s"], shock["end_s"], shock["factor"])
    raw = run(SimConfig(sc.table, sc.sites, sc.workload,
                        objective="min_latency", scheduler="heron",
                        power_noise=noise, horizon_s=900))
    fast = run(SimConfig(sc.table, sc.sites, sc.workload,
                         objective="min_latency", scheduler="heron",
                         power_noise=noise, use_planner_s=True, horizon_s=900))
    window = slice(shock["start_s"], shock["end_s"])
    shocked_arrivals = int(fast.arrivals[window].sum())
    served = int(fast.served[window].sum())
    raw_drops = int(raw.dropped[window].sum())
    ok = raw_drops > 0 and served == shocked_arrivals and fast.dropped.sum() == 0
    report(7, ok,
           f"-20% shock: raw slot-plan dispatch dropped {raw_drops}, fast "
           f"planner served {served}/{shocked_arrivals} in the window")


def test_criterion_08_reconfiguration_budget_sweep():
    sc = scenarios.drift_fleet(n_slots=8)
    table = sc.table
    slot_s = sc.notes["slot_s"]
    loads = {SS: 8.0}

    def chain_objective(pct):
        budgets_of = lambda k: [
            SiteBudget(s.id, s.gpu_count, s.power_trace.value_at(k * slot_s))
            for s in sc.sites]
        old = None
        total = 0.0
        for k in range(8):
            budgets = budgets_of(k)
            r_limit = (None if pct is None or old is None
                       else r_limit_from_pct(pct, budgets))
            plan = solve_planner_l(PlannerInputs(
                table, budgets, loads, old_plan=old, r_limit=r_limit,
                objective="min_power"))
            total += plan.objective_value
            old = plan
        return total

    unlimited = chain_objective(None)
    sweep = {pct: chain_objective(pct) for pct in (10.0, 5.0, 3.0)}
    within = {pct: (v - unlimited) / unlimited for pct, v in sweep.items()}

    # exact monotonicity on matched single solves
    budgets = [SiteBudget(s.id, s.gpu_count, s.power_trace.value_at(4 * slot_s))
               for s in sc.sites]
    old = solve_planner_l(PlannerInputs(
        table, [SiteBudget(s.id, s.gpu_count, s.power_trace.value_at(0))
                for s in sc.sites], loads, objective="min_power"))
    seq = []
    for r_limit in (0, 1, 2, 3, 4, 6, 8, None):
        try:
            plan = solve_planner_l(PlannerInputs(table, budgets, loads,
                                                 old_plan=old, r_limit=r_limit,
                                                 objective="min_power"))
            seq.append(plan.objective_value)
        except PlanInfeasibleError:
            seq.append(float("inf"))
    monotone = all(a >= b - 1e-9 for a, b in zip(seq, seq[1:]))
    ok = monotone and all(v <= 0.05 for v in within.values())
    report(8, ok,
           "objective vs unlimited: "
           + ", ".join(f"{pct:.0f}%: +{100 * v:.2f}%" for pct, v in within.items())
           + f"; single-solve objectives non-increasing in the change budget: {monotone}")


def test_criterion_09_econ_reproduction():
    start = time.perf_counter()
    points = [
        (EconParams(30_000, econ.PRICE_US), 12.4),
        (EconParams(20_000, econ.PRICE_US), 18.6),
        (EconParams(30_000, econ.PRICE_CALIFORNIA), 35.6),
        (EconParams(30_000, econ.PRICE_GERMANY), 27.0),
        (EconParams(20_000, econ.PRICE_GERMANY), 40.5),
        (EconParams(30_000, econ.PRICE_GERMANY_2022), 61.0),
    ]
    opex_errors = [abs(econ.opex_fraction(p, 5.0) - expected)
                   for p, expected in points]
    dc = EconParams(capex_usd=25_000, price_usd_per_kwh=econ.PRICE_US)
    wind = EconParams(capex_usd=25_000, price_usd_per_kwh=econ.PRICE_WIND_PPA)
    breakeven = {x: econ.cp_break_even(x, dc, wind) for x in (5, 15, 20)}
    be_errors = [abs(breakeven[5] - 2), abs(breakeven[15] - 4),
                 abs(breakeven[20] - 5)]
    elapsed = time.perf_counter() - start
    ok = (max(opex_errors) <= 0.5 and max(be_errors) <= 1.0 and elapsed < 1.0)
    report(9, ok,
           f"opex fractions within {max(opex_errors):.2f} pp; break-evens "
           f"{breakeven} within {max(be_errors):.2f} yr; {elapsed * 1000:.0f} ms")


def test_criterion_10_heuristic_conformance():
    ml, ll, lm = RequestClass.ML, RequestClass.LL, RequestClass.LM
    ls, sl = RequestClass.LS, RequestClass.SL
    order_ok = True
    for x, y in itertools.product(CLASSES, CLASSES):
        expected = (y.input_bucket >= x.input_bucket
                    and y.output_bucket >= x.output_bucket)
        if compatible(x, y) != expected:
            order_ok = False
    lut = BenefitLut(benefits={(ls, ll): 0.5, (sl, ll): 0.9})
    moved = pack({ll: 0, ls: 1, sl: 1}, {ll: 1, ls: 1, sl: 1}, lut, "max_shift")
    ok = (compatible(ml, ll) and not compatible(ml, lm) and order_ok
          and len(moved) == 1 and moved[0].child is ls
          and refill_count(ls) == refill_count(sl))
    report(10, ok,
           "compatible(ML,LL)=True, compatible(ML,LM)=False, 81-pair order "
           f"check passed, max_shift moved {moved[0].child.name} before SL")


def test_criterion_11_determinism(tmp_path):
    sc = scenarios.complementarity_pair(horizon_s=7200)
    noise = simulator.RandomNoise(0.05, seed=11)
    outputs = []
    for i in range(2):
        m = run(SimConfig(sc.table, sc.sites, sc.workload,
                          objective="min_power", scheduler="heron",
                          power_noise=noise, seed=11, use_planner_s=True))
        path = tmp_path / f"metrics_{i}.csv"
        m.to_csv(path)
        outputs.append(path.read_bytes())
    ok = outputs[0] == outputs[1]
    report(11, ok, f"two seeded runs produced byte-identical metrics "
                   f"({len(outputs[0])} bytes)")


def test_criterion_12_planner_timing():
    table = tiny_table(freqs=(1.0, 1.4, 2.0), loads=(1.0, 2.0, 4.0))
    ratios = {}
    ok = True
    for n_sites in (4, 8, 16):
        sites = [SiteBudget(f"s{i}", 16, 9000.0) for i in range(n_sites)]
        loads = {SS: 2.0 * n_sites}
        inputs = PlannerInputs(table, sites, loads, objective="min_latency")
        t_l = min(solve_planner_l(inputs).solve_wall_s for _ in range(3))
        plan = solve_planner_l(inputs)
        s_inputs = PlannerSInputs(table, plan.instance_budget(),
                                  {s.site: s.power_w for s in sites}, loads,
                                  objective="min_latency")
        t_s = min(solve_planner_s(s_inputs).plan.solve_wall_s for _ in range(3))
        ratios[n_sites] = t_l / t_s if t_s > 0 else float("inf")
        if not t_s < t_l:
            ok = False
    report(12, ok,
           "fast planner faster at every fleet size; slot/fast wall-time "
           "ratios: " + ", ".join(f"{n} sites: {r:.1f}x"
                                  for n, r in ratios.items()))
