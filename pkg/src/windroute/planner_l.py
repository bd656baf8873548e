"""Coarse-timescale planner: assigns instance counts across sites.

One run covers a single planning slot (default 15 min). The integer
program fixes, per site and class, the tensor-parallel degree, GPU
frequency, and load level of every instance while bounding how many
instance changes are allowed relative to the previous slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import milp
from .core import CLASSES, ProfileKey, ProfileTable, RequestClass, tp_gpus
from .plan import AuditReport, GlobalPlan, PlanEntry

INT_FEAS_TOL = 1e-6


class PlannerError(ValueError):
    """Unservable class or malformed planner input."""


class PlanInfeasibleError(PlannerError):
    """No plan satisfies the constraints; `blame` lists the constraint
    families whose individual removal restores feasibility."""

    def __init__(self, message: str, blame: list[str]):
        super().__init__(message)
        self.blame = blame


@dataclass(frozen=True)
class SiteBudget:
    """One site's resources for the slot being planned."""

    site: str
    gpu_count: int
    power_w: float

    def __post_init__(self) -> None:
        if self.gpu_count <= 0:
            raise PlannerError(f"site {self.site}: gpu_count must be > 0")
        if self.power_w < 0:
            raise PlannerError(f"site {self.site}: negative power budget")


@dataclass
class PlannerInputs:
    table: ProfileTable
    sites: Sequence[SiteBudget]
    load: Mapping[RequestClass, float]
    old_plan: GlobalPlan | None = None
    r_limit: int | None = None  # None = unlimited instance changes
    objective: str = "min_latency"

    def __post_init__(self) -> None:
        if self.objective not in ("min_latency", "min_power"):
            raise PlannerError(f"unknown objective {self.objective!r}")
        if self.r_limit is not None and self.r_limit < 0:
            raise PlannerError("r_limit must be >= 0")
        for cls, value in self.load.items():
            if value < 0:
                raise PlannerError(f"negative load for {cls.name}")


@dataclass
class PlannerLBuild:
    problem: milp.MilpProblem
    candidates: list[tuple[str, ProfileKey]]  # var index -> (site, profile key)
    total_gpus: int


def _cost(table: ProfileTable, key: ProfileKey, objective: str) -> float:
    row = table.rows[key]
    if objective == "min_latency":
        return row.e2e_s
    return row.peak_power_w * table.overhead_multiplier


def candidate_keys(table: ProfileTable, cls: RequestClass) -> list[ProfileKey]:
    """SLO-feasible planning tuples for a class, canonically ordered."""
    rows = table.feasible_for(cls)
    for row in rows:
        assert row.slo_ok, "SLO-violating row reached the planner boundary"
    return sorted((r.key for r in rows), key=lambda k: (k.tp, k.freq, k.load))


def class_cost_floor(costs_and_loads: list[tuple[float, float]],
                     demand: float) -> float | None:
    """Cheapest integer instance mix covering `demand`, ignoring budgets.

    Valid lower bound on any plan's per-class cost (site constraints only
    raise it); computed by a small unbounded-knapsack DP over the load
    grid. Returns None when the loads don't share a usable granularity.
    """
    if demand <= 0 or not costs_and_loads:
        return None
    gran = min(load for _, load in costs_and_loads)
    steps = []
    for cost, load in costs_and_loads:
        units = load / gran
        if abs(units - round(units)) > 1e-9:
            return None
        steps.append((cost, int(round(units))))
    target = math.ceil(demand / gran - 1e-9)
    max_units = max(u for _, u in steps)
    dp = [0.0] + [math.inf] * (target + max_units)
    for k in range(1, len(dp)):
        dp[k] = min(cost + dp[max(0, k - units)] for cost, units in steps)
    return min(dp[target:])


def build_planner_l(inputs: PlannerInputs) -> PlannerLBuild:
    table = inputs.table
    total_gpus = sum(s.gpu_count for s in inputs.sites)
    old_counts = inputs.old_plan.counts() if inputs.old_plan else {}

    problem = milp.MilpProblem()
    candidates: list[tuple[str, ProfileKey]] = []
    per_class: dict[RequestClass, list[ProfileKey]] = {}
    for cls in CLASSES:
        per_class[cls] = candidate_keys(table, cls)
        if inputs.load.get(cls, 0.0) > 0 and not per_class[cls]:
            raise PlannerError(f"class unservable: {cls.name} has no "
                               "SLO-feasible configuration")

    bounded = inputs.r_limit is not None
    x_ids: list[str] = []
    y_ids: list[str] = []
    r_ids: list[str] = []
    for budget in inputs.sites:
        for cls in CLASSES:
            for key in per_class[cls]:
                i = len(candidates)
                candidates.append((budget.site, key))
                ub_x = budget.gpu_count // tp_gpus(key.tp)
                x_ids.append(problem.add_variable(f"X{i}", 0, ub_x))
                y_ids.append(problem.add_variable(f"Y{i}", 0, 1))
                if bounded:
                    old = old_counts.get((key.cls, key.freq, key.tp,
                                          budget.site, key.load), 0)
                    r_ids.append(problem.add_variable(f"R{i}", 0, old + ub_x))

    by_site: dict[str, list[int]] = {s.site: [] for s in inputs.sites}
    by_class: dict[RequestClass, list[int]] = {c: [] for c in CLASSES}
    by_group: dict[tuple[str, RequestClass, int], list[int]] = {}
    for i, (site, key) in enumerate(candidates):
        by_site[site].append(i)
        by_class[key.cls].append(i)
        by_group.setdefault((site, key.cls, key.tp), []).append(i)

    for budget in inputs.sites:
        idx = by_site[budget.site]
        problem.add_constraint(
            [(x_ids[i], float(tp_gpus(candidates[i][1].tp))) for i in idx],
            "<=", budget.gpu_count, name=f"gpu_{budget.site}")
        problem.add_constraint(
            [(x_ids[i], table.power_with_overhead(
                candidates[i][1].cls, candidates[i][1].freq,
                candidates[i][1].tp, candidates[i][1].load)) for i in idx],
            "<=", budget.power_w, name=f"power_{budget.site}")

    for cls in CLASSES:
        demand = inputs.load.get(cls, 0.0)
        if demand > 0:
            problem.add_constraint(
                [(x_ids[i], candidates[i][1].load) for i in by_class[cls]],
                ">=", demand, name=f"capacity_{cls.name}")
            # valid cuts: serving the demand takes at least ceil(demand /
            # max load) whole instances and at least the cost of covering
            # the class alone; without them the relaxation serves demand
            # with instance fractions and the search tree explodes
            max_load = max(candidates[i][1].load for i in by_class[cls])
            problem.add_constraint(
                [(x_ids[i], 1.0) for i in by_class[cls]], ">=",
                math.ceil(demand / max_load - 1e-9),
                name=f"min_count_{cls.name}")
            per_key_cost = {key: _cost(table, key, inputs.objective)
                            for key in per_class[cls]}
            floor = class_cost_floor(
                [(per_key_cost[key], key.load) for key in per_class[cls]], demand)
            if floor is not None and math.isfinite(floor):
                problem.add_constraint(
                    [(x_ids[i], per_key_cost[candidates[i][1]])
                     for i in by_class[cls]],
                    ">=", floor, name=f"cost_floor_{cls.name}")

    for (site, cls, tp), idx in sorted(by_group.items(),
                                       key=lambda kv: (kv[0][0], CLASSES.index(kv[0][1]), kv[0][2])):
        problem.add_constraint([(y_ids[i], 1.0) for i in idx], "<=", 1,
                               name=f"single_cfg_{site}_{cls.name}_t{tp}")
    for i, (site, key) in enumerate(candidates):
        # X <= sum(N_s) * Y links the activity flag to the count; the
        # per-variable bound is a redundant-for-integers tightening that
        # keeps the LP relaxation from leaving the flags nearly free
        ub_x = problem.variables[problem.var_index(x_ids[i])].upper
        big_m = min(float(total_gpus), ub_x if ub_x > 0 else 1.0)
        problem.add_constraint([(x_ids[i], 1.0), (y_ids[i], -big_m)],
                               "<=", 0, name=f"link_{i}")

    if bounded:
        for i, (site, key) in enumerate(candidates):
            old = old_counts.get((key.cls, key.freq, key.tp, site, key.load), 0)
            problem.add_constraint([(r_ids[i], 1.0), (x_ids[i], 1.0)],
                                   ">=", old, name=f"reconf_dn_{i}")
            problem.add_constraint([(r_ids[i], 1.0), (x_ids[i], -1.0)],
                                   ">=", -old, name=f"reconf_up_{i}")
        problem.add_constraint([(r, 1.0) for r in r_ids], "<=",
                               inputs.r_limit, name="reconf_budget")

    problem.set_objective(
        [(x_ids[i], _cost(table, key, inputs.objective))
         for i, (_, key) in enumerate(candidates)])
    return PlannerLBuild(problem, candidates, total_gpus)


def _extract_plan(build: PlannerLBuild, solution: milp.MilpSolution,
                  objective: str, planner: str = "L") -> GlobalPlan:
    entries = []
    for i, (site, key) in enumerate(build.candidates):
        count = int(round(solution.assignment.get(f"X{i}", 0.0)))
        if count > 0:
            entries.append(PlanEntry(key.cls, key.freq, key.tp, site,
                                     key.load, count))
    return GlobalPlan.from_entries(
        entries, objective=objective, objective_value=solution.objective_value,
        planner=planner, solve_wall_s=solution.stats.wall_time_s,
        milp_nodes=solution.stats.nodes)


def _blame_infeasibility(inputs: PlannerInputs,
                         limits: milp.SolveLimits | None) -> list[str]:
    blame = []
    probes = {
        "power": PlannerInputs(inputs.table,
                               [SiteBudget(s.site, s.gpu_count, 1e15)
                                for s in inputs.sites],
                               inputs.load, inputs.old_plan, inputs.r_limit,
                               inputs.objective),
        "gpu": PlannerInputs(inputs.table,
                             [SiteBudget(s.site, 10 ** 9, s.power_w)
                              for s in inputs.sites],
                             inputs.load, inputs.old_plan, inputs.r_limit,
                             inputs.objective),
        "reconfiguration": PlannerInputs(inputs.table, inputs.sites, inputs.load,
                                         inputs.old_plan, None, inputs.objective),
    }
    for family, probe in probes.items():
        if family == "reconfiguration" and inputs.r_limit is None:
            continue
        solution = milp.solve(build_planner_l(probe).problem, limits)
        if solution.status == "optimal":
            blame.append(family)
    return blame


def solve_planner_l(inputs: PlannerInputs,
                    limits: milp.SolveLimits | None = None) -> GlobalPlan:
    """Globally optimal slot plan; raises PlanInfeasibleError with blame."""
    build = build_planner_l(inputs)
    solution = milp.solve(build.problem, limits)
    if solution.status == "infeasible":
        blame = _blame_infeasibility(inputs, limits)
        raise PlanInfeasibleError(
            "no feasible plan"
            + (f" (binding: {', '.join(blame)})" if blame else ""), blame)
    if solution.status == "limit_reached":
        raise PlannerError("solver limits reached before proving optimality")
    plan = _extract_plan(build, solution, inputs.objective)
    report = audit_plan(plan, inputs)
    if not report.ok:
        raise PlannerError(f"planner produced an invalid plan: {report.violations}")
    return plan


def evaluate_plan_cost(plan: GlobalPlan, table: ProfileTable, objective: str) -> float:
    """Cost of an existing plan under either objective (for cross-checks)."""
    return sum(e.instances * _cost(table, ProfileKey(e.cls, e.freq, e.tp, e.load),
                                   objective)
               for e in plan.entries)


def audit_plan(plan: GlobalPlan, inputs: PlannerInputs,
               tol: float = INT_FEAS_TOL) -> AuditReport:
    """Re-evaluate the slot constraints from raw inputs, without the MILP."""
    report = AuditReport()
    table = inputs.table
    budgets = {s.site: s for s in inputs.sites}

    for e in plan.entries:
        if e.instances < 0 or e.instances != int(e.instances):
            report.add(f"count: {e} is not a non-negative integer")
        if e.site not in budgets:
            report.add(f"site: {e.site} not in inputs")
        row = table.lookup(ProfileKey(e.cls, e.freq, e.tp, e.load))
        if row is None:
            report.add(f"unknown configuration {e}")
        elif not row.slo_ok:
            report.add(f"SLO-violating configuration in plan: {e}")

    gpus = plan.gpus_per_site()
    for site, used in gpus.items():
        if site in budgets and used > budgets[site].gpu_count + tol:
            report.add(f"gpu budget: site {site} uses {used} "
                       f"> {budgets[site].gpu_count}")
    power = plan.power_per_site(table)
    for site, used in power.items():
        if site in budgets and used > budgets[site].power_w + tol:
            report.add(f"power budget: site {site} draws {used:.3f} W "
                       f"> {budgets[site].power_w:.3f} W")
    capacity = plan.capacity_per_class()
    for cls in CLASSES:
        demand = inputs.load.get(cls, 0.0)
        if capacity[cls] < demand - tol:
            report.add(f"serving capacity: class {cls.name} has "
                       f"{capacity[cls]} rps < load {demand} rps")
    seen: dict[tuple[str, RequestClass, int], tuple[float, float]] = {}
    for e in plan.entries:
        cfg = (e.freq, e.load)
        prior = seen.setdefault((e.site, e.cls, e.tp), cfg)
        if prior != cfg:
            report.add(f"single configuration: {e.site}/{e.cls.name}/tp{e.tp} "
                       f"has both {prior} and {cfg}")
    if inputs.r_limit is not None:
        changes = plan.reconfigurations(inputs.old_plan)
        if changes > inputs.r_limit + tol:
            report.add(f"reconfigurations: {changes} > limit {inputs.r_limit}")
    return report


def r_limit_from_pct(pct: float, sites: Sequence[SiteBudget]) -> int:
    """Convert a percentage-of-fleet budget to an absolute instance count.

    Uses the largest tensor-parallel degree (8 GPUs per instance) so the
    bound is expressed in instances.
    """
    total = sum(s.gpu_count for s in sites)
    return math.ceil(pct / 100.0 * total / 8.0)


def scaling_report(site_counts: Sequence[int], table: ProfileTable,
                   load_per_site: Mapping[RequestClass, float],
                   gpu_per_site: int = 16, power_per_site: float = 4.0e4,
                   objective: str = "min_latency") -> list[dict]:
    """Wall-time trend of the slot planner as the fleet grows.

    Demand scales with the site count so every instance plans a
    proportionally sized problem.
    """
    out = []
    for n in site_counts:
        sites = [SiteBudget(f"s{i}", gpu_per_site, power_per_site)
                 for i in range(n)]
        load = {c: v * n for c, v in load_per_site.items()}
        plan = solve_planner_l(PlannerInputs(table, sites, load,
                                             objective=objective))
        out.append({"sites": n, "wall_s": plan.solve_wall_s,
                    "nodes": plan.milp_nodes,
                    "objective_value": plan.objective_value})
    return out
