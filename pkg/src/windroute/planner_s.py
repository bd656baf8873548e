"""Fast-cadence planner: re-picks frequency and load under a fixed budget.

Runs every few seconds against live power and load. Tensor-parallel
assignments from the slot planner are never touched; only the (freq,
load) pair of each (site, class, tp) group may move. When live power
cannot serve the full load the solver degrades gracefully: it first
maximizes served load, then optimizes the objective at that service
level, reporting the per-class shortfall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from . import milp
from .core import CLASSES, ProfileKey, ProfileTable, RequestClass
from .plan import GlobalPlan, GroupKey, PlanEntry
from .planner_l import PlannerError, candidate_keys

SHORTFALL_TOL = 1e-6


@dataclass
class PlannerSInputs:
    table: ProfileTable
    budget: Mapping[GroupKey, int]  # instances per (site, class, tp)
    live_power: Mapping[str, float]  # watts per site
    live_load: Mapping[RequestClass, float]
    objective: str = "min_latency"
    single_config: bool = True  # keep one (freq, load) per group

    def __post_init__(self) -> None:
        if self.objective not in ("min_latency", "min_power"):
            raise PlannerError(f"unknown objective {self.objective!r}")
        for key, count in self.budget.items():
            if count < 0:
                raise PlannerError(f"negative budget for {key}")


@dataclass
class PlannerSResult:
    plan: GlobalPlan
    shortfall: dict[RequestClass, float] = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return not self.shortfall


def _cost(table: ProfileTable, key: ProfileKey, objective: str) -> float:
    row = table.rows[key]
    if objective == "min_latency":
        return row.e2e_s
    return row.peak_power_w * table.overhead_multiplier


def _build(inputs: PlannerSInputs, with_shortfall: bool):
    table = inputs.table
    problem = milp.MilpProblem()
    candidates: list[tuple[str, ProfileKey]] = []
    z_ids: list[str] = []
    w_ids: list[str] = []
    group_of: list[GroupKey] = []

    groups = sorted((k for k, v in inputs.budget.items() if v > 0),
                    key=lambda k: (k[0], CLASSES.index(k[1]), k[2]))
    total_budget = sum(inputs.budget[g] for g in groups)
    for site, cls, tp in groups:
        for key in candidate_keys(table, cls):
            if key.tp != tp:
                continue
            i = len(candidates)
            candidates.append((site, key))
            group_of.append((site, cls, tp))
            z_ids.append(problem.add_variable(f"Z{i}", 0, inputs.budget[(site, cls, tp)]))
            if inputs.single_config:
                w_ids.append(problem.add_variable(f"W{i}", 0, 1))

    by_site: dict[str, list[int]] = {}
    by_class: dict[RequestClass, list[int]] = {c: [] for c in CLASSES}
    by_group: dict[GroupKey, list[int]] = {}
    for i, (site, key) in enumerate(candidates):
        by_site.setdefault(site, []).append(i)
        by_class[key.cls].append(i)
        by_group.setdefault(group_of[i], []).append(i)

    for site in sorted(by_site):
        problem.add_constraint(
            [(z_ids[i], table.power_with_overhead(
                candidates[i][1].cls, candidates[i][1].freq,
                candidates[i][1].tp, candidates[i][1].load))
             for i in by_site[site]],
            "<=", inputs.live_power.get(site, 0.0), name=f"power_{site}")

    d_ids: dict[RequestClass, str] = {}
    for cls in CLASSES:
        demand = inputs.live_load.get(cls, 0.0)
        if demand <= 0:
            continue
        terms = [(z_ids[i], candidates[i][1].load) for i in by_class[cls]]
        if with_shortfall:
            d_ids[cls] = problem.add_variable(f"D_{cls.name}", 0, demand,
                                              integer=False)
            terms.append((d_ids[cls], 1.0))
        problem.add_constraint(terms, ">=", demand, name=f"capacity_{cls.name}")
        if not with_shortfall and by_class[cls]:
            # same minimum-count and cost-floor cuts as the slot planner
            max_load = max(candidates[i][1].load for i in by_class[cls])
            problem.add_constraint(
                [(z_ids[i], 1.0) for i in by_class[cls]], ">=",
                math.ceil(demand / max_load - 1e-9), name=f"min_count_{cls.name}")
            costs = {i: _cost(table, candidates[i][1], inputs.objective)
                     for i in by_class[cls]}
            floor = class_cost_floor(
                [(costs[i], candidates[i][1].load) for i in by_class[cls]],
                demand)
            if floor is not None and math.isfinite(floor):
                problem.add_constraint(
                    [(z_ids[i], costs[i]) for i in by_class[cls]], ">=",
                    floor, name=f"cost_floor_{cls.name}")

    for group in groups:
        idx = by_group.get(group, [])
        if idx:
            problem.add_constraint([(z_ids[i], 1.0) for i in idx], "<=",
                                   inputs.budget[group],
                                   name=f"budget_{group[0]}_{group[1].name}_t{group[2]}")
        if inputs.single_config and idx:
            problem.add_constraint([(w_ids[i], 1.0) for i in idx], "<=", 1,
                                   name=f"single_cfg_{group[0]}_{group[1].name}_t{group[2]}")
    if inputs.single_config:
        for i in range(len(candidates)):
            cap = max(inputs.budget[group_of[i]], 1)
            problem.add_constraint([(z_ids[i], 1.0), (w_ids[i], -float(cap))],
                                   "<=", 0, name=f"link_{i}")
    return problem, candidates, d_ids


def _extract(inputs: PlannerSInputs, candidates, solution: milp.MilpSolution
             ) -> GlobalPlan:
    entries = []
    for i, (site, key) in enumerate(candidates):
        count = int(round(solution.assignment.get(f"Z{i}", 0.0)))
        if count > 0:
            entries.append(PlanEntry(key.cls, key.freq, key.tp, site, key.load,
                                     count))
    objective_value = sum(
        e.instances * _cost(inputs.table,
                            ProfileKey(e.cls, e.freq, e.tp, e.load),
                            inputs.objective)
        for e in entries)
    return GlobalPlan.from_entries(
        entries, objective=inputs.objective, objective_value=objective_value,
        planner="S", solve_wall_s=solution.stats.wall_time_s,
        milp_nodes=solution.stats.nodes)


def _objective_terms(inputs: PlannerSInputs, candidates) -> list[tuple[str, float]]:
    return [(f"Z{i}", _cost(inputs.table, key, inputs.objective))
            for i, (_, key) in enumerate(candidates)]


def solve_planner_s(inputs: PlannerSInputs,
                    limits: milp.SolveLimits | None = None) -> PlannerSResult:
    problem, candidates, _ = _build(inputs, with_shortfall=False)
    problem.set_objective(_objective_terms(inputs, candidates))
    solution = milp.solve(problem, limits)
    if solution.status == "optimal":
        return PlannerSResult(_extract(inputs, candidates, solution))
    if solution.status == "limit_reached":
        raise PlannerError("solver limits reached before proving optimality")

    # live power cannot serve everything: maximize served load first, then
    # re-optimize the objective at that service level
    problem, candidates, d_ids = _build(inputs, with_shortfall=True)
    problem.set_objective([(d, 1.0) for d in d_ids.values()])
    phase1 = milp.solve(problem, limits)
    if phase1.status != "optimal":
        raise PlannerError(f"shortfall phase failed: {phase1.status}")
    total_short = phase1.objective_value

    problem, candidates, d_ids = _build(inputs, with_shortfall=True)
    problem.add_constraint([(d, 1.0) for d in d_ids.values()], "<=",
                           total_short + SHORTFALL_TOL, name="shortfall_cap")
    problem.set_objective(_objective_terms(inputs, candidates))
    phase2 = milp.solve(problem, limits)
    if phase2.status != "optimal":
        raise PlannerError(f"best-effort phase failed: {phase2.status}")
    shortfall = {cls: phase2.assignment[d]
                 for cls, d in d_ids.items()
                 if phase2.assignment[d] > SHORTFALL_TOL}
    return PlannerSResult(_extract(inputs, candidates, phase2), shortfall)


def wrr_weights(plan: GlobalPlan) -> dict[RequestClass, list[tuple[PlanEntry, float]]]:
    """Dispatch weights per class, proportional to group serving capacity."""
    weights: dict[RequestClass, list[tuple[PlanEntry, float]]] = {}
    for cls in CLASSES:
        entries = [e for e in plan.entries if e.cls is cls]
        total = sum(e.instances * e.load for e in entries)
        if total <= 0:
            weights[cls] = []
            continue
        weights[cls] = [(e, e.instances * e.load / total) for e in entries]
    return weights
