"""Deterministic trace-driven simulation of the full routing stack.

Timeline: slot planning (default every 900 s), fast re-planning (every
5 s), and per-second dispatch with optional packing. Power accounting
charges every committed instance group its peak draw times the box
overhead multiplier, capped by live power; groups are switched off when
live power falls short.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (CLASSES, ProfileKey, ProfileTable, RequestClass, Site,
                   TraceError, WorkloadTrace)
from .plan import GlobalPlan, GroupKey, InstanceGroup
from .planner_l import (PlannerInputs, SiteBudget, audit_plan, r_limit_from_pct,
                        solve_planner_l)
from .planner_s import PlannerSInputs, solve_planner_s
from .scheduler import (BenefitLut, ConfiguratorState, DispatchState, Drop,
                        build_benefit_lut, configurator_apply, pack)
from .baselines import greedy_knee_min_latency, local_load_share, site_local_min_energy

SCHEDULERS = ("heron", "wrr-minenergy", "greedy-knee")
PACKING_MODES = ("off", "max_benefit", "max_shift")
UNROUTED = "(unrouted)"


@dataclass(frozen=True)
class WindowNoise:
    """Multiplicative live-power factor inside [start_s, end_s)."""

    start_s: float
    end_s: float
    factor: float
    base: float = 1.0

    def at(self, t_s: float) -> float:
        return self.factor if self.start_s <= t_s < self.end_s else self.base


@dataclass(frozen=True)
class RandomNoise:
    """Seeded multiplicative noise, constant within each period."""

    sigma: float
    seed: int
    period_s: int = 5
    horizon_s: int = 7 * 86400

    def __post_init__(self) -> None:
        n = self.horizon_s // self.period_s + 1
        rng = np.random.default_rng(self.seed)
        factors = np.clip(rng.normal(1.0, self.sigma, n), 0.0, None)
        object.__setattr__(self, "_factors", factors)

    def at(self, t_s: float) -> float:
        idx = min(int(t_s) // self.period_s, len(self._factors) - 1)
        return float(self._factors[idx])


NoiseModel = WindowNoise | RandomNoise


@dataclass
class SimConfig:
    table: ProfileTable
    sites: Sequence[Site]
    workload: WorkloadTrace
    objective: str = "min_latency"
    scheduler: str = "heron"
    use_planner_s: bool = False
    packing: str = "off"
    planner_l_period_s: int = 900
    planner_s_period_s: int = 5
    dispatch_period_s: int = 1
    packing_window_s: int = 1  # how far ahead packing anticipates arrivals
    r_limit_pct: float | None = None
    power_noise: NoiseModel | None = None
    tp_reconfig_delay_s: float = 30.0
    headroom: float = 1.0
    seed: int = 0
    horizon_s: int | None = None

    def __post_init__(self) -> None:
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.packing not in PACKING_MODES:
            raise ValueError(f"unknown packing mode {self.packing!r}")
        if self.planner_l_period_s % self.planner_s_period_s:
            raise ValueError("slot period must be a multiple of the fast-planner period")
        if self.planner_s_period_s % self.dispatch_period_s:
            raise ValueError("fast-planner period must be a multiple of the dispatch period")


@dataclass
class SlotRecord:
    t0: int
    planner: str
    objective_value: float
    reconfigurations: int
    wall_s: float
    planner_s_wall_s: float = 0.0
    planner_s_solves: int = 0
    shortfall_rps: float = 0.0


@dataclass
class MetricsTimeline:
    seconds: int
    site_ids: list[str]
    arrivals: np.ndarray
    served: np.ndarray
    dropped: np.ndarray
    e2e_sum: np.ndarray
    slo_violations: np.ndarray
    site_served: dict[str, np.ndarray]
    site_dropped: dict[str, np.ndarray]
    site_e2e_sum: dict[str, np.ndarray]
    site_power: dict[str, np.ndarray]
    unrouted_dropped: np.ndarray
    slots: list[SlotRecord] = field(default_factory=list)
    # (t_s, child class, parent class, moved rps, strategy)
    transitions: list[tuple[int, str, str, int, str]] = field(default_factory=list)

    def mean_e2e_per_sec(self) -> np.ndarray:
        """Per-second mean latency of served requests (NaN when idle)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.served > 0, self.e2e_sum / self.served, np.nan)

    def goodput(self) -> np.ndarray:
        return self.served

    def summary(self) -> dict:
        mean_e2e = self.mean_e2e_per_sec()
        active = mean_e2e[~np.isnan(mean_e2e)]
        pct = {f"p{p}": float(np.percentile(active, p)) if active.size else None
               for p in (50, 90, 95, 99)}
        return {
            "seconds": int(self.seconds),
            "arrivals": int(self.arrivals.sum()),
            "served": int(self.served.sum()),
            "dropped": int(self.dropped.sum()),
            "drop_rate": float(self.dropped.sum() / max(1, self.arrivals.sum())),
            "slo_violations": int(self.slo_violations.sum()),
            "mean_e2e_s": float(self.e2e_sum.sum() / self.served.sum())
            if self.served.sum() else None,
            "e2e_percentiles": pct,
            "mean_power_w": {s: float(p.mean()) for s, p in self.site_power.items()},
            "packing_transitions": len(self.transitions),
            "slots": [
                {"t0": r.t0, "planner": r.planner,
                 "objective_value": r.objective_value,
                 "reconfigurations": r.reconfigurations,
                 "planner_wall_s": r.wall_s,
                 "planner_s_wall_s": r.planner_s_wall_s,
                 "planner_s_solves": r.planner_s_solves,
                 "shortfall_rps": r.shortfall_rps}
                for r in self.slots
            ],
        }

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_s", "site", "served", "dropped", "mean_e2e_s",
                             "power_w"])
            emit_unrouted = bool(self.unrouted_dropped.sum())
            for t in range(self.seconds):
                for site in self.site_ids:
                    served = int(self.site_served[site][t])
                    mean = (self.site_e2e_sum[site][t] / served) if served else 0.0
                    writer.writerow([t, site, served,
                                     int(self.site_dropped[site][t]),
                                     f"{mean:.6f}",
                                     f"{self.site_power[site][t]:.3f}"])
                if emit_unrouted:
                    writer.writerow([t, UNROUTED, 0,
                                     int(self.unrouted_dropped[t]), "0.000000",
                                     "0.000"])

    def save_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True))

    def transitions_to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_s", "child_class", "parent_class", "moved_rps",
                             "strategy"])
            writer.writerows(self.transitions)


def _forecast_power(site: Site, t0: int, end_s: int) -> float:
    """Slot power budget: the minimum trace value across [t0, end_s)."""
    values = [site.power_trace.value_at(t)
              for t in range(t0, end_s, site.power_trace.granularity_s)]
    values.append(site.power_trace.value_at(end_s - 1))
    return min(values)


def _per_second_class_counts(workload: WorkloadTrace, horizon: int
                             ) -> dict[RequestClass, np.ndarray]:
    counts = {c: np.zeros(horizon, dtype=int) for c in CLASSES}
    for req in workload.requests:
        sec = req.arrival_ms // 1000
        if sec < horizon:
            counts[req.cls][sec] += 1
    return counts


class _PowerCap:
    """Per-second group deactivation when live power falls short."""

    def __init__(self, table: ProfileTable, policy: str):
        self.table = table
        self.policy = policy  # "value" (keep high-capacity) | "cheap" (keep low-power)

    def group_watts(self, g: InstanceGroup) -> float:
        return g.instances * self.table.power_with_overhead(g.cls, g.freq, g.tp, g.load)

    def deactivate(self, groups: list[InstanceGroup], live_w: float
                   ) -> set[GroupKey]:
        total = sum(self.group_watts(g) for g in groups)
        if total <= live_w + 1e-9:
            return set()
        off: set[GroupKey] = set()
        if self.policy == "cheap":
            # keep groups ascending by power while they fit
            kept = 0.0
            for g in sorted(groups, key=lambda g: (self.group_watts(g),
                                                   CLASSES.index(g.cls))):
                if kept + self.group_watts(g) <= live_w + 1e-9:
                    kept += self.group_watts(g)
                else:
                    off.add(g.key)
            return off
        # drop the least-valuable serving capacity first
        order = sorted(groups, key=lambda g: (g.capacity_rps,
                                              -self.group_watts(g),
                                              CLASSES.index(g.cls), g.site))
        for g in order:
            if total <= live_w + 1e-9:
                break
            off.add(g.key)
            total -= self.group_watts(g)
        return off


def run(config: SimConfig) -> MetricsTimeline:
    """Simulate the configured horizon; deterministic for a fixed config."""
    table = config.table
    horizon = config.horizon_s or config.workload.horizon_s
    if horizon <= 0:
        raise TraceError("nothing to simulate: empty horizon")
    for site in config.sites:
        if site.power_trace.horizon_s < horizon:
            raise TraceError(
                f"power trace gap: site {site.id} covers "
                f"[0, {site.power_trace.horizon_s})s < horizon {horizon}s")

    site_ids = [s.id for s in config.sites]
    counts = _per_second_class_counts(config.workload, horizon)
    requests_by_sec: list[list] = [[] for _ in range(horizon)]
    for req in config.workload.requests:
        sec = req.arrival_ms // 1000
        if sec < horizon:
            requests_by_sec[sec].append(req)

    noise = config.power_noise
    live_factor: Callable[[float], float] = noise.at if noise else (lambda t: 1.0)
    heron = config.scheduler == "heron"
    cap = _PowerCap(table, "value" if heron else "cheap")

    m = MetricsTimeline(
        seconds=horizon, site_ids=site_ids,
        arrivals=np.zeros(horizon, dtype=int),
        served=np.zeros(horizon, dtype=int),
        dropped=np.zeros(horizon, dtype=int),
        e2e_sum=np.zeros(horizon),
        slo_violations=np.zeros(horizon, dtype=int),
        site_served={s: np.zeros(horizon, dtype=int) for s in site_ids},
        site_dropped={s: np.zeros(horizon, dtype=int) for s in site_ids},
        site_e2e_sum={s: np.zeros(horizon) for s in site_ids},
        site_power={s: np.zeros(horizon) for s in site_ids},
        unrouted_dropped=np.zeros(horizon, dtype=int))

    rtt = {s.id: s.rtt_adder_s for s in config.sites}
    slot_plan: GlobalPlan | None = None
    active_plan: GlobalPlan | None = None
    configurator = ConfiguratorState()
    dispatch: DispatchState | None = None
    site_dispatch: dict[str, DispatchState] = {}
    site_wrr: dict[str, float] = {s.id: 0.0 for s in config.sites}
    lut_cache: tuple[tuple, BenefitLut] | None = None
    slot_record: SlotRecord | None = None
    last_s_key = None

    def rebuild_dispatch(plan: GlobalPlan) -> None:
        nonlocal dispatch, site_dispatch
        if heron:
            dispatch = DispatchState(plan, configurator)
        else:
            site_dispatch = {}
            for sid in site_ids:
                sub = GlobalPlan.from_entries(
                    [e for e in plan.entries if e.site == sid],
                    objective=plan.objective, planner=plan.planner)
                site_dispatch[sid] = DispatchState(sub, configurator)

    def benefit_lut(plan: GlobalPlan) -> BenefitLut:
        nonlocal lut_cache
        key = plan.entries
        if lut_cache is None or lut_cache[0] != key:
            lut_cache = (key, build_benefit_lut(plan, table))
        return lut_cache[1]

    for t in range(horizon):
        # ---- slot planning -------------------------------------------------
        if t % config.planner_l_period_s == 0:
            t0 = t
            end = min(t0 + config.planner_l_period_s, horizon)
            loads = {c: float(counts[c][t0:end].max()) * config.headroom
                     for c in CLASSES}
            budgets = [SiteBudget(s.id, s.gpu_count, _forecast_power(s, t0, end))
                       for s in config.sites]
            if heron:
                # change budget applies to transitions, not the bootstrap slot
                r_limit = (None if config.r_limit_pct is None or slot_plan is None
                           else r_limit_from_pct(config.r_limit_pct, budgets))
                inputs = PlannerInputs(table, budgets, loads, old_plan=slot_plan,
                                       r_limit=r_limit, objective=config.objective)
                new_plan = solve_planner_l(inputs)
                report = audit_plan(new_plan, inputs)
                if not report.ok:
                    raise TraceError(f"slot plan failed audit: {report.violations}")
                if slot_plan is not None:
                    configurator = configurator_apply(
                        slot_plan, new_plan, t, config.tp_reconfig_delay_s,
                        configurator)
                reconf = new_plan.reconfigurations(slot_plan)
                slot_plan = new_plan
            else:
                entries = []
                value = 0.0
                for budget in budgets:
                    share = local_load_share(loads, budget, budgets)
                    if config.scheduler == "wrr-minenergy":
                        local = site_local_min_energy(budget, share, table)
                    else:
                        local = greedy_knee_min_latency(budget, share, table)
                    entries.extend(local.entries)
                    value += local.objective_value
                slot_plan = GlobalPlan.from_entries(
                    entries, objective="baseline", objective_value=value,
                    planner=config.scheduler)
                reconf = 0
            active_plan = slot_plan
            rebuild_dispatch(active_plan)
            last_s_key = None
            slot_record = SlotRecord(t0, slot_plan.planner,
                                     slot_plan.objective_value, reconf,
                                     slot_plan.solve_wall_s)
            m.slots.append(slot_record)

        # ---- fast re-planning ---------------------------------------------
        if heron and config.use_planner_s and t % config.planner_s_period_s == 0:
            live_power = {s.id: s.power_trace.value_at(t) * live_factor(t)
                          for s in config.sites}
            s_window_end = min(t + config.planner_s_period_s, horizon)
            live_load = {c: float(counts[c][t:s_window_end].max())
                         for c in CLASSES}
            budget = configurator.active_keys_filter(
                slot_plan.instance_budget(), t)
            s_key = (tuple(sorted(live_power.items())),
                     tuple(sorted((c.name, v) for c, v in live_load.items())),
                     tuple(sorted((k[0], k[1].name, k[2], v)
                                  for k, v in budget.items())))
            if s_key != last_s_key:
                result = solve_planner_s(PlannerSInputs(
                    table, budget, live_power, live_load,
                    objective=config.objective))
                last_s_key = s_key
                active_plan = result.plan
                rebuild_dispatch(active_plan)
                if slot_record is not None:
                    slot_record.planner_s_wall_s += result.plan.solve_wall_s
                    slot_record.planner_s_solves += 1
                    slot_record.shortfall_rps += sum(result.shortfall.values())

        # ---- per-second dispatch -------------------------------------------
        live_power = {s.id: s.power_trace.value_at(t) * live_factor(t)
                      for s in config.sites}
        groups = [g for g in active_plan.groups()
                  if configurator.active(g.key, t)]
        deactivated: set[GroupKey] = set()
        for sid in site_ids:
            site_groups = [g for g in groups if g.site == sid]
            deactivated |= cap.deactivate(site_groups, live_power[sid])
            m.site_power[sid][t] = sum(cap.group_watts(g) for g in site_groups
                                       if g.key not in deactivated)

        arrivals = requests_by_sec[t]
        m.arrivals[t] = len(arrivals)
        if heron:
            dispatch.begin_second(t, deactivated)
        else:
            for sid in site_ids:
                site_dispatch[sid].begin_second(t, deactivated)

        serve_as: dict[RequestClass, list[RequestClass]] = {}
        if heron and config.packing != "off" and arrivals:
            provisioned = active_plan.capacity_per_class()
            w_end = min(t + config.packing_window_s, horizon)
            incoming = {c: float(counts[c][t:w_end].max()) for c in CLASSES}
            lut = benefit_lut(active_plan)
            for tr in pack(incoming, provisioned, lut, config.packing):
                serve_as.setdefault(tr.child, []).extend(
                    [tr.parent] * tr.moved_rps)
                m.transitions.append((t, tr.child.name, tr.parent.name,
                                      tr.moved_rps, config.packing))

        for req in arrivals:
            serving_cls = req.cls
            redirects = serve_as.get(req.cls)
            if redirects:
                serving_cls = redirects.pop()
            if heron:
                outcome = dispatch.dispatch(serving_cls)
                if isinstance(outcome, Drop) and serving_cls is not req.cls:
                    outcome = dispatch.dispatch(req.cls)  # fall back to own class
            else:
                sid = _pick_site_wrr(site_wrr, config.sites)
                outcome = site_dispatch[sid].dispatch(serving_cls)
            if isinstance(outcome, Drop):
                m.dropped[t] += 1
                if heron:
                    m.unrouted_dropped[t] += 1
                else:
                    m.site_dropped[sid][t] += 1
                continue
            group = outcome
            row = table.lookup(ProfileKey(req.cls, group.freq, group.tp, group.load))
            if row is None:
                row = table.lookup(ProfileKey(group.cls, group.freq, group.tp,
                                              group.load))
            e2e = row.e2e_s + rtt[group.site]
            m.served[t] += 1
            m.e2e_sum[t] += e2e
            m.site_served[group.site][t] += 1
            m.site_e2e_sum[group.site][t] += e2e
            limits = table.slo.get(req.cls)
            if limits and (row.ttft_s > limits[0] or row.tbt_s > limits[1]):
                m.slo_violations[t] += 1

    assert int((m.arrivals - m.served - m.dropped).sum()) == 0
    return m


def _pick_site_wrr(state: dict[str, float], sites: Sequence[Site]) -> str:
    for site in sites:
        state[site.id] += site.gpu_count
    winner = max(sites, key=lambda s: (state[s.id], -list(sites).index(s)))
    state[winner.id] -= sum(s.gpu_count for s in sites)
    return winner.id


# --------------------------------------------------------------------------
# Run comparisons
# --------------------------------------------------------------------------

@dataclass
class GoodputReport:
    ratios: np.ndarray  # per second; inf where the baseline alone served 0
    capped_seconds: int

    def finite(self) -> np.ndarray:
        return self.ratios[np.isfinite(self.ratios)]

    def summary(self) -> dict:
        finite = self.finite()
        return {
            "fraction_at_1": float(np.mean(np.isclose(self.ratios, 1.0))),
            "max_finite_ratio": float(finite.max()) if finite.size else None,
            "capped_seconds": int(self.capped_seconds),
            "percentiles": {f"p{p}": float(np.percentile(finite, p))
                            for p in (50, 80, 90, 95, 99)} if finite.size else {},
        }


def goodput_factor(metrics_a: MetricsTimeline, metrics_b: MetricsTimeline
                   ) -> GoodputReport:
    """Per-second goodput ratio of run A over run B (typically baseline B)."""
    if metrics_a.seconds != metrics_b.seconds:
        raise ValueError("mismatched horizons")
    a = metrics_a.served.astype(float)
    b = metrics_b.served.astype(float)
    ratios = np.ones(a.size)
    both = b > 0
    ratios[both] = a[both] / b[both]
    capped = (b == 0) & (a > 0)
    ratios[capped] = np.inf
    return GoodputReport(ratios, int(capped.sum()))


def slot_means(metrics: MetricsTimeline, slot_s: int = 900
               ) -> list[tuple[float, float] | None]:
    """(mean e2e, mean total power) per slot; None for idle slots."""
    out: list[tuple[float, float] | None] = []
    n_slots = math.ceil(metrics.seconds / slot_s)
    total_power = np.sum([metrics.site_power[s] for s in metrics.site_ids], axis=0)
    for k in range(n_slots):
        lo, hi = k * slot_s, min((k + 1) * slot_s, metrics.seconds)
        served = metrics.served[lo:hi].sum()
        if served == 0:
            out.append(None)
            continue
        out.append((float(metrics.e2e_sum[lo:hi].sum() / served),
                    float(total_power[lo:hi].mean())))
    return out


@dataclass
class TradeoffCurve:
    coeffs: tuple[float, float, float, float]  # cubic, highest degree first
    points: list[tuple[float, float]]

    def sample(self, x: float) -> float:
        c3, c2, c1, c0 = self.coeffs
        return ((c3 * x + c2) * x + c1) * x + c0

    def to_csv(self, path: str | Path, n: int = 50) -> None:
        xs = [p[0] for p in self.points]
        lo, hi = min(xs), max(xs)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["latency_improvement_pct", "power_inflation_pct"])
            for i in range(n + 1):
                x = lo + (hi - lo) * i / n
                writer.writerow([f"{x:.4f}", f"{self.sample(x):.4f}"])


def tradeoff_points(latency_run: MetricsTimeline, power_run: MetricsTimeline,
                    slot_s: int = 900) -> list[tuple[float, float]]:
    """Per-slot (%-latency-improvement, %-power-inflation) of the
    min-latency run relative to the min-power run."""
    a = slot_means(latency_run, slot_s)
    b = slot_means(power_run, slot_s)
    points = []
    for pair_a, pair_b in zip(a, b):
        if pair_a is None or pair_b is None:
            continue
        (lat_a, pow_a), (lat_b, pow_b) = pair_a, pair_b
        if lat_b <= 0 or pow_b <= 0:
            continue
        points.append((100.0 * (lat_b - lat_a) / lat_b,
                       100.0 * (pow_a - pow_b) / pow_b))
    return points


def tradeoff_curve(points: Sequence[tuple[float, float]]) -> TradeoffCurve:
    """Least-squares cubic through (%-latency-improvement, %-power-inflation)."""
    if len(points) < 4:
        raise ValueError("need at least 4 paired runs")
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    if float(np.ptp(ys)) < 1e-12:
        return TradeoffCurve((0.0, 0.0, 0.0, float(ys[0])), list(points))
    if float(np.ptp(xs)) < 1e-12:
        raise ValueError("degenerate x-range")
    c3, c2, c1, c0 = np.polyfit(xs, ys, 3)
    return TradeoffCurve((float(c3), float(c2), float(c1), float(c0)),
                         list(points))
