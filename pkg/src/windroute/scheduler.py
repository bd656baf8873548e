"""Per-second request dispatch: WRR routing, packing, TP reconfiguration.

A request of class X may run on a configuration provisioned for class Y
only when Y's input and output buckets both dominate X's. The packing
heuristic exploits that: when a big-class group has spare provisioned
capacity this second, smaller requests move up to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .core import CLASSES, ProfileKey, ProfileTable, RequestClass
from .plan import GlobalPlan, GroupKey, InstanceGroup

# iteration order LL -> SS (descending input, then output)
CLASS_ORDER_DESC: tuple[RequestClass, ...] = tuple(sorted(
    CLASSES, key=lambda c: (c.input_bucket, c.output_bucket), reverse=True))


def compatible(x: RequestClass, y: RequestClass) -> bool:
    """True when class x fits on a configuration provisioned for class y."""
    return (y.input_bucket >= x.input_bucket
            and y.output_bucket >= x.output_bucket)


def refill_count(cls: RequestClass) -> int:
    """How many other classes could move into a vacancy left by `cls`.

    Moving out a class whose slot can be refilled by many others enables
    longer transition chains, so it gets packing priority.
    """
    return sum(1 for other in CLASSES if other is not cls and compatible(other, cls))


@dataclass
class BenefitLut:
    """end-to-end latency gain for moving a child class onto a parent config."""

    benefits: dict[tuple[RequestClass, RequestClass], float] = field(default_factory=dict)
    missing: list[tuple[RequestClass, RequestClass]] = field(default_factory=list)

    def get(self, child: RequestClass, parent: RequestClass) -> float | None:
        return self.benefits.get((child, parent))


def _weighted_e2e(groups: Iterable[InstanceGroup], table: ProfileTable,
                  eval_cls: RequestClass) -> float | None:
    """Capacity-weighted e2e of `eval_cls` over the given groups.

    Falls back to the group's own class row when the eval class was not
    profiled at that configuration (upper bound on the child's latency).
    """
    total_cap = 0.0
    acc = 0.0
    for g in groups:
        row = table.lookup(ProfileKey(eval_cls, g.freq, g.tp, g.load))
        if row is None:
            row = table.lookup(ProfileKey(g.cls, g.freq, g.tp, g.load))
        if row is None:
            return None
        acc += g.capacity_rps * row.e2e_s
        total_cap += g.capacity_rps
    if total_cap <= 0:
        return None
    return acc / total_cap


def build_benefit_lut(plan: GlobalPlan, table: ProfileTable) -> BenefitLut:
    lut = BenefitLut()
    groups_by_class: dict[RequestClass, list[InstanceGroup]] = {c: [] for c in CLASSES}
    for g in plan.groups():
        groups_by_class[g.cls].append(g)
    own_e2e = {c: _weighted_e2e(groups_by_class[c], table, c) for c in CLASSES}
    for child in CLASSES:
        for parent in CLASSES:
            if child is parent or not compatible(child, parent):
                continue
            base = own_e2e[child]
            on_parent = _weighted_e2e(groups_by_class[parent], table, child)
            if base is None or on_parent is None:
                lut.missing.append((child, parent))
                continue
            lut.benefits[(child, parent)] = base - on_parent
    return lut


@dataclass(frozen=True)
class Transition:
    child: RequestClass
    parent: RequestClass
    moved_rps: int


def pack(incoming: Mapping[RequestClass, float],
         provisioned: Mapping[RequestClass, float],
         lut: BenefitLut, strategy: str = "max_benefit") -> list[Transition]:
    """Move whole requests from child classes into parent-class vacancies.

    max_benefit pulls donors in descending latency-benefit order;
    max_shift orders donors by refill potential (ties favor the larger
    input bucket) to keep transition chains long. Only positive-benefit
    moves are ever made.
    """
    if strategy not in ("max_benefit", "max_shift"):
        raise ValueError(f"unknown packing strategy {strategy!r}")
    own_remaining = {c: int(incoming.get(c, 0)) for c in CLASSES}
    occupancy = {c: float(incoming.get(c, 0)) for c in CLASSES}
    transitions: list[Transition] = []

    for parent in CLASS_ORDER_DESC:
        vacancy = int(provisioned.get(parent, 0.0) - occupancy[parent])
        if vacancy <= 0:
            continue
        donors = []
        for child in CLASSES:
            if child is parent or not compatible(child, parent):
                continue
            benefit = lut.get(child, parent)
            if benefit is None or benefit <= 0:
                continue
            if own_remaining[child] <= 0:
                continue
            donors.append((child, benefit))
        if strategy == "max_benefit":
            donors.sort(key=lambda d: (-d[1], CLASSES.index(d[0])))
        else:
            donors.sort(key=lambda d: (-refill_count(d[0]),
                                       -d[0].input_bucket, -d[0].output_bucket))
        for child, _benefit in donors:
            if vacancy <= 0:
                break
            moved = min(vacancy, own_remaining[child])
            if moved <= 0:
                continue
            own_remaining[child] -= moved
            occupancy[child] -= moved
            occupancy[parent] += moved
            vacancy -= moved
            transitions.append(Transition(child, parent, moved))
    return transitions


# --------------------------------------------------------------------------
# Configurator: TP changes take time; frequency changes are immediate.
# --------------------------------------------------------------------------

DEFAULT_TP_RECONFIG_DELAY_S = 30


@dataclass
class ConfiguratorState:
    """Tracks groups whose tensor-parallel layout is being rebuilt."""

    reconfiguring: dict[GroupKey, float] = field(default_factory=dict)  # -> until_s

    def active(self, key: GroupKey, now_s: float) -> bool:
        until = self.reconfiguring.get(key)
        return until is None or now_s >= until

    def active_keys_filter(self, budget: Mapping[GroupKey, int], now_s: float
                           ) -> dict[GroupKey, int]:
        return {k: v for k, v in budget.items() if self.active(k, now_s)}

    def prune(self, now_s: float) -> None:
        self.reconfiguring = {k: t for k, t in self.reconfiguring.items()
                              if t > now_s}


def reconfigured_groups(old_plan: GlobalPlan | None,
                        new_plan: GlobalPlan) -> set[GroupKey]:
    """Groups whose tensor-parallel degree changed between two plans.

    A (site, class) pair that served at tp=4 and now serves at tp=8 must
    re-shard model weights. Fresh deployments (the class was not served
    at that site before) spin up on spare capacity without a TP change
    and are available immediately, as are frequency/load-only updates.
    """
    old_tps: dict[tuple[str, RequestClass], set[int]] = {}
    if old_plan is not None:
        for site, cls, tp in old_plan.instance_budget():
            old_tps.setdefault((site, cls), set()).add(tp)
    changed = set()
    for key in new_plan.instance_budget():
        site, cls, tp = key
        prior = old_tps.get((site, cls))
        if prior is not None and tp not in prior:
            changed.add(key)
    return changed


def configurator_apply(old_plan: GlobalPlan | None, new_plan: GlobalPlan,
                       now_s: float,
                       delay_s: float = DEFAULT_TP_RECONFIG_DELAY_S,
                       state: ConfiguratorState | None = None
                       ) -> ConfiguratorState:
    """Mark TP-changed groups as reconfiguring until now_s + delay_s."""
    state = state or ConfiguratorState()
    for key in reconfigured_groups(old_plan, new_plan):
        state.reconfiguring[key] = now_s + delay_s
    state.prune(now_s)
    return state


# --------------------------------------------------------------------------
# Dispatch: per-class smooth WRR over groups with per-second headroom.
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Drop:
    reason: str  # "no_capacity" | "no_headroom"


class DispatchState:
    """Mutable per-second WRR dispatch over a plan's instance groups.

    Per-second headroom per group is floor(instances * load); a group
    never receives more than its provisioned per-second request rate.
    """

    def __init__(self, plan: GlobalPlan, configurator: ConfiguratorState | None = None):
        self.groups = plan.groups()
        self.configurator = configurator or ConfiguratorState()
        self.by_class: dict[RequestClass, list[InstanceGroup]] = {c: [] for c in CLASSES}
        for g in self.groups:
            self.by_class[g.cls].append(g)
        self._order = {g.key: i for i, g in enumerate(self.groups)}
        self._wrr: dict[RequestClass, dict[GroupKey, float]] = {
            c: {g.key: 0.0 for g in self.by_class[c]} for c in CLASSES}
        self.second_counts: dict[GroupKey, int] = {}
        self.deactivated: set[GroupKey] = set()
        self.now_s = 0.0

    def begin_second(self, now_s: float, deactivated: set[GroupKey] | None = None) -> None:
        self.now_s = now_s
        self.second_counts = {}
        self.deactivated = deactivated or set()

    def group_headroom(self, g: InstanceGroup) -> int:
        cap = int(g.capacity_rps + 1e-9)
        return cap - self.second_counts.get(g.key, 0)

    def _eligible(self, serving_cls: RequestClass) -> list[InstanceGroup]:
        out = []
        for g in self.by_class[serving_cls]:
            if g.key in self.deactivated:
                continue
            if not self.configurator.active(g.key, self.now_s):
                continue
            if self.group_headroom(g) > 0:
                out.append(g)
        return out

    def dispatch(self, serving_cls: RequestClass) -> InstanceGroup | Drop:
        if not self.by_class[serving_cls]:
            return Drop("no_capacity")
        eligible = self._eligible(serving_cls)
        if not eligible:
            return Drop("no_headroom")
        counters = self._wrr[serving_cls]
        total = 0.0
        for g in eligible:
            counters[g.key] += g.capacity_rps
            total += g.capacity_rps
        winner = max(eligible, key=lambda g: (counters[g.key], -self._order[g.key]))
        counters[winner.key] -= total
        self.second_counts[winner.key] = self.second_counts.get(winner.key, 0) + 1
        return winner
