"""Plan data structures shared by planners, scheduler, and simulator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .core import CLASSES, ProfileTable, RequestClass, tp_gpus

GroupKey = tuple[str, RequestClass, int]  # (site, class, tp)


@dataclass(frozen=True)
class PlanEntry:
    cls: RequestClass
    freq: float
    tp: int
    site: str
    load: float
    instances: int


@dataclass(frozen=True)
class InstanceGroup:
    """Instances sharing one (site, class, tp, freq, load) configuration."""

    site: str
    cls: RequestClass
    tp: int
    freq: float
    load: float
    instances: int

    @property
    def key(self) -> GroupKey:
        return (self.site, self.cls, self.tp)

    @property
    def capacity_rps(self) -> float:
        return self.instances * self.load


def _entry_sort_key(e: PlanEntry) -> tuple:
    return (e.site, CLASSES.index(e.cls), e.tp, e.freq, e.load)


@dataclass(frozen=True)
class GlobalPlan:
    """Instance counts per (class, freq, tp, site, load)."""

    entries: tuple[PlanEntry, ...]
    objective: str = "min_latency"
    objective_value: float = 0.0
    planner: str = "L"
    solve_wall_s: float = field(default=0.0, compare=False)
    milp_nodes: int = field(default=0, compare=False)

    @staticmethod
    def from_entries(entries: Iterable[PlanEntry], **kw) -> "GlobalPlan":
        ordered = tuple(sorted((e for e in entries if e.instances > 0),
                               key=_entry_sort_key))
        return GlobalPlan(ordered, **kw)

    def groups(self) -> list[InstanceGroup]:
        return [InstanceGroup(e.site, e.cls, e.tp, e.freq, e.load, e.instances)
                for e in self.entries]

    def instance_budget(self) -> dict[GroupKey, int]:
        """Instances per (site, class, tp) — the budget handed to the
        fast-cadence planner."""
        budget: dict[GroupKey, int] = {}
        for e in self.entries:
            key = (e.site, e.cls, e.tp)
            budget[key] = budget.get(key, 0) + e.instances
        return budget

    def gpus_per_site(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.site] = out.get(e.site, 0) + e.instances * tp_gpus(e.tp)
        return out

    def power_per_site(self, table: ProfileTable) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            watts = table.power_with_overhead(e.cls, e.freq, e.tp, e.load)
            out[e.site] = out.get(e.site, 0.0) + e.instances * watts
        return out

    def capacity_per_class(self) -> dict[RequestClass, float]:
        out = {c: 0.0 for c in CLASSES}
        for e in self.entries:
            out[e.cls] += e.instances * e.load
        return out

    def counts(self) -> dict[tuple[RequestClass, float, int, str, float], int]:
        return {(e.cls, e.freq, e.tp, e.site, e.load): e.instances
                for e in self.entries}

    def reconfigurations(self, old: "GlobalPlan | None") -> int:
        """Total |new - old| over every (class, freq, tp, site, load) tuple."""
        new_counts = self.counts()
        old_counts = old.counts() if old else {}
        keys = set(new_counts) | set(old_counts)
        return sum(abs(new_counts.get(k, 0) - old_counts.get(k, 0)) for k in keys)

    def to_dict(self) -> dict:
        return {
            "planner": self.planner,
            "objective": self.objective,
            "objective_value": self.objective_value,
            "entries": [
                {"class": e.cls.name, "freq_ghz": e.freq, "tp": e.tp,
                 "site": e.site, "load_rps": e.load, "instances": e.instances}
                for e in self.entries
            ],
        }

    def to_json(self, audit: "AuditReport | None" = None) -> str:
        doc = self.to_dict()
        if audit is not None:
            doc["audit"] = {"ok": audit.ok, "violations": audit.violations}
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "GlobalPlan":
        doc = json.loads(text)
        entries = [PlanEntry(RequestClass[e["class"]], float(e["freq_ghz"]),
                             int(e["tp"]), str(e["site"]), float(e["load_rps"]),
                             int(e["instances"]))
                   for e in doc["entries"]]
        return GlobalPlan.from_entries(entries, objective=doc["objective"],
                                       objective_value=float(doc["objective_value"]),
                                       planner=doc.get("planner", "L"))

    def save(self, path: str | Path, audit: "AuditReport | None" = None) -> None:
        Path(path).write_text(self.to_json(audit))


@dataclass
class AuditReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)
