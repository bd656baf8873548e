"""Cross-site routing planner and simulator for power-constrained GPU fleets."""

from .core import (CLASSES, PowerTrace, ProfileKey, ProfileRow, ProfileTable,
                   Request, RequestClass, Site, WorkloadTrace,
                   classify_requests, derive_slos, load_profile_table,
                   load_power_trace, load_workload_trace, peak_load_per_class,
                   synth_profile_table)
from .plan import GlobalPlan, InstanceGroup, PlanEntry
from .planner_l import (PlannerInputs, SiteBudget, audit_plan, solve_planner_l)
from .planner_s import PlannerSInputs, solve_planner_s, wrr_weights
from .scheduler import build_benefit_lut, compatible, configurator_apply, pack
from .simulator import (MetricsTimeline, SimConfig, goodput_factor, run,
                        tradeoff_curve)

__version__ = "0.1.0"

__all__ = [
    "CLASSES", "PowerTrace", "ProfileKey", "ProfileRow", "ProfileTable",
    "Request", "RequestClass", "Site", "WorkloadTrace", "classify_requests",
    "derive_slos", "load_profile_table", "load_power_trace",
    "load_workload_trace", "peak_load_per_class", "synth_profile_table",
    "GlobalPlan", "InstanceGroup", "PlanEntry", "PlannerInputs", "SiteBudget",
    "audit_plan", "solve_planner_l", "PlannerSInputs", "solve_planner_s",
    "wrr_weights", "build_benefit_lut", "compatible", "configurator_apply",
    "pack", "MetricsTimeline", "SimConfig", "goodput_factor", "run",
    "tradeoff_curve",
]
