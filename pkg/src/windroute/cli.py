"""Command-line entry point.

Subcommands cover table generation/linting, one-shot planning, full
simulations, provisioning economics, and post-run analytics. Every file
a command writes is accompanied by a manifest (config hash, seed,
package version) so results can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, econ
from .core import (ProfileTable, Site, TraceError, load_power_trace,
                   load_profile_table, load_workload_trace,
                   peak_load_per_class, synth_profile_table,
                   write_profile_table)
from .planner_l import (PlannerError, PlannerInputs, SiteBudget, audit_plan,
                        r_limit_from_pct, solve_planner_l)
from .planner_s import PlannerSInputs, solve_planner_s
from .plan import GlobalPlan
from .simulator import (RandomNoise, SimConfig, WindowNoise, run,
                        tradeoff_curve)

CONFIG_VERSION = 1

_CONFIG_KEYS = {
    "version", "profile", "workload", "sites", "objective", "scheduler",
    "use_planner_s", "packing", "planner_l_period_s", "planner_s_period_s",
    "packing_window_s", "r_limit_pct", "tp_reconfig_delay_s", "headroom",
    "seed", "horizon_s", "power_noise",
}
_SITE_KEYS = {"id", "gpu_count", "power_trace", "rtt_adder_s", "granularity_s"}


class ConfigError(ValueError):
    pass


def _reject_unknown(mapping: dict, allowed: set[str], where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def load_config(path: str | Path) -> dict:
    base = Path(path).parent
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    _reject_unknown(doc, _CONFIG_KEYS, str(path))
    if doc.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{path}: expected version: {CONFIG_VERSION}")
    for key in ("profile", "workload", "sites"):
        if key not in doc:
            raise ConfigError(f"{path}: missing required key {key!r}")
    for site in doc["sites"]:
        _reject_unknown(site, _SITE_KEYS, f"{path} site entry")
    doc["_base"] = base
    return doc


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def build_table(doc: dict) -> ProfileTable:
    profile = doc["profile"]
    if profile == "synth":
        return synth_profile_table()
    return load_profile_table(_resolve(doc["_base"], profile))


def build_sites(doc: dict) -> list[Site]:
    sites = []
    for spec in doc["sites"]:
        trace = load_power_trace(_resolve(doc["_base"], spec["power_trace"]),
                                 int(spec.get("granularity_s", 900)))
        sites.append(Site(str(spec["id"]), int(spec["gpu_count"]), trace,
                          float(spec.get("rtt_adder_s", 0.0))))
    return sites


def _parse_noise(spec, seed: int):
    if spec in (None, "none", "off"):
        return None
    if isinstance(spec, dict):
        if "window" in spec:
            w = spec["window"]
            return WindowNoise(float(w["start_s"]), float(w["end_s"]),
                               float(w["factor"]))
        if "random" in spec:
            r = spec["random"]
            return RandomNoise(float(r["sigma"]), int(r.get("seed", seed)),
                               int(r.get("period_s", 5)))
        raise ConfigError(f"bad power_noise spec {spec!r}")
    text = str(spec)
    kind, _, rest = text.partition(":")
    parts = [p for p in rest.split(",") if p]
    if kind == "window" and len(parts) == 3:
        return WindowNoise(float(parts[0]), float(parts[1]), float(parts[2]))
    if kind == "random" and parts:
        period = int(parts[1]) if len(parts) > 1 else 5
        return RandomNoise(float(parts[0]), seed, period)
    raise ConfigError(f"bad power noise spec {text!r} "
                      "(want window:start,end,factor or random:sigma[,period])")


def build_sim_config(doc: dict, overrides: argparse.Namespace) -> SimConfig:
    seed = int(overrides.seed if overrides.seed is not None else doc.get("seed", 0))
    packing = (overrides.packing or doc.get("packing", "off")).replace("-", "_")
    noise_spec = (overrides.power_noise if overrides.power_noise is not None
                  else doc.get("power_noise"))
    rl = overrides.rl_pct if overrides.rl_pct is not None else doc.get("r_limit_pct")
    return SimConfig(
        table=build_table(doc),
        sites=build_sites(doc),
        workload=load_workload_trace(_resolve(doc["_base"], doc["workload"])),
        objective=(overrides.objective or doc.get("objective", "min_latency")
                   ).replace("-", "_"),
        scheduler=overrides.scheduler or doc.get("scheduler", "heron"),
        use_planner_s=bool(doc.get("use_planner_s", False)
                           or getattr(overrides, "planner_s", False)),
        packing="off" if packing == "off" else packing,
        planner_l_period_s=int(doc.get("planner_l_period_s", 900)),
        planner_s_period_s=int(doc.get("planner_s_period_s", 5)),
        packing_window_s=int(doc.get("packing_window_s", 1)),
        r_limit_pct=None if rl in (None, "none") else float(rl),
        power_noise=_parse_noise(noise_spec, seed),
        tp_reconfig_delay_s=float(doc.get("tp_reconfig_delay_s", 30.0)),
        headroom=float(doc.get("headroom", 1.0)),
        seed=seed,
        horizon_s=doc.get("horizon_s"))


def write_manifest(out_path: Path, config_text: str, seed: int,
                   outputs: list[str], extra: dict | None = None) -> None:
    doc = {
        "tool": "windroute",
        "version": __version__,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "argv": sys.argv[1:],
        "outputs": outputs,
    }
    if extra:
        doc.update(extra)
    out_path.write_text(json.dumps(doc, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# subcommand handlers
# --------------------------------------------------------------------------

def cmd_profile(args) -> int:
    if args.action == "synth":
        table = synth_profile_table()
        write_profile_table(table, args.out)
        write_manifest(Path(args.out).with_suffix(".manifest.json"),
                       "profile synth defaults", 0, [str(args.out)])
        print(f"wrote {len(table.rows)} rows "
              f"({len(table.feasible_rows())} SLO-feasible) to {args.out}")
        return 0
    table = load_profile_table(args.path)
    warnings = table.monotonicity_warnings()
    for w in warnings:
        print(f"warning: {w}")
    print(f"{args.path}: {len(table.rows)} rows, "
          f"{len(table.feasible_rows())} flagged SLO-feasible, "
          f"{len(warnings)} warnings")
    return 0


def _planner_budgets(doc: dict, sites: list[Site], t0: int, period: int
                     ) -> list[SiteBudget]:
    budgets = []
    for site in sites:
        values = [site.power_trace.value_at(t)
                  for t in range(t0, t0 + period, site.power_trace.granularity_s)]
        values.append(site.power_trace.value_at(t0 + period - 1))
        budgets.append(SiteBudget(site.id, site.gpu_count, min(values)))
    return budgets


def cmd_plan(args) -> int:
    doc = load_config(args.config)
    table = build_table(doc)
    sites = build_sites(doc)
    workload = load_workload_trace(_resolve(doc["_base"], doc["workload"]))
    period = int(doc.get("planner_l_period_s", 900))
    t0 = args.slot_start
    loads = peak_load_per_class(workload, (t0, t0 + period),
                                float(doc.get("headroom", 1.0)))
    budgets = _planner_budgets(doc, sites, t0, period)
    objective = (args.objective or doc.get("objective", "min_latency")).replace("-", "_")
    config_text = Path(args.config).read_text()

    if args.level == "l":
        rl = args.rl_pct if args.rl_pct is not None else doc.get("r_limit_pct")
        old = GlobalPlan.from_json(Path(args.old_plan).read_text()) if args.old_plan else None
        inputs = PlannerInputs(
            table, budgets, loads, old_plan=old,
            r_limit=None if rl in (None, "none") else r_limit_from_pct(float(rl), budgets),
            objective=objective)
        plan = solve_planner_l(inputs)
        report = audit_plan(plan, inputs)
        Path(args.out).write_text(plan.to_json(report))
    else:
        base = GlobalPlan.from_json(Path(args.plan).read_text())
        s_period = int(doc.get("planner_s_period_s", 5))
        live_loads = peak_load_per_class(workload, (t0, t0 + s_period))
        live_power = {s.id: s.power_trace.value_at(t0) for s in sites}
        result = solve_planner_s(PlannerSInputs(
            table, base.instance_budget(), live_power, live_loads,
            objective=objective))
        doc_out = json.loads(result.plan.to_json())
        doc_out["shortfall_rps"] = {c.name: v for c, v in result.shortfall.items()}
        Path(args.out).write_text(json.dumps(doc_out, indent=2, sort_keys=True))
    write_manifest(Path(args.out).with_suffix(".manifest.json"), config_text,
                   int(doc.get("seed", 0)), [str(args.out)])
    print(f"wrote {args.out}")
    return 0


def cmd_simulate(args) -> int:
    doc = load_config(args.config)
    config = build_sim_config(doc, args)
    metrics = run(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    summary_path = out_dir / "summary.json"
    metrics.to_csv(metrics_path)
    metrics.save_summary(summary_path)
    outputs = [str(metrics_path), str(summary_path)]
    if config.packing != "off":
        transitions_path = out_dir / "transitions.csv"
        metrics.transitions_to_csv(transitions_path)
        outputs.append(str(transitions_path))
    write_manifest(out_dir / "manifest.json", Path(args.config).read_text(),
                   config.seed, outputs,
                   extra={"scheduler": config.scheduler,
                          "objective": config.objective,
                          "packing": config.packing})
    summary = metrics.summary()
    print(json.dumps({k: summary[k] for k in
                      ("seconds", "arrivals", "served", "dropped", "drop_rate")},
                     indent=2))
    return 0


def cmd_econ(args) -> int:
    if args.metric == "opex":
        params = [("us_30k", econ.PRICE_US, 30_000.0),
                  ("us_20k", econ.PRICE_US, 20_000.0),
                  ("de_30k", econ.PRICE_GERMANY, 30_000.0),
                  ("de_20k", econ.PRICE_GERMANY, 20_000.0)]
        if args.out:
            with open(args.out, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["years"] + [f"opex_pct_{n}" for n, _, _ in params])
                steps = int(args.years / 0.25)
                for i in range(steps + 1):
                    year = i * 0.25
                    row = [f"{year:.2f}"]
                    for _, price, capex in params:
                        p = econ.EconParams(capex_usd=capex, price_usd_per_kwh=price,
                                            effective_draw_kw=args.draw_kw)
                        row.append(f"{econ.opex_fraction(p, year):.3f}")
                    writer.writerow(row)
            write_manifest(Path(args.out).with_suffix(".manifest.json"),
                           f"econ opex years={args.years}", 0, [args.out])
        point = econ.EconParams(capex_usd=args.capex,
                                price_usd_per_kwh=args.price,
                                effective_draw_kw=args.draw_kw)
        print(json.dumps({"years": args.years,
                          "opex_pct": econ.opex_fraction(point, args.years)}))
        return 0
    if args.metric == "breakeven":
        dc = econ.EconParams(capex_usd=args.capex, price_usd_per_kwh=args.price_dc,
                             effective_draw_kw=args.draw_kw)
        wind = econ.EconParams(capex_usd=args.capex, price_usd_per_kwh=args.price_wind,
                               effective_draw_kw=args.draw_kw,
                               deficit_derate=args.derate)
        rows = [(x, econ.cp_break_even(x, dc, wind))
                for x in (args.percentiles or [5, 10, 15, 20, 25, 30])]
        if args.out:
            with open(args.out, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["percentile", "break_even_years"])
                for x, years in rows:
                    writer.writerow([x, "" if years is None else years])
            write_manifest(Path(args.out).with_suffix(".manifest.json"),
                           "econ breakeven", 0, [args.out])
        print(json.dumps({str(x): years for x, years in rows}))
        return 0
    if args.metric == "provision":
        trace = load_power_trace(args.trace, args.granularity_s)
        capacity, deficit = econ.percentile_provision(trace.samples, args.percentile)
        print(json.dumps({"capacity_w": capacity, "deficit_fraction": deficit,
                          **econ.superpods(capacity)}))
        return 0
    # superpods
    print(json.dumps(econ.superpods(args.capacity_w)))
    return 0


def _read_metrics_csv(path: str) -> dict:
    per_sec_served: dict[int, int] = {}
    per_sec_e2e: dict[int, float] = {}
    per_sec_power: dict[int, float] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            t = int(rec["t_s"])
            served = int(rec["served"])
            per_sec_served[t] = per_sec_served.get(t, 0) + served
            per_sec_e2e[t] = per_sec_e2e.get(t, 0.0) + served * float(rec["mean_e2e_s"])
            per_sec_power[t] = per_sec_power.get(t, 0.0) + float(rec["power_w"])
    n = max(per_sec_served) + 1 if per_sec_served else 0
    served = np.array([per_sec_served.get(t, 0) for t in range(n)])
    e2e = np.array([per_sec_e2e.get(t, 0.0) for t in range(n)])
    power = np.array([per_sec_power.get(t, 0.0) for t in range(n)])
    return {"served": served, "e2e_sum": e2e, "power": power}


def cmd_analyze(args) -> int:
    if args.what == "complementarity":
        traces = [load_power_trace(p, args.granularity_s).samples for p in args.traces]
        singles = [econ.cov([t]) for t in traces]
        combo, value = econ.best_combination(traces, args.k)
        print(json.dumps({"individual_cov": singles,
                          "best_combination": list(combo),
                          "combined_cov": value}))
        return 0
    if args.what == "autocorr":
        trace = load_power_trace(args.trace, args.granularity_s)
        print(json.dumps({"lag": args.lag,
                          "autocorr": econ.autocorr(trace.samples, args.lag)}))
        return 0
    if args.what == "goodput":
        a = _read_metrics_csv(args.run)
        b = _read_metrics_csv(args.baseline)
        if a["served"].size != b["served"].size:
            raise TraceError("mismatched horizons")
        ratios = np.ones(a["served"].size)
        pos = b["served"] > 0
        ratios[pos] = a["served"][pos] / b["served"][pos]
        capped = (b["served"] == 0) & (a["served"] > 0)
        ratios[capped] = np.inf
        finite = ratios[np.isfinite(ratios)]
        if args.out:
            with open(args.out, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["t_s", "goodput_ratio"])
                for t, r in enumerate(ratios):
                    writer.writerow([t, "inf" if np.isinf(r) else f"{r:.6f}"])
            write_manifest(Path(args.out).with_suffix(".manifest.json"),
                           f"goodput {args.run} vs {args.baseline}", 0, [args.out])
        print(json.dumps({
            "fraction_at_1": float(np.mean(np.isclose(ratios, 1.0))),
            "max_finite_ratio": float(finite.max()) if finite.size else None,
            "capped_seconds": int(capped.sum()),
            "percentiles": {f"p{p}": float(np.percentile(finite, p))
                            for p in (50, 80, 90, 95, 99)} if finite.size else {}}))
        return 0
    # tradeoff
    lat = _read_metrics_csv(args.latency_run)
    pow_ = _read_metrics_csv(args.power_run)
    points = []
    slot = args.slot_s
    n = min(lat["served"].size, pow_["served"].size)
    for k in range(0, n, slot):
        hi = min(k + slot, n)
        sa, sb = lat["served"][k:hi].sum(), pow_["served"][k:hi].sum()
        if sa == 0 or sb == 0:
            continue
        la = lat["e2e_sum"][k:hi].sum() / sa
        lb = pow_["e2e_sum"][k:hi].sum() / sb
        pa = lat["power"][k:hi].mean()
        pb = pow_["power"][k:hi].mean()
        if lb <= 0 or pb <= 0:
            continue
        points.append((100.0 * (lb - la) / lb, 100.0 * (pa - pb) / pb))
    curve = tradeoff_curve(points)
    if args.out:
        curve.to_csv(args.out)
        write_manifest(Path(args.out).with_suffix(".manifest.json"),
                       "tradeoff curve", 0, [args.out])
    print(json.dumps({"cubic_coeffs_desc": list(curve.coeffs),
                      "points": len(points)}))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="windroute",
        description="Cross-site inference routing planner/simulator. "
                    "File formats: profile.csv "
                    "(class,freq_ghz,tp,load_rps,e2e_s,ttft_s,tbt_s,"
                    "peak_power_w,avg_power_w), workload.csv "
                    "(arrival_ms,input_tokens,output_tokens), power_<site>.csv "
                    "(t_s,power_w), metrics.csv "
                    "(t_s,site,served,dropped,mean_e2e_s,power_w).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="generate or lint a profile table")
    ps = p.add_subparsers(dest="action", required=True)
    g = ps.add_parser("synth", help="write the default synthetic table")
    g.add_argument("--out", default="profile.csv")
    g.set_defaults(func=cmd_profile)
    v = ps.add_parser("validate", help="lint a profile CSV")
    v.add_argument("path")
    v.set_defaults(func=cmd_profile, action="validate")

    p = sub.add_parser("plan", help="one-shot planner run")
    ps = p.add_subparsers(dest="level", required=True)
    for level in ("l", "s"):
        q = ps.add_parser(level)
        q.add_argument("--config", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--slot-start", type=int, default=0)
        q.add_argument("--objective", choices=["min-latency", "min-power"])
        if level == "l":
            q.add_argument("--rl-pct", type=float, default=None)
            q.add_argument("--old-plan", default=None)
        else:
            q.add_argument("--plan", required=True,
                           help="slot plan JSON providing the budget")
        q.set_defaults(func=cmd_plan, level=level)

    p = sub.add_parser("simulate", help="full-horizon simulation")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--objective", choices=["min-latency", "min-power"])
    p.add_argument("--scheduler", choices=["heron", "wrr-minenergy", "greedy-knee"])
    p.add_argument("--packing", choices=["off", "max-benefit", "max-shift"])
    p.add_argument("--planner-s", action="store_true",
                   help="enable the fast-cadence planner")
    p.add_argument("--rl-pct", type=float, default=None)
    p.add_argument("--power-noise", default=None,
                   help="window:start,end,factor or random:sigma[,period]")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("econ", help="provisioning economics")
    ps = p.add_subparsers(dest="metric", required=True)
    o = ps.add_parser("opex")
    o.add_argument("--years", type=float, default=5.0)
    o.add_argument("--capex", type=float, default=30_000.0)
    o.add_argument("--price", type=float, default=econ.PRICE_US)
    o.add_argument("--draw-kw", type=float, default=1.0)
    o.add_argument("--out", default=None)
    o.set_defaults(func=cmd_econ)
    b = ps.add_parser("breakeven")
    b.add_argument("--capex", type=float, default=25_000.0)
    b.add_argument("--price-dc", type=float, default=econ.PRICE_US)
    b.add_argument("--price-wind", type=float, default=econ.PRICE_WIND_PPA)
    b.add_argument("--draw-kw", type=float, default=1.0)
    b.add_argument("--derate", type=float, default=0.5)
    b.add_argument("--percentiles", type=float, nargs="*")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_econ)
    pr = ps.add_parser("provision")
    pr.add_argument("--trace", required=True)
    pr.add_argument("--percentile", type=float, required=True)
    pr.add_argument("--granularity-s", type=int, default=900)
    pr.set_defaults(func=cmd_econ)
    sp = ps.add_parser("superpods")
    sp.add_argument("--capacity-w", type=float, required=True)
    sp.set_defaults(func=cmd_econ)

    p = sub.add_parser("analyze", help="trace/run analytics")
    ps = p.add_subparsers(dest="what", required=True)
    c = ps.add_parser("complementarity")
    c.add_argument("--traces", nargs="+", required=True)
    c.add_argument("-k", type=int, default=4)
    c.add_argument("--granularity-s", type=int, default=900)
    c.set_defaults(func=cmd_analyze)
    a = ps.add_parser("autocorr")
    a.add_argument("--trace", required=True)
    a.add_argument("--lag", type=int, default=1)
    a.add_argument("--granularity-s", type=int, default=900)
    a.set_defaults(func=cmd_analyze)
    g = ps.add_parser("goodput")
    g.add_argument("--run", required=True, help="metrics.csv of the candidate run")
    g.add_argument("--baseline", required=True)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_analyze)
    t = ps.add_parser("tradeoff")
    t.add_argument("--latency-run", required=True)
    t.add_argument("--power-run", required=True)
    t.add_argument("--slot-s", type=int, default=900)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TraceError, PlannerError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
