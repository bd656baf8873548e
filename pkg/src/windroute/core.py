"""Domain model: request classes, profile tables, sites, and traces.

Everything here is immutable after construction and shared by the
planners, the scheduler, and the simulator.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FREQ_GRID = (0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0)
TP_GRID = (2, 4, 8)
DEFAULT_LOAD_GRID = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0)
POWER_OVERHEAD_MULTIPLIER = 1.82  # accounts for CPU/fans/network around the GPUs


class TraceError(ValueError):
    """Bad or inconsistent trace/table input."""


class Bucket(enum.IntEnum):
    S = 0
    M = 1
    L = 2


class RequestClass(enum.Enum):
    """Input-length x output-length bucket, nine values total."""

    SS = (Bucket.S, Bucket.S)
    SM = (Bucket.S, Bucket.M)
    SL = (Bucket.S, Bucket.L)
    MS = (Bucket.M, Bucket.S)
    MM = (Bucket.M, Bucket.M)
    ML = (Bucket.M, Bucket.L)
    LS = (Bucket.L, Bucket.S)
    LM = (Bucket.L, Bucket.M)
    LL = (Bucket.L, Bucket.L)

    @property
    def input_bucket(self) -> Bucket:
        return self.value[0]

    @property
    def output_bucket(self) -> Bucket:
        return self.value[1]

    @classmethod
    def from_buckets(cls, inp: Bucket, out: Bucket) -> "RequestClass":
        return _BY_BUCKETS[(inp, out)]


CLASSES: tuple[RequestClass, ...] = tuple(RequestClass)
_BY_BUCKETS = {(c.input_bucket, c.output_bucket): c for c in CLASSES}


@dataclass(frozen=True)
class ProfileKey:
    cls: RequestClass
    freq: float
    tp: int
    load: float

    def __post_init__(self) -> None:
        if self.freq not in FREQ_GRID:
            raise TraceError(f"frequency {self.freq} not in {FREQ_GRID}")
        if self.tp not in TP_GRID:
            raise TraceError(f"tensor-parallel degree {self.tp} not in {TP_GRID}")
        if not self.load > 0:
            raise TraceError(f"load level {self.load} must be positive")


@dataclass(frozen=True)
class ProfileRow:
    key: ProfileKey
    e2e_s: float
    ttft_s: float
    tbt_s: float
    peak_power_w: float
    avg_power_w: float
    slo_ok: bool = True

    def __post_init__(self) -> None:
        for name in ("e2e_s", "ttft_s", "tbt_s", "peak_power_w", "avg_power_w"):
            if not getattr(self, name) > 0:
                raise TraceError(f"{name} must be strictly positive ({self.key})")
        if self.peak_power_w < self.avg_power_w:
            raise TraceError(f"peak power below average power ({self.key})")


def tp_gpus(tp: int) -> int:
    """GPU count for a tensor-parallel degree (one instance = tp GPUs)."""
    return tp


class ProfileTable:
    """Latency/power measurements keyed by (class, freq, tp, load).

    SLO flags are derived from per-class (ttft, tbt) limits when given.
    The power overhead multiplier is *not* baked into rows: callers that
    account for whole-box power use :meth:`power_with_overhead`.
    """

    def __init__(self, rows: Iterable[ProfileRow],
                 slo: Mapping[RequestClass, tuple[float, float]] | None = None,
                 overhead_multiplier: float = POWER_OVERHEAD_MULTIPLIER) -> None:
        self.rows: dict[ProfileKey, ProfileRow] = {}
        self.slo = dict(slo) if slo else {}
        self.overhead_multiplier = overhead_multiplier
        for row in rows:
            if row.key in self.rows:
                raise TraceError(f"duplicate profile key {row.key}")
            if self.slo:
                row = replace(row, slo_ok=self._slo_check(row))
            self.rows[row.key] = row

    def _slo_check(self, row: ProfileRow) -> bool:
        limits = self.slo.get(row.key.cls)
        if limits is None:
            return row.slo_ok
        ttft_slo, tbt_slo = limits
        return row.ttft_s <= ttft_slo and row.tbt_s <= tbt_slo

    def lookup(self, key: ProfileKey) -> ProfileRow | None:
        return self.rows.get(key)

    def row(self, cls: RequestClass, freq: float, tp: int, load: float) -> ProfileRow | None:
        return self.rows.get(ProfileKey(cls, freq, tp, load))

    def e2e(self, cls: RequestClass, freq: float, tp: int, load: float) -> float:
        row = self.rows[ProfileKey(cls, freq, tp, load)]
        return row.e2e_s

    def power_with_overhead(self, cls: RequestClass, freq: float, tp: int,
                            load: float) -> float:
        row = self.rows[ProfileKey(cls, freq, tp, load)]
        return row.peak_power_w * self.overhead_multiplier

    def feasible_rows(self) -> list[ProfileRow]:
        """Rows safe for planning: SLO-violating combinations never leave here."""
        return [r for r in self.rows.values() if r.slo_ok]

    def feasible_for(self, cls: RequestClass) -> list[ProfileRow]:
        return [r for r in self.rows.values() if r.slo_ok and r.key.cls is cls]

    def loads(self) -> tuple[float, ...]:
        return tuple(sorted({k.load for k in self.rows}))

    def with_slos(self, slo: Mapping[RequestClass, tuple[float, float]]) -> "ProfileTable":
        return ProfileTable(self.rows.values(), slo=slo,
                            overhead_multiplier=self.overhead_multiplier)

    def monotonicity_warnings(self) -> list[str]:
        """Soft check: slo_ok should be a load-prefix per (class, freq, tp)."""
        warnings = []
        by_cfg: dict[tuple[RequestClass, float, int], list[ProfileRow]] = {}
        for row in self.rows.values():
            by_cfg.setdefault((row.key.cls, row.key.freq, row.key.tp), []).append(row)
        for cfg, rows in by_cfg.items():
            rows.sort(key=lambda r: r.key.load)
            seen_bad = False
            for row in rows:
                if not row.slo_ok:
                    seen_bad = True
                elif seen_bad:
                    warnings.append(
                        f"slo_ok not a load prefix for class={cfg[0].name} "
                        f"freq={cfg[1]} tp={cfg[2]} at load={row.key.load}")
                    break
        return warnings


@dataclass(frozen=True)
class PowerTrace:
    """Piecewise-constant available power, fixed sample granularity."""

    samples: tuple[float, ...]
    granularity_s: int = 900

    def __post_init__(self) -> None:
        if not self.samples:
            raise TraceError("empty power trace")
        if any(s < 0 for s in self.samples):
            raise TraceError("negative power sample")
        if self.granularity_s <= 0:
            raise TraceError("granularity must be positive")

    @property
    def horizon_s(self) -> int:
        return len(self.samples) * self.granularity_s

    def value_at(self, t_s: float) -> float:
        idx = int(t_s // self.granularity_s)
        if t_s < 0 or idx >= len(self.samples):
            raise TraceError(f"power trace gap at t={t_s}s "
                             f"(covers [0, {self.horizon_s})s)")
        return self.samples[idx]


@dataclass(frozen=True)
class Site:
    id: str
    gpu_count: int
    power_trace: PowerTrace
    rtt_adder_s: float = 0.0

    def __post_init__(self) -> None:
        if self.gpu_count <= 0:
            raise TraceError(f"site {self.id}: gpu_count must be > 0")
        if self.rtt_adder_s < 0:
            raise TraceError(f"site {self.id}: negative rtt adder")


@dataclass(frozen=True)
class Request:
    arrival_ms: int
    input_tokens: int
    output_tokens: int
    cls: RequestClass


@dataclass(frozen=True)
class ClassThresholds:
    """Tercile boundaries used to label a trace (33rd/66th/100th pct)."""

    input_t33: float
    input_t66: float
    input_t100: float
    output_t33: float
    output_t66: float
    output_t100: float

    @staticmethod
    def _bucket(value: float, t33: float, t66: float) -> Bucket:
        # ties resolve to the lowest qualifying bucket
        if value <= t33:
            return Bucket.S
        if value <= t66:
            return Bucket.M
        return Bucket.L

    def classify(self, input_tokens: float, output_tokens: float) -> RequestClass:
        return RequestClass.from_buckets(
            self._bucket(input_tokens, self.input_t33, self.input_t66),
            self._bucket(output_tokens, self.output_t33, self.output_t66))


@dataclass(frozen=True)
class WorkloadTrace:
    requests: tuple[Request, ...]
    thresholds: ClassThresholds

    def __post_init__(self) -> None:
        last = -1
        for req in self.requests:
            if req.arrival_ms < last:
                raise TraceError("arrival times must be non-decreasing")
            last = req.arrival_ms

    @property
    def horizon_s(self) -> int:
        if not self.requests:
            return 0
        return self.requests[-1].arrival_ms // 1000 + 1


def classify_requests(raw: Sequence[tuple[int, int, int]]) -> WorkloadTrace:
    """Label (arrival_ms, input_tokens, output_tokens) triples.

    Tercile thresholds are computed over the whole trace, per axis.
    """
    if not raw:
        raise TraceError("empty trace")
    ins = np.array([r[1] for r in raw], dtype=float)
    outs = np.array([r[2] for r in raw], dtype=float)
    i33, i66, i100 = (float(np.percentile(ins, p)) for p in (33.0, 66.0, 100.0))
    o33, o66, o100 = (float(np.percentile(outs, p)) for p in (33.0, 66.0, 100.0))
    thresholds = ClassThresholds(i33, i66, i100, o33, o66, o100)
    requests = tuple(
        Request(int(a), int(i), int(o), thresholds.classify(i, o))
        for a, i, o in raw)
    return WorkloadTrace(requests, thresholds)


def peak_load_per_class(trace: WorkloadTrace, window: tuple[float, float],
                        headroom: float = 1.0) -> dict[RequestClass, float]:
    """Max per-second arrival count per class over [t0, t1), times headroom."""
    t0, t1 = window
    if not t1 > t0:
        raise TraceError(f"bad window [{t0}, {t1})")
    first = int(math.floor(t0))
    n_bins = int(math.ceil(t1)) - first
    counts = {c: np.zeros(n_bins, dtype=int) for c in CLASSES}
    for req in trace.requests:
        t = req.arrival_ms / 1000.0
        if t0 <= t < t1:
            counts[req.cls][int(t) - first] += 1
    return {c: float(counts[c].max()) * headroom if n_bins else 0.0 for c in CLASSES}


def derive_slos(table: ProfileTable,
                isolation: Mapping[RequestClass, tuple[float, float]] | None = None,
                factor: float = 5.0) -> ProfileTable:
    """Set per-class SLOs to factor x the isolated (ttft, tbt) and re-flag rows.

    The isolation reference is the latency of a single request at tp=8 and
    2.0 GHz. When not given explicitly it is proxied by the lowest-load
    row at that configuration.
    """
    slo: dict[RequestClass, tuple[float, float]] = {}
    for cls in CLASSES:
        if isolation is not None and cls in isolation:
            ttft, tbt = isolation[cls]
        else:
            rows = [r for r in table.rows.values()
                    if r.key.cls is cls and r.key.tp == 8 and r.key.freq == 2.0]
            if not rows:
                raise TraceError(f"no isolation row for class {cls.name} "
                                 "(need tp=8, freq=2.0)")
            base = min(rows, key=lambda r: r.key.load)
            ttft, tbt = base.ttft_s, base.tbt_s
        slo[cls] = (factor * ttft, factor * tbt)
    return table.with_slos(slo)


# --------------------------------------------------------------------------
# Synthetic profile tables
# --------------------------------------------------------------------------

_IN_WEIGHT = {Bucket.S: 1.0, Bucket.M: 2.0, Bucket.L: 4.0}
_OUT_WEIGHT = {Bucket.S: 1.0, Bucket.M: 2.0, Bucket.L: 4.0}


@dataclass(frozen=True)
class ClassShape:
    """Per-class coefficients feeding the synthetic latency/power formulas."""

    base_e2e_s: float
    base_ttft_s: float
    base_tbt_s: float
    base_power_w: float
    knee_rps: float


def default_class_shapes() -> dict[RequestClass, ClassShape]:
    shapes = {}
    for cls in CLASSES:
        iw = _IN_WEIGHT[cls.input_bucket]
        ow = _OUT_WEIGHT[cls.output_bucket]
        ttft = 0.05 * iw
        tbt = 0.008 * (1.0 + 0.25 * (ow - 1.0))
        e2e = ttft + tbt * 60.0 * ow
        power = 150.0 * (1.0 + 0.3 * (iw - 1.0) + 0.2 * (ow - 1.0))
        knee = 8.0 / math.sqrt(iw * ow)
        shapes[cls] = ClassShape(e2e, ttft, tbt, power, knee)
    return shapes


@dataclass(frozen=True)
class SynthTableSpec:
    shapes: Mapping[RequestClass, ClassShape] = field(default_factory=default_class_shapes)
    load_grid: tuple[float, ...] = DEFAULT_LOAD_GRID
    freqs: tuple[float, ...] = FREQ_GRID
    tps: tuple[int, ...] = TP_GRID
    avg_power_ratio: float = 0.8
    slo_factor: float = 5.0


def synth_latency(shape: ClassShape, attr: str, freq: float, tp: int, load: float) -> float:
    base = getattr(shape, f"base_{attr}_s")
    return base * (1.0 + load / shape.knee_rps) * (2.0 / freq) * math.sqrt(8.0 / tp)


def synth_power(shape: ClassShape, freq: float, tp: int, load: float) -> float:
    return shape.base_power_w * tp * freq * (1.0 + load / shape.knee_rps)


def synth_profile_table(spec: SynthTableSpec | None = None) -> ProfileTable:
    """Full-grid table following the synthetic growth formulas.

    slo_ok regions are load prefixes per (class, freq, tp) by construction.
    """
    spec = spec or SynthTableSpec()
    rows = []
    slo = {}
    for cls, shape in spec.shapes.items():
        # isolated single request at tp=8 / 2.0 GHz: load term -> 1
        slo[cls] = (spec.slo_factor * shape.base_ttft_s,
                    spec.slo_factor * shape.base_tbt_s)
        for freq in spec.freqs:
            for tp in spec.tps:
                for load in spec.load_grid:
                    key = ProfileKey(cls, freq, tp, load)
                    peak = synth_power(shape, freq, tp, load)
                    rows.append(ProfileRow(
                        key,
                        e2e_s=synth_latency(shape, "e2e", freq, tp, load),
                        ttft_s=synth_latency(shape, "ttft", freq, tp, load),
                        tbt_s=synth_latency(shape, "tbt", freq, tp, load),
                        peak_power_w=peak,
                        avg_power_w=peak * spec.avg_power_ratio))
    return ProfileTable(rows, slo=slo)


# --------------------------------------------------------------------------
# CSV interfaces
# --------------------------------------------------------------------------

PROFILE_HEADER = ["class", "freq_ghz", "tp", "load_rps", "e2e_s", "ttft_s",
                  "tbt_s", "peak_power_w", "avg_power_w"]
WORKLOAD_HEADER = ["arrival_ms", "input_tokens", "output_tokens"]
POWER_HEADER = ["t_s", "power_w"]


def load_profile_table(path: str | Path,
                       slo: Mapping[RequestClass, tuple[float, float]] | None = None
                       ) -> ProfileTable:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PROFILE_HEADER:
            raise TraceError(f"{path}: expected header {','.join(PROFILE_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                cls = RequestClass[rec["class"]]
            except KeyError:
                raise TraceError(f"{path}:{lineno}: unknown class {rec['class']!r}") from None
            try:
                key = ProfileKey(cls, float(rec["freq_ghz"]), int(rec["tp"]),
                                 float(rec["load_rps"]))
                row = ProfileRow(key, float(rec["e2e_s"]), float(rec["ttft_s"]),
                                 float(rec["tbt_s"]), float(rec["peak_power_w"]),
                                 float(rec["avg_power_w"]))
            except (TraceError, ValueError) as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            if any(r.key == key for r in rows):
                raise TraceError(f"{path}:{lineno}: duplicate key {key}")
            rows.append(row)
    return ProfileTable(rows, slo=slo)


def write_profile_table(table: ProfileTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROFILE_HEADER)
        for key in sorted(table.rows, key=lambda k: (k.cls.name, k.freq, k.tp, k.load)):
            row = table.rows[key]
            writer.writerow([key.cls.name, key.freq, key.tp, key.load,
                             row.e2e_s, row.ttft_s, row.tbt_s,
                             row.peak_power_w, row.avg_power_w])


def load_workload_trace(path: str | Path) -> WorkloadTrace:
    raw = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != WORKLOAD_HEADER:
            raise TraceError(f"{path}: expected header {','.join(WORKLOAD_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                raw.append((int(rec["arrival_ms"]), int(rec["input_tokens"]),
                            int(rec["output_tokens"])))
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
    if not raw:
        # a request-free horizon is simulatable; thresholds are moot
        return WorkloadTrace((), ClassThresholds(0, 0, 0, 0, 0, 0))
    return classify_requests(raw)


def write_workload_trace(trace: WorkloadTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(WORKLOAD_HEADER)
        for req in trace.requests:
            writer.writerow([req.arrival_ms, req.input_tokens, req.output_tokens])


def load_power_trace(path: str | Path, granularity_s: int = 900) -> PowerTrace:
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != POWER_HEADER:
            raise TraceError(f"{path}: expected header {','.join(POWER_HEADER)}")
        expected_t = 0
        for lineno, rec in enumerate(reader, start=2):
            try:
                t_s = int(float(rec["t_s"]))
                watts = float(rec["power_w"])
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            if t_s != expected_t:
                raise TraceError(f"{path}:{lineno}: expected t_s={expected_t}, "
                                 f"got {t_s} (fixed granularity {granularity_s}s)")
            expected_t += granularity_s
            samples.append(watts)
    return PowerTrace(tuple(samples), granularity_s)


def write_power_trace(trace: PowerTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POWER_HEADER)
        for i, watts in enumerate(trace.samples):
            writer.writerow([i * trace.granularity_s, watts])
