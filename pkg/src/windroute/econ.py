"""Provisioning economics and power-series analytics.

Covers the ownership-cost arithmetic for GPUs on cheap-but-variable
power (opex fraction, capability-per-dollar break-even, percentile
right-sizing, pod sizing) and the series metrics used to pick site
combinations (coefficient of variation, lag autocorrelation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

HOURS_PER_YEAR = 8760.0
SUPERPOD_GPUS = 1016
SUPERPOD_POWER_W = 1.3e6

# electricity prices (USD/kWh) backing the default cost curves
PRICE_US = 0.085
PRICE_CALIFORNIA = 0.244
PRICE_GERMANY = 0.185
PRICE_GERMANY_2022 = 0.418
PRICE_WIND_PPA = 0.025


@dataclass(frozen=True)
class EconParams:
    capex_usd: float = 30_000.0
    price_usd_per_kwh: float = PRICE_US
    effective_draw_kw: float = 1.0  # per GPU, all-in
    flops_per_year: float = 1e22
    deficit_derate: float = 0.5  # fraction of peak compute during deficits
    horizon_years: float = 5.0

    def __post_init__(self) -> None:
        for name in ("capex_usd", "price_usd_per_kwh", "effective_draw_kw",
                     "flops_per_year", "horizon_years"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.deficit_derate <= 1:
            raise ValueError("deficit_derate must be in (0, 1]")


def opex_usd(params: EconParams, years: float) -> float:
    return params.effective_draw_kw * HOURS_PER_YEAR * years * params.price_usd_per_kwh


def opex_fraction(params: EconParams, years: float) -> float:
    """Cumulative energy cost as a percentage of the GPU's capex."""
    if years < 0:
        raise ValueError("years must be >= 0")
    return 100.0 * opex_usd(params, years) / params.capex_usd


def cp_break_even(percentile: float, params_dc: EconParams,
                  params_wind: EconParams, max_years: float = 50.0,
                  step_years: float = 0.25) -> float | None:
    """Years until compute-per-dollar at a right-sized wind deployment
    matches a grid-powered deployment.

    The wind side loses compute `percentile`% of the time (derated, not
    zero); both sides share the same peak flops so that term cancels
    except through the deficit factor.
    """
    if params_wind.price_usd_per_kwh >= params_dc.price_usd_per_kwh:
        return None
    x = percentile / 100.0
    avail = 1.0 - x * (1.0 - params_wind.deficit_derate)
    steps = int(round(max_years / step_years))
    for i in range(1, steps + 1):
        t = i * step_years
        cp_wind = (params_wind.flops_per_year * t * avail
                   / (params_wind.capex_usd + opex_usd(params_wind, t)))
        cp_dc = (params_dc.flops_per_year * t
                 / (params_dc.capex_usd + opex_usd(params_dc, t)))
        if cp_wind >= cp_dc:
            return t
    return None


def percentile_provision(samples: Sequence[float], percentile: float
                         ) -> tuple[float, float]:
    """Right-size capacity at the nearest-rank percentile of generation.

    Returns (capacity_w, deficit_time_fraction) where the deficit
    fraction is the share of samples strictly below the capacity.
    """
    if not 0 < percentile < 100:
        raise ValueError("percentile must be in (0, 100)")
    data = np.asarray(samples, dtype=float)
    if data.size == 0:
        raise ValueError("empty power trace")
    rank = max(1, math.ceil(percentile / 100.0 * data.size))
    capacity = float(np.sort(data)[rank - 1])
    deficit = float(np.count_nonzero(data < capacity)) / data.size
    return capacity, deficit


def superpods(capacity_w: float) -> dict[str, float]:
    """Whole modular pods deployable within a power capacity."""
    if capacity_w < 0:
        raise ValueError("capacity must be >= 0")
    pods = int(capacity_w // SUPERPOD_POWER_W)
    return {"pods": pods, "gpus": pods * SUPERPOD_GPUS,
            "power_w": pods * SUPERPOD_POWER_W}


def cov(traces: Sequence[Sequence[float]],
        combination: Sequence[int] | None = None) -> float:
    """Coefficient of variation of the summed generation series."""
    arrays = [np.asarray(t, dtype=float) for t in traces]
    if len({a.size for a in arrays}) != 1:
        raise ValueError("traces must have equal length")
    idx = list(combination) if combination is not None else list(range(len(arrays)))
    total = np.sum([arrays[i] for i in idx], axis=0)
    mean = float(total.mean())
    if abs(mean) < 1e-12:
        raise ValueError("undefined CoV: zero-mean series")
    return float(total.std()) / mean


def best_combination(traces: Sequence[Sequence[float]], k: int
                     ) -> tuple[tuple[int, ...], float]:
    """Exhaustive scan for the k-subset minimizing combined CoV."""
    n = len(traces)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} traces")
    if n > 20:
        raise ValueError("exhaustive search limited to 20 traces")
    best: tuple[tuple[int, ...], float] | None = None
    for combo in combinations(range(n), k):
        value = cov(traces, combo)
        if best is None or value < best[1]:
            best = (combo, value)
    assert best is not None
    return best


def autocorr(series: Sequence[float], lag: int) -> float:
    """Pearson correlation of a series against its lag-shifted self."""
    data = np.asarray(series, dtype=float)
    if lag < 0 or lag >= data.size:
        raise ValueError(f"lag {lag} out of range for series of {data.size}")
    if float(data.std()) < 1e-15:
        raise ValueError("undefined autocorrelation: constant series")
    if lag == 0:
        return 1.0
    a = data[:-lag]
    b = data[lag:]
    if float(a.std()) < 1e-15 or float(b.std()) < 1e-15:
        raise ValueError("undefined autocorrelation: constant window")
    return float(np.corrcoef(a, b)[0, 1])
