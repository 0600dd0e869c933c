"""Performance indicators for simulation records and their aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from glucoloop import _kernels as K

HYPO = 3.9
HYPER = 11.1

INDICATOR_COLUMNS = ("t_below_3_9", "t_in_range", "t_above_11_1", "BG_min", "BG_max",
                     "total_non_basal_insulin", "E_DG", "E_MM", "E_O2", "E_BG")


@dataclass(frozen=True)
class Indicators:
    t_below_3_9: float
    t_in_range: float
    t_above_11_1: float
    BG_min: float
    BG_max: float
    total_non_basal_insulin: float
    E_DG: float = float("nan")
    E_MM: float = float("nan")
    E_O2: float = float("nan")
    E_BG: float = float("nan")

    def as_dict(self) -> dict:
        return asdict(self)


def time_in_ranges(bg) -> tuple[float, float, float]:
    """Percent of samples below 3.9, within [3.9, 11.1] and above 11.1."""
    g = np.asarray(bg, dtype=float)
    if g.size == 0:
        raise ValueError("empty BG trace")
    n = g.size
    below = int(np.count_nonzero(g < HYPO))
    above = int(np.count_nonzero(g > HYPER))
    inside = n - below - above
    return 100.0 * below / n, 100.0 * inside / n, 100.0 * above / n


def non_basal_insulin(insulin_per_min, basal: float, dt: float = 1.0) -> float:
    """Signed total insulin above basal, in U (rates in mU/min)."""
    ins = np.asarray(insulin_per_min, dtype=float)
    return float(np.sum(ins - basal) * dt / 1000.0)


def compute_indicators(record, basal: float | None = None) -> Indicators:
    basal = record.basal if basal is None else basal
    n = np.count_nonzero(np.isfinite(record.insulin))
    g = record.glucose[:n] if n else record.glucose[:1]
    lo, mid, hi = time_in_ranges(g)
    errs = {}
    if record.estimator != "oracle":
        ok = np.all(np.isfinite(record.u_hat[:n]), axis=1)
        for j, name in enumerate(("E_DG", "E_MM", "E_O2")):
            diff = np.abs(record.u_true[:n][ok, j] - record.u_hat[:n][ok, j])
            errs[name] = float(diff.mean()) if diff.size else float("nan")
    else:
        errs = {"E_DG": 0.0, "E_MM": 0.0, "E_O2": 0.0}
    times = record.cgm_times.astype(int)
    if len(times):
        g_true = record.states[times, K.Q1] / record.vg
        errs["E_BG"] = float(np.mean(np.abs(g_true - record.glucose_hat)))
    return Indicators(lo, mid, hi, float(np.min(g)), float(np.max(g)),
                      non_basal_insulin(record.insulin[:n], basal), **errs)


@dataclass
class Aggregate:
    mean: dict
    std: dict
    n: int
    bg_mean: np.ndarray
    bg_std: np.ndarray
    insulin_mean: np.ndarray
    insulin_std: np.ndarray

    def as_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "std": self.std}

    def bands_rows(self):
        for m in range(len(self.bg_mean)):
            ins_m = self.insulin_mean[m] if m < len(self.insulin_mean) else np.nan
            ins_s = self.insulin_std[m] if m < len(self.insulin_std) else np.nan
            yield m, self.bg_mean[m], self.bg_std[m], ins_m, ins_s


def aggregate(records, indicators=None) -> Aggregate:
    """Indicator means/S.D. and per-minute mean +/- S.D. bands of BG and insulin."""
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    horizons = {r.horizon for r in records}
    if len(horizons) != 1:
        raise ValueError(f"records have mismatched horizons {sorted(horizons)}")
    inds = indicators or [compute_indicators(r) for r in records]
    table = {c: np.array([getattr(i, c) for i in inds], dtype=float) for c in INDICATOR_COLUMNS}
    mean = {c: float(np.mean(v)) for c, v in table.items()}
    std = {c: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for c, v in table.items()}
    bg = np.array([r.glucose for r in records])
    ins = np.array([r.insulin for r in records])
    ddof = 1 if len(records) > 1 else 0
    return Aggregate(mean, std, len(records), bg.mean(axis=0), bg.std(axis=0, ddof=ddof),
                     ins.mean(axis=0), ins.std(axis=0, ddof=ddof))
