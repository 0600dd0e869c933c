"""Gluco-regulatory plant: parameters, state, ODE, CGM model and steady states.

Glucose concentrations are in mmol/L throughout; mg/dL only appears in
reports via :data:`MGDL_PER_MMOLL`.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from glucoloop import _kernels as K
from glucoloop.errors import ConfigError, IntegrationError, NumericInputError, SolverError

log = logging.getLogger(__name__)

MGDL_PER_MMOLL = 18.016
GLUCOSE_MMOL_PER_G = 1000.0 / 180.156
REST_O2 = 8.0
SUBSTEP_MIN = 0.5          # substep for controller/estimator predictions
# the plant itself runs finer: the rest-uptake and appearance-ceiling kinks
# cost RK4 its order, and 1/8 min keeps step-halving changes below 1e-6
PLANT_SUBSTEP_MIN = 0.125
HIGH_DOSE_INSULIN = 250.0  # 15 U/h in mU/min

STATE_NAMES = ("Q1", "Q2", "C", "G1", "G2", "Q1a", "Q1b", "Q2i", "Q3",
               "x1", "x2", "x3", "UA", "O2m")


@dataclass(frozen=True)
class PatientParams:
    """Table-1 constants of the virtual patient.

    Weight-scaled quantities default to their per-kg coefficients times
    ``body_weight_kg``; use :meth:`from_body_weight` to get those defaults.
    """

    body_weight_kg: float = 75.0
    F01: float = 0.0104 * 75.0
    F01_thr: float = 4.5
    EGP0: float = 0.0158 * 75.0
    k12: float = 0.0793
    VG: float = 0.1797 * 75.0
    R_thr: float = 9.0
    R_cl: float = 0.003
    K_split: float = 0.7958
    k_ia1: float = 0.0113
    k_ia2: float = 0.0197
    k_e: float = 0.1735
    Vmax_LD: float = 2.9639
    km_LD: float = 47.5305
    k_a1: float = 0.007
    k_a2: float = 0.0331
    k_a3: float = 0.0308
    S_IT: float = 0.0046
    S_ID: float = 0.0006
    S_IE: float = 0.0384
    VI: float = 0.1443 * 75.0
    Ag: float = 0.8121
    Ug_ceil: float = 0.0275 * 75.0
    Tmax_lower: float = 48.8385
    k_a_int: float = 0.025
    k_UA: float = 1.0 / 30.0
    k_O2: float = 5.0 / 3.0
    k_MPGU: float = 35.0
    k_HPG: float = 155.0
    k_PIU: float = 2.4
    a_UA_O2: float = 0.006
    b_UA_O2: float = 1.2264
    c_UA_O2: float = -10.1958
    _array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        arr = np.array([getattr(self, f.name) for f in _ARRAY_FIELDS], dtype=float)
        if not np.all(np.isfinite(arr)) or not math.isfinite(self.body_weight_kg):
            raise NumericInputError("patient parameters must be finite")
        object.__setattr__(self, "_array", arr)
        arr.setflags(write=False)

    @classmethod
    def from_body_weight(cls, body_weight_kg: float = 75.0, **overrides) -> "PatientParams":
        bw = float(body_weight_kg)
        scaled = dict(F01=0.0104 * bw, EGP0=0.0158 * bw, VG=0.1797 * bw,
                      VI=0.1443 * bw, Ug_ceil=0.0275 * bw)
        scaled.update(overrides)
        return cls(body_weight_kg=bw, **scaled)

    def replace(self, **changes) -> "PatientParams":
        return dataclasses.replace(self, **changes)

    def as_array(self) -> np.ndarray:
        return self._array

    def validate(self) -> list[str]:
        """Return the list of violated parameter invariants (empty if valid)."""
        problems = []
        for f in _ARRAY_FIELDS:
            v = getattr(self, f.name)
            if f.name in _SIGNED or f.name in _NONNEG:
                continue
            if not v > 0:
                problems.append(f"{f.name} must be > 0 (got {v})")
        for name in _NONNEG:
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not 0.0 <= self.K_split <= 1.0:
            problems.append("K_split must lie in [0, 1]")
        if not self.F01_thr < self.R_thr:
            problems.append("F01_thr must be below R_thr")
        return problems


_ARRAY_FIELDS = [f for f in dataclasses.fields(PatientParams)
                 if f.name not in ("body_weight_kg", "_array")]
assert len(_ARRAY_FIELDS) == K.N_PARAM
_SIGNED = {"c_UA_O2", "K_split"}
# sensitivities may be zeroed for what-if studies (e.g. feasibility checks)
_NONNEG = {"S_IT", "S_ID", "S_IE", "EGP0", "k_PIU"}

# JSON keys carry their units
PARAM_FILE_KEYS = {
    "body_weight_kg": "body_weight_kg",
    "F01": "F01_mmol_per_min",
    "F01_thr": "F01_thr_mmol_per_L",
    "EGP0": "EGP0_mmol_per_min",
    "k12": "k12_per_min",
    "VG": "VG_L",
    "R_thr": "R_thr_mmol_per_L",
    "R_cl": "R_cl_per_min",
    "K_split": "K_split_fraction",
    "k_ia1": "k_ia1_per_min",
    "k_ia2": "k_ia2_per_min",
    "k_e": "k_e_per_min",
    "Vmax_LD": "Vmax_LD_mU_per_min",
    "km_LD": "km_LD_mU",
    "k_a1": "k_a1_per_min",
    "k_a2": "k_a2_per_min",
    "k_a3": "k_a3_per_min",
    "S_IT": "S_IT_L_per_min_per_mU",
    "S_ID": "S_ID_L_per_min_per_mU",
    "S_IE": "S_IE_L_per_mU",
    "VI": "VI_L",
    "Ag": "Ag_fraction",
    "Ug_ceil": "Ug_ceil_mmol_per_min",
    "Tmax_lower": "Tmax_lower_min",
    "k_a_int": "k_a_int_per_min",
    "k_UA": "k_UA_per_min",
    "k_O2": "k_O2_per_min",
    "k_MPGU": "k_MPGU_mg_per_min",
    "k_HPG": "k_HPG_mg_per_min",
    "k_PIU": "k_PIU_unitless",
    "a_UA_O2": "a_UA_O2_mg_per_min",
    "b_UA_O2": "b_UA_O2_mg_per_min",
    "c_UA_O2": "c_UA_O2_mg_per_min",
}
REQUIRED_PARAM_KEYS = ("body_weight_kg",)


def load_patient_params(path: str | Path) -> PatientParams:
    """Read a flat JSON parameter file.

    Only ``body_weight_kg`` is required; every other key overrides the
    weight-scaled default. Unknown keys are rejected.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read patient file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("patient file must hold a JSON object")
    by_key = {v: k for k, v in PARAM_FILE_KEYS.items()}
    unknown = sorted(set(doc) - set(by_key))
    if unknown:
        raise ConfigError(f"unknown patient keys: {', '.join(unknown)}")
    missing = [k for k in REQUIRED_PARAM_KEYS if k not in doc]
    if missing:
        raise ConfigError(f"missing patient keys: {', '.join(missing)}")
    values = {by_key[k]: float(v) for k, v in doc.items()}
    bw = values.pop("body_weight_kg")
    params = PatientParams.from_body_weight(bw, **values)
    problems = params.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    return params


def dump_patient_params(params: PatientParams) -> dict:
    return {key: getattr(params, name) for name, key in PARAM_FILE_KEYS.items()}


class UncertaintyInput(NamedTuple):
    """Meal/exercise disturbance (DG mmol/min, MM fraction, O2 percent)."""

    DG: float = 0.0
    MM: float = 0.0
    O2: float = REST_O2


REST_INPUT = UncertaintyInput()


class PlantState(NamedTuple):
    """Named view of the 14-dimensional plant state."""

    Q1: float
    Q2: float
    C: float
    G1: float
    G2: float
    Q1a: float
    Q1b: float
    Q2i: float
    Q3: float
    x1: float
    x2: float
    x3: float
    UA: float
    O2m: float

    @classmethod
    def from_array(cls, arr) -> "PlantState":
        return cls(*map(float, arr))

    def to_array(self) -> np.ndarray:
        return np.array(self, dtype=float)

    def glucose(self, params: PatientParams) -> float:
        return self.Q1 / params.VG

    def insulin_conc(self, params: PatientParams) -> float:
        return self.Q3 / params.VI


def _as_state(state) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    if x.shape != (K.N_STATE,):
        raise ValueError(f"state must have 14 components, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericInputError("non-finite plant state")
    return x


def _as_input(u) -> tuple[float, float, float]:
    dg, mm, o2 = (float(v) for v in u)
    if not all(math.isfinite(v) for v in (dg, mm, o2)):
        raise NumericInputError("non-finite uncertainty input")
    return dg, mm, o2


def _check_insulin(insulin: float) -> float:
    insulin = float(insulin)
    if not math.isfinite(insulin):
        raise NumericInputError("non-finite insulin rate")
    if insulin < 0:
        raise ValueError(f"insulin rate must be >= 0, got {insulin}")
    return insulin


def glucose(state, params: PatientParams) -> float:
    return float(np.asarray(state)[K.Q1]) / params.VG


def ode_rhs(state, insulin: float, u, params: PatientParams) -> np.ndarray:
    """Time derivative of the 14-state plant under insulin rate and disturbance."""
    x = _as_state(state)
    ins = _check_insulin(insulin)
    dg, mm, o2 = _as_input(u)
    out = np.empty(K.N_STATE)
    K.rhs(x, ins, dg, mm, o2, params.as_array(), out)
    return out


def measure(state, noise_std: float = math.sqrt(0.1521), rng=None) -> float:
    """CGM reading: interstitial glucose plus Gaussian noise, clamped at 0."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    x = _as_state(state)
    reading = x[K.C]
    if noise_std > 0:
        if rng is None:
            raise ValueError("an rng is required when noise_std > 0")
        reading += noise_std * rng.standard_normal()
    return max(float(reading), 0.0)


@dataclass
class ClampStats:
    """Counts clamp-to-zero events; owned by whoever integrates."""

    count: int = 0
    min_preclamp: float = 0.0

    def update(self, raw: np.ndarray) -> None:
        n = int(raw[0])
        if n:
            self.count += n
            self.min_preclamp = min(self.min_preclamp, float(raw[1]))
            log.debug("clamped %d negative state components", n)


def n_substeps(dt: float, max_substep: float = SUBSTEP_MIN) -> int:
    return max(1, int(math.ceil(dt / max_substep - 1e-12)))


def integrate_step(state, insulin: float, u, params: PatientParams, dt: float,
                   max_substep: float = PLANT_SUBSTEP_MIN, stats: ClampStats | None = None,
                   t0: float = 0.0) -> np.ndarray:
    """Advance the plant by ``dt`` minutes with constant inputs (RK4)."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    x = _as_state(state).copy()
    ins = _check_insulin(insulin)
    dg, mm, o2 = _as_input(u)
    work = np.empty((5, K.N_STATE))
    raw = np.zeros(2)
    ok = K.rk4_advance(x, ins, dg, mm, o2, params.as_array(), float(dt),
                       n_substeps(dt, max_substep), work, raw)
    if stats is not None:
        stats.update(raw)
    if not ok:
        raise IntegrationError("plant integration diverged", t0 + dt)
    return x


def simulate(state, insulin_per_min, u_per_min, params: PatientParams,
             max_substep: float = PLANT_SUBSTEP_MIN, stats: ClampStats | None = None,
             t0: float = 0.0) -> np.ndarray:
    """Integrate over len(insulin_per_min) minutes; returns states[n+1, 14]."""
    x = _as_state(state)
    ins = np.ascontiguousarray(insulin_per_min, dtype=float)
    u = np.ascontiguousarray(u_per_min, dtype=float).reshape(len(ins), 3)
    if np.any(ins < 0):
        raise ValueError("insulin rates must be >= 0")
    states, raw, failed = K.simulate(x, ins, u, params.as_array(),
                                     n_substeps(1.0, max_substep))
    if stats is not None:
        stats.update(raw)
    if failed >= 0:
        raise IntegrationError("plant integration diverged", t0 + failed + 1)
    return states


# ---------------------------------------------------------------- steady state

def _subcutaneous_mass(rate: float, k: float, vmax: float, km: float) -> float:
    # positive root of rate*(km+Q) - k*Q*(km+Q) - vmax*Q = 0
    b = rate - k * km - vmax
    disc = b * b + 4.0 * k * rate * km
    return (b + math.sqrt(disc)) / (2.0 * k)


def _insulin_steady(insulin: float, p: PatientParams) -> dict:
    q1a = _subcutaneous_mass(p.K_split * insulin, p.k_ia1, p.Vmax_LD, p.km_LD)
    q1b = _subcutaneous_mass((1 - p.K_split) * insulin, p.k_ia2, p.Vmax_LD, p.km_LD)
    q2i = q1a
    q3 = (p.k_ia1 * q2i + p.k_ia2 * q1b) / p.k_e
    conc = q3 / p.VI
    return dict(Q1a=q1a, Q1b=q1b, Q2i=q2i, Q3=q3, x1=p.S_IT * conc,
                x2=p.S_ID * conc, x3=p.S_IE * conc)


def _glucose_balance(g: float, ins: dict, p: PatientParams) -> float:
    """dQ1/dt at rest after eliminating Q2 (zero for a steady state)."""
    f01c = p.F01 if g >= p.F01_thr else p.F01 * g / p.F01_thr
    fr = p.R_cl * (g - p.R_thr) * p.VG if g >= p.R_thr else 0.0
    egp = max(p.EGP0 * (1.0 - ins["x3"]), 0.0)
    x1, x2 = ins["x1"], ins["x2"]
    disposal = x1 * g * p.VG * x2 / (p.k12 + x2) if (p.k12 + x2) > 0 else 0.0
    return egp - f01c - fr - disposal


def _assemble(g: float, insulin: float, p: PatientParams) -> np.ndarray:
    ins = _insulin_steady(insulin, p)
    q1 = g * p.VG
    q2 = ins["x1"] * q1 / (p.k12 + ins["x2"])
    return np.array([q1, q2, g, 0.0, 0.0, ins["Q1a"], ins["Q1b"], ins["Q2i"],
                     ins["Q3"], ins["x1"], ins["x2"], ins["x3"], 0.0, REST_O2])


def _rest_ua(p: PatientParams) -> float:
    return max(p.a_UA_O2 * REST_O2 ** 2 + p.b_UA_O2 * REST_O2 + p.c_UA_O2, 0.0)


def steady_glucose(insulin: float, params: PatientParams) -> float:
    """Rest steady-state BG (mmol/L) under a constant insulin rate.

    The balance is strictly decreasing in G, so a bracketing solve is exact;
    if endogenous production cannot offset uptake even at G = 0 the steady
    state is G = 0.
    """
    from scipy.optimize import brentq

    ins = _insulin_steady(_check_insulin(insulin), params)
    if _glucose_balance(0.0, ins, params) <= 0.0:
        return 0.0
    hi = 50.0
    while _glucose_balance(hi, ins, params) > 0.0:
        hi *= 2.0
        if hi > 1e6:
            raise SolverError("no finite steady-state glucose", hi)
    return brentq(_glucose_balance, 0.0, hi, args=(ins, params), xtol=1e-14, rtol=1e-15)


def find_steady_state(target_bg: float, params: PatientParams, max_iter: int = 100,
                      tol: float = 1e-8) -> tuple[np.ndarray, float]:
    """Rest steady state at ``target_bg`` and the basal insulin that holds it.

    The linear and insulin compartments are eliminated analytically, leaving a
    scalar balance in the basal rate solved by damped Newton; bisection over
    a bracketing interval takes over if Newton stalls.
    """
    if not target_bg > params.F01_thr:
        raise ValueError("target BG must exceed F01_thr")
    if _rest_ua(params) > 0:
        raise SolverError("rest exercise uptake is nonzero; no rest steady state")

    def resid(ins):
        return _glucose_balance(target_bg, _insulin_steady(ins, params), params)

    if resid(0.0) <= 0.0:
        raise SolverError("target BG is unreachable without insulin removal", resid(0.0))

    ins = 10.0
    r = resid(ins)
    converged = False
    for _ in range(max_iter):
        if abs(r) < 1e-15:
            converged = True
            break
        h = 1e-6 * max(ins, 1.0)
        dr = (resid(ins + h) - resid(max(ins - h, 0.0))) / (ins + h - max(ins - h, 0.0))
        if not dr < 0:
            break
        step = -r / dr
        lam = 1.0
        while lam > 1e-6:
            cand = max(ins + lam * step, 0.0)
            rc = resid(cand)
            if abs(rc) < abs(r):
                break
            lam *= 0.5
        else:
            break
        ins, r = cand, rc
        if abs(lam * step) <= 1e-14 * max(ins, 1.0):
            converged = True
            break
    if not converged:
        # bracketing fallback: resid(0) > 0 and decreasing in insulin
        from scipy.optimize import brentq
        hi = 1.0
        while resid(hi) > 0:
            hi *= 2.0
            if hi > 1e7:
                raise SolverError("basal insulin search failed", resid(hi))
        ins = brentq(resid, 0.0, hi, xtol=1e-14, rtol=1e-15)

    x0 = _assemble(target_bg, ins, params)
    res = np.max(np.abs(ode_rhs(x0, ins, REST_INPUT, params)))
    if not res <= tol:
        raise SolverError("steady state residual above tolerance", res)
    return x0, float(ins)


@dataclass
class FeasibilityReport:
    zero_insulin_bg: float
    high_dose_bg: float
    zero_insulin_ok: bool
    high_dose_ok: bool

    @property
    def passed(self) -> bool:
        return self.zero_insulin_ok and self.high_dose_ok

    def as_dict(self) -> dict:
        return {
            "zero_insulin_bg_mgdl": self.zero_insulin_bg * MGDL_PER_MMOLL,
            "high_dose_bg_mgdl": self.high_dose_bg * MGDL_PER_MMOLL,
            "zero_insulin_ok": self.zero_insulin_ok,
            "high_dose_ok": self.high_dose_ok,
            "passed": self.passed,
        }


def check_physiologic_feasibility(params: PatientParams,
                                  high_dose: float = HIGH_DOSE_INSULIN) -> FeasibilityReport:
    """Zero insulin must give BG > 300 mg/dL, 15 U/h must give BG < 100 mg/dL."""
    g0 = steady_glucose(0.0, params)
    g_hi = steady_glucose(high_dose, params)
    return FeasibilityReport(
        zero_insulin_bg=g0,
        high_dose_bg=g_hi,
        zero_insulin_ok=g0 * MGDL_PER_MMOLL > 300.0,
        high_dose_ok=g_hi * MGDL_PER_MMOLL < 100.0,
    )


def default_params() -> PatientParams:
    return PatientParams.from_body_weight(75.0)
