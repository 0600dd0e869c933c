"""Model-predictive insulin controllers.

All three controllers share one transcription: insulin is a zero-order hold
on ``control_knot_period`` knots over the control horizon and basal after it;
predictions are 1-min RK4 rollouts from the initial state; the objective is
the asymmetric BG tracking cost plus ``beta`` times squared insulin changes.

* robust: min over insulin knots, max over disturbance knots boxed by the tube
* hcl: disturbances pinned at rest
* perfect: disturbances are the realized future inputs
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from glucoloop import _kernels as K
from glucoloop.model import PatientParams, n_substeps, SUBSTEP_MIN
from glucoloop.solver import (FAILED, MinimaxProblem, NlpProblem, minimax, minimize,
                              REL_STEP)
from glucoloop.uncertainty import REST_U

log = logging.getLogger(__name__)


@dataclass
class ControlConfig:
    Np: int = 150
    Nc: int = 100
    control_knot_period: int = 10
    uncertainty_knot_period: int = 30
    gamma: float = 2.0
    beta: float = 1.0 / 50.0
    target_bg: float = 7.8
    insulin_min: float = 0.0
    insulin_max: float = 250.0
    basal: float = float("nan")
    outer_max_iterations: int = 60
    outer_tolerance: float = 1e-3
    inner_max_iterations: int = 40
    inner_tolerance: float = 1e-3
    ftol: float = 1e-9

    def __post_init__(self):
        if self.Nc > self.Np:
            raise ValueError("Nc must not exceed Np")
        if self.Nc % self.control_knot_period or self.Np % self.uncertainty_knot_period:
            raise ValueError("knot periods must divide their horizons")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0 <= self.insulin_min <= self.insulin_max:
            raise ValueError("insulin bounds must satisfy 0 <= min <= max")

    @property
    def n_insulin_knots(self) -> int:
        return self.Nc // self.control_knot_period

    @property
    def n_uncertainty_knots(self) -> int:
        return self.Np // self.uncertainty_knot_period


def stage_cost(predicted_bg, target: float, gamma: float):
    """gamma * e^2 below target, e^2 above (e = BG - target)."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    e = np.asarray(predicted_bg, dtype=float) - target
    out = np.where(e < 0, gamma * e * e, e * e)
    return float(out) if out.ndim == 0 else out


@dataclass
class ControlDiagnostics:
    command: float
    objective: float
    status: str
    fallback: bool = False
    insulin_plan: np.ndarray | None = None
    worst_case_u: np.ndarray | None = None
    iterations: int = 0
    inner_solves: int = 0

    def as_dict(self) -> dict:
        return {"command": self.command, "objective": self.objective, "status": self.status,
                "fallback": self.fallback, "iterations": self.iterations,
                "inner_solves": self.inner_solves}


class _Transcription:
    """Knot <-> per-minute mapping and objective/gradient closures for one step."""

    def __init__(self, x0, prev_insulin, cfg: ControlConfig, params: PatientParams,
                 u_lo, u_hi):
        self.x0 = np.ascontiguousarray(x0, dtype=float)
        self.prev = float(prev_insulin)
        self.cfg = cfg
        self.p = params.as_array()
        self.n_sub = n_substeps(1.0, SUBSTEP_MIN)
        self.lo = np.ascontiguousarray(u_lo, dtype=float)
        self.hi = np.ascontiguousarray(u_hi, dtype=float)
        Np, kc = cfg.Np, cfg.control_knot_period
        nk = cfg.n_insulin_knots
        self.ins_blocks = np.array([[j * kc, (j + 1) * kc, 0] for j in range(nk)], dtype=np.int64)
        self.ins_base = np.full(Np, cfg.basal)
        # free disturbance knots: one block per (knot, channel) whose box is not a point
        ku = cfg.uncertainty_knot_period
        blocks, w_lo, w_hi = [], [], []
        for j in range(cfg.n_uncertainty_knots):
            sl = slice(j * ku, (j + 1) * ku)
            for c in range(3):
                lo_c, hi_c = self.lo[sl, c].min(), self.hi[sl, c].max()
                if hi_c > lo_c:
                    blocks.append([j * ku, (j + 1) * ku, c + 1])
                    w_lo.append(lo_c)
                    w_hi.append(hi_c)
        self.u_blocks = np.array(blocks, dtype=np.int64).reshape(-1, 3)
        self.w_lo = np.array(w_lo)
        self.w_hi = np.array(w_hi)
        self.u_base = self.lo.copy()

    def insulin_minutes(self, v):
        ins = self.ins_base.copy()
        ins[: self.cfg.Nc] = np.repeat(v, self.cfg.control_knot_period)
        return ins

    def u_minutes(self, w):
        u = self.u_base.copy()
        for (s, e, ch), val in zip(self.u_blocks, w):
            c = ch - 1
            u[s:e, c] = np.clip(val, self.lo[s:e, c], self.hi[s:e, c])
        return u

    def penalty(self, v):
        d = np.diff(np.concatenate(([self.prev], v)))
        return self.cfg.beta * float(d @ d)

    def penalty_grad(self, v):
        d = np.diff(np.concatenate(([self.prev], v)))
        g = 2.0 * d
        g[:-1] -= 2.0 * d[1:]
        return self.cfg.beta * g

    def objective(self, v, w):
        cost = K.tracking_cost(self.x0, self.insulin_minutes(v), self.u_minutes(w),
                               self.cfg.target_bg, self.cfg.gamma, self.p, self.n_sub)
        return cost + self.penalty(v)

    def grad_v(self, v, w):
        f, g = K.tracking_cost_grad(self.x0, self.insulin_minutes(v), self.u_minutes(w),
                                    self.lo, self.hi, self.ins_blocks, np.asarray(v, float),
                                    self.cfg.target_bg, self.cfg.gamma, self.p, self.n_sub,
                                    REL_STEP)
        return f + self.penalty(v), g + self.penalty_grad(v)

    def grad_w(self, v, w):
        f, g = K.tracking_cost_grad(self.x0, self.insulin_minutes(v), self.u_minutes(w),
                                    self.lo, self.hi, self.u_blocks, np.asarray(w, float),
                                    self.cfg.target_bg, self.cfg.gamma, self.p, self.n_sub,
                                    REL_STEP)
        return f + self.penalty(v), g


def _shift_plan(plan, elapsed: int, cfg: ControlConfig) -> np.ndarray:
    """Previous insulin plan advanced by ``elapsed`` minutes, basal-padded."""
    kc = cfg.control_knot_period
    nk = cfg.n_insulin_knots
    if plan is None:
        return np.full(nk, cfg.basal)
    idx = (np.arange(nk) * kc + elapsed) // kc
    out = np.full(nk, cfg.basal)
    ok = idx < len(plan)
    out[ok] = np.asarray(plan)[idx[ok]]
    return out


def _check_state(x_hat, cfg):
    x = np.asarray(x_hat, dtype=float)
    if x.shape != (K.N_STATE,) or not np.all(np.isfinite(x)):
        raise ValueError("invalid state estimate")
    if not np.isfinite(cfg.basal):
        raise ValueError("ControlConfig.basal must be set")
    return x


def _finish(res_x, value, status, cfg, u=None, nit=0, inner=0) -> ControlDiagnostics:
    if status == FAILED or not np.isfinite(value):
        log.warning("controller solve failed, falling back to basal")
        return ControlDiagnostics(cfg.basal, float(value), status, True, None, None, nit, inner)
    cmd = float(np.clip(res_x[0], cfg.insulin_min, cfg.insulin_max))
    return ControlDiagnostics(cmd, float(value), status, False, np.asarray(res_x).copy(),
                              None if u is None else np.asarray(u).copy(), nit, inner)


def robust_mpc_step(x_hat, u_lower, u_upper, prev_insulin: float, cfg: ControlConfig,
                    params: PatientParams, warm_plan=None, warm_u=None) -> ControlDiagnostics:
    """One robust minimax MPC solve.

    ``u_lower``/``u_upper`` are per-minute tube bounds over the prediction
    horizon (shape (Np, 3)).
    """
    x = _check_state(x_hat, cfg)
    tr = _Transcription(x, prev_insulin, cfg, params, u_lower, u_upper)
    nk = cfg.n_insulin_knots
    v0 = np.full(nk, cfg.basal) if warm_plan is None else np.asarray(warm_plan, float)
    if tr.u_blocks.shape[0] == 0:
        return _minimize_fixed(tr, v0, cfg)
    u0 = None
    if warm_u is not None and len(warm_u) == len(tr.w_lo):
        u0 = np.asarray(warm_u, float)
    prob = MinimaxProblem(
        tr.objective, np.full(nk, cfg.insulin_min), np.full(nk, cfg.insulin_max), v0,
        tr.w_lo, tr.w_hi, u0, grad_x=tr.grad_v, grad_u=tr.grad_w,
        outer_max_iterations=cfg.outer_max_iterations, outer_tolerance=cfg.outer_tolerance,
        inner_max_iterations=cfg.inner_max_iterations, inner_tolerance=cfg.inner_tolerance,
        ftol=cfg.ftol)
    try:
        res = minimax(prob)
    except FloatingPointError:
        return _finish(None, np.inf, FAILED, cfg)
    return _finish(res.x, res.value, res.status, cfg, res.u, res.nit, res.inner_solves)


def _minimize_fixed(tr: _Transcription, v0, cfg: ControlConfig) -> ControlDiagnostics:
    w = np.zeros(0)
    nk = cfg.n_insulin_knots
    prob = NlpProblem(lambda v: tr.objective(v, w), np.full(nk, cfg.insulin_min),
                      np.full(nk, cfg.insulin_max), v0, lambda v: tr.grad_v(v, w),
                      cfg.outer_max_iterations, cfg.outer_tolerance, cfg.ftol)
    res = minimize(prob)
    return _finish(res.x, res.fun, res.status, cfg, None, res.nit)


def hcl_step(x_hat, prev_insulin: float, cfg: ControlConfig, params: PatientParams,
             warm_plan=None) -> ControlDiagnostics:
    """MPC that assumes rest disturbances (0, 0, 8) over the whole horizon."""
    x = _check_state(x_hat, cfg)
    rest = np.tile(REST_U, (cfg.Np, 1))
    tr = _Transcription(x, prev_insulin, cfg, params, rest, rest)
    v0 = np.full(cfg.n_insulin_knots, cfg.basal) if warm_plan is None else np.asarray(warm_plan, float)
    return _minimize_fixed(tr, v0, cfg)


def perfect_step(x_plant, realized_u, prev_insulin: float, cfg: ControlConfig,
                 params: PatientParams, warm_plan=None) -> ControlDiagnostics:
    """MPC with the true state and the true future disturbances (shape (Np, 3))."""
    x = _check_state(x_plant, cfg)
    u = np.ascontiguousarray(realized_u, dtype=float).reshape(cfg.Np, 3)
    tr = _Transcription(x, prev_insulin, cfg, params, u, u)
    v0 = np.full(cfg.n_insulin_knots, cfg.basal) if warm_plan is None else np.asarray(warm_plan, float)
    return _minimize_fixed(tr, v0, cfg)


CONTROLLER_KINDS = ("robust", "hcl", "perfect")


@dataclass
class Controller:
    """Stateful wrapper that carries warm starts between steps."""

    kind: str
    cfg: ControlConfig
    params: PatientParams
    _plan: np.ndarray | None = field(default=None, repr=False)
    _u: np.ndarray | None = field(default=None, repr=False)
    _last_t: int | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}")

    def step(self, t: int, x_hat, prev_insulin: float, u_lower=None, u_upper=None,
             realized_u=None) -> ControlDiagnostics:
        elapsed = 0 if self._last_t is None else t - self._last_t
        warm = _shift_plan(self._plan, elapsed, self.cfg) if self._plan is not None else None
        if self.kind == "robust":
            diag = robust_mpc_step(x_hat, u_lower, u_upper, prev_insulin, self.cfg,
                                   self.params, warm, self._u)
            if diag.worst_case_u is not None:
                self._u = diag.worst_case_u
        elif self.kind == "hcl":
            diag = hcl_step(x_hat, prev_insulin, self.cfg, self.params, warm)
        else:
            diag = perfect_step(x_hat, realized_u, prev_insulin, self.cfg, self.params, warm)
        self._plan = diag.insulin_plan
        self._last_t = t
        return diag
