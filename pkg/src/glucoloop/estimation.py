"""State and disturbance estimation from CGM readings.

``mhe_step`` solves a windowed least-squares problem over the initial state
of the window and piecewise-constant disturbance knots boxed by the tube.
``ekf_step`` is an extended Kalman filter that replaces the disturbances by
their expected values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from glucoloop import _kernels as K
from glucoloop.model import PatientParams, SUBSTEP_MIN, n_substeps
from glucoloop.solver import NlpProblem, REL_STEP, minimize

log = logging.getLogger(__name__)

CGM_PERIOD = 5

# lower limits on the per-component scale used by the arrival cost and the
# initial-state box; gut and muscle states are zero at rest. The gut floor is
# about one meal's worth of glucose so a meal the tube did not foresee can
# still be placed in the gut at the window start
_SCALE_FLOOR = np.array([1.0, 1.0, 1.0, 300.0, 300.0, 1.0, 1.0, 1.0, 1.0,
                         1e-3, 1e-3, 1e-2, 100.0, 10.0])

# arrival-cost multipliers: plasma/interstitial glucose is pinned harder than
# the rest so that unexplained rises are attributed to the gut
DEFAULT_ARRIVAL_WEIGHTS = (30.0, 30.0, 30.0) + (1.0,) * 11

# scale for the EKF's initial covariance and optional process noise; gut
# floor kept small since the filter already feeds expected meal inputs
_EKF_SCALE_FLOOR = np.array([1.0, 1.0, 1.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0,
                             1e-3, 1e-3, 1e-2, 100.0, 10.0])


def state_scale(x_ref, floor=None) -> np.ndarray:
    floor = _SCALE_FLOOR if floor is None else floor
    return np.maximum(np.abs(np.asarray(x_ref, dtype=float)), floor)


@dataclass
class MheConfig:
    window_N: int = 60
    mu: float = 100.0
    noise_var_q: float = 0.1521
    uncertainty_knot_period: int = 30
    knot_weight: float = 0.075
    bound_factor: float = 10.0
    max_iterations: int = 100
    tolerance: float = 1e-5
    ftol: float = 1e-10
    state_weights: tuple = DEFAULT_ARRIVAL_WEIGHTS   # per-state arrival-cost multipliers

    def arrival_weights(self) -> np.ndarray:
        return np.asarray(self.state_weights, dtype=float)

    def __post_init__(self):
        if self.window_N < CGM_PERIOD:
            raise ValueError("window_N must cover at least one CGM period")
        if self.mu <= 0 or self.noise_var_q <= 0:
            raise ValueError("mu and noise_var_q must be positive")
        if self.uncertainty_knot_period < 1:
            raise ValueError("uncertainty_knot_period must be >= 1")
        w = self.arrival_weights()
        if w.shape != (K.N_STATE,) or np.any(w <= 0):
            raise ValueError("state_weights must be 14 positive numbers")


@dataclass
class EstimatorOutput:
    x_hat: np.ndarray
    u_hat: np.ndarray          # per-minute estimate over the window, shape (n, 3)
    u_knots: np.ndarray        # (n_knots, 3)
    objective: float
    status: str = "converged"
    fallback: bool = False
    trajectory: np.ndarray | None = field(default=None, repr=False)


def _knot_edges(n: int, period: int):
    edges = list(range(0, n, period)) + [n]
    return list(zip(edges[:-1], edges[1:]))


def mhe_step(obs_minutes, obs_values, insulin_minutes, u_lower, u_upper, prior_x,
             cfg: MheConfig, params: PatientParams, x_scale=None, warm_x=None,
             warm_u=None) -> EstimatorOutput:
    """Windowed estimate of the current state and disturbances.

    ``obs_minutes`` are reading times relative to the window start (0..n),
    ``insulin_minutes`` the applied insulin per minute (length n) and
    ``u_lower``/``u_upper`` the per-minute tube bounds (n, 3). ``prior_x`` is
    the previous estimate of the state at the window start. Knots are pulled
    toward the lower tube bound (no event).
    """
    ins = np.ascontiguousarray(insulin_minutes, dtype=float)
    n = ins.shape[0]
    lo = np.ascontiguousarray(u_lower, dtype=float).reshape(n, 3)
    hi = np.ascontiguousarray(u_upper, dtype=float).reshape(n, 3)
    om = np.ascontiguousarray(obs_minutes, dtype=np.int64)
    ov = np.ascontiguousarray(obs_values, dtype=float)
    prior = np.asarray(prior_x, dtype=float)
    scale = state_scale(prior if x_scale is None else x_scale)
    p = params.as_array()
    n_sub = n_substeps(1.0, SUBSTEP_MIN)

    edges = _knot_edges(n, cfg.uncertainty_knot_period)
    blocks, b_lo, b_span = [], [], []
    for s, e in edges:
        for c in range(3):
            l, h = lo[s:e, c].min(), hi[s:e, c].max()
            if h > l:
                blocks.append([s, e, c + 1])
                b_lo.append(l)
                b_span.append(h - l)
    blocks = np.array(blocks, dtype=np.int64).reshape(-1, 3)
    b_lo, b_span = np.array(b_lo), np.array(b_span)
    nb = len(blocks)
    kw = cfg.knot_weight / cfg.noise_var_q

    def unpack(z):
        return z[:K.N_STATE] * scale, b_lo + b_span * z[K.N_STATE:]

    def u_minutes(w):
        u = lo.copy()
        for (s, e, ch), val in zip(blocks, w):
            c = ch - 1
            u[s:e, c] = np.clip(val, lo[s:e, c], hi[s:e, c])
        return u

    base_u = lo.copy()
    aw = cfg.mu * cfg.arrival_weights()

    def objective(z):
        x0, w = unpack(z)
        d = (x0 - prior) / scale
        meas = K.measurement_cost(x0, ins, u_minutes(w), om, ov, p, n_sub)
        zk = z[K.N_STATE:]
        return float(aw @ (d * d)) + meas / cfg.noise_var_q + kw * float(zk @ zk)

    def gradient(z):
        x0, w = unpack(z)
        d = (x0 - prior) / scale
        u = u_minutes(w) if nb else base_u
        meas, g = K.measurement_cost_grad(x0, ins, u, lo, hi, blocks, w, om, ov, p,
                                          n_sub, REL_STEP)
        zk = z[K.N_STATE:]
        f = float(aw @ (d * d)) + meas / cfg.noise_var_q + kw * float(zk @ zk)
        gz = np.empty(K.N_STATE + nb)
        gz[:K.N_STATE] = 2.0 * aw * d + g[:K.N_STATE] * scale / cfg.noise_var_q
        gz[K.N_STATE:] = g[K.N_STATE:] * b_span / cfg.noise_var_q + 2.0 * kw * zk
        return f, gz

    z_lo = np.zeros(K.N_STATE + nb)
    z_hi = np.concatenate([np.full(K.N_STATE, cfg.bound_factor), np.ones(nb)])
    x_start = prior if warm_x is None else np.asarray(warm_x, dtype=float)
    z0 = np.zeros(K.N_STATE + nb)
    z0[:K.N_STATE] = x_start / scale
    if warm_u is not None and nb:
        wu = np.asarray(warm_u, dtype=float)
        for b, (s, e, ch) in enumerate(blocks):
            seg = wu[s:min(e, len(wu)), ch - 1]
            if seg.size:
                z0[K.N_STATE + b] = (seg.mean() - b_lo[b]) / b_span[b]
    z0 = np.clip(z0, z_lo, z_hi)

    res = minimize(NlpProblem(objective, z_lo, z_hi, z0, gradient, cfg.max_iterations,
                              cfg.tolerance, cfg.ftol))
    x0, w = unpack(res.x)
    u = u_minutes(w)
    traj, _, failed = K.simulate(x0, ins, u, p, n_sub)
    if not res.success or failed >= 0 or not np.isfinite(res.fun):
        raise FloatingPointError(f"MHE solve failed ({res.status})")
    knots = np.array([u[s:e].mean(axis=0) for s, e in edges]).reshape(-1, 3)
    return EstimatorOutput(traj[-1].copy(), u, knots, float(res.fun), res.status,
                           False, traj)


class MovingHorizonEstimator:
    """Keeps reading/insulin histories and the last estimated trajectory.

    ``tube_lower``/``tube_upper`` are per-minute bounds from minute 0.
    """

    def __init__(self, params: PatientParams, x0, tube_lower, tube_upper,
                 cfg: MheConfig | None = None):
        self.params = params
        self.cfg = cfg or MheConfig()
        self.x_ref = np.asarray(x0, dtype=float).copy()
        self.scale = state_scale(self.x_ref)
        self.lo = np.asarray(tube_lower, dtype=float)
        self.hi = np.asarray(tube_upper, dtype=float)
        self.times: list[int] = []
        self.values: list[float] = []
        self.insulin: list[float] = []
        self.traj_start = 0
        self.traj = self.x_ref[None, :].copy()
        self.u_est = np.zeros((0, 3))
        self.u_start = 0
        self.last = None
        self.n_fallbacks = 0

    def record_insulin(self, per_minute):
        self.insulin.extend(float(v) for v in np.atleast_1d(per_minute))

    def _traj_state(self, minute: int) -> np.ndarray:
        i = minute - self.traj_start
        if 0 <= i < len(self.traj):
            return self.traj[i]
        return self.traj[-1]

    def update(self, t: int, y: float) -> EstimatorOutput:
        if len(self.insulin) < t:
            raise ValueError("insulin history does not reach the current time")
        self.times.append(t)
        self.values.append(float(y))
        t0 = max(0, t - self.cfg.window_N)
        prior = self._traj_state(t0)
        obs = [(tm - t0, v) for tm, v in zip(self.times, self.values) if t0 <= tm <= t
               and (tm > t - self.cfg.window_N or t0 == 0)]
        om = np.array([o[0] for o in obs], dtype=np.int64)
        ov = np.array([o[1] for o in obs])
        ins = np.array(self.insulin[t0:t])
        warm_u = None
        if len(self.u_est):
            warm_u = self.u_est[t0 - self.u_start:] if t0 >= self.u_start else None
        try:
            out = mhe_step(om, ov, ins, self.lo[t0:t], self.hi[t0:t], prior, self.cfg,
                           self.params, self.scale, warm_x=prior, warm_u=warm_u)
        except FloatingPointError as exc:
            log.warning("MHE at t=%d fell back to open-loop prediction: %s", t, exc)
            out = self._fallback(t)
        self.traj_start = t0 if not out.fallback else self.traj_start
        if out.trajectory is not None:
            self.traj = out.trajectory
        self.u_est = out.u_hat
        self.u_start = t0 if not out.fallback else t - len(out.u_hat)
        self.last = out
        return out

    def _fallback(self, t: int) -> EstimatorOutput:
        self.n_fallbacks += 1
        t_prev = self.times[-2] if len(self.times) > 1 else t
        x_prev = self.last.x_hat if self.last is not None else self.x_ref
        mid = 0.5 * (self.lo[t_prev:t] + self.hi[t_prev:t])
        ins = np.array(self.insulin[t_prev:t])
        p = self.params.as_array()
        traj, _, _ = K.simulate(x_prev, ins, np.ascontiguousarray(mid), p,
                                n_substeps(1.0, SUBSTEP_MIN))
        self.traj_start = t_prev
        knots = mid.mean(axis=0, keepdims=True) if len(mid) else np.zeros((0, 3))
        return EstimatorOutput(traj[-1].copy(), mid, knots, float("nan"), "failed", True,
                               traj)


# ---------------------------------------------------------------- EKF

def rhs_jacobian(x, insulin: float, u, params: PatientParams,
                 rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the model right-hand side w.r.t. the state."""
    x = np.asarray(x, dtype=float)
    p = params.as_array()
    dg, mm, o2 = (float(v) for v in u)
    J = np.empty((K.N_STATE, K.N_STATE))
    fp = np.empty(K.N_STATE)
    fm = np.empty(K.N_STATE)
    xw = x.copy()
    for i in range(K.N_STATE):
        h = rel_step * max(abs(x[i]), 1.0)
        xw[i] = x[i] + h
        K.rhs(xw, insulin, dg, mm, o2, p, fp)
        xw[i] = x[i] - h
        K.rhs(xw, insulin, dg, mm, o2, p, fm)
        xw[i] = x[i]
        J[:, i] = (fp - fm) / (2.0 * h)
    return J


def default_process_cov(x_ref, frac: float = 0.01) -> np.ndarray:
    """Diagonal per-CGM-period process covariance, ``frac`` of the state scale."""
    return np.diag((frac * state_scale(x_ref, _EKF_SCALE_FLOOR)) ** 2)


def _stabilize(P: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    P = 0.5 * (P + P.T)
    w_min = np.linalg.eigvalsh(P)[0]
    if w_min < 0:
        P = P + (eps - w_min) * np.eye(P.shape[0])
    return P


def ekf_step(y: float, insulin_minutes, expected_u_minutes, prev_mean, prev_cov,
             noise_var_q: float, params: PatientParams, process_cov=None):
    """Predict over the given minutes with expected disturbances, then update.

    Returns ``(mean, cov, ok)``; ``ok`` is False when the covariance went
    non-finite and the caller should reset it.
    """
    x = np.asarray(prev_mean, dtype=float).copy()
    P = np.asarray(prev_cov, dtype=float).copy()
    ins = np.ascontiguousarray(insulin_minutes, dtype=float)
    u = np.ascontiguousarray(expected_u_minutes, dtype=float).reshape(len(ins), 3)
    n = len(ins)
    if n:
        A = rhs_jacobian(x, float(ins.mean()), u.mean(axis=0), params)
        F = expm(A * n)
        traj, _, _ = K.simulate(x, ins, u, params.as_array(), n_substeps(1.0, SUBSTEP_MIN))
        x = traj[-1].copy()
        P = F @ P @ F.T
        if process_cov is not None:
            P = P + np.asarray(process_cov) * (n / CGM_PERIOD)
    if np.isfinite(noise_var_q):
        S = P[K.C, K.C] + noise_var_q
        gain = P[:, K.C] / S
        x = x + gain * (y - x[K.C])
        ImKH = np.eye(K.N_STATE)
        ImKH[:, K.C] -= gain
        P = ImKH @ P @ ImKH.T + noise_var_q * np.outer(gain, gain)
    x = np.maximum(x, 0.0)
    if not np.all(np.isfinite(P)) or not np.all(np.isfinite(x)):
        return x, P, False
    return x, _stabilize(P), True


class ExtendedKalmanFilter:
    def __init__(self, params: PatientParams, x0, expected_u, noise_var_q: float = 0.1521,
                 P0=None, process_cov=None):
        """``expected_u`` is a per-minute (n, 3) array of disturbance means.

        Without ``process_cov`` the prediction adds no process noise, so all
        model mismatch must come through the disturbance means.
        """
        self.params = params
        self.mean = np.asarray(x0, dtype=float).copy()
        self.P0 = default_process_cov(x0) if P0 is None else np.asarray(P0, dtype=float)
        self.cov = self.P0.copy()
        self.q = noise_var_q
        self.Q = process_cov
        self.expected_u = np.asarray(expected_u, dtype=float)
        self.insulin: list[float] = []
        self.t_last: int | None = None
        self.n_resets = 0

    def record_insulin(self, per_minute):
        self.insulin.extend(float(v) for v in np.atleast_1d(per_minute))

    def update(self, t: int, y: float) -> EstimatorOutput:
        t0 = t if self.t_last is None else self.t_last
        ins = np.array(self.insulin[t0:t])
        u = self.expected_u[t0:t]
        mean, cov, ok = ekf_step(y, ins, u, self.mean, self.cov, self.q, self.params,
                                 self.Q)
        if not ok:
            log.warning("EKF covariance became non-finite at t=%d; reset", t)
            self.n_resets += 1
            cov = self.P0.copy()
        self.mean, self.cov, self.t_last = mean, cov, t
        knots = u.mean(axis=0, keepdims=True) if len(u) else np.zeros((0, 3))
        return EstimatorOutput(mean.copy(), u.copy(), knots, float("nan"),
                               "converged" if ok else "reset", not ok)
