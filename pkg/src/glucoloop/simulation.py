"""Closed-loop simulation: measure, estimate, control, hold, integrate."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from glucoloop import _kernels as K
from glucoloop.control import CONTROLLER_KINDS, ControlConfig, Controller
from glucoloop.errors import ConfigError, IntegrationError
from glucoloop.estimation import (CGM_PERIOD, EstimatorOutput, ExtendedKalmanFilter,
                                  MheConfig, MovingHorizonEstimator)
from glucoloop.model import PLANT_SUBSTEP_MIN, PatientParams, default_params, find_steady_state, \
    measure, n_substeps
from glucoloop.scenarios import Scenario, expected_inputs, realize_inputs, sample_events

log = logging.getLogger(__name__)

ESTIMATOR_KINDS = ("mhe", "ekf", "oracle")
TARGET_BG = 7.8


def run_streams(seed: int, repetition: int = 0):
    """Independent (event, noise, solver) generators for one repetition."""
    ss = np.random.SeedSequence([int(seed), int(repetition)])
    return tuple(np.random.default_rng(s) for s in ss.spawn(3))


@dataclass
class SimulationRecord:
    scenario: str
    controller: str
    estimator: str
    seed: int
    repetition: int
    basal: float
    horizon: int
    states: np.ndarray                   # (horizon+1, 14), per minute
    insulin: np.ndarray                  # (horizon,), per minute
    u_true: np.ndarray                   # (horizon, 3)
    u_hat: np.ndarray                    # (horizon, 3), NaN where not estimated
    cgm_times: np.ndarray
    cgm: np.ndarray
    x_hat: np.ndarray                    # (n_cgm, 14)
    commands: np.ndarray
    diagnostics: list = field(default_factory=list, repr=False)
    events: list = field(default_factory=list)
    failed: bool = False
    failure: str = ""
    vg: float = 1.0

    @property
    def glucose(self) -> np.ndarray:
        return self.states[:, K.Q1] / self.vg

    @property
    def glucose_hat(self) -> np.ndarray:
        return self.x_hat[:, K.Q1] / self.vg if len(self.x_hat) else np.zeros(0)

    def write_csv(self, path) -> None:
        """One row per minute; CGM-grid columns are blank between readings."""
        g = self.glucose
        cgm_at = {int(t): i for i, t in enumerate(self.cgm_times)}
        ghat = self.glucose_hat
        cols = ["t", "G", "C_reading", "insulin", "DG_true", "MM_true", "O2_true",
                "G_hat", "DG_hat", "MM_hat", "O2_hat", "controller_status"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for m in range(self.horizon + 1):
                i = cgm_at.get(m)
                row = [m, f"{g[m]:.6f}"]
                row.append(f"{self.cgm[i]:.6f}" if i is not None else "")
                if m < self.horizon:
                    row.append(f"{self.insulin[m]:.6f}")
                    row.extend(f"{v:.6f}" for v in self.u_true[m])
                else:
                    row.extend([""] * 4)
                row.append(f"{ghat[i]:.6f}" if i is not None else "")
                if m < self.horizon and np.all(np.isfinite(self.u_hat[m])):
                    row.extend(f"{v:.6f}" for v in self.u_hat[m])
                else:
                    row.extend([""] * 3)
                row.append(self.diagnostics[i]["status"] if i is not None and i < len(self.diagnostics) else "")
                w.writerow(row)


def _make_estimator(kind, controller_kind, scenario, params, x0, tube_lo, tube_hi, n_total,
                    mhe_cfg):
    if kind == "oracle":
        return None
    if kind == "mhe":
        cfg = mhe_cfg or MheConfig(noise_var_q=max(scenario.noise_var_q, 1e-6))
        if controller_kind == "hcl":
            # an HCL loop has no event knowledge: disturbances pinned at rest
            tube_lo = tube_hi = np.tile([0.0, 0.0, 8.0], (n_total, 1))
        return MovingHorizonEstimator(params, x0, tube_lo, tube_hi, cfg)
    expected = expected_inputs(scenario, n_total)
    return ExtendedKalmanFilter(params, x0, expected, max(scenario.noise_var_q, 1e-6))


def run_closed_loop(scenario: Scenario, controller_kind: str = "robust",
                    estimator_kind: str = "mhe", params: PatientParams | None = None,
                    seed: int | None = None, repetition: int = 0,
                    control_cfg: ControlConfig | None = None,
                    mhe_cfg: MheConfig | None = None) -> SimulationRecord:
    """Simulate one repetition of ``scenario`` under the chosen loop."""
    if controller_kind not in CONTROLLER_KINDS:
        raise ConfigError(f"controller must be one of {CONTROLLER_KINDS}")
    if estimator_kind not in ESTIMATOR_KINDS:
        raise ConfigError(f"estimator must be one of {ESTIMATOR_KINDS}")
    if controller_kind == "perfect" and estimator_kind != "oracle":
        raise ConfigError("the perfect controller requires the oracle estimator")
    params = params or default_params()
    seed = scenario.seed if seed is None else seed
    rng_events, rng_noise, _rng_solver = run_streams(seed, repetition)

    x_ss, basal = find_steady_state(TARGET_BG, params)
    cfg = control_cfg or ControlConfig()
    if not math.isfinite(cfg.basal):
        cfg = ControlConfig(**{**cfg.__dict__, "basal": basal})
    H = scenario.horizon_min
    n_total = H + cfg.Np
    events = sample_events(scenario, rng_events)
    u_true = realize_inputs(events, n_total)
    tube = scenario.build_tube(n_total) if controller_kind == "robust" or estimator_kind == "mhe" \
        else None
    tube_lo = tube.lower if tube is not None else None
    tube_hi = tube.upper if tube is not None else None

    controller = Controller(controller_kind, cfg, params)
    estimator = _make_estimator(estimator_kind, controller_kind, scenario, params, x_ss,
                                tube_lo, tube_hi, n_total, mhe_cfg)
    noise_std = math.sqrt(scenario.noise_var_q)
    p = params.as_array()
    n_sub = n_substeps(1.0, PLANT_SUBSTEP_MIN)

    states = np.full((H + 1, K.N_STATE), np.nan)
    states[0] = x_ss
    insulin = np.full(H, np.nan)
    u_hat = np.full((H, 3), np.nan)
    cgm_t, cgm, xh, cmds, diags = [], [], [], [], []
    x = x_ss.copy()
    prev = basal
    failed, failure = False, ""
    for t in range(0, H, CGM_PERIOD):
        y = measure(x, noise_std, rng_noise)
        if estimator is None:
            x_hat = x.copy()
            u_hat[max(t - CGM_PERIOD, 0):t] = u_true[max(t - CGM_PERIOD, 0):t]
        else:
            out: EstimatorOutput = estimator.update(t, y)
            x_hat = out.x_hat
            k = min(CGM_PERIOD, t, len(out.u_hat))
            if k:
                u_hat[t - k:t] = out.u_hat[len(out.u_hat) - k:]
        lo = hi = None
        if controller_kind == "robust":
            lo, hi = tube_lo[t:t + cfg.Np], tube_hi[t:t + cfg.Np]
        diag = controller.step(t, x_hat, prev, lo, hi, realized_u=u_true[t:t + cfg.Np])
        cmd = diag.command
        t_end = min(t + CGM_PERIOD, H)
        ins = np.full(t_end - t, cmd)
        traj, _, bad = K.simulate(x, ins, np.ascontiguousarray(u_true[t:t_end]), p, n_sub)
        cgm_t.append(t)
        cgm.append(y)
        xh.append(np.asarray(x_hat, dtype=float).copy())
        cmds.append(cmd)
        diags.append(diag.as_dict())
        if bad >= 0:
            failed = True
            failure = str(IntegrationError("plant integration diverged", t + bad + 1))
            log.error("run aborted: %s at t=%d", failure, t + bad + 1)
            states[t + 1:t + bad + 1] = traj[1:bad + 1]
            break
        states[t + 1:t_end + 1] = traj[1:]
        insulin[t:t_end] = cmd
        if estimator is not None:
            estimator.record_insulin(ins)
        x = traj[-1].copy()
        prev = cmd

    return SimulationRecord(scenario.name, controller_kind, estimator_kind, int(seed),
                            int(repetition), float(basal), H, states, insulin, u_true[:H],
                            u_hat, np.array(cgm_t), np.array(cgm), np.array(xh).reshape(-1, K.N_STATE),
                            np.array(cmds), diags, [e.__dict__ for e in events], failed,
                            failure, params.VG)


def _run_one(args):
    scenario, controller_kind, estimator_kind, params, seed, rep, control_cfg, mhe_cfg = args
    return run_closed_loop(scenario, controller_kind, estimator_kind, params, seed, rep,
                           control_cfg, mhe_cfg)


def run_batch(scenario: Scenario, controller_kind: str = "robust", estimator_kind: str = "mhe",
              params: PatientParams | None = None, seed: int | None = None,
              repetitions: int | None = None, control_cfg: ControlConfig | None = None,
              mhe_cfg: MheConfig | None = None, jobs: int = 1) -> list[SimulationRecord]:
    """Repetitions 0..n-1 of one configuration, optionally across processes.

    Each repetition derives its own streams from ``(seed, repetition)``, so the
    result does not depend on ``jobs``.
    """
    n = scenario.repetitions if repetitions is None else int(repetitions)
    if n < 1:
        raise ConfigError("repetitions must be >= 1")
    seed = scenario.seed if seed is None else seed
    params = params or default_params()
    tasks = [(scenario, controller_kind, estimator_kind, params, seed, r, control_cfg, mhe_cfg)
             for r in range(n)]
    if jobs <= 1 or n == 1:
        return [_run_one(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=min(jobs, n)) as pool:
        return list(pool.map(_run_one, tasks))
