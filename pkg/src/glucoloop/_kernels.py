"""Compiled ODE right-hand side, fixed-step RK4 and rollout cost kernels.

Everything here works on flat float64 arrays so numba can compile it; the
public, typed wrappers live in :mod:`glucoloop.model`.
"""

import numpy as np
from numba import njit

# state layout
Q1, Q2, C, G1, G2, Q1A, Q1B, Q2I, Q3, X1, X2, X3, UA, O2M = range(14)
N_STATE = 14

# parameter layout (see PatientParams.as_array)
(P_F01, P_F01_THR, P_EGP0, P_K12, P_VG, P_R_THR, P_R_CL, P_K_SPLIT, P_KIA1,
 P_KIA2, P_KE, P_VMAX_LD, P_KM_LD, P_KA1, P_KA2, P_KA3, P_SIT, P_SID, P_SIE,
 P_VI, P_AG, P_UG_CEIL, P_TMAX_LOWER, P_KA_INT, P_KUA, P_KO2, P_KMPGU, P_KHPG,
 P_KPIU, P_A_UA, P_B_UA, P_C_UA) = range(32)
N_PARAM = 32

DIVERGENCE_LIMIT = 1e9


@njit(cache=True)
def rhs(x, ins, dg, mm, o2, p, out):
    q1 = x[Q1]
    vg = p[P_VG]
    g = q1 / vg

    if g >= p[P_F01_THR]:
        f01c = p[P_F01]
    else:
        f01c = p[P_F01] * g / p[P_F01_THR]
    if g >= p[P_R_THR]:
        fr = p[P_R_CL] * (g - p[P_R_THR]) * vg
    else:
        fr = 0.0

    tmax = max(p[P_TMAX_LOWER], x[G2] / p[P_UG_CEIL])
    ug = x[G2] / tmax
    egp = p[P_EGP0] * (1.0 - x[X3])
    if egp < 0.0:
        egp = 0.0

    x1 = x[X1]
    x2 = x[X2]
    out[Q1] = -f01c - x1 * q1 + p[P_K12] * x[Q2] - fr + ug + egp
    out[Q2] = x1 * q1 - p[P_K12] * x[Q2] - x2 * x[Q2]
    out[C] = p[P_KA_INT] * (g - x[C])
    out[G1] = -x[G1] / tmax + p[P_AG] * dg
    out[G2] = (x[G1] - x[G2]) / tmax

    k = p[P_K_SPLIT]
    vmax = p[P_VMAX_LD]
    km = p[P_KM_LD]
    out[Q1A] = k * ins - p[P_KIA1] * x[Q1A] - vmax * x[Q1A] / (km + x[Q1A])
    out[Q1B] = (1.0 - k) * ins - p[P_KIA2] * x[Q1B] - vmax * x[Q1B] / (km + x[Q1B])
    out[Q2I] = p[P_KIA1] * (x[Q1A] - x[Q2I])
    out[Q3] = p[P_KIA1] * x[Q2I] + p[P_KIA2] * x[Q1B] - p[P_KE] * x[Q3]

    conc_i = x[Q3] / p[P_VI]
    o2m = x[O2M]
    ua_bar = p[P_A_UA] * o2m * o2m + p[P_B_UA] * o2m + p[P_C_UA]
    if ua_bar < 0.0:
        ua_bar = 0.0
    m_pgu = 1.0 + x[UA] * mm / p[P_KMPGU]
    m_piu = 1.0 + p[P_KPIU] * mm
    m_hpg = 1.0 + x[UA] * mm / p[P_KHPG]
    out[X1] = p[P_KA1] * (-x1 + m_pgu * m_piu * p[P_SIT] * conc_i)
    out[X2] = p[P_KA2] * (-x2 + m_pgu * m_piu * p[P_SID] * conc_i)
    out[X3] = p[P_KA3] * (-x[X3] + m_hpg * p[P_SIE] * conc_i)
    out[UA] = p[P_KUA] * (ua_bar - x[UA])
    out[O2M] = p[P_KO2] * (o2 - o2m)


@njit(cache=True)
def rk4_advance(x, ins, dg, mm, o2, p, dt, n_sub, work, stats):
    """Advance ``x`` in place by ``dt`` using ``n_sub`` RK4 substeps.

    ``stats`` accumulates [clamp count, most negative pre-clamp value].
    Returns False on divergence.
    """
    h = dt / n_sub
    k1 = work[0]
    k2 = work[1]
    k3 = work[2]
    k4 = work[3]
    tmp = work[4]
    for _ in range(n_sub):
        rhs(x, ins, dg, mm, o2, p, k1)
        for i in range(N_STATE):
            tmp[i] = x[i] + 0.5 * h * k1[i]
        rhs(tmp, ins, dg, mm, o2, p, k2)
        for i in range(N_STATE):
            tmp[i] = x[i] + 0.5 * h * k2[i]
        rhs(tmp, ins, dg, mm, o2, p, k3)
        for i in range(N_STATE):
            tmp[i] = x[i] + h * k3[i]
        rhs(tmp, ins, dg, mm, o2, p, k4)
        for i in range(N_STATE):
            v = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if not (abs(v) <= DIVERGENCE_LIMIT):
                return False
            if v < 0.0:
                if v < stats[1]:
                    stats[1] = v
                stats[0] += 1.0
                v = 0.0
            x[i] = v
    return True


@njit(cache=True)
def simulate(x0, ins_min, u_min, p, n_sub):
    """Integrate minute by minute with piecewise-constant inputs.

    Returns (states[n+1, 14], stats, failed_minute) where failed_minute is -1
    on success.
    """
    n = ins_min.shape[0]
    states = np.empty((n + 1, N_STATE))
    work = np.empty((5, N_STATE))
    stats = np.zeros(2)
    x = x0.copy()
    states[0] = x
    for m in range(n):
        ok = rk4_advance(x, ins_min[m], u_min[m, 0], u_min[m, 1], u_min[m, 2],
                         p, 1.0, n_sub, work, stats)
        if not ok:
            for r in range(m + 1, n + 1):
                states[r] = np.nan
            return states, stats, m
        states[m + 1] = x
    return states, stats, -1


@njit(cache=True)
def _stage(g, target, gamma):
    e = g - target
    if e < 0.0:
        return gamma * e * e
    return e * e


@njit(cache=True)
def _run_cost(x, ins_min, u_min, m_from, target, gamma, p, n_sub, work, stats,
              states, cum, record):
    """Accumulate stage costs for minutes m_from+1..n starting from x."""
    n = ins_min.shape[0]
    vg = p[P_VG]
    cost = 0.0
    for m in range(m_from, n):
        ok = rk4_advance(x, ins_min[m], u_min[m, 0], u_min[m, 1], u_min[m, 2],
                         p, 1.0, n_sub, work, stats)
        if not ok:
            return np.inf
        cost += _stage(x[Q1] / vg, target, gamma)
        if record:
            states[m + 1] = x
            cum[m + 1] = cum[m] + _stage(x[Q1] / vg, target, gamma)
    return cost


@njit(cache=True)
def tracking_cost(x0, ins_min, u_min, target, gamma, p, n_sub):
    """Sum of asymmetric squared BG errors over minutes 1..n."""
    work = np.empty((5, N_STATE))
    stats = np.zeros(2)
    dummy = np.empty((1, N_STATE))
    dcum = np.empty(1)
    x = x0.copy()
    return _run_cost(x, ins_min, u_min, 0, target, gamma, p, n_sub, work, stats,
                     dummy, dcum, False)


@njit(cache=True)
def predicted_glucose(x0, ins_min, u_min, p, n_sub):
    states, _, _ = simulate(x0, ins_min, u_min, p, n_sub)
    return states[1:, Q1] / p[P_VG]


@njit(cache=True)
def _apply_block(ins_min, u_min, lo, hi, start, end, chan, value):
    if chan == 0:
        for m in range(start, end):
            ins_min[m] = value
    else:
        c = chan - 1
        for m in range(start, end):
            v = value
            if v < lo[m, c]:
                v = lo[m, c]
            if v > hi[m, c]:
                v = hi[m, c]
            u_min[m, c] = v


@njit(cache=True)
def tracking_cost_grad(x0, ins_min, u_min, lo, hi, blocks, values, target,
                       gamma, p, n_sub, rel_step):
    """Central-difference gradient of ``tracking_cost`` w.r.t. knot values.

    ``blocks[b] = (start, end, channel)`` with channel 0 = insulin and
    1..3 = (DG, MM, O2); u channels are clipped to the per-minute [lo, hi].
    The base trajectory is cached so each perturbation only re-simulates the
    minutes after its block starts.
    """
    n = ins_min.shape[0]
    nb = blocks.shape[0]
    work = np.empty((5, N_STATE))
    stats = np.zeros(2)
    states = np.empty((n + 1, N_STATE))
    cum = np.zeros(n + 1)
    x = x0.copy()
    states[0] = x0
    base = _run_cost(x, ins_min, u_min, 0, target, gamma, p, n_sub, work, stats,
                     states, cum, True)
    grad = np.zeros(nb)
    ins_w = ins_min.copy()
    u_w = u_min.copy()
    for b in range(nb):
        start = blocks[b, 0]
        end = blocks[b, 1]
        chan = blocks[b, 2]
        val = values[b]
        step = rel_step * max(abs(val), 1.0)
        fp = 0.0
        fm = 0.0
        for sgn in (1.0, -1.0):
            _apply_block(ins_w, u_w, lo, hi, start, end, chan, val + sgn * step)
            x[:] = states[start]
            c = cum[start] + _run_cost(x, ins_w, u_w, start, target, gamma, p,
                                       n_sub, work, stats, states, cum, False)
            if sgn > 0:
                fp = c
            else:
                fm = c
        # restore
        for m in range(start, end):
            ins_w[m] = ins_min[m]
            u_w[m, 0] = u_min[m, 0]
            u_w[m, 1] = u_min[m, 1]
            u_w[m, 2] = u_min[m, 2]
        grad[b] = (fp - fm) / (2.0 * step)
    return base, grad


@njit(cache=True)
def measurement_cost(x0, ins_min, u_min, obs_minutes, obs_values, p, n_sub):
    """Sum of squared CGM residuals y - C at the given minutes (0..n)."""
    n = ins_min.shape[0]
    work = np.empty((5, N_STATE))
    stats = np.zeros(2)
    x = x0.copy()
    j = 0
    total = 0.0
    no = obs_minutes.shape[0]
    while j < no and obs_minutes[j] == 0:
        r = obs_values[j] - x[C]
        total += r * r
        j += 1
    for m in range(n):
        ok = rk4_advance(x, ins_min[m], u_min[m, 0], u_min[m, 1], u_min[m, 2],
                         p, 1.0, n_sub, work, stats)
        if not ok:
            return np.inf
        while j < no and obs_minutes[j] == m + 1:
            r = obs_values[j] - x[C]
            total += r * r
            j += 1
    return total


@njit(cache=True)
def measurement_cost_grad(x0, ins_min, u_min, lo, hi, blocks, values,
                          obs_minutes, obs_values, p, n_sub, rel_step):
    """Central differences of ``measurement_cost`` w.r.t. x0 and u knots.

    The first 14 gradient entries are w.r.t. x0, then one per block.
    """
    nb = blocks.shape[0]
    grad = np.zeros(N_STATE + nb)
    base = measurement_cost(x0, ins_min, u_min, obs_minutes, obs_values, p, n_sub)
    xw = x0.copy()
    for i in range(N_STATE):
        step = rel_step * max(abs(x0[i]), 1.0)
        xw[i] = x0[i] + step
        fp = measurement_cost(xw, ins_min, u_min, obs_minutes, obs_values, p, n_sub)
        xw[i] = x0[i] - step
        fm = measurement_cost(xw, ins_min, u_min, obs_minutes, obs_values, p, n_sub)
        xw[i] = x0[i]
        grad[i] = (fp - fm) / (2.0 * step)
    u_w = u_min.copy()
    ins_w = ins_min.copy()
    for b in range(nb):
        start = blocks[b, 0]
        end = blocks[b, 1]
        chan = blocks[b, 2]
        val = values[b]
        step = rel_step * max(abs(val), 1.0)
        _apply_block(ins_w, u_w, lo, hi, start, end, chan, val + step)
        fp = measurement_cost(x0, ins_w, u_w, obs_minutes, obs_values, p, n_sub)
        _apply_block(ins_w, u_w, lo, hi, start, end, chan, val - step)
        fm = measurement_cost(x0, ins_w, u_w, obs_minutes, obs_values, p, n_sub)
        for m in range(start, end):
            u_w[m, 0] = u_min[m, 0]
            u_w[m, 1] = u_min[m, 1]
            u_w[m, 2] = u_min[m, 2]
            ins_w[m] = ins_min[m]
        grad[N_STATE + b] = (fp - fm) / (2.0 * step)
    return base, grad
