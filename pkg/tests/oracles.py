"""Independent reference computations shared by the unit and acceptance tests."""

import math
from fractions import Fraction

import numpy as np

from glucoloop import _kernels as K
from glucoloop.model import simulate


def brute_force_index(S, epsilon, d, alpha):
    """Smallest k with P(Bin(S, 1 - eps/d) >= k) <= alpha / (2d), in exact integers."""
    p = Fraction(epsilon) / d          # probability mass outside one side
    thr = Fraction(alpha) / (2 * d)
    num, den = p.numerator, p.denominator
    # term_j * den**S = C(S, j) (den - num)**j num**(S - j)
    limit = thr * den ** S
    tail = 0
    best = None
    for k in range(S, 0, -1):          # tail grows as k decreases
        tail += math.comb(S, k) * (den - num) ** k * num ** (S - k)
        if tail > limit:
            break
        best = k
    return best


INDEX_GRID = [(S, eps, d, a) for S in (20, 50, 100, 157, 300) for eps in (0.05, 0.1, 0.2, 0.35)
              for d in (1, 2, 3, 4) for a in (0.01, 0.05, 0.2)]


def box_guarantee_holds(box, eps):
    # uniform(0,1): each one-sided excluded mass at most eps / d
    d = box.dimension
    return (1.0 - box.upper[0]) <= eps / d and box.lower[0] <= eps / d


def five_point_column(x, ins, u, params, i, h):
    """d rhs / d x_i by the fourth-order central stencil."""
    f = np.empty(K.N_STATE)
    p = params.as_array()
    out = np.zeros(K.N_STATE)
    for c, k in ((1.0, -2), (-8.0, -1), (8.0, 1), (-1.0, 2)):
        xw = x.copy()
        xw[i] += k * h
        K.rhs(xw, ins, u[0], u[1], u[2], p, f)
        out += c * f
    return out / (12.0 * h)


def random_smooth_state(x0, rng):
    """A state away from the clamps and kinks of the right-hand side."""
    x = x0 * rng.uniform(0.7, 1.3, K.N_STATE)
    x[K.G1:K.G2 + 1] = rng.uniform(50.0, 500.0, 2)
    x[K.UA] = rng.uniform(10.0, 200.0)
    x[K.O2M] = rng.uniform(20.0, 60.0)
    return x


def worst_jacobian_error(jacobian, params, basal, x0, rng, n_states=20):
    worst = 0.0
    for _ in range(n_states):
        x = random_smooth_state(x0, rng)
        ins = basal * rng.uniform(0.5, 2.0)
        u = (rng.uniform(0.0, 5.0), rng.uniform(0.0, 0.3), rng.uniform(8.0, 60.0))
        J = jacobian(x, ins, u, params)
        for i in range(K.N_STATE):
            ref = five_point_column(x, ins, u, params, i, 1e-3 * max(abs(x[i]), 1.0))
            err = np.abs(J[:, i] - ref)
            worst = max(worst, float(np.max(err / np.maximum(np.abs(ref), 1e-6))))
    return worst


def meal_insulin_exercise_bg(params, x0, basal, substep, n=300):
    """300-min BG trace through a meal, an insulin bolus and exercise."""
    u = np.tile([0.0, 0.0, 8.0], (n, 1))
    u[60:80, 0] = 60.0 * 1000 / 180.156 / 20
    u[150:180, 1:] = (0.3, 50.0)
    ins = np.full(n, basal)
    ins[60:90] = 80.0
    return simulate(x0, ins, u, params, max_substep=substep)[:, K.Q1] / params.VG
