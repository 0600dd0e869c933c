"""Bound-constrained local minimization and a nested minimax driver.

``minimize`` is a projected BFGS method: the inverse-Hessian approximation is
applied on the variables that are not pinned at an active bound, steps are
projected back onto the box and accepted with an Armijo test along the
projected path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

REL_STEP = 1e-6

CONVERGED = "converged"
SMALL_DECREASE = "small_decrease"
MAX_ITER = "max_iterations"
FAILED = "failed"
OK_STATUSES = (CONVERGED, SMALL_DECREASE, MAX_ITER)


def numerical_gradient(fun: Callable[[np.ndarray], float], x: np.ndarray,
                       rel_step: float = REL_STEP) -> np.ndarray:
    """Central differences with step ``rel_step * max(|x_i|, 1)``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    xw = x.copy()
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1.0)
        xw[i] = x[i] + h
        fp = fun(xw)
        xw[i] = x[i] - h
        fm = fun(xw)
        xw[i] = x[i]
        g[i] = (fp - fm) / (2.0 * h)
    return g


@dataclass
class NlpProblem:
    """min objective(x) s.t. lower <= x <= upper.

    ``gradient``, when given, returns ``(f, g)`` at x; otherwise central
    differences of ``objective`` are used.
    """

    objective: Callable[[np.ndarray], float]
    lower: np.ndarray
    upper: np.ndarray
    x0: np.ndarray
    gradient: Optional[Callable[[np.ndarray], tuple]] = None
    max_iterations: int = 200
    tolerance: float = 1e-6
    ftol: float = 1e-10

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        if not (self.lower.shape == self.upper.shape == self.x0.shape):
            raise ValueError("bounds and initial point must have equal length")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds exceed upper bounds")

    @property
    def dimension(self) -> int:
        return self.x0.size

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)


@dataclass
class NlpResult:
    x: np.ndarray
    fun: float
    status: str
    nit: int = 0
    nfev: int = 0

    @property
    def success(self) -> bool:
        return self.status in OK_STATUSES


def _value_and_grad(problem: NlpProblem, counter: list):
    if problem.gradient is not None:
        def fg(x):
            counter[0] += 1
            f, g = problem.gradient(x)
            return float(f), np.asarray(g, dtype=float)
    else:
        def fg(x):
            counter[0] += 1 + 2 * x.size
            f = float(problem.objective(x))
            return f, numerical_gradient(problem.objective, x)

    def f_only(x):
        counter[0] += 1
        return float(problem.objective(x))

    return fg, f_only


def minimize(problem: NlpProblem) -> NlpResult:
    """Projected quasi-Newton descent on a box.

    Stops when the projected gradient's inf-norm drops to ``tolerance``, the
    accepted decrease falls to ``ftol * max(1, |f|)``, or after
    ``max_iterations``. The returned point is feasible and never worse than
    the (projected) starting point.
    """
    lo, hi = problem.lower, problem.upper
    counter = [0]
    fg, f_only = _value_and_grad(problem, counter)
    x = problem.project(problem.x0.copy())
    n = x.size
    if n == 0:
        return NlpResult(x, float(problem.objective(x)), CONVERGED, 0, 1)
    f, g = fg(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return NlpResult(x, f, FAILED, 0, counter[0])

    width = hi - lo
    finite_w = width[np.isfinite(width) & (width > 0)]
    init_scale = 0.1 * float(np.min(finite_w)) if finite_w.size else 1.0
    H = None
    status = MAX_ITER
    it = 0
    for it in range(1, problem.max_iterations + 1):
        pg = x - np.clip(x - g, lo, hi)
        if np.max(np.abs(pg)) <= problem.tolerance:
            status = CONVERGED
            break
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        d = np.zeros(n)
        if H is not None:
            idx = np.flatnonzero(free)
            d[idx] = -H[np.ix_(idx, idx)] @ g[idx]
            if g @ d >= 0:
                H = None
        if H is None:
            gmax = np.max(np.abs(g[free])) if free.any() else 0.0
            if gmax == 0:
                status = CONVERGED
                break
            d = np.where(free, -g, 0.0) * (init_scale / gmax)

        t = 1.0
        accepted = False
        while t > 1e-12:
            xn = np.clip(x + t * d, lo, hi)
            s = xn - x
            if not np.any(s):
                break
            fn = f_only(xn)
            if np.isfinite(fn) and fn <= f + 1e-4 * (g @ s):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if H is not None:
                H = None  # retry with a steepest-descent step
                continue
            status = SMALL_DECREASE
            break

        fn, gn = fg(xn)
        if not np.all(np.isfinite(gn)):
            status = FAILED
            x, f = xn, fn
            break
        y = gn - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)) and sy > 0:
            if H is None:
                H = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            Hy = H @ y
            H = H + (rho * rho * (y @ Hy) + rho) * np.outer(s, s) \
                - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        decrease = f - fn
        x, f, g = xn, fn, gn
        if decrease <= problem.ftol * max(1.0, abs(f)):
            status = SMALL_DECREASE
            break
    return NlpResult(x, f, status, it, counter[0])


def minimize_multistart(problem: NlpProblem, n_starts: int,
                        rng: np.random.Generator) -> NlpResult:
    """Best of ``n_starts`` local solves; the first start is ``problem.x0``."""
    best = None
    lo = np.where(np.isfinite(problem.lower), problem.lower, -1.0)
    hi = np.where(np.isfinite(problem.upper), problem.upper, 1.0)
    for k in range(n_starts):
        x0 = problem.x0 if k == 0 else rng.uniform(lo, hi)
        sub = NlpProblem(problem.objective, problem.lower, problem.upper, x0,
                         problem.gradient, problem.max_iterations,
                         problem.tolerance, problem.ftol)
        res = minimize(sub)
        if best is None or (np.isfinite(res.fun) and res.fun < best.fun):
            best = res
    return best


# ------------------------------------------------------------------ minimax

@dataclass
class MinimaxProblem:
    """min_x max_u objective(x, u) over two boxes.

    ``grad_x(x, u)`` and ``grad_u(x, u)`` return ``(f, gradient)``; when
    omitted they fall back to central differences.
    """

    objective: Callable[[np.ndarray, np.ndarray], float]
    x_lower: np.ndarray
    x_upper: np.ndarray
    x0: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    u0: Optional[np.ndarray] = None
    grad_x: Optional[Callable] = None
    grad_u: Optional[Callable] = None
    outer_max_iterations: int = 200
    outer_tolerance: float = 1e-6
    inner_max_iterations: int = 100
    inner_tolerance: float = 1e-6
    ftol: float = 1e-10
    corner_starts: bool = True


@dataclass
class MinimaxResult:
    x: np.ndarray
    value: float
    u: np.ndarray
    status: str
    nit: int = 0
    inner_solves: int = 0
    inner_failures: int = 0
    trace: list = field(default_factory=list, repr=False)

    @property
    def success(self) -> bool:
        return self.status in OK_STATUSES


class _InnerMax:
    """Evaluates Phi(x) = max_u f(x, u) with a warm-start cache."""

    def __init__(self, prob: MinimaxProblem):
        self.prob = prob
        lo, hi = prob.u_lower, prob.u_upper
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        mid = 0.5 * (self.lo + self.hi)
        self.cache = np.clip(prob.u0, self.lo, self.hi) if prob.u0 is not None else mid
        self.last_x = None
        self.last_u = self.cache
        self.last_val = np.nan
        self.solves = 0
        self.failures = 0

    def _solve_from(self, x, u_start):
        prob = self.prob
        if prob.grad_u is not None:
            def grad(u):
                f, g = prob.grad_u(x, u)
                return -f, -np.asarray(g)
        else:
            grad = None
        sub = NlpProblem(lambda u: -prob.objective(x, u), self.lo, self.hi, u_start,
                         grad, prob.inner_max_iterations, prob.inner_tolerance,
                         prob.ftol)
        return minimize(sub)

    def starts(self):
        yield self.cache
        if self.prob.corner_starts:
            yield self.hi
            yield self.lo

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        best = None
        tried = []
        for u_start in self.starts():
            if any(np.array_equal(u_start, t) for t in tried):
                continue
            tried.append(u_start)
            res = self._solve_from(x, u_start)
            self.solves += 1
            if not res.success:
                # one retry from the box midpoint
                res = self._solve_from(x, 0.5 * (self.lo + self.hi))
                self.solves += 1
                if not res.success:
                    self.failures += 1
                    continue
            if best is None or res.fun < best.fun:
                best = res
        if best is None:
            self.last_x, self.last_val = x.copy(), np.inf
            return np.inf
        self.cache = best.x.copy()
        self.last_x = x.copy()
        self.last_u = best.x.copy()
        self.last_val = -best.fun
        return self.last_val


def minimax(prob: MinimaxProblem) -> MinimaxResult:
    """Outer projected quasi-Newton on Phi(x) = max_u f(x, u).

    Phi is evaluated by local maximization started from the previous inner
    solution and from both corners of the inner box. Its gradient is taken
    at the maximizer, ``grad_x f(x, u*(x))`` (Danskin), which avoids
    differencing through the inner solver's tolerance.
    """
    inner = _InnerMax(prob)

    def phi(x):
        return inner(x)

    def phi_grad(x):
        if inner.last_x is None or not np.array_equal(inner.last_x, x):
            inner(x)
        if not np.isfinite(inner.last_val):
            return np.inf, np.full(np.size(x), np.nan)
        u = inner.last_u
        if prob.grad_x is not None:
            _, g = prob.grad_x(x, u)
        else:
            g = numerical_gradient(lambda xx: prob.objective(xx, u), x)
        return inner.last_val, np.asarray(g, dtype=float)

    outer = NlpProblem(phi, prob.x_lower, prob.x_upper, prob.x0, phi_grad,
                       prob.outer_max_iterations, prob.outer_tolerance, prob.ftol)
    res = minimize(outer)
    # recover the maximizer at the returned point
    if inner.last_x is None or not np.array_equal(inner.last_x, res.x):
        inner(res.x)
    status = res.status
    if not np.isfinite(inner.last_val):
        status = FAILED
    return MinimaxResult(res.x, float(inner.last_val), inner.last_u.copy(), status,
                         res.nit, inner.solves, inner.failures)
