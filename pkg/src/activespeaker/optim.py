"""Limited-memory BFGS with a strong-Wolfe line search.

Deterministic: no randomness, fixed evaluation order.  The step search uses
scipy's Wolfe search and falls back to Armijo backtracking when that fails,
which happens routinely on the piecewise-linear max-margin objective.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import line_search
from scipy.optimize._linesearch import LineSearchWarning

from .errors import NumericalError

log = logging.getLogger(__name__)


@dataclass
class TrainTrace:
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""

    def append(self, f, gnorm):
        self.objective.append(float(f))
        self.grad_norm.append(float(gnorm))

    def __len__(self):
        return len(self.objective)

    def to_csv(self) -> str:
        from .model import format_float

        rows = ["iter,objective,grad_norm"]
        for i, (f, g) in enumerate(zip(self.objective, self.grad_norm)):
            rows.append(f"{i},{format_float(f)},{format_float(g)}")
        return "\n".join(rows) + "\n"


def _check_finite(f, g, where):
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite objective or gradient {where} (f={f})")


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    rho = [1.0 / np.dot(y, s) for s, y in zip(s_hist, y_hist)]
    a = []
    for s, y, r in zip(reversed(s_hist), reversed(y_hist), reversed(rho)):
        ai = r * np.dot(s, q)
        q -= ai * y
        a.append(ai)
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for s, y, r, ai in zip(s_hist, y_hist, rho, reversed(a)):
        b = r * np.dot(y, q)
        q += (ai - b) * s
    return -q


def _backtrack(fun, x, f, g, d, step, c1=1e-4, shrink=0.5, max_halvings=60):
    slope = np.dot(g, d)
    finite = False
    for _ in range(max_halvings):
        xn = x + step * d
        fn, gn = fun(xn)
        finite = finite or bool(np.isfinite(fn))
        if np.isfinite(fn) and fn <= f + c1 * step * slope:
            return step, fn, gn
        step *= shrink
    if not finite:
        raise NumericalError("objective is non-finite at every trial step of the line search")
    return None, None, None


def minimize_lbfgs(
    fun: Callable[[np.ndarray], tuple],
    x0: np.ndarray,
    max_iters: int = 500,
    grad_tol: float = 1e-6,
    memory: int = 10,
) -> tuple[np.ndarray, TrainTrace]:
    """Minimize ``fun`` returning ``(value, gradient)``.

    Stops when the infinity norm of the gradient is at most ``grad_tol``,
    after ``max_iters`` accepted steps, or when no descent step can be found.
    Every accepted step satisfies the Armijo condition, so the traced
    objective never increases.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    _check_finite(f, g, "at the starting point")
    trace = TrainTrace()
    trace.append(f, np.max(np.abs(g)))
    s_hist, y_hist = [], []
    cache = {}

    def f_only(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = fun(z)
        return cache[key][0]

    def g_only(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = fun(z)
        return cache[key][1]

    f_prev = None
    for it in range(max_iters):
        if trace.grad_norm[-1] <= grad_tol:
            trace.converged = True
            trace.stop_reason = "gradient tolerance reached"
            return x, trace
        d = _two_loop(g, s_hist, y_hist)
        if np.dot(d, g) >= 0:
            # curvature history went stale; restart along steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -g
        step0 = 1.0 if s_hist else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LineSearchWarning)
            res = line_search(f_only, g_only, x, d, gfk=g, old_fval=f, old_old_fval=f_prev,
                              c1=1e-4, c2=0.9, maxiter=30)
        step, fn = res[0], res[3]
        if step is not None and fn is not None and np.isfinite(fn) and fn <= f:
            xn = x + step * d
            fn, gn = fun(xn)
        else:
            step, fn, gn = _backtrack(fun, x, f, g, d, step0)
            if step is None:
                trace.stop_reason = "line search could not decrease the objective"
                log.debug("lbfgs stopped at iteration %d: %s", it, trace.stop_reason)
                return x, trace
            xn = x + step * d
        _check_finite(fn, gn, f"at iteration {it + 1}")
        s = xn - x
        y = gn - g
        if np.dot(s, y) > 1e-12 * np.dot(y, y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        f_prev, x, f, g = f, xn, fn, gn
        trace.append(f, np.max(np.abs(g)))
        if not np.any(s):
            trace.stop_reason = "step vanished"
            return x, trace
    trace.converged = trace.grad_norm[-1] <= grad_tol
    trace.stop_reason = "gradient tolerance reached" if trace.converged else "iteration cap reached"
    return x, trace
