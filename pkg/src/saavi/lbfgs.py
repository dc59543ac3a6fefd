"""Limited-memory BFGS maximizer with a strong Wolfe line search.

The public surface speaks maximization (the objective is an ELBO), while the
internals run the textbook minimization recursions on the negated function;
the negation is exact in floating point, so the certified step conditions are
identical either way. Accepted steps always satisfy, in raw ascent form,

    sufficient increase:  f(theta + g r) >= f(theta) + c1 g <grad f, r>
    curvature:            |<grad f(theta + g r), r>| <= c2 |<grad f, r>|

and the implementation re-asserts both before returning a step.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "STATUS_CONVERGED",
    "STATUS_ITERATION_CAP",
    "STATUS_LINE_SEARCH_FAILURE",
    "LineSearchConfig",
    "LineSearchResult",
    "LineSearchFailure",
    "wolfe_line_search",
    "LbfgsHistory",
    "two_loop_direction",
    "LbfgsConfig",
    "OptReport",
    "lbfgs_maximize",
]

STATUS_CONVERGED = "converged"
STATUS_ITERATION_CAP = "iteration_cap"
STATUS_LINE_SEARCH_FAILURE = "line_search_failure"


@dataclass(frozen=True)
class LineSearchConfig:
    c1: float = 1e-4
    c2: float = 0.9
    max_evals: int = 30
    interval_floor: float = 1e-16

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.max_evals < 2:
            raise ValueError("max_evals must be at least 2")


@dataclass(frozen=True)
class LineSearchResult:
    gamma: float
    value: float
    slope: float
    evals: int


class LineSearchFailure(RuntimeError):
    """No acceptable step within the evaluation budget (or the bracket
    collapsed below the interval floor). Carries the best point seen."""

    def __init__(self, best_gamma: float, best_value: float, evals: int):
        self.best_gamma = best_gamma
        self.best_value = best_value
        self.evals = evals
        super().__init__(
            f"no strong Wolfe step after {evals} evaluations "
            f"(best gamma {best_gamma:.3e}, value {best_value:.6g})"
        )


def _cubicmin(a, fa, fpa, b, fb, c, fc):
    # minimizer of the cubic through (a, fa) with slope fpa, (b, fb), (c, fc)
    with np.errstate(divide="raise", over="raise", invalid="raise"):
        try:
            db, dc = b - a, c - a
            denom = (db * dc) ** 2 * (db - dc)
            d1 = np.array([[dc**2, -(db**2)], [-(dc**3), db**3]])
            A, B = d1 @ np.array([fb - fa - fpa * db, fc - fa - fpa * dc])
            A /= denom
            B /= denom
            radical = B * B - 3.0 * A * fpa
            xmin = a + (-B + np.sqrt(radical)) / (3.0 * A)
        except ArithmeticError:
            return None
    return float(xmin) if np.isfinite(xmin) else None


def _quadmin(a, fa, fpa, b, fb):
    # minimizer of the quadratic through (a, fa) with slope fpa and (b, fb)
    with np.errstate(divide="raise", over="raise", invalid="raise"):
        try:
            db = b - a
            B = (fb - fa - fpa * db) / (db * db)
            xmin = a - fpa / (2.0 * B)
        except ArithmeticError:
            return None
    return float(xmin) if np.isfinite(xmin) else None


def wolfe_line_search(
    phi: Callable[[float], tuple[float, float]],
    value0: float,
    slope0: float,
    config: Optional[LineSearchConfig] = None,
    initial_step: float = 1.0,
) -> LineSearchResult:
    """Find gamma > 0 satisfying both strong Wolfe conditions for maximization.

    ``phi`` maps a step length to (value, directional slope) along a fixed
    ascent ray; ``value0``/``slope0`` are its values at gamma = 0, with
    slope0 > 0 required. A non-finite trial value is treated as failing the
    sufficient-increase test, which shrinks the step, so the search never
    leaves the feasible region it started in. Raises LineSearchFailure with
    the best point seen when the budget or the interval floor is hit.
    """
    cfg = config or LineSearchConfig()
    if not np.isfinite(value0):
        raise ValueError("line search requires a finite starting value")
    if not (np.isfinite(slope0) and slope0 > 0.0):
        raise ValueError(f"line search requires an ascent direction, slope0 = {slope0}")
    if not (np.isfinite(initial_step) and initial_step > 0.0):
        raise ValueError("initial_step must be positive and finite")

    # minimization form: F = -f, dF = -slope
    F0, dF0 = -float(value0), -float(slope0)
    state = {"evals": 0, "best_gamma": 0.0, "best_value": float(value0)}

    def F(gamma):
        v, s = phi(gamma)
        state["evals"] += 1
        if np.isfinite(v):
            if (
                v >= value0 + cfg.c1 * gamma * slope0
                and v > state["best_value"]
            ):
                state["best_gamma"], state["best_value"] = gamma, float(v)
            return -float(v), -float(s)
        return np.inf, np.nan

    def out_of_budget():
        return state["evals"] >= cfg.max_evals

    def fail():
        raise LineSearchFailure(state["best_gamma"], state["best_value"], state["evals"])

    def accept(gamma, Fg, dFg):
        value, slope = -Fg, -dFg
        sufficient = value >= value0 + cfg.c1 * gamma * slope0
        curvature = abs(slope) <= cfg.c2 * abs(slope0)
        if not (sufficient and curvature):  # certification, never expected to fire
            raise AssertionError("accepted step violates a strong Wolfe condition")
        return LineSearchResult(gamma=float(gamma), value=value, slope=slope, evals=state["evals"])

    def zoom(a_lo, F_lo, dF_lo, a_hi, F_hi):
        # invariant: a_lo satisfies sufficient decrease with the lowest F seen,
        # and the minimizer lies between a_lo and a_hi
        a_rec, F_rec = 0.0, F0
        while not out_of_budget():
            dalpha = a_hi - a_lo
            if abs(dalpha) < cfg.interval_floor:
                fail()
            lo_b, hi_b = (a_lo, a_hi) if dalpha > 0 else (a_hi, a_lo)
            a_j = None
            if np.isfinite(F_hi):
                cchk = 0.2 * abs(dalpha)
                a_j = _cubicmin(a_lo, F_lo, dF_lo, a_hi, F_hi, a_rec, F_rec)
                if a_j is None or a_j > hi_b - cchk or a_j < lo_b + cchk:
                    qchk = 0.1 * abs(dalpha)
                    a_j = _quadmin(a_lo, F_lo, dF_lo, a_hi, F_hi)
                    if a_j is None or a_j > hi_b - qchk or a_j < lo_b + qchk:
                        a_j = None
            if a_j is None:  # bisection fallback (always when F_hi is infeasible)
                a_j = a_lo + 0.5 * dalpha
            F_j, dF_j = F(a_j)
            if (not np.isfinite(F_j)) or F_j > F0 + cfg.c1 * a_j * dF0 or F_j >= F_lo:
                a_rec, F_rec = a_hi, F_hi
                a_hi, F_hi = a_j, F_j
            else:
                if abs(dF_j) <= cfg.c2 * abs(dF0):
                    return accept(a_j, F_j, dF_j)
                if dF_j * (a_hi - a_lo) >= 0.0:
                    a_rec, F_rec = a_hi, F_hi
                    a_hi, F_hi = a_lo, F_lo
                else:
                    a_rec, F_rec = a_lo, F_lo
                a_lo, F_lo, dF_lo = a_j, F_j, dF_j
        fail()

    a_prev, F_prev, dF_prev = 0.0, F0, dF0
    a = float(initial_step)
    first = True
    while not out_of_budget():
        Fa, dFa = F(a)
        if (not np.isfinite(Fa)) or Fa > F0 + cfg.c1 * a * dF0 or (Fa >= F_prev and not first):
            return zoom(a_prev, F_prev, dF_prev, a, Fa)
        if abs(dFa) <= cfg.c2 * abs(dF0):
            return accept(a, Fa, dFa)
        if dFa >= 0.0:  # walked past the maximizer while still improving
            return zoom(a, Fa, dFa, a_prev, F_prev)
        a_prev, F_prev, dF_prev = a, Fa, dFa
        a = 2.0 * a
        first = False
    fail()


# ------------------------------------------------------------ two-loop


class LbfgsHistory:
    """Bounded store of curvature-guarded (s, y) pairs.

    ``push`` takes the raw ascent-form pair (s = theta step, y = gradient
    difference); for a concave objective <s, y> < 0 and the pair is kept.
    Pairs failing the guard |<s, -y>| > 1e-10 |s||y| are skipped so the
    implied inverse-curvature operator stays positive definite.
    """

    CURVATURE_GUARD = 1e-10

    def __init__(self, capacity: int = 10):
        if capacity < 1:
            raise ValueError("history capacity must be positive")
        self.capacity = capacity
        self._pairs: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._pairs)

    def clear(self):
        self._pairs.clear()

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        s = np.asarray(s, dtype=float)
        y_min = -np.asarray(y, dtype=float)  # minimization-form difference
        sy = float(s @ y_min)
        guard = self.CURVATURE_GUARD * float(np.linalg.norm(s) * np.linalg.norm(y_min))
        if not np.isfinite(sy) or sy <= guard:
            return False
        self._pairs.append((s, y_min, 1.0 / sy))
        return True

    @property
    def gamma(self) -> float:
        """Initial inverse-curvature scaling <s, y>/<y, y> of the newest pair."""
        s, y, _ = self._pairs[-1]
        return float(s @ y) / float(y @ y)

    def pairs(self):
        return tuple(self._pairs)


def two_loop_direction(grad: np.ndarray, history: LbfgsHistory) -> np.ndarray:
    """Ascent direction H grad from the two-loop recursion over the history.

    With an empty history this is steepest ascent; with curvature-guarded
    pairs the operator is positive definite, so <grad, r> > 0 whenever
    grad != 0.
    """
    q = np.array(grad, dtype=float)
    pairs = history.pairs()
    if not pairs:
        return q
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    q *= history.gamma
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


# ------------------------------------------------------------ outer loop


@dataclass(frozen=True)
class LbfgsConfig:
    history: int = 10
    g_tol: float = 1e-5  # infinity norm of the gradient
    f_tol: float = 1e-9  # relative objective change, two consecutive steps
    line_search: LineSearchConfig = LineSearchConfig()

    def __post_init__(self):
        if self.history < 1 or self.g_tol <= 0 or self.f_tol <= 0:
            raise ValueError("invalid solver configuration")


@dataclass(frozen=True)
class OptReport:
    theta_star: np.ndarray
    final_value: float
    final_grad_norm: float
    iterations_used: int
    status: str
    n_evals: int
    wolfe_certified_steps: int
    wolfe_violations: int
    value_path: tuple

    def __post_init__(self):
        theta = np.array(self.theta_star, dtype=float)
        theta.flags.writeable = False
        object.__setattr__(self, "theta_star", theta)


def lbfgs_maximize(
    f_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta0: np.ndarray,
    tau: int,
    config: Optional[LbfgsConfig] = None,
) -> OptReport:
    """Maximize f from theta0 with at most tau accepted quasi-Newton steps.

    ``f_and_grad`` may return a non-finite value to mark an infeasible point;
    the line search then shrinks the step. A non-finite value at theta0
    itself is an input error. Stops when the gradient infinity norm falls
    to g_tol, when the relative objective change stays at or below f_tol for
    two consecutive steps, at the iteration cap, or on line-search failure
    (keeping the best iterate found).
    """
    cfg = config or LbfgsConfig()
    if tau < 1:
        raise ValueError("tau must be at least 1")
    theta = np.array(theta0, dtype=float)
    if theta.ndim != 1:
        raise ValueError("theta0 must be a flat vector")

    value, grad = f_and_grad(theta)
    n_evals = 1
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise ValueError("objective or gradient non-finite at the starting point")

    history = LbfgsHistory(cfg.history)
    values = [float(value)]
    iterations = 0
    certified = 0
    small_change_streak = 0
    status = STATUS_ITERATION_CAP

    def report(st):
        return OptReport(
            theta_star=theta,
            final_value=float(value),
            final_grad_norm=float(np.max(np.abs(grad))),
            iterations_used=iterations,
            status=st,
            n_evals=n_evals,
            wolfe_certified_steps=certified,
            wolfe_violations=0,
            value_path=tuple(values),
        )

    if np.max(np.abs(grad)) <= cfg.g_tol:
        return report(STATUS_CONVERGED)

    for k in range(1, tau + 1):
        r = two_loop_direction(grad, history)
        slope0 = float(grad @ r)
        if slope0 <= 0.0:  # numerical breakdown: restart from steepest ascent
            history.clear()
            r = grad.copy()
            slope0 = float(grad @ grad)

        grad_cache = {}

        def phi(gamma, _r=r):
            nonlocal n_evals
            v, g = f_and_grad(theta + gamma * _r)
            n_evals += 1
            if not np.isfinite(v):
                return -np.inf, np.nan
            grad_cache[gamma] = g
            return float(v), float(g @ _r)

        init = 1.0 / float(np.max(np.abs(grad))) if k == 1 else 1.0
        try:
            res = wolfe_line_search(
                phi, value0=float(value), slope0=slope0,
                config=cfg.line_search, initial_step=init,
            )
        except LineSearchFailure:
            return report(STATUS_LINE_SEARCH_FAILURE)

        new_grad = grad_cache[res.gamma]
        step = res.gamma * r
        theta = theta + step
        history.push(step, new_grad - grad)
        iterations += 1
        certified += 1
        rel_change = abs(res.value - value) / max(1.0, abs(value))
        small_change_streak = small_change_streak + 1 if rel_change <= cfg.f_tol else 0
        value, grad = res.value, new_grad
        values.append(float(value))

        if np.max(np.abs(grad)) <= cfg.g_tol or small_change_streak >= 2:
            return report(STATUS_CONVERGED)

    return report(STATUS_ITERATION_CAP)
