"""Finite-difference verification of the objective gradient.

Central differences of the fixed-noise objective are compared against the
analytic gradient at random (parameters, noise) instances, reported as a
maximum relative error per parameter block (location, raw scale, and — for
the dense family — the strict lower triangle). The CLI surfaces this as its
gradient self-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .families import n_params, random_params
from .models import LatentModel
from .numerics import SeededStream
from .objective import NoiseBlock, training_gradient, training_objective

__all__ = ["BlockErrors", "gradient_check", "central_difference"]

TOLERANCE = 1e-5


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


@dataclass(frozen=True)
class BlockErrors:
    """Worst relative error per parameter block across all checked points."""

    family_kind: str
    points: int
    mu: float
    rho: float
    lower: float  # 0.0 for the diagonal family (no such block)

    @property
    def worst(self) -> float:
        return max(self.mu, self.rho, self.lower)

    def passed(self, tolerance: float = TOLERANCE) -> bool:
        return self.worst <= tolerance

    def lines(self) -> list:
        out = [
            f"mu-block    max relative error: {self.mu:.3e}",
            f"rho-block   max relative error: {self.rho:.3e}",
        ]
        if self.family_kind == "dense":
            out.append(f"lower-block max relative error: {self.lower:.3e}")
        return out


def _relative(err: np.ndarray, ref: np.ndarray) -> float:
    if err.size == 0:
        return 0.0
    return float(np.max(np.abs(err) / np.maximum(1.0, np.abs(ref))))


def gradient_check(
    model: LatentModel,
    family_kind: str,
    points: int = 20,
    n: int = 16,
    seed: int = 0,
    corrupt: bool = False,
) -> BlockErrors:
    """Compare the analytic gradient against central differences.

    Draws ``points`` random (theta, noise block) instances and records the
    worst relative error per block, with errors measured against
    max(1, |finite difference|) per coordinate. ``corrupt`` perturbs the
    analytic gradient before comparison — a harness hook proving the check
    can fail.
    """
    if points < 1 or n < 1:
        raise ValueError("points and n must be at least 1")
    d = model.dim
    root = SeededStream(seed).substream("gradcheck")
    worst = {"mu": 0.0, "rho": 0.0, "lower": 0.0}

    for k in range(points):
        point = root.substream(f"point-{k}")
        params = random_params(family_kind, d, point.substream("theta"))
        noise = NoiseBlock.draw(point.substream("noise"), n, d)

        def f(theta, _params=params, _noise=noise):
            return training_objective(model, _params.with_theta(theta), _noise)

        got = training_gradient(model, params, noise)
        if corrupt:
            got = got + 1e-2
        fd = central_difference(f, params.theta)

        err = got - fd
        worst["mu"] = max(worst["mu"], _relative(err[:d], fd[:d]))
        worst["rho"] = max(worst["rho"], _relative(err[d : 2 * d], fd[d : 2 * d]))
        if family_kind == "dense":
            worst["lower"] = max(worst["lower"], _relative(err[2 * d :], fd[2 * d :]))

    assert params.theta.size == n_params(family_kind, d)
    return BlockErrors(
        family_kind=family_kind,
        points=points,
        mu=worst["mu"],
        rho=worst["rho"],
        lower=worst["lower"],
    )
