"""Fixed-noise sample-average objective for ELBO maximization.

Freezing a block of base noise turns the Monte Carlo ELBO into a smooth
deterministic function of the variational parameters,

    F(theta) = (1/n) sum_i [ ln p(z_theta(eps_i), x) - ln q_theta(z_theta(eps_i)) ],

whose exact gradient is the averaged reparameterization backprop of the model
score plus the entropy gradient (the base-noise density does not depend on
theta). Repeated evaluation at equal inputs is bit-identical, which is what
lets a quasi-Newton method with a strong line search work at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import families as fam
from .models import LatentModel, batch_grad_log_joint, batch_log_joint
from .numerics import SeededStream, softplus_prime, stable_mean, stable_sd, standard_normal_matrix

__all__ = [
    "NoiseBlock",
    "ElboEstimate",
    "EvaluationError",
    "log_weights",
    "training_objective",
    "training_gradient",
    "value_and_gradient",
    "elbo_estimate",
    "UnboundedDirection",
    "unbounded_direction",
]

_CHUNK = 8192  # rows of noise processed per pass; result is chunk-invariant


class EvaluationError(RuntimeError):
    """Non-finite log weight or gradient at one of the noise rows."""

    def __init__(self, index: int, what: str):
        self.index = int(index)
        super().__init__(f"non-finite {what} at sample index {index}")


@dataclass(frozen=True)
class NoiseBlock:
    """An immutable (n, d) block of base noise plus its stream provenance.

    ``origin`` is the (seed, path, counter) the block was drawn at, so any
    block can be recreated exactly without storing it.
    """

    eps: np.ndarray
    origin: Optional[tuple] = None

    def __post_init__(self):
        eps = np.array(self.eps, dtype=float)
        if eps.ndim != 2 or eps.shape[0] < 1 or eps.shape[1] < 1:
            raise ValueError("noise block must be a non-empty 2-d array")
        if not np.all(np.isfinite(eps)):
            raise ValueError("noise block must be finite")
        eps.flags.writeable = False
        object.__setattr__(self, "eps", eps)

    @property
    def n(self) -> int:
        return self.eps.shape[0]

    @property
    def d(self) -> int:
        return self.eps.shape[1]

    @classmethod
    def draw(cls, stream: SeededStream, n: int, d: int) -> "NoiseBlock":
        origin = stream.state()
        return cls(standard_normal_matrix(stream, n, d), origin=origin)

    def recreate(self) -> "NoiseBlock":
        if self.origin is None:
            raise ValueError("noise block has no recorded origin")
        seed, path, counter = self.origin
        return NoiseBlock.draw(SeededStream(seed, path, counter), self.n, self.d)


@dataclass(frozen=True)
class ElboEstimate:
    mean: float
    std_error: float
    m: int


def _check_compat(params: fam.VariationalParams, noise: NoiseBlock):
    if noise.d != params.dim:
        raise ValueError(f"noise dim {noise.d} != family dim {params.dim}")


def log_weights(
    model: LatentModel, params: fam.VariationalParams, noise: NoiseBlock, chunk: int = _CHUNK
) -> np.ndarray:
    """Per-sample log weights v_i = ln p(z_i, x) - ln q(z_i) on the fixed noise."""
    _check_compat(params, noise)
    if model.dim != params.dim:
        raise ValueError(f"model dim {model.dim} != family dim {params.dim}")
    n = noise.n
    out = np.empty(n)
    for lo in range(0, n, chunk):
        E = noise.eps[lo : lo + chunk]
        Z = fam.reparameterize_batch(params, E)
        out[lo : lo + chunk] = batch_log_joint(model, Z) - fam.log_density_batch(params, Z)
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise EvaluationError(bad[0], "log weight")
    return out


def training_objective(model, params, noise) -> float:
    """Fixed-order mean of the log weights; the quantity the solver maximizes."""
    return stable_mean(log_weights(model, params, noise))


def training_gradient(model, params, noise, chunk: int = _CHUNK) -> np.ndarray:
    """Exact gradient of ``training_objective`` with respect to theta."""
    return value_and_gradient(model, params, noise, chunk=chunk)[1]


def value_and_gradient(
    model: LatentModel,
    params: fam.VariationalParams,
    noise: NoiseBlock,
    chunk: int = _CHUNK,
) -> tuple[float, np.ndarray]:
    """One-pass objective value and gradient sharing the model evaluations.

    The gradient is the mean over noise rows of the per-sample
    reparameterization backprop of grad ln p, plus the entropy gradient;
    equal to the mean of ``families.backprop_reparam`` calls but vectorized.
    """
    _check_compat(params, noise)
    d = params.dim
    n = noise.n
    dense = params.family_kind == "dense"
    view = fam.unpack(params)

    vals = np.empty(n)
    mu_acc = np.zeros(d)
    rho_acc = np.zeros(d)
    low_acc = np.zeros((d, d)) if dense else None
    for lo in range(0, n, chunk):
        E = noise.eps[lo : lo + chunk]
        Z = fam.reparameterize_batch(params, E)
        vals[lo : lo + chunk] = batch_log_joint(model, Z) - fam.log_density_batch(params, Z)
        G = batch_grad_log_joint(model, Z)
        mu_acc += G.sum(axis=0)
        rho_acc += (G * E).sum(axis=0)
        if dense:
            low_acc += G.T @ E
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise EvaluationError(bad[0], "log weight")

    grad = np.empty(params.theta.size)
    grad[:d] = mu_acc / n
    grad[d : 2 * d] = (rho_acc / n) * softplus_prime(view.rho)
    if dense:
        grad[2 * d :] = (low_acc / n)[np.tril_indices(d, -1)]
    grad += fam.entropy_gradient(params)
    if not np.all(np.isfinite(grad)):
        raise EvaluationError(-1, "gradient")
    return stable_mean(vals), grad


def elbo_estimate(
    model: LatentModel, params: fam.VariationalParams, m: int, stream: SeededStream
) -> ElboEstimate:
    """Fresh-noise Monte Carlo ELBO with its standard error."""
    if m < 2:
        raise ValueError("elbo_estimate needs m >= 2")
    noise = NoiseBlock.draw(stream, m, params.dim)
    vals = log_weights(model, params, noise)
    return ElboEstimate(stable_mean(vals), stable_sd(vals) / float(np.sqrt(m)), m)


# ---------------------------------------------------------- unboundedness


@dataclass(frozen=True)
class UnboundedDirection:
    """Certificate that a dense-family fit on too little noise is unbounded.

    ``v`` is orthogonal to every noise row, scaled so its last nonzero
    coordinate (``pivot``) equals one. Replacing row ``pivot`` of an identity
    factor with lambda * v makes every sample's pivot coordinate collapse to
    zero while det L = lambda, so the fixed-noise objective grows like
    ln(lambda) without bound.
    """

    v: np.ndarray
    pivot: int
    residual: float
    dim: int

    def make_theta(self, lam: float) -> fam.VariationalParams:
        """Dense params with mu = 0 and L = identity with row `pivot` = lam*v."""
        if lam <= 0:
            raise ValueError("lambda must be positive")
        d = self.dim
        L = np.eye(d)
        L[self.pivot, :] = lam * self.v
        return fam.pack_from_scales("dense", np.zeros(d), L)


def unbounded_direction(noise: NoiseBlock) -> UnboundedDirection:
    """Find v with <v, eps_i> = 0 for all rows; requires n < d."""
    n, d = noise.n, noise.d
    if n >= d:
        raise ValueError(f"null direction needs fewer samples than dims, got n={n} >= d={d}")
    E = noise.eps
    # orthonormal null-space basis of the rows
    _, s, Vt = np.linalg.svd(E, full_matrices=True)
    tol = max(n, d) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    N = Vt[rank:]  # (d - rank, d)

    # canonical representative: project standard basis vectors from the top
    # down; the first that survives fixes the largest reachable pivot
    v = None
    pivot = -1
    for j in range(d - 1, -1, -1):
        cand = N.T @ N[:, j]
        if np.linalg.norm(cand) >= 1e-6:
            cand[j + 1 :] = 0.0  # provably below noise level; make it exact
            pivot = j
            v = cand
            break
    if v is None:  # unreachable for rank-deficient E, kept as a guard
        raise ValueError("null-space projection degenerate for every basis vector")
    small = np.abs(v) <= 1e-12  # zero threshold resolving pivot ties
    v = np.where(small, 0.0, v)
    v = v / v[pivot]
    residual = float(np.max(np.abs(E @ v)))
    return UnboundedDirection(v=v, pivot=pivot, residual=residual, dim=d)
