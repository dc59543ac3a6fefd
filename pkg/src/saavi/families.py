"""Gaussian variational families over a flat parameter vector.

Two families are supported, both reparameterizable against standard normal
base noise:

* ``diagonal``: theta = [mu (d), rho (d)], sample z = mu + softplus(rho) * eps
* ``dense``:    theta = [mu (d), rho (d), strict lower triangle of L in
  row-major order (d(d-1)/2)], sample z = mu + L eps, where the diagonal of
  L is softplus(rho) and the strict lower triangle is stored raw.

The softplus link keeps every scale strictly positive for any finite theta
(down to the float64 underflow threshold near rho = -745), so all of
parameter space is feasible and the optimizer never needs projections.
Gradients with respect to theta are flat vectors in the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .numerics import SeededStream, softplus, softplus_inverse, softplus_prime, standard_normal_matrix

__all__ = [
    "VariationalParams",
    "DiagonalView",
    "DenseView",
    "n_params",
    "pack",
    "pack_from_scales",
    "unpack",
    "random_params",
    "reparameterize",
    "reparameterize_batch",
    "log_density",
    "log_density_batch",
    "entropy",
    "entropy_gradient",
    "backprop_reparam",
    "mean",
    "covariance",
]

_KINDS = ("diagonal", "dense")
_LOG_2PI = float(np.log(2.0 * np.pi))


def n_params(family_kind: str, dim: int) -> int:
    """Length of the flat parameter vector for a family of latent dim ``dim``."""
    if family_kind == "diagonal":
        return 2 * dim
    if family_kind == "dense":
        return 2 * dim + dim * (dim - 1) // 2
    raise ValueError(f"unknown family kind {family_kind!r}")


@dataclass(frozen=True)
class VariationalParams:
    """Immutable flat parameterization of one family member."""

    family_kind: str
    dim: int
    theta: np.ndarray

    def __post_init__(self):
        if self.family_kind not in _KINDS:
            raise ValueError(f"unknown family kind {self.family_kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        theta = np.array(self.theta, dtype=float)
        if theta.shape != (n_params(self.family_kind, self.dim),):
            raise ValueError(
                f"theta has shape {theta.shape}, expected "
                f"({n_params(self.family_kind, self.dim)},) for "
                f"{self.family_kind} family of dim {self.dim}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta: np.ndarray) -> "VariationalParams":
        return VariationalParams(self.family_kind, self.dim, theta)


@dataclass(frozen=True)
class DiagonalView:
    mu: np.ndarray
    rho: np.ndarray
    sigma: np.ndarray  # softplus(rho)


@dataclass(frozen=True)
class DenseView:
    mu: np.ndarray
    rho: np.ndarray
    lower: np.ndarray  # strict lower triangle, row-major
    L: np.ndarray  # full factor: diag softplus(rho), strict lower as stored


def pack(family_kind: str, mu, rho, lower=None) -> VariationalParams:
    """Assemble raw components into a flat parameter vector (no transforms)."""
    mu = np.asarray(mu, dtype=float)
    rho = np.asarray(rho, dtype=float)
    d = mu.size
    if rho.size != d:
        raise ValueError("mu and rho must have equal length")
    if family_kind == "diagonal":
        if lower is not None:
            raise ValueError("diagonal family takes no lower-triangle block")
        return VariationalParams("diagonal", d, np.concatenate([mu, rho]))
    if family_kind == "dense":
        lower = np.asarray(lower if lower is not None else np.zeros(d * (d - 1) // 2), float)
        if lower.size != d * (d - 1) // 2:
            raise ValueError("lower block must have length d(d-1)/2")
        return VariationalParams("dense", d, np.concatenate([mu, rho, lower]))
    raise ValueError(f"unknown family kind {family_kind!r}")


def pack_from_scales(family_kind: str, mu, scale) -> VariationalParams:
    """Build params from mu plus either a sigma vector or a full lower factor L."""
    mu = np.asarray(mu, dtype=float)
    d = mu.size
    if family_kind == "diagonal":
        sigma = np.asarray(scale, dtype=float)
        return pack("diagonal", mu, softplus_inverse(sigma))
    if family_kind == "dense":
        L = np.asarray(scale, dtype=float)
        if L.shape != (d, d):
            raise ValueError("dense scale must be a (d, d) lower factor")
        rho = softplus_inverse(np.diag(L))
        return pack("dense", mu, rho, L[np.tril_indices(d, -1)])
    raise ValueError(f"unknown family kind {family_kind!r}")


def unpack(params: VariationalParams):
    """Structured view of the flat vector; exact inverse of ``pack``."""
    d = params.dim
    theta = params.theta
    mu, rho = theta[:d], theta[d : 2 * d]
    if params.family_kind == "diagonal":
        return DiagonalView(mu=mu, rho=rho, sigma=softplus(rho))
    lower = theta[2 * d :]
    L = np.zeros((d, d))
    L[np.tril_indices(d, -1)] = lower
    L[np.diag_indices(d)] = softplus(rho)
    return DenseView(mu=mu, rho=rho, lower=lower, L=L)


def random_params(family_kind: str, dim: int, stream: SeededStream) -> VariationalParams:
    """Standard-normal initialization of every raw coordinate."""
    k = n_params(family_kind, dim)
    theta = standard_normal_matrix(stream, 1, k).ravel()
    return VariationalParams(family_kind, dim, theta)


def reparameterize(params: VariationalParams, eps: np.ndarray) -> np.ndarray:
    """Map base noise to a sample: mu + sigma*eps or mu + L eps."""
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (params.dim,):
        raise ValueError(f"eps must have shape ({params.dim},)")
    v = unpack(params)
    if params.family_kind == "diagonal":
        return v.mu + v.sigma * eps
    return v.mu + v.L @ eps


def reparameterize_batch(params: VariationalParams, eps: np.ndarray) -> np.ndarray:
    """Vectorized reparameterization of an (n, d) noise block."""
    eps = np.asarray(eps, dtype=float)
    if eps.ndim != 2 or eps.shape[1] != params.dim:
        raise ValueError(f"noise block must have shape (n, {params.dim})")
    v = unpack(params)
    if params.family_kind == "diagonal":
        return v.mu + v.sigma * eps
    return v.mu + eps @ v.L.T


def log_density(params: VariationalParams, z: np.ndarray) -> float:
    """Gaussian log density of the family member at a single point."""
    z = np.asarray(z, dtype=float)
    return float(log_density_batch(params, z[None, :])[0])


def log_density_batch(params: VariationalParams, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != params.dim:
        raise ValueError(f"points must have shape (m, {params.dim})")
    d = params.dim
    v = unpack(params)
    if params.family_kind == "diagonal":
        log_det = np.sum(np.log(v.sigma))
        w = (Z - v.mu) / v.sigma
    else:
        log_det = np.sum(np.log(np.diag(v.L)))
        w = solve_triangular(v.L, (Z - v.mu).T, lower=True).T
    return -0.5 * d * _LOG_2PI - log_det - 0.5 * np.sum(w * w, axis=1)


def entropy(params: VariationalParams) -> float:
    """Closed-form Gaussian entropy: d/2 log(2 pi e) + sum(log scale)."""
    v = unpack(params)
    scales = v.sigma if params.family_kind == "diagonal" else np.diag(v.L)
    return float(0.5 * params.dim * (_LOG_2PI + 1.0) + np.sum(np.log(scales)))


def entropy_gradient(params: VariationalParams) -> np.ndarray:
    """Gradient of the entropy wrt theta; nonzero only on the rho block."""
    d = params.dim
    v = unpack(params)
    scales = v.sigma if params.family_kind == "diagonal" else softplus(v.rho)
    grad = np.zeros(params.theta.size)
    grad[d : 2 * d] = softplus_prime(v.rho) / scales
    return grad


def backprop_reparam(params: VariationalParams, eps: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    """Pull a gradient at z = reparameterize(theta, eps) back to theta.

    Exact chain rule through the affine map: the mu block receives grad_z
    unchanged; rho_i receives grad_z[i] * eps[i] * softplus'(rho_i); a dense
    strict-lower entry (i, j) receives grad_z[i] * eps[j].
    """
    eps = np.asarray(eps, dtype=float)
    grad_z = np.asarray(grad_z, dtype=float)
    if eps.shape != (params.dim,) or grad_z.shape != (params.dim,):
        raise ValueError("eps and grad_z must be d-vectors")
    d = params.dim
    v = unpack(params)
    out = np.empty(params.theta.size)
    out[:d] = grad_z
    out[d : 2 * d] = grad_z * eps * softplus_prime(v.rho)
    if params.family_kind == "dense":
        out[2 * d :] = np.outer(grad_z, eps)[np.tril_indices(d, -1)]
    return out


def mean(params: VariationalParams) -> np.ndarray:
    return unpack(params).mu.copy()


def covariance(params: VariationalParams) -> np.ndarray:
    """Covariance of the family member: diag(sigma^2) or L L^T."""
    v = unpack(params)
    if params.family_kind == "diagonal":
        return np.diag(v.sigma**2)
    return v.L @ v.L.T
