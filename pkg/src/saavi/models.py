"""Target models: differentiable log joint densities over a latent vector.

A model bundles the log joint ln p(z, x) with its exact gradient in z. The
optional ``known_log_evidence`` records ln of the normalizing constant when
it is available in closed form, which the test suite uses to sandwich the
optimizer's output. Batched callables are optional accelerations; the
single-point callables remain the source of truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .numerics import softplus, softplus_prime

__all__ = [
    "LatentModel",
    "Dataset",
    "DatasetError",
    "logistic_regression_model",
    "gaussian_conjugate_model",
    "funnel_model",
    "Transform",
    "exp_transform",
    "apply_transform_stack",
    "load_csv",
    "load_libsvm",
    "add_intercept_column",
    "batch_log_joint",
    "batch_grad_log_joint",
]


@dataclass(frozen=True)
class LatentModel:
    name: str
    dim: int
    log_joint: Callable[[np.ndarray], float]
    grad_log_joint: Callable[[np.ndarray], np.ndarray]
    known_log_evidence: Optional[float] = None
    # optional (m, d) -> (m,) and (m, d) -> (m, d) fast paths
    log_joint_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grad_log_joint_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None


def batch_log_joint(model: LatentModel, Z: np.ndarray) -> np.ndarray:
    """Evaluate the log joint on each row of Z, vectorized when possible."""
    Z = np.asarray(Z, dtype=float)
    if model.log_joint_batch is not None:
        return np.asarray(model.log_joint_batch(Z), dtype=float)
    return np.array([model.log_joint(z) for z in Z], dtype=float)


def batch_grad_log_joint(model: LatentModel, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if model.grad_log_joint_batch is not None:
        return np.asarray(model.grad_log_joint_batch(Z), dtype=float)
    return np.stack([model.grad_log_joint(z) for z in Z])


# ------------------------------------------------------------------ datasets


class DatasetError(ValueError):
    """Malformed dataset file (message carries the offending line)."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, p)
    labels: np.ndarray  # (N,)
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.size or X.shape[0] < 1:
            raise DatasetError("features must be (N, p) with N matching labels")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DatasetError("dataset contains non-finite values")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]


def load_csv(path: str, label_column: str) -> Dataset:
    """Load a headered numeric CSV, splitting off one labeled target column.

    Every row must parse as floats and have the header's width; violations
    raise DatasetError naming the 1-based line number. No row is ever
    silently dropped.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DatasetError(f"{path}: no column named {label_column!r} in header {header}")
        label_idx = header.index(label_column)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}"
                )
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric field in {row}")
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=float)
    mask = np.arange(table.shape[1]) != label_idx
    names = tuple(h for i, h in enumerate(header) if mask[i])
    return Dataset(table[:, mask], table[:, label_idx], feature_names=names)


def load_libsvm(path: str, n_features: Optional[int] = None) -> Dataset:
    """Load a sparse LIBSVM-format file into a dense Dataset.

    Lines look like ``label idx:value ...`` with 1-based indices. Labels in
    {-1, +1} (or {0, 1}) are mapped to {0, 1}. Feature count is inferred from
    the largest index unless given.
    """
    labels = []
    entries = []  # per row: list of (0-based idx, value)
    max_idx = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            raw = parts[0]
            try:
                lab = float(raw)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad label {raw!r}")
            if lab in (-1.0, 0.0):
                labels.append(0.0)
            elif lab == 1.0:
                labels.append(1.0)
            else:
                raise DatasetError(f"{path}:{lineno}: label {raw!r} not in {{-1,0,+1}}")
            row = []
            for tok in parts[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise DatasetError(f"{path}:{lineno}: bad feature token {tok!r}")
                if idx < 1:
                    raise DatasetError(f"{path}:{lineno}: indices are 1-based, got {idx}")
                row.append((idx - 1, val))
                max_idx = max(max_idx, idx)
            entries.append(row)
    if not entries:
        raise DatasetError(f"{path}: no data rows")
    p = n_features if n_features is not None else max_idx
    if max_idx > p:
        raise DatasetError(f"{path}: feature index {max_idx} exceeds n_features={p}")
    X = np.zeros((len(entries), p))
    for i, row in enumerate(entries):
        for j, val in row:
            X[i, j] = val
    return Dataset(X, np.asarray(labels))


def add_intercept_column(data: Dataset) -> Dataset:
    """Append a constant-1 feature (how intercepts enter the models here)."""
    ones = np.ones((data.n, 1))
    names = None if data.feature_names is None else data.feature_names + ("intercept",)
    return Dataset(np.hstack([data.features, ones]), data.labels, feature_names=names)


# ------------------------------------------------------------------ model zoo


def logistic_regression_model(data: Dataset, prior_variance: float = 1.0) -> LatentModel:
    """Bayesian logistic regression with an isotropic normal prior on weights.

    ln p(w, y) = sum_i [y_i m_i - softplus(m_i)] - |w|^2/(2v) - (p/2) ln(2 pi v)
    with m = X w. Labels must be 0/1.
    """
    if prior_variance <= 0:
        raise ValueError("prior_variance must be positive")
    y = data.labels
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("logistic regression labels must be 0 or 1")
    X = data.features
    p = data.p
    v = float(prior_variance)
    log_prior_const = -0.5 * p * np.log(2 * np.pi * v)

    def log_joint(w):
        m = X @ w
        return float(np.sum(y * m - softplus(m)) + log_prior_const - 0.5 * (w @ w) / v)

    def grad_log_joint(w):
        m = X @ w
        return X.T @ (y - softplus_prime(m)) - w / v

    def log_joint_batch(W):
        M = W @ X.T  # (m, N)
        return np.sum(y * M - softplus(M), axis=1) + log_prior_const - 0.5 * np.sum(W * W, axis=1) / v

    def grad_log_joint_batch(W):
        M = W @ X.T
        return (y - softplus_prime(M)) @ X - W / v

    return LatentModel(
        name="logistic-regression",
        dim=p,
        log_joint=log_joint,
        grad_log_joint=grad_log_joint,
        log_joint_batch=log_joint_batch,
        grad_log_joint_batch=grad_log_joint_batch,
    )


def gaussian_conjugate_model(mu_star, Sigma_star, log_evidence: float) -> LatentModel:
    """Synthetic target whose posterior is exactly N(mu_star, Sigma_star).

    ln p(z, x) = log_evidence + ln N(z; mu_star, Sigma_star); the optimal
    dense-family fit recovers the posterior and the ELBO equals the evidence.
    """
    mu_star = np.asarray(mu_star, dtype=float)
    Sigma_star = np.asarray(Sigma_star, dtype=float)
    d = mu_star.size
    if Sigma_star.shape != (d, d) or not np.allclose(Sigma_star, Sigma_star.T):
        raise ValueError("Sigma_star must be symmetric (d, d)")
    try:
        C = np.linalg.cholesky(Sigma_star)
    except np.linalg.LinAlgError:
        raise ValueError("Sigma_star must be positive definite")
    prec = np.linalg.inv(Sigma_star)
    log_norm = -0.5 * d * np.log(2 * np.pi) - np.sum(np.log(np.diag(C)))

    def log_joint(z):
        r = z - mu_star
        return float(log_evidence + log_norm - 0.5 * r @ prec @ r)

    def grad_log_joint(z):
        return -prec @ (z - mu_star)

    def log_joint_batch(Z):
        R = Z - mu_star
        return log_evidence + log_norm - 0.5 * np.sum((R @ prec) * R, axis=1)

    def grad_log_joint_batch(Z):
        return -(Z - mu_star) @ prec

    return LatentModel(
        name=f"gaussian-conjugate-{d}d",
        dim=d,
        log_joint=log_joint,
        grad_log_joint=grad_log_joint,
        known_log_evidence=float(log_evidence),
        log_joint_batch=log_joint_batch,
        grad_log_joint_batch=grad_log_joint_batch,
    )


def funnel_model(dim: int) -> LatentModel:
    """Funnel density: z1 ~ N(0, 9), z_i | z1 ~ N(0, e^{z1}) for i >= 2.

    A normalized density, so the log evidence is exactly 0; the conditional
    scale exp(z1/2) varies over orders of magnitude, which is what makes the
    geometry hard for mean-field fits.
    """
    if dim < 2:
        raise ValueError("funnel needs dim >= 2")
    k = dim - 1

    def log_joint(z):
        z1, rest = z[0], z[1:]
        top = -0.5 * np.log(2 * np.pi * 9.0) - z1 * z1 / 18.0
        cond = -0.5 * k * np.log(2 * np.pi) - 0.5 * k * z1 - 0.5 * np.exp(-z1) * (rest @ rest)
        return float(top + cond)

    def grad_log_joint(z):
        z1, rest = z[0], z[1:]
        g = np.empty_like(z)
        g[0] = -z1 / 9.0 - 0.5 * k + 0.5 * np.exp(-z1) * (rest @ rest)
        g[1:] = -rest * np.exp(-z1)
        return g

    def log_joint_batch(Z):
        z1 = Z[:, 0]
        ss = np.sum(Z[:, 1:] ** 2, axis=1)
        top = -0.5 * np.log(2 * np.pi * 9.0) - z1 * z1 / 18.0
        return top - 0.5 * k * np.log(2 * np.pi) - 0.5 * k * z1 - 0.5 * np.exp(-z1) * ss

    def grad_log_joint_batch(Z):
        z1 = Z[:, 0]
        ss = np.sum(Z[:, 1:] ** 2, axis=1)
        G = np.empty_like(Z)
        G[:, 0] = -z1 / 9.0 - 0.5 * k + 0.5 * np.exp(-z1) * ss
        G[:, 1:] = -Z[:, 1:] * np.exp(-z1)[:, None]
        return G

    return LatentModel(
        name=f"funnel-{dim}d",
        dim=dim,
        log_joint=log_joint,
        grad_log_joint=grad_log_joint,
        known_log_evidence=0.0,
        log_joint_batch=log_joint_batch,
        grad_log_joint_batch=grad_log_joint_batch,
    )


# ------------------------------------------------------------------ transforms


@dataclass(frozen=True)
class Transform:
    """Coordinate-wise increasing bijection from the real line onto a
    constrained interval, with its log absolute Jacobian and that term's
    derivative (both per coordinate)."""

    name: str
    forward: Callable
    inverse: Callable
    log_abs_det_jacobian: Callable
    log_abs_det_jacobian_grad: Callable
    applies_to: tuple


def exp_transform(applies_to) -> Transform:
    """Positivity constraint: z = e^zeta, log|J| = zeta."""
    return Transform(
        name="exp",
        forward=np.exp,
        inverse=np.log,
        log_abs_det_jacobian=lambda x: np.asarray(x, dtype=float),
        log_abs_det_jacobian_grad=lambda x: np.ones_like(np.asarray(x, dtype=float)),
        applies_to=tuple(int(i) for i in applies_to),
    )


def apply_transform_stack(model: LatentModel, transforms) -> LatentModel:
    """Reparameterize constrained coordinates so optimization runs on R^d.

    The returned model's log joint is ln p(T(zeta), x) + sum log|J_T(zeta)|,
    with the gradient assembled by the chain rule. Transform index sets must
    be disjoint and in range; untouched coordinates pass through unchanged.
    """
    transforms = list(transforms)
    seen = set()
    for t in transforms:
        for i in t.applies_to:
            if not 0 <= i < model.dim:
                raise ValueError(f"transform {t.name!r} touches out-of-range index {i}")
            if i in seen:
                raise ValueError(f"transform stack covers index {i} twice")
            seen.add(i)

    def to_constrained(zeta):
        z = np.array(zeta, dtype=float)
        for t in transforms:
            idx = list(t.applies_to)
            z[..., idx] = t.forward(z[..., idx])
        return z

    def jac_terms(zeta):
        total = np.zeros(np.shape(zeta)[:-1])
        for t in transforms:
            idx = list(t.applies_to)
            total = total + np.sum(t.log_abs_det_jacobian(np.asarray(zeta)[..., idx]), axis=-1)
        return total

    def log_joint(zeta):
        return float(batch_log_joint(model, to_constrained(zeta)[None, :])[0] + jac_terms(zeta))

    def grad_log_joint(zeta):
        z = to_constrained(zeta)
        g = model.grad_log_joint(z).copy()
        for t in transforms:
            idx = list(t.applies_to)
            x = np.asarray(zeta, dtype=float)[idx]
            # dT/dzeta = exp(log|J|) for increasing transforms
            g[idx] = g[idx] * np.exp(t.log_abs_det_jacobian(x)) + t.log_abs_det_jacobian_grad(x)
        return g

    def log_joint_batch_fn(Zeta):
        return batch_log_joint(model, to_constrained(Zeta)) + jac_terms(Zeta)

    def grad_log_joint_batch_fn(Zeta):
        Z = to_constrained(Zeta)
        G = batch_grad_log_joint(model, Z).copy()
        for t in transforms:
            idx = list(t.applies_to)
            x = np.asarray(Zeta, dtype=float)[:, idx]
            G[:, idx] = G[:, idx] * np.exp(t.log_abs_det_jacobian(x)) + t.log_abs_det_jacobian_grad(x)
        return G

    return LatentModel(
        name=f"{model.name}+{'+'.join(t.name for t in transforms)}",
        dim=model.dim,
        log_joint=log_joint,
        grad_log_joint=grad_log_joint,
        known_log_evidence=model.known_log_evidence,
        log_joint_batch=log_joint_batch_fn,
        grad_log_joint_batch=grad_log_joint_batch_fn,
    )
