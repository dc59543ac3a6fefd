"""Seeded random streams, scalar transforms, stable reductions, and the
two-sample test used by the outer-loop convergence check.

Everything here is deterministic given its inputs: the random streams are
counter-based, the reductions use a fixed summation order, and nothing reads
global state.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

__all__ = [
    "SeededStream",
    "standard_normal_matrix",
    "softplus",
    "softplus_inverse",
    "softplus_prime",
    "TTestResult",
    "welch_t_test",
    "student_t_cdf",
    "stable_mean",
    "stable_sd",
    "tri_matvec",
]

# Each draw call occupies its own slice of the Philox counter space, so a
# stream replayed from the same (seed, path, counter) reproduces its draws
# bit for bit no matter how many values earlier calls consumed.
_DRAWS_PER_CALL = 1 << 64


def _philox_key(seed: int, path: str) -> np.ndarray:
    """128-bit Philox key derived from (seed, substream path) via SHA-256."""
    digest = hashlib.sha256(f"{seed}:{path}".encode()).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


class SeededStream:
    """Counter-based random stream with named, non-overlapping substreams.

    Draws come from numpy's Philox generator (version-pinned by the numpy
    dependency; Philox output is specified by the algorithm, not numpy
    internals). Distinct substream names map to distinct 128-bit keys, so
    substreams derived from one seed can never overlap. ``counter`` is the
    number of draw calls made so far; two streams with equal
    ``(seed, path, counter)`` produce identical subsequent draws.
    """

    def __init__(self, seed: int, name: str = "root", counter: int = 0):
        if counter < 0:
            raise ValueError("counter must be non-negative")
        self.seed = int(seed)
        self.path = str(name)
        self.counter = int(counter)
        self._key = _philox_key(self.seed, self.path)

    def substream(self, name: str) -> "SeededStream":
        """Derive an independent stream; names like 'train'/'test'/'init'."""
        if not name:
            raise ValueError("substream name must be non-empty")
        return SeededStream(self.seed, f"{self.path}/{name}")

    def state(self) -> tuple[int, str, int]:
        return (self.seed, self.path, self.counter)

    def _generator_at(self, counter: int) -> np.random.Generator:
        bitgen = np.random.Philox(key=self._key)
        bitgen.advance(counter * _DRAWS_PER_CALL)
        return np.random.Generator(bitgen)

    def __repr__(self) -> str:  # pragma: no cover
        return f"SeededStream(seed={self.seed}, path={self.path!r}, counter={self.counter})"


def standard_normal_matrix(stream: SeededStream, n: int, d: int) -> np.ndarray:
    """Draw an (n, d) matrix of iid standard normals, advancing the stream."""
    if n < 1 or d < 1:
        raise ValueError(f"matrix dimensions must be positive, got ({n}, {d})")
    gen = stream._generator_at(stream.counter)
    stream.counter += 1
    return gen.standard_normal((n, d))


def softplus(x):
    """Overflow-safe log(1 + e^x); works on scalars and arrays."""
    x = np.asarray(x, dtype=float)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def softplus_inverse(y):
    """Inverse of softplus on (0, inf): log(e^y - 1)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0):
        raise ValueError("softplus_inverse requires strictly positive input")
    # small y: log(expm1(y)) keeps full precision; large y: avoid expm1 overflow
    small = y <= 1.0
    out = np.where(
        small,
        np.log(np.expm1(np.minimum(y, 1.0))),
        y + np.log1p(-np.exp(-np.maximum(y, 1.0))),
    )
    return out if out.ndim else float(out)


def softplus_prime(x):
    """Derivative of softplus, i.e. the logistic sigmoid."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def stable_mean(values: np.ndarray) -> float:
    """Mean by fixed-order pairwise summation; bit-reproducible for a fixed
    input order."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size < 1:
        raise ValueError("stable_mean expects a non-empty 1-d array")
    # np.add.reduce on a contiguous float64 vector is pairwise with a fixed
    # blocking, hence deterministic for a given input order.
    return float(np.add.reduce(values) / values.size)


def stable_sd(values: np.ndarray) -> float:
    """Unbiased sample standard deviation (two-pass, fixed order)."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size < 2:
        raise ValueError("stable_sd expects at least two values")
    m = stable_mean(values)
    ss = np.add.reduce((values - m) ** 2)
    return float(np.sqrt(ss / (values.size - 1)))


def student_t_cdf(x: float, df: float) -> float:
    """CDF of Student's t with ``df`` degrees of freedom, via the regularized
    incomplete beta function."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    x = float(x)
    if x == 0.0:
        return 0.5
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + x * x))
    return 1.0 - tail if x > 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float


def welch_t_test(a: np.ndarray, b: np.ndarray) -> TTestResult:
    """Two-sided Welch t-test for a difference in means (unequal variances).

    Degenerate inputs where both samples have zero variance short-circuit:
    equal means give p = 1, unequal means give p = 0 (by convention the
    degrees of freedom are then reported as n_a + n_b - 2).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 1 or b.ndim != 1 or a.size < 2 or b.size < 2:
        raise ValueError("welch_t_test expects two 1-d samples of size >= 2")
    na, nb = a.size, b.size
    ma, mb = stable_mean(a), stable_mean(b)
    va, vb = stable_sd(a) ** 2, stable_sd(b) ** 2

    wa, wb = va / na, vb / nb
    se2 = wa + wb
    if se2 == 0.0:  # both samples (numerically) constant
        df = float(na + nb - 2)
        if ma == mb:
            return TTestResult(0.0, df, 1.0)
        t = np.inf if ma > mb else -np.inf
        return TTestResult(float(t), df, 0.0)

    t = (ma - mb) / np.sqrt(se2)
    # Welch-Satterthwaite, written in underflow-safe normalized form
    df = 1.0 / ((wa / se2) ** 2 / (na - 1) + (wb / se2) ** 2 / (nb - 1))
    # two-sided p-value: P(|T_df| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(float(t), float(df), min(max(p, 0.0), 1.0))


def tri_matvec(L: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Product of a lower-triangular matrix with a vector.

    Entries above the diagonal are ignored; the diagonal is taken as stored.
    """
    L = np.asarray(L, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or L.shape != (v.size, v.size):
        raise ValueError(f"shape mismatch: L {L.shape} vs v {v.shape}")
    return (np.tril(L) * v).sum(axis=1)
