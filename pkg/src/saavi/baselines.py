"""Stochastic-gradient baseline (Adam ascent) and the method-comparison protocol.

The baseline optimizes the same reparameterized objective with fresh small
noise draws per step, evaluating a large fresh-sample ELBO on a schedule. The
comparison harness runs the baseline over a step-size grid against the
sample-doubling method, reports per-method medians, and measures
time-to-target the way the head-to-head tables do: the clock stops at the
first evaluation within one nat of the weaker method's median.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .driver import SaaConfig, run_saa
from .families import random_params
from .models import LatentModel
from .numerics import SeededStream
from .objective import EvaluationError, NoiseBlock, elbo_estimate, training_gradient

__all__ = [
    "AdamState",
    "AdamRunConfig",
    "AdamEvalRecord",
    "AdamRunResult",
    "adam_step",
    "stochastic_elbo_gradient",
    "run_adam_vi",
    "MethodRow",
    "ComparisonResult",
    "time_to_reach",
    "build_comparison",
    "compare_methods",
]


@dataclass(frozen=True)
class AdamState:
    """Bias-corrected first/second moment accumulators."""

    m: np.ndarray
    v: np.ndarray
    step: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, beta1: float = 0.9, beta2: float = 0.999,
              eps_hat: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(dim), v=np.zeros(dim), step=0,
                   beta1=beta1, beta2=beta2, eps_hat=eps_hat)

    def __post_init__(self):
        if self.m.shape != self.v.shape or self.m.ndim != 1:
            raise ValueError("moment vectors must be flat and the same length")
        if self.step < 0 or np.any(self.v < 0.0):
            raise ValueError("invalid accumulator state")


def adam_step(state: AdamState, grad: np.ndarray, gamma: float) -> tuple[AdamState, np.ndarray]:
    """One ascent update; returns the new state and the additive change."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.m.shape:
        raise ValueError("gradient length does not match the state")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    delta = gamma * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    new_state = AdamState(m=m, v=v, step=step, beta1=state.beta1,
                          beta2=state.beta2, eps_hat=state.eps_hat)
    return new_state, delta


def stochastic_elbo_gradient(model: LatentModel, params, mc_samples: int,
                             stream: SeededStream) -> np.ndarray:
    """Objective gradient over a fresh ephemeral noise block."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be at least 1")
    noise = NoiseBlock.draw(stream, mc_samples, params.dim)
    return training_gradient(model, params, noise)


@dataclass(frozen=True)
class AdamRunConfig:
    step_size: float = 0.01
    iterations: int = 5000
    mc_samples: int = 16
    eval_every: int = 100
    eval_m: int = 10_000
    seed: int = 0
    halt_on_divergence: bool = False

    def __post_init__(self):
        if self.step_size <= 0.0:
            raise ValueError("step_size must be positive")
        if self.mc_samples < 1 or self.iterations < 1:
            raise ValueError("iterations and mc_samples must be at least 1")
        if self.eval_every < 1 or self.eval_m < 2:
            raise ValueError("eval_every must be >= 1 and eval_m >= 2")


@dataclass(frozen=True)
class AdamEvalRecord:
    iteration: int
    elbo: float
    elbo_se: float
    cumulative_time_s: float
    diverged: bool


@dataclass(frozen=True)
class AdamRunResult:
    trace: tuple
    max_elbo: float
    best_params: Optional[object]
    final_params: object
    iterations_run: int
    diverged: bool


def run_adam_vi(model: LatentModel, family_kind: str, config: AdamRunConfig) -> AdamRunResult:
    """Adam ascent on the reparameterized objective with periodic evaluation.

    Every ``eval_every`` iterations the ELBO is estimated from ``eval_m``
    fresh samples. A non-finite estimate marks the record as diverged; the
    run then stops if ``halt_on_divergence`` is set, and otherwise continues.
    A non-finite gradient or parameter vector ends the run either way, since
    no further update is possible.
    """
    root = SeededStream(config.seed)
    params = random_params(family_kind, model.dim, root.substream("init"))
    grad_stream = root.substream("train")
    test_stream = root.substream("test")
    state = AdamState.zeros(params.theta.size)

    trace: list[AdamEvalRecord] = []
    max_elbo = -math.inf
    best_params = None
    diverged = False
    iterations_run = 0
    start = time.perf_counter()

    for k in range(1, config.iterations + 1):
        try:
            grad = stochastic_elbo_gradient(model, params, config.mc_samples, grad_stream)
        except EvaluationError:
            diverged = True
            break
        if not np.all(np.isfinite(grad)):
            diverged = True
            break
        state, delta = adam_step(state, grad, config.step_size)
        theta = params.theta + delta
        if not np.all(np.isfinite(theta)):
            diverged = True
            break
        params = params.with_theta(theta)
        iterations_run = k

        if k % config.eval_every == 0:
            try:
                est = elbo_estimate(model, params, config.eval_m, test_stream)
                elbo, se = est.mean, est.std_error
            except EvaluationError:
                elbo, se = -math.inf, math.nan
            bad = not math.isfinite(elbo)
            trace.append(
                AdamEvalRecord(
                    iteration=k,
                    elbo=float(elbo),
                    elbo_se=float(se),
                    cumulative_time_s=time.perf_counter() - start,
                    diverged=bad,
                )
            )
            if bad:
                diverged = True
                if config.halt_on_divergence:
                    break
            elif elbo > max_elbo:
                max_elbo = float(elbo)
                best_params = params

    return AdamRunResult(
        trace=tuple(trace),
        max_elbo=max_elbo,
        best_params=best_params,
        final_params=params,
        iterations_run=iterations_run,
        diverged=diverged,
    )


# ------------------------------------------------------------ comparison


def time_to_reach(records, target: float) -> float:
    """Seconds until the first (time, value) record with value >= target.

    Returns infinity when no record ever reaches the target.
    """
    for t, value in records:
        if value >= target:
            return float(t)
    return math.inf


@dataclass(frozen=True)
class MethodRow:
    method: str  # "adam" or "saa"
    step_size: Optional[float]
    elbos: tuple  # per-repetition best/final ELBO
    median_elbo: float
    times_to_target: tuple
    median_time_s: float


@dataclass(frozen=True)
class ComparisonResult:
    rows: tuple
    best_adam_step_size: float
    adjusted_target: float
    difference: float  # best-Adam median minus SAA median
    time_ratio: float  # Adam median time over SAA median time

    def saa_row(self) -> MethodRow:
        return next(r for r in self.rows if r.method == "saa")

    def best_adam_row(self) -> MethodRow:
        return next(
            r for r in self.rows
            if r.method == "adam" and r.step_size == self.best_adam_step_size
        )

    def to_rows(self) -> list[dict]:
        out = []
        for r in self.rows:
            row = {
                "method": r.method,
                "step_size": r.step_size,
                "median_elbo": r.median_elbo,
                "median_time_s": r.median_time_s,
            }
            for i, (e, t) in enumerate(zip(r.elbos, r.times_to_target)):
                row[f"elbo_rep{i}"] = e
                row[f"time_rep{i}"] = t
            out.append(row)
        return out

    def to_markdown(self) -> str:
        lines = [
            "| method | step size | median ELBO | median time (s) |",
            "|---|---|---|---|",
        ]
        for r in self.rows:
            step = f"{r.step_size:g}" if r.step_size is not None else "—"
            lines.append(
                f"| {r.method} | {step} | {r.median_elbo:.4f} | {r.median_time_s:.3f} |"
            )
        lines.append("")
        lines.append(
            f"best Adam step size: {self.best_adam_step_size:g}; "
            f"difference (Adam − SAA): {self.difference:.4f} nats; "
            f"time ratio (Adam/SAA): {self.time_ratio:.3f}; "
            f"target: {self.adjusted_target:.4f} − 1 nat"
        )
        return "\n".join(lines)


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=float)))


def build_comparison(adam_data: dict, saa_data: list) -> ComparisonResult:
    """Aggregate per-repetition results into the comparison table.

    ``adam_data`` maps each step size to a list of (max_elbo, records) pairs,
    ``saa_data`` is a list of (final_elbo, records) pairs; records are
    (cumulative seconds, ELBO) pairs in evaluation order. The target every
    clock races toward is one nat below the weaker method's median.
    """
    if not adam_data or not saa_data:
        raise ValueError("need at least one Adam grid point and one SAA run")
    adam_medians = {g: _median([e for e, _ in runs]) for g, runs in adam_data.items()}
    best_gamma = max(sorted(adam_medians), key=lambda g: adam_medians[g])
    saa_elbos = [e for e, _ in saa_data]
    saa_median = _median(saa_elbos)
    target = min(adam_medians[best_gamma], saa_median) - 1.0

    rows = []
    for gamma in sorted(adam_data):
        runs = adam_data[gamma]
        times = tuple(time_to_reach(records, target) for _, records in runs)
        rows.append(
            MethodRow(
                method="adam",
                step_size=gamma,
                elbos=tuple(e for e, _ in runs),
                median_elbo=adam_medians[gamma],
                times_to_target=times,
                median_time_s=_median(times),
            )
        )
    saa_times = tuple(time_to_reach(records, target) for _, records in saa_data)
    saa_row = MethodRow(
        method="saa",
        step_size=None,
        elbos=tuple(saa_elbos),
        median_elbo=saa_median,
        times_to_target=saa_times,
        median_time_s=_median(saa_times),
    )
    rows.append(saa_row)

    best_time = next(r.median_time_s for r in rows
                     if r.method == "adam" and r.step_size == best_gamma)
    return ComparisonResult(
        rows=tuple(rows),
        best_adam_step_size=best_gamma,
        adjusted_target=target + 1.0,
        difference=adam_medians[best_gamma] - saa_median,
        time_ratio=best_time / saa_row.median_time_s,
    )


def _saa_eval_records(result) -> list:
    # cumulative clock at each convergence check, plus the final estimate
    records = []
    elapsed = 0.0
    for rec in result.trace:
        elapsed += rec.wall_time_s
        if rec.checked and rec.elbo is not None:
            records.append((elapsed, rec.elbo))
    if not records or records[-1][1] != result.final_elbo:
        records.append((elapsed, result.final_elbo))
    return records


def compare_methods(
    model: LatentModel,
    family_kind: str,
    adam_grid=(0.1, 0.01, 0.001),
    saa_config: Optional[SaaConfig] = None,
    repetitions: int = 5,
    adam_config: Optional[AdamRunConfig] = None,
) -> ComparisonResult:
    """Head-to-head protocol: Adam over a step-size grid versus the
    sample-doubling method, ``repetitions`` independent runs each."""
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    saa_config = saa_config or SaaConfig()
    adam_config = adam_config or AdamRunConfig()

    adam_data: dict = {}
    for gamma in adam_grid:
        runs = []
        for rep in range(repetitions):
            cfg = replace(adam_config, step_size=gamma, seed=adam_config.seed + rep)
            result = run_adam_vi(model, family_kind, cfg)
            records = [(r.cumulative_time_s, r.elbo) for r in result.trace if not r.diverged]
            runs.append((result.max_elbo, records))
        adam_data[float(gamma)] = runs

    saa_data = []
    for rep in range(repetitions):
        cfg = replace(saa_config, seed=saa_config.seed + rep)
        result = run_saa(model, family_kind, cfg)
        saa_data.append((result.final_elbo, _saa_eval_records(result)))

    return build_comparison(adam_data, saa_data)
