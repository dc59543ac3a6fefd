"""Outer retrospective-approximation loop with statistical convergence checks.

Each round draws a fresh fixed noise block, solves the resulting deterministic
sample-average objective with the quasi-Newton maximizer, and doubles the
sample size for the next round. A round whose solve needed almost no
iterations means the warm start already solved the larger problem; three such
rounds in a row end the run. Otherwise the run ends when the training
objective and a fresh large-sample ELBO estimate agree — by Welch t-test or
by absolute gap — or when the sample-size budget is exhausted.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .families import VariationalParams, random_params
from .lbfgs import STATUS_LINE_SEARCH_FAILURE, lbfgs_maximize
from .models import LatentModel
from .numerics import SeededStream, stable_mean, stable_sd, welch_t_test
from .objective import NoiseBlock, log_weights, value_and_gradient

__all__ = [
    "STOP_T_TEST",
    "STOP_GAP",
    "STOP_MAX_ROUNDS",
    "STOP_SMALL_ITERATIONS",
    "SaaConfig",
    "ConvergenceDiagnostics",
    "RoundRecord",
    "RunResult",
    "AblationPair",
    "initial_sample_size",
    "weight_decision",
    "converged",
    "run_saa",
    "run_ablation_warm_start",
    "ablation_rows",
]

STOP_T_TEST = "t_test_converged"
STOP_GAP = "gap_below_delta"
STOP_MAX_ROUNDS = "max_rounds"
STOP_SMALL_ITERATIONS = "small_iteration_count"

_SMALL_ROUND_LIMIT = 3  # consecutive nearly-free solves that end the run
_FAILURE_LIMIT = 3  # consecutive line-search failures that abort the run


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SaaConfig:
    """Settings for one retrospective-approximation run.

    ``n0`` is the starting sample size (a power of two), ``tau0`` the starting
    iteration cap for the inner solver; both double as needed. ``n_max`` caps
    the sample size. Convergence accepts when the Welch t-test p-value of
    train-versus-test log weights exceeds ``p_threshold``, when the mean gap
    falls below ``delta``, or when the round index reaches the sample budget.
    ``eval_m`` is the fresh-sample count for every ELBO estimate. When
    ``dense_min_n_rule`` is set, runs with a full covariance start at a
    sample size strictly greater than twice the dimension, which keeps the
    sample objective bounded.
    """

    n0: int = 32
    tau0: int = 300
    n_max: int = 2**18
    delta: float = 0.01
    p_threshold: float = 0.01
    very_small_iter: int = 2
    eval_m: int = 10_000
    warm_start: bool = True
    dense_min_n_rule: bool = True
    seed: int = 0

    def __post_init__(self):
        if not _is_power_of_two(self.n0):
            raise ValueError("n0 must be a power of two")
        if not _is_power_of_two(self.n_max) or self.n_max < self.n0:
            raise ValueError("n_max must be a power of two at least n0")
        if not 0.0 < self.p_threshold < 1.0:
            raise ValueError("p_threshold must lie in (0, 1)")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")
        if self.tau0 < 1 or self.very_small_iter < 1 or self.eval_m < 2:
            raise ValueError("tau0, very_small_iter must be >= 1 and eval_m >= 2")


def initial_sample_size(family_kind: str, dim: int, config: SaaConfig) -> int:
    """First-round sample size: n0, raised for full-covariance families to the
    smallest power of two strictly greater than twice the dimension (when the
    rule is enabled), so the first sample objective is already bounded."""
    if dim < 1:
        raise ValueError("dim must be positive")
    if family_kind == "dense" and config.dense_min_n_rule:
        floor = 2 * dim + 1
        return max(config.n0, 1 << (floor - 1).bit_length())
    return config.n0


def _capped_first_n(family_kind: str, dim: int, config: SaaConfig) -> int:
    return min(initial_sample_size(family_kind, dim, config), config.n_max)


def _max_rounds(family_kind: str, dim: int, config: SaaConfig) -> int:
    # rounds needed for the doubling schedule to reach n_max exactly
    n1 = _capped_first_n(family_kind, dim, config)
    return (config.n_max // n1).bit_length()


@dataclass(frozen=True)
class ConvergenceDiagnostics:
    objective: float
    elbo: float
    elbo_se: float
    p_value: float
    round_index: int
    max_rounds: int
    rule: Optional[str]  # which acceptance rule fired, None if none did


def weight_decision(
    train_w: np.ndarray,
    test_w: np.ndarray,
    round_index: int,
    max_rounds: int,
    config: SaaConfig,
) -> ConvergenceDiagnostics:
    """The acceptance rule itself, applied to two log-weight vectors.

    Accepts when the Welch t-test cannot tell the two means apart (p above
    the threshold), when the gap is below ``delta``, or when the sample-size
    budget is spent; ``rule`` names whichever fired first, None otherwise.
    """
    objective = float(stable_mean(train_w))
    elbo = float(stable_mean(test_w))
    elbo_se = float(stable_sd(test_w)) / math.sqrt(len(test_w))
    tt = welch_t_test(train_w, test_w)

    rule = None
    if tt.p_value > config.p_threshold:
        rule = STOP_T_TEST
    elif abs(objective - elbo) < config.delta:
        rule = STOP_GAP
    elif round_index >= max_rounds:
        rule = STOP_MAX_ROUNDS
    return ConvergenceDiagnostics(
        objective=objective,
        elbo=elbo,
        elbo_se=elbo_se,
        p_value=tt.p_value,
        round_index=round_index,
        max_rounds=max_rounds,
        rule=rule,
    )


def converged(
    model: LatentModel,
    params: VariationalParams,
    noise: NoiseBlock,
    round_index: int,
    config: SaaConfig,
    test_stream: SeededStream,
) -> tuple[bool, ConvergenceDiagnostics]:
    """Decide whether the current optimum generalizes beyond its noise block.

    Compares the training log weights against log weights on a fresh
    ``eval_m``-sample block from ``test_stream``, via ``weight_decision``.
    """
    train_w = log_weights(model, params, noise)
    test_noise = NoiseBlock.draw(test_stream, config.eval_m, params.dim)
    test_w = log_weights(model, params, test_noise)
    cap = _max_rounds(params.family_kind, params.dim, config)
    diag = weight_decision(train_w, test_w, round_index, cap, config)
    return diag.rule is not None, diag


@dataclass(frozen=True)
class RoundRecord:
    """One row of the per-round trace."""

    round_index: int
    n: int
    tau: int
    eta: int  # inner iterations actually used
    opt_status: str
    objective: float
    grad_norm: float
    count: int  # consecutive small-iteration rounds after this one
    checked: bool
    converged: bool
    rule: Optional[str]
    elbo: Optional[float]
    elbo_se: Optional[float]
    p_value: Optional[float]
    wolfe_certified_steps: int
    wolfe_violations: int
    noise_origin: tuple
    wall_time_s: float


@dataclass(frozen=True)
class RunResult:
    theta_star: VariationalParams
    stop_reason: str
    trace: tuple
    final_elbo: float
    final_elbo_se: float

    @property
    def rounds(self) -> int:
        return len(self.trace)


def run_saa(
    model: LatentModel,
    family_kind: str,
    config: Optional[SaaConfig] = None,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
    optimizer: Callable = lbfgs_maximize,
) -> RunResult:
    """Run the full sample-doubling loop and return the final parameters.

    ``on_round`` receives each RoundRecord as it is produced (for streaming
    writers). ``optimizer`` is a swap-in point for instrumentation and tests;
    it must match the ``lbfgs_maximize`` signature.
    """
    config = config or SaaConfig()
    dim = model.dim
    root = SeededStream(config.seed)
    init_stream = root.substream("init")
    train_stream = root.substream("train")
    test_stream = root.substream("test")

    n1 = _capped_first_n(family_kind, dim, config)
    params = random_params(family_kind, dim, init_stream)
    tau = config.tau0
    count = 0
    failure_streak = 0
    trace: list[RoundRecord] = []
    stop_reason = None
    final_elbo: Optional[float] = None
    final_elbo_se = 0.0

    t = 0
    while stop_reason is None:
        t += 1
        tic = time.perf_counter()
        n = min(n1 << (t - 1), config.n_max)
        noise = NoiseBlock.draw(train_stream, n, dim)
        if t > 1 and not config.warm_start:
            params = random_params(family_kind, dim, init_stream)

        def f_and_grad(theta, _noise=noise, _template=params):
            return value_and_gradient(model, _template.with_theta(theta), _noise)

        round_tau = tau
        report = optimizer(f_and_grad, params.theta, round_tau)
        params = params.with_theta(report.theta_star)
        eta = report.iterations_used

        failed = report.status == STATUS_LINE_SEARCH_FAILURE
        failure_streak = failure_streak + 1 if failed else 0
        if eta == round_tau:
            tau = 2 * round_tau
        count = count + 1 if eta < config.very_small_iter else 0

        checked = count == 0
        is_conv, diag = (
            converged(model, params, noise, t, config, test_stream)
            if checked
            else (False, None)
        )
        record = RoundRecord(
            round_index=t,
            n=n,
            tau=round_tau,
            eta=eta,
            opt_status=report.status,
            objective=float(report.final_value),
            grad_norm=float(report.final_grad_norm),
            count=count,
            checked=checked,
            converged=is_conv,
            rule=diag.rule if diag else None,
            elbo=diag.elbo if diag else None,
            elbo_se=diag.elbo_se if diag else None,
            p_value=diag.p_value if diag else None,
            wolfe_certified_steps=report.wolfe_certified_steps,
            wolfe_violations=report.wolfe_violations,
            noise_origin=noise.origin,
            wall_time_s=time.perf_counter() - tic,
        )
        trace.append(record)
        if on_round is not None:
            on_round(record)
        if diag is not None:
            final_elbo, final_elbo_se = diag.elbo, diag.elbo_se

        if failure_streak >= _FAILURE_LIMIT:
            raise RuntimeError(
                f"line search failed in {_FAILURE_LIMIT} consecutive rounds "
                f"(last round {t}, n = {n}); the objective may be unbounded — "
                "try a diagonal family or a larger starting sample size"
            )
        if is_conv:
            stop_reason = diag.rule
        elif count >= _SMALL_ROUND_LIMIT:
            stop_reason = STOP_SMALL_ITERATIONS

    if final_elbo is None:
        # exited through the small-iteration path without any check: report a
        # fresh estimate so every result carries a comparable ELBO
        test_noise = NoiseBlock.draw(test_stream, config.eval_m, dim)
        w = log_weights(model, params, test_noise)
        final_elbo = float(stable_mean(w))
        final_elbo_se = float(stable_sd(w)) / math.sqrt(config.eval_m)

    return RunResult(
        theta_star=params,
        stop_reason=stop_reason,
        trace=tuple(trace),
        final_elbo=final_elbo,
        final_elbo_se=final_elbo_se,
    )


@dataclass(frozen=True)
class AblationPair:
    repetition: int
    warm: RunResult
    fresh: RunResult


def run_ablation_warm_start(
    model: LatentModel,
    family_kind: str,
    config: Optional[SaaConfig] = None,
    repetitions: int = 1,
) -> tuple[AblationPair, ...]:
    """Run warm-start and fresh-start arms on matched seeds.

    Repetition i uses seed config.seed + i for both arms, so both see the
    same noise blocks and differ only in how each round is initialized.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    base = config or SaaConfig()
    pairs = []
    for rep in range(repetitions):
        warm_cfg = replace(base, warm_start=True, seed=base.seed + rep)
        fresh_cfg = replace(base, warm_start=False, seed=base.seed + rep)
        pairs.append(
            AblationPair(
                repetition=rep,
                warm=run_saa(model, family_kind, warm_cfg),
                fresh=run_saa(model, family_kind, fresh_cfg),
            )
        )
    return tuple(pairs)


def ablation_rows(pairs) -> list[dict]:
    """Flatten ablation results to per-round rows for delimited output."""
    rows = []
    for pair in pairs:
        for arm_name, result in (("warm", pair.warm), ("fresh", pair.fresh)):
            for rec in result.trace:
                rows.append(
                    {
                        "repetition": pair.repetition,
                        "arm": arm_name,
                        "round": rec.round_index,
                        "n": rec.n,
                        "eta": rec.eta,
                        "objective": rec.objective,
                        "elbo": rec.elbo,
                        "wall_time_s": rec.wall_time_s,
                    }
                )
    return rows
