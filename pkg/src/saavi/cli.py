"""Command-line entry point: configs, run orchestration, outputs, diagnostics.

Runs are described by a JSON config (flags override file values) naming a
model, a family, and a method. Every numeric output is deterministic given
the seed, so trace and summary files are byte-identical across reruns;
wall-clock measurements go to separate timing files, and anything
environment-specific goes to metadata.json.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .baselines import AdamRunConfig, compare_methods, run_adam_vi
from .driver import SaaConfig, run_saa
from .families import n_params
from .gradcheck import TOLERANCE, gradient_check
from .models import (
    Dataset,
    LatentModel,
    add_intercept_column,
    funnel_model,
    gaussian_conjugate_model,
    load_csv,
    load_libsvm,
    logistic_regression_model,
)
from .numerics import SeededStream
from .objective import NoiseBlock, training_objective, unbounded_direction

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "TraceRecord",
    "parse_config",
    "build_model",
    "cmd_run",
    "cmd_diagnose_unbounded",
    "cmd_check_gradients",
    "main",
]

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

FAMILIES = ("diagonal", "dense")
METHODS = ("saa", "adam", "compare", "diagnose-unbounded", "check-gradients")
WORKERS_ENV = "SAAVI_WORKERS"
DEFAULT_OUT = "saavi-out"


class ConfigError(ValueError):
    """Invalid configuration: bad key, bad value, or missing file."""


class RunFailure(RuntimeError):
    """A repetition failed; carries whatever completed before it."""

    def __init__(self, cause: BaseException, outputs: list):
        super().__init__(str(cause))
        self.cause = cause
        self.outputs = outputs


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved run description."""

    model: str
    family: str = "dense"
    method: str = "saa"
    seed: int = 0
    repetitions: int = 1
    out: Optional[str] = None
    dataset: Optional[str] = None
    dataset_format: Optional[str] = None  # csv | libsvm; inferred from suffix
    label_column: str = "label"
    prior_variance: float = 1.0
    add_intercept: bool = True
    model_params: dict = field(default_factory=dict)
    saa: SaaConfig = field(default_factory=SaaConfig)
    adam: AdamRunConfig = field(default_factory=AdamRunConfig)
    adam_grid: tuple = (0.1, 0.01, 0.001)


@dataclass(frozen=True)
class TraceRecord:
    """One evaluation record of one repetition."""

    run: int
    method: str
    index: int  # round (saa) or iteration (adam)
    n: Optional[int]
    objective: Optional[float]
    elbo: Optional[float]
    elbo_se: Optional[float]
    p_value: Optional[float]
    elapsed_s: float  # monotone within a run; serialized to the timing files


# ------------------------------------------------------------ configuration

_TOP_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_SAA_KEYS = {f.name for f in dataclasses.fields(SaaConfig)}
_ADAM_KEYS = {f.name for f in dataclasses.fields(AdamRunConfig)}


def _check_keys(data: dict, allowed: set, prefix: str = "") -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown configuration key '{prefix}{key}'")


def _sub_config(data: dict, block: str, allowed: set, cls, **forced):
    sub = data.get(block, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"'{block}' must be a JSON object")
    if "seed" in sub:
        raise ConfigError(f"key '{block}.seed' is set by the top-level seed")
    _check_keys(sub, allowed - {"seed"}, prefix=f"{block}.")
    try:
        return cls(**sub, **forced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{block}: {exc}") from exc


def parse_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Load a JSON config file, apply flag overrides, resolve all defaults."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    _check_keys(data, _TOP_KEYS)
    if not data.get("model") and not data.get("dataset"):
        raise ConfigError("config needs a 'model' name or a 'dataset' path")

    family = data.get("family", "dense")
    if family not in FAMILIES:
        raise ConfigError(
            f"unknown family '{family}': choose one of {{{', '.join(FAMILIES)}}}"
        )
    method = data.get("method", "saa")
    if method not in METHODS:
        raise ConfigError(
            f"unknown method '{method}': choose one of {{{', '.join(METHODS)}}}"
        )

    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    repetitions = data.get("repetitions", 1)
    if isinstance(repetitions, bool) or not isinstance(repetitions, int) or repetitions < 1:
        raise ConfigError("repetitions must be an integer >= 1")

    grid = data.get("adam_grid", (0.1, 0.01, 0.001))
    if not isinstance(grid, (list, tuple)) or not grid or any(
        not isinstance(g, (int, float)) or isinstance(g, bool) or g <= 0 for g in grid
    ):
        raise ConfigError("adam_grid must be a non-empty list of positive step sizes")

    prior_variance = data.get("prior_variance", 1.0)
    if not isinstance(prior_variance, (int, float)) or prior_variance <= 0:
        raise ConfigError("prior_variance must be positive")

    model_params = data.get("model_params", {})
    if not isinstance(model_params, dict):
        raise ConfigError("'model_params' must be a JSON object")

    return ExperimentConfig(
        model=data.get("model") or "logistic",
        family=family,
        method=method,
        seed=seed,
        repetitions=repetitions,
        out=data.get("out"),
        dataset=data.get("dataset"),
        dataset_format=data.get("dataset_format"),
        label_column=data.get("label_column", "label"),
        prior_variance=float(prior_variance),
        add_intercept=bool(data.get("add_intercept", True)),
        model_params=model_params,
        saa=_sub_config(data, "saa", _SAA_KEYS, SaaConfig, seed=seed),
        adam=_sub_config(data, "adam", _ADAM_KEYS, AdamRunConfig, seed=seed),
        adam_grid=tuple(float(g) for g in grid),
    )


# ------------------------------------------------------------ model registry

_GAUSSIAN_RE = re.compile(r"^gaussian-(\d+)d?$")
_FUNNEL_RE = re.compile(r"^funnel-(\d+)d?$")


def registry_gaussian(dim: int) -> LatentModel:
    """Fixed random-covariance conjugate target, reproducible per dimension."""
    if dim < 1:
        raise ConfigError("gaussian model dimension must be at least 1")
    rng = np.random.default_rng(9000 + dim)
    M = rng.normal(size=(dim, dim))
    sigma = M @ M.T + np.eye(dim)
    mu = rng.normal(size=dim)
    return gaussian_conjugate_model(mu, sigma, log_evidence=float(rng.normal()))


def _synthetic_logistic_model(config: ExperimentConfig) -> LatentModel:
    params = dict(config.model_params)
    n_features = params.pop("n_features", 4)
    n_rows = params.pop("n_rows", 200)
    data_seed = params.pop("data_seed", 0)
    if params:
        raise ConfigError(
            f"unknown configuration key 'model_params.{next(iter(params))}'"
        )
    if n_features < 1 or n_rows < 1:
        raise ConfigError("n_features and n_rows must be at least 1")
    gen = np.random.default_rng(data_seed)
    X = gen.normal(size=(n_rows, n_features))
    w = gen.normal(size=n_features)
    probs = 1.0 / (1.0 + np.exp(-(X @ w + 0.25 * gen.normal())))
    y = (gen.uniform(size=n_rows) < probs).astype(float)
    data = Dataset(X, y)
    if config.add_intercept:
        data = add_intercept_column(data)
    return logistic_regression_model(data, prior_variance=config.prior_variance)


def build_model(config: ExperimentConfig) -> LatentModel:
    """Resolve the config's model name or dataset path to a concrete target."""
    if config.dataset is not None:
        path = Path(config.dataset)
        if not path.exists():
            raise ConfigError(f"dataset file not found: {config.dataset}")
        fmt = config.dataset_format or ("csv" if path.suffix == ".csv" else "libsvm")
        if fmt == "csv":
            data = load_csv(str(path), label_column=config.label_column)
        elif fmt == "libsvm":
            data = load_libsvm(str(path))
        else:
            raise ConfigError(
                f"unknown dataset_format '{fmt}': choose one of {{csv, libsvm}}"
            )
        if config.add_intercept:
            data = add_intercept_column(data)
        return logistic_regression_model(data, prior_variance=config.prior_variance)

    name = config.model
    if m := _GAUSSIAN_RE.match(name):
        return registry_gaussian(int(m.group(1)))
    if m := _FUNNEL_RE.match(name):
        return funnel_model(int(m.group(1)))
    if name == "synthetic-logistic":
        return _synthetic_logistic_model(config)
    raise ConfigError(
        f"unknown model '{name}': built-ins are gaussian-<d>, funnel-<d>, "
        f"synthetic-logistic, or give a 'dataset' path"
    )


# ------------------------------------------------------------ run execution


@dataclass(frozen=True)
class _RepetitionOutput:
    repetition: int
    records: tuple
    final_elbo: float
    stop_reason: str
    final_n: Optional[int]
    theta: tuple
    total_seconds: float


def _run_one_repetition(config: ExperimentConfig, rep: int,
                        sink: Optional[list] = None) -> _RepetitionOutput:
    model = build_model(config)
    seed = config.seed + rep
    start = time.perf_counter()
    if config.method == "saa":
        records = []
        elapsed = [0.0]

        def on_round(rec):
            elapsed[0] += rec.wall_time_s
            record = TraceRecord(
                run=rep,
                method="saa",
                index=rec.round_index,
                n=rec.n,
                objective=rec.objective,
                elbo=rec.elbo,
                elbo_se=rec.elbo_se,
                p_value=rec.p_value,
                elapsed_s=elapsed[0],
            )
            records.append(record)
            if sink is not None:
                sink.append(record)

        result = run_saa(model, config.family, replace(config.saa, seed=seed),
                         on_round=on_round)
        return _RepetitionOutput(
            repetition=rep,
            records=tuple(records),
            final_elbo=result.final_elbo,
            stop_reason=result.stop_reason,
            final_n=result.trace[-1].n,
            theta=tuple(result.theta_star.theta.tolist()),
            total_seconds=time.perf_counter() - start,
        )
    if config.method == "adam":
        result = run_adam_vi(model, config.family, replace(config.adam, seed=seed))
        records = tuple(
            TraceRecord(
                run=rep,
                method="adam",
                index=r.iteration,
                n=None,
                objective=None,
                elbo=r.elbo,
                elbo_se=r.elbo_se,
                p_value=None,
                elapsed_s=r.cumulative_time_s,
            )
            for r in result.trace
        )
        return _RepetitionOutput(
            repetition=rep,
            records=records,
            final_elbo=result.max_elbo,
            stop_reason="diverged" if result.diverged else "iteration_budget",
            final_n=None,
            theta=tuple(result.final_params.theta.tolist()),
            total_seconds=time.perf_counter() - start,
        )
    raise ConfigError(f"method '{config.method}' does not produce repetition runs")


def _worker_count(repetitions: int) -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        workers = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got '{raw}'") from exc
    return max(1, min(workers, repetitions))


def _execute_repetitions(config: ExperimentConfig, sink: list) -> list:
    """Run all repetitions; on failure raise RunFailure carrying completed ones.

    ``sink`` receives records live (single-worker mode), so the repetition
    that failed still leaves its completed rounds behind.
    """
    workers = _worker_count(config.repetitions)
    outputs: list = []
    if workers == 1:
        for rep in range(config.repetitions):
            try:
                outputs.append(_run_one_repetition(config, rep, sink))
            except ConfigError:
                raise
            except Exception as exc:
                raise RunFailure(exc, outputs) from exc
        return outputs
    failure: Optional[BaseException] = None
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_run_one_repetition, config, rep)
            for rep in range(config.repetitions)
        ]
        for f in futures:
            try:
                outputs.append(f.result())
            except Exception as exc:  # keep collecting the siblings
                failure = failure or exc
    outputs.sort(key=lambda o: o.repetition)
    if failure is not None:
        raise RunFailure(failure, outputs) from failure
    return outputs


_TRACE_FIELDS = ("run", "method", "index", "n", "objective", "elbo", "elbo_se", "p_value")


def _write_trace(records, out_dir: Path) -> None:
    with open(out_dir / "trace.jsonl", "w") as fh:
        for rec in records:
            row = {k: getattr(rec, k) for k in _TRACE_FIELDS}
            fh.write(json.dumps(row) + "\n")
    with open(out_dir / "timing.jsonl", "w") as fh:
        for rec in records:
            fh.write(
                json.dumps({"run": rec.run, "index": rec.index, "elapsed_s": rec.elapsed_s})
                + "\n"
            )


def _write_summary(outputs, out_dir: Path) -> None:
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["repetition", "final_elbo", "stop_reason", "final_n"])
        for o in outputs:
            writer.writerow([o.repetition, o.final_elbo, o.stop_reason,
                             "" if o.final_n is None else o.final_n])
    with open(out_dir / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["repetition", "total_seconds"])
        for o in outputs:
            writer.writerow([o.repetition, o.total_seconds])


def _layout_note(family: str, dim: int) -> str:
    base = "theta = [mu[0:d], rho[d:2d]"
    if family == "dense":
        return base + ", lower[2d:]]; scale L has softplus(rho) diagonal, strict lower triangle row-major"
    return base + "]; per-coordinate scale is softplus(rho)"


def _write_params(outputs, config: ExperimentConfig, dim: int, out_dir: Path) -> None:
    payload = {
        "family": config.family,
        "dim": dim,
        "n_params": n_params(config.family, dim),
        "layout": _layout_note(config.family, dim),
        "repetitions": [
            {"repetition": o.repetition, "theta": list(o.theta)} for o in outputs
        ],
    }
    with open(out_dir / "params.json", "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _write_metadata(config: ExperimentConfig, out_dir: Path, seconds: float) -> None:
    meta = {
        "package_version": __version__,
        "created_unix": time.time(),
        "argv": sys.argv,
        "workers": _worker_count(config.repetitions),
        "total_seconds": seconds,
    }
    with open(out_dir / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def _run_compare(config: ExperimentConfig, out_dir: Path) -> None:
    model = build_model(config)
    result = compare_methods(
        model,
        config.family,
        adam_grid=config.adam_grid,
        saa_config=replace(config.saa, seed=config.seed),
        repetitions=config.repetitions,
        adam_config=replace(config.adam, seed=config.seed),
    )
    rows = result.to_rows()
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    (out_dir / "comparison.md").write_text(result.to_markdown() + "\n")
    print(result.to_markdown())


def cmd_run(config: ExperimentConfig) -> int:
    """Execute the configured method x repetitions and write the output files."""
    if config.method == "check-gradients":
        return cmd_check_gradients(config)
    out_dir = Path(config.out or DEFAULT_OUT)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    if config.method == "compare":
        _run_compare(config, out_dir)
        _write_metadata(config, out_dir, time.perf_counter() - start)
        return EXIT_OK
    if config.method == "diagnose-unbounded":
        raise ConfigError(
            "method 'diagnose-unbounded' runs via the diagnose-unbounded subcommand"
        )

    dim = build_model(config).dim
    sink: list = []
    try:
        outputs = _execute_repetitions(config, sink)
    except RunFailure as failure:
        # preserve whatever completed: finished repetitions' records plus the
        # live sink of the one that failed partway
        seen = {(r.run, r.index) for o in failure.outputs for r in o.records}
        extra = [r for r in sink if (r.run, r.index) not in seen]
        records = sorted(
            [r for o in failure.outputs for r in o.records] + extra,
            key=lambda r: (r.run, r.index),
        )
        if records:
            _write_trace(records, out_dir)
        if failure.outputs:
            _write_summary(failure.outputs, out_dir)
            _write_params(failure.outputs, config, dim, out_dir)
        _write_metadata(config, out_dir, time.perf_counter() - start)
        raise RuntimeError(
            f"{failure.cause} (partial trace preserved in {out_dir})"
        ) from failure.cause

    _write_trace([rec for o in outputs for rec in o.records], out_dir)
    _write_summary(outputs, out_dir)
    _write_params(outputs, config, dim, out_dir)
    _write_metadata(config, out_dir, time.perf_counter() - start)
    for o in outputs:
        print(
            f"repetition {o.repetition}: final ELBO {o.final_elbo:.6f} "
            f"({o.stop_reason}, {o.total_seconds:.2f}s)"
        )
    return EXIT_OK


# ------------------------------------------------------------- diagnostics


def cmd_diagnose_unbounded(dim: int, n: int, seed: int = 0) -> int:
    """Demonstrate the low-sample unboundedness of the dense family.

    Requires n < d: only then do the noise rows span a proper subspace,
    leaving a direction along which the fixed-noise objective grows like
    ln(lambda). Prints CSV rows of (lambda, objective, objective - ln lambda)
    and passes when the last column is constant within 1e-6.
    """
    if n >= dim:
        raise ConfigError(
            f"diagnose-unbounded requires n < d (noise rows must span a proper "
            f"subspace; got n={n} >= d={dim})"
        )
    model = registry_gaussian(dim)
    noise = NoiseBlock.draw(SeededStream(seed).substream("diagnose"), n, dim)
    direction = unbounded_direction(noise)

    writer = csv.writer(sys.stdout)
    writer.writerow(["lambda", "objective", "objective_minus_log_lambda"])
    residuals = []
    for k in range(4):
        lam = math.exp(float(k))
        params = direction.make_theta(lam)
        value = training_objective(model, params, noise)
        residuals.append(value - math.log(lam))
        writer.writerow([lam, value, residuals[-1]])
    spread = max(residuals) - min(residuals)
    ok = spread <= 1e-6
    print(
        f"{'PASS' if ok else 'FAIL'}: objective - ln(lambda) spread {spread:.3e} "
        f"(constant within 1e-6 required)",
        file=sys.stderr,
    )
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_check_gradients(config: ExperimentConfig, corrupt: bool = False) -> int:
    """Finite-difference check of the objective gradient at 20 random points."""
    model = build_model(config)
    report = gradient_check(
        model, config.family, points=20, n=16, seed=config.seed, corrupt=corrupt
    )
    print(f"model {model.name}, {config.family} family ({report.points} points):")
    for line in report.lines():
        print(f"  {line}")
    if not report.passed():
        print(
            f"FAIL: worst relative error {report.worst:.3e} exceeds {TOLERANCE:g}",
            file=sys.stderr,
        )
        return EXIT_RUNTIME
    print(f"PASS: all blocks within {TOLERANCE:g}")
    return EXIT_OK


def cmd_report(trace_path: str, out: str) -> int:
    """Render figures and a flat CSV from a trace.jsonl file."""
    from .report import render_report  # matplotlib import deferred to use

    path = Path(trace_path)
    if not path.exists():
        raise ConfigError(f"trace file not found: {trace_path}")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    written = render_report(rows, out)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--model", help="built-in model name, e.g. gaussian-2d")
    sub.add_argument("--family", help="variational family: diagonal or dense")
    sub.add_argument("--seed", type=int, help="root seed (repetition r uses seed+r)")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--repetitions", type=int, help="independent repetitions")


def _config_from_args(args: argparse.Namespace, method: Optional[str] = None) -> ExperimentConfig:
    overrides = {
        "model": args.model,
        "family": args.family,
        "seed": args.seed,
        "out": args.out,
        "repetitions": args.repetitions,
    }
    if method is not None:
        overrides["method"] = method
    return parse_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saavi",
        description="Variational inference via deterministic fixed-noise subproblems",
    )
    parser.add_argument("--version", action="version", version=f"saavi {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="run the method named in the config")
    _add_config_flags(run)
    run.set_defaults(fn=lambda a: cmd_run(_config_from_args(a)))

    adam = subs.add_parser("adam", help="run the stochastic-gradient baseline")
    _add_config_flags(adam)
    adam.set_defaults(fn=lambda a: cmd_run(_config_from_args(a, method="adam")))

    comp = subs.add_parser("compare", help="head-to-head: baseline grid vs sample doubling")
    _add_config_flags(comp)
    comp.set_defaults(fn=lambda a: cmd_run(_config_from_args(a, method="compare")))

    diag = subs.add_parser(
        "diagnose-unbounded",
        help="show the dense family's objective growing like ln(lambda) when n < d",
    )
    diag.add_argument("-d", "--dim", type=int, required=True)
    diag.add_argument("-n", "--samples", type=int, required=True)
    diag.add_argument("--seed", type=int, default=0)
    diag.set_defaults(fn=lambda a: cmd_diagnose_unbounded(a.dim, a.samples, a.seed))

    check = subs.add_parser("check-gradients", help="finite-difference gradient check")
    _add_config_flags(check)
    check.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    check.set_defaults(
        fn=lambda a: cmd_check_gradients(
            _config_from_args(a, method="check-gradients"), corrupt=a.corrupt_gradient
        )
    )

    rep = subs.add_parser("report", help="render figures from a trace.jsonl")
    rep.add_argument("--trace", required=True, help="path to trace.jsonl")
    rep.add_argument("--out", default="saavi-report", help="output directory")
    rep.set_defaults(fn=lambda a: cmd_report(a.trace, a.out))
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
