"""Figure rendering for run traces.

Turns a trace (the per-round or per-iteration records a run writes) into
PNG figures plus a flat CSV of the plotted series, so a finished run can be
inspected without rerunning anything. Rendering is headless (Agg backend).
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = ["render_report"]


def _runs(rows: list) -> dict:
    by_run: dict = {}
    for row in rows:
        by_run.setdefault(row.get("run", 0), []).append(row)
    for records in by_run.values():
        records.sort(key=lambda r: r["index"])
    return by_run


def _numeric(rows, key):
    pts = [(r["index"], r[key]) for r in rows if r.get(key) is not None]
    return [p[0] for p in pts], [p[1] for p in pts]


def render_report(trace_rows: list, out_dir) -> list:
    """Render ELBO-progress and sample-schedule figures plus report.csv.

    Returns the list of files written. The schedule figure is skipped when
    no record carries a sample size (e.g., a pure Adam trace).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not trace_rows:
        raise ValueError("empty trace: nothing to render")
    by_run = _runs(trace_rows)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for run, rows in sorted(by_run.items()):
        xs, ys = _numeric(rows, "elbo")
        if not xs:
            continue
        (line,) = ax.plot(xs, ys, marker="o", markersize=3, label=f"run {run}")
        xe, se = _numeric(rows, "elbo_se")
        if len(xe) == len(xs):
            lo = [y - 2 * s for y, s in zip(ys, se)]
            hi = [y + 2 * s for y, s in zip(ys, se)]
            ax.fill_between(xs, lo, hi, alpha=0.15, color=line.get_color())
    ax.set_xlabel("round / iteration")
    ax.set_ylabel("ELBO (nats)")
    ax.set_title("ELBO progress")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = out / "elbo_progress.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if any(r.get("n") for r in trace_rows):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for run, rows in sorted(by_run.items()):
            xs, ns = _numeric(rows, "n")
            if xs:
                ax.step(xs, ns, where="post", marker="o", markersize=3,
                        label=f"run {run}")
        ax.set_yscale("log", base=2)
        ax.set_xlabel("round")
        ax.set_ylabel("sample size n")
        ax.set_title("Sample-size schedule")
        ax.legend(loc="upper left", fontsize=8)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out / "sample_schedule.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    fields = ["run", "method", "index", "n", "objective", "elbo", "elbo_se", "p_value"]
    path = out / "report.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for run in sorted(by_run):
            writer.writerows(by_run[run])
    written.append(path)
    return written
