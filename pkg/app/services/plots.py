import collections
import logging
import typing
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.services.metrics import read_a2a_csv, read_summary_csv  # noqa: E402

logger = logging.getLogger(__name__)

SWEEP_SIZE = "size"
SWEEP_ITERS = "iters"


def plot_a2a(csv_path: Path, out_dir: Path) -> typing.List[Path]:
    """Log-log time curves of the size and iteration sweeps, one line per mode and bound."""
    points = read_a2a_csv(csv_path)
    written = []
    for sweep, x_field, x_label, y_field, y_label in (
        (SWEEP_SIZE, "size_bytes", "Message size per rank (B)", "per_call_s", "Time per call (s)"),
        (SWEEP_ITERS, "iters", "Iterations", "total_s", "Total time (s)"),
    ):
        series = collections.defaultdict(list)
        for p in points:
            if p.sweep == sweep:
                series[(p.mode, p.bound_k, p.ranks)].append(p)
        if not series:
            continue
        fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
        for (mode, bound_k, ranks), rows in sorted(series.items()):
            rows.sort(key=lambda p: getattr(p, x_field))
            label = f"{mode} k={bound_k}" if mode == "bls" else mode
            ax.plot(
                [max(getattr(p, x_field), 1) for p in rows],
                [max(getattr(p, y_field), 1e-9) for p in rows],
                marker="o",
                label=f"{label} ({ranks} ranks)",
            )
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel(x_label)
        ax.set_ylabel(y_label)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(loc="best", fontsize=8)
        path = Path(out_dir) / f"a2a_{sweep}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def plot_bound_sweep(summary_path: Path, out_dir: Path) -> typing.List[Path]:
    """
    Latency and throughput against the bound, per workload. The synchronous
    k=0 run of a workload is drawn as a horizontal reference line.
    """
    rows = read_summary_csv(summary_path)
    workloads = sorted({r.workload for r in rows})
    written = []
    for metric, ci, label in (
        ("latency_mean", "latency_ci95", "Mean batch latency (s)"),
        ("throughput_mean", "throughput_ci95", "Throughput (batches/s)"),
    ):
        if not workloads:
            break
        fig, axes = plt.subplots(
            1, len(workloads), figsize=(5 * len(workloads), 3.8), constrained_layout=True, squeeze=False
        )
        for ax, workload in zip(axes[0], workloads):
            series = collections.defaultdict(list)
            for r in rows:
                if r.workload != workload:
                    continue
                if r.backend_mode.endswith("/sync") and r.bound_k == 0:
                    ax.axhline(getattr(r, metric), color="grey", linestyle="--", label=f"{r.backend_mode} k=0")
                else:
                    series[r.backend_mode].append(r)
            for backend_mode, points in sorted(series.items()):
                points.sort(key=lambda r: r.bound_k)
                ax.errorbar(
                    [r.bound_k for r in points],
                    [getattr(r, metric) for r in points],
                    yerr=[getattr(r, ci) for r in points],
                    marker="o",
                    capsize=3,
                    label=backend_mode,
                )
            ax.set_title(workload)
            ax.set_xlabel("Bound k")
            ax.grid(True, alpha=0.3)
            ax.legend(loc="best", fontsize=8)
        axes[0][0].set_ylabel(label)
        path = Path(out_dir) / f"dlrm_{metric.split('_')[0]}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
