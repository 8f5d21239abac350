"""Figure rendering for sweep reports.

Every figure is derived from the same summary rows that land in the
CSV, so the plots and the delimited output can never disagree.  The
Agg backend is forced because reports run headless.
"""

from __future__ import annotations

import os
from typing import List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .harness import SWEEP_METRICS, SweepResult

_AXIS_LABELS = {
    "snr_db": "SNR (dB)",
    "rho": "pilot overhead rho",
    "p_lambda": "activity probability",
    "S_a": "cooperating satellites",
    "Q_R": "refinement basis order",
    "antennas": "antenna panel side",
}

_METRIC_LABELS = {
    "aer": "activity error rate",
    "nmse_db": "channel NMSE (dB)",
    "ser": "symbol error rate",
    "nmse_initial_db": "initial channel NMSE (dB)",
    "ser_initial": "initial symbol error rate",
}

# metrics drawn on a log scale when every point is positive
_LOG_METRICS = ("aer", "ser", "ser_initial")


def render_sweep_figures(result: SweepResult, csv_path) -> List[str]:
    """One figure per metric next to the sweep CSV; returns the paths."""
    stem, _ = os.path.splitext(str(csv_path))
    axis = result.spec.axis
    paths = []
    for metric in SWEEP_METRICS:
        rows = [r for r in result.summary if r["metric"] == metric
                and r["n"] > 0]
        if not rows:
            continue
        values = [r["value"] for r in rows]
        means = [r["mean"] for r in rows]
        lo = [r["ci_lo"] for r in rows]
        hi = [r["ci_hi"] for r in rows]

        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        ax.plot(values, means, "o-", color="tab:blue")
        ax.fill_between(values, lo, hi, alpha=0.25, color="tab:blue",
                        linewidth=0)
        ax.set_xlabel(_AXIS_LABELS.get(axis, axis))
        ax.set_ylabel(_METRIC_LABELS.get(metric, metric))
        if metric in _LOG_METRICS and all(m > 0 for m in means):
            ax.set_yscale("log")
        ax.grid(True, which="both", alpha=0.3)
        ax.set_title(f"{result.spec.mode}, {result.spec.trials} trials "
                     f"per point")
        fig.tight_layout()
        path = f"{stem}.{metric}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths
