"""Figure rendering for simulation reports.

Figures are written straight to files with the Agg backend; nothing here
opens a window. Each plot sits next to the CSV holding the same numbers.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .simulation import FsrReport, RankSweepResult


def save_calibration_figure(reports: dict[str, FsrReport], path) -> None:
    """Nominal level against mean empirical FSP, one line per arm."""
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    grid = None
    for name, rep in reports.items():
        grid = np.array(rep.alpha_grid)
        ax.errorbar(grid, rep.mean_fsp(), yerr=2 * rep.se_fsp(), marker="o", capsize=2, label=name)
    if grid is not None:
        lim = float(grid.max())
        ax.plot([0, lim], [0, lim], color="grey", linestyle="--", linewidth=1)
    ax.set_xlabel("nominal FSR level")
    ax.set_ylabel("empirical FSR (mean FSP)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_power_figure(reports: dict[str, FsrReport], path) -> None:
    """Mean empirical FSP against mean power, traced along the level grid."""
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for name, rep in reports.items():
        fsp_curve = rep.mean_fsp()
        pow_curve = rep.mean_power()
        order = np.argsort(fsp_curve, kind="stable")
        ax.plot(fsp_curve[order], pow_curve[order], marker="o", label=name)
    ax.set_xlabel("empirical FSR (mean FSP)")
    ax.set_ylabel("power (declared fraction of effects)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_rank_sweep_figure(sweep: RankSweepResult, path) -> None:
    """Mean FSP against prior rank, per arm and nominal level."""
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    ranks = np.array(sweep.ranks)
    some_report = next(iter(sweep.reports.values()))
    for arm, suffix in (("unadjusted", ""), ("info_mat", "_info_mat")):
        for j, alpha in enumerate(some_report.alpha_grid):
            values = [sweep.reports[f"rank{r}{suffix}"].mean_fsp()[j] for r in ranks]
            ax.plot(ranks, values, marker="o", label=f"{arm}, level {alpha:g}")
            ax.axhline(alpha, color="grey", linestyle=":", linewidth=0.8)
    ax.set_xlabel("prior covariance rank")
    ax.set_ylabel("empirical FSR (mean FSP)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
