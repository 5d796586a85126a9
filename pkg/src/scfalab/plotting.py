"""Figures for ``scfalab report``.  Uses the Agg backend; nothing is shown."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import analysis  # noqa: E402
from .artifacts import column  # noqa: E402

RC = {
    "figure.figsize": (6.0, 3.7),
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
ZONE_COLORS = {"Safe": "#d9f0d3", "Warning": "#fee08b", "Danger": "#fdae61", "Critical": "#f4a6a6"}


def _by_variant(rows):
    groups = {}
    for r in rows:
        groups.setdefault(r["variant"], {}).setdefault(r["seed"], []).append(r)
    return groups


def _mean_curve(runs, name):
    curves = []
    for rs in runs.values():
        rs = sorted(rs, key=lambda r: int(r["round"]))
        curves.append(column(rs, name))
    n = min(len(c) for c in curves)
    arr = np.array([c[:n] for c in curves])
    return np.arange(1, n + 1), arr.mean(axis=0), arr.min(axis=0), arr.max(axis=0)


def round_figures(rows, out_dir) -> list[Path]:
    """Metric, squared gradient norm and violation rate against round."""
    out_dir = Path(out_dir)
    groups = _by_variant(rows)
    written = []
    panels = (
        ("metric", "held-out metric", False),
        ("grad_norm_sq", "squared gradient norm", True),
        ("rho", "violation rate", False),
    )
    with plt.rc_context(RC):
        for name, label, logy in panels:
            fig, ax = plt.subplots()
            for variant, runs in sorted(groups.items()):
                t, mean, lo, hi = _mean_curve(runs, name)
                line, = ax.plot(t, mean, label=variant, lw=1.2)
                if len(runs) > 1:
                    ax.fill_between(t, lo, hi, color=line.get_color(), alpha=0.15, lw=0)
            if logy:
                ax.set_yscale("log")
            ax.set_xlabel("round")
            ax.set_ylabel(label)
            ax.legend(frameon=False)
            path = out_dir / f"{name}_by_round.png"
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
    return written


def summary_figures(rows, out_dir) -> list[Path]:
    """Final metric against mean violation rate, with zone bands and an OLS line."""
    out_dir = Path(out_dir)
    rho = column(rows, "mean_rho")
    metric = column(rows, "final_metric")
    keep = np.isfinite(rho) & np.isfinite(metric)
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        edges = (0.0,) + analysis.ZONE_EDGES + (max(0.25, float(np.nanmax(rho, initial=0.0)) * 1.1),)
        for zone, lo, hi in zip(analysis.ZONES, edges[:-1], edges[1:]):
            ax.axvspan(lo, hi, color=ZONE_COLORS[zone], alpha=0.5, lw=0)
        variants = np.array([r["variant"] for r in rows])
        for v in sorted(set(variants[keep])):
            m = keep & (variants == v)
            ax.plot(rho[m], metric[m], "o", ms=4, label=v)
        fit = analysis.proposition1_fit(np.column_stack([rho[keep], metric[keep]]))
        if fit.ok:
            xs = np.linspace(0.0, edges[-1], 50)
            ax.plot(xs, fit.params["intercept"] + fit.params["slope"] * xs, "k--", lw=1,
                    label=f"OLS, R2={fit.r_squared:.2f}")
        ax.set_xlim(0.0, edges[-1])
        ax.set_xlabel("mean violation rate")
        ax.set_ylabel("final metric")
        ax.legend(frameon=False)
        path = out_dir / "metric_vs_rho.png"
        fig.savefig(path)
        plt.close(fig)
    return [path]
