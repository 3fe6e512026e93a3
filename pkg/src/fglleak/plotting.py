"""Report figures written next to the CSV/JSON outputs of ``attack``."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}
METHOD_COLORS = {"graphdlg": "#1f5fa8", "random": "#9a9a9a"}
# Fixed metadata keeps the PNG bytes stable across runs.
_META = {"Software": None}


def _figsize(scale=1.0, ratio=(math.sqrt(5) - 1) / 2):
    width = 6.0 * scale
    return width, width * ratio


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_metric_distributions(rows: Sequence[dict], path: Path) -> Path:
    """Box plots of per-graph metrics, one box per (method, defense)."""
    keys = sorted({(r["method"], r["defense"]) for r in rows})
    metrics = [("feature_mse", "feature MSE"), ("feature_acc", "feature ACC"),
               ("structure_auc", "structure AUC"), ("structure_ap", "structure AP")]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=_figsize(1.6, 0.3))
        for ax, (key, label) in zip(axes, metrics):
            data = []
            for method, defense in keys:
                vals = [r[key] for r in rows if r["method"] == method and r["defense"] == defense]
                data.append([v for v in vals if not math.isnan(v)] or [math.nan])
            box = ax.boxplot(data, patch_artist=True, widths=0.6, showfliers=False)
            for patch, (method, _) in zip(box["boxes"], keys):
                patch.set_facecolor(METHOD_COLORS.get(method, "#cccccc"))
            ax.set_xticks(range(1, len(keys) + 1))
            ax.set_xticklabels([f"{m}\n{d}" for m, d in keys], rotation=45, ha="right")
            ax.set_title(label)
        return _save(fig, Path(path))


def _sweep_param(defense: str) -> tuple[str, float]:
    kind, _, val = defense.partition(":")
    return kind, float(val) if val else 0.0


def plot_defense_sweep(summary: Sequence[dict], path: Path, method: str = "graphdlg") -> Path | None:
    """Metric vs defense strength; solid lines MSE/AUC, dashed ACC/AP.

    The undefended run is drawn at strength 0 for every defense kind.
    Returns ``None`` when fewer than two strengths were evaluated.
    """
    entries = [s for s in summary if s["method"] == method]
    base = [s for s in entries if s["defense"] == "none"]
    kinds = sorted({_sweep_param(s["defense"])[0] for s in entries if s["defense"] != "none"})
    if not kinds:
        return None
    with plt.rc_context(STYLE):
        fig, (ax_f, ax_s) = plt.subplots(1, 2, figsize=_figsize(1.3, 0.4))
        ax_f2, ax_s2 = ax_f.twinx(), ax_s.twinx()
        plotted = False
        for i, kind in enumerate(kinds):
            c = f"C{i}"
            pts = [(_sweep_param(s["defense"])[1], s["mean"]) for s in entries
                   if _sweep_param(s["defense"])[0] == kind]
            pts += [(0.0, s["mean"]) for s in base]
            pts.sort(key=lambda t: t[0])
            if len(pts) < 2:
                continue
            plotted = True
            xs = [p for p, _ in pts]
            ax_f.plot(xs, [m["feature_mse"] for _, m in pts], "-o", ms=3, color=c, label=kind)
            ax_f2.plot(xs, [m["feature_acc"] for _, m in pts], "--s", ms=3, color=c)
            ax_s.plot(xs, [m["structure_auc"] for _, m in pts], "-o", ms=3, color=c, label=kind)
            ax_s2.plot(xs, [m["structure_ap"] for _, m in pts], "--s", ms=3, color=c)
        if not plotted:
            plt.close(fig)
            return None
        ax_f.set(xlabel="defense strength", ylabel="MSE (solid)", title="node features")
        ax_f2.set_ylabel("ACC (dashed)")
        ax_s.set(xlabel="defense strength", ylabel="AUC (solid)", title="structure")
        ax_s2.set_ylabel("AP (dashed)")
        ax_f.legend(loc="best")
        return _save(fig, Path(path))
