"""PNG figures from an experiment directory (metrics.csv, group_improvement.csv, maps/)."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)


def plot_miou_curves(rows: list[dict], path: Path) -> bool:
    """mIoU against cycle, mean with a ±1 std band per method.

    Returns False (and writes nothing) when there is nothing to compare.
    """
    methods = list(dict.fromkeys(r["method"] for r in rows))
    if len(methods) < 2:
        return False
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for m in methods:
        mine = [r for r in rows if r["method"] == m]
        cycles = sorted({r["cycle"] for r in mine})
        vals = [np.array([r["miou"] for r in mine if r["cycle"] == c]) for c in cycles]
        mean = np.array([v.mean() for v in vals])
        std = np.array([v.std() for v in vals])
        ax.plot(cycles, mean, marker="o", label=m)
        ax.fill_between(cycles, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("learning cycle (0 = pretrained)")
    ax.set_ylabel("mIoU on test poses")
    ax.set_xticks(sorted({r["cycle"] for r in rows}))
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def plot_group_improvement(bins: list[dict], path: Path) -> bool:
    if not bins:
        return False
    methods = list(dict.fromkeys(b["method"] for b in bins))
    labels = list(dict.fromkeys(b["bin"] for b in bins))
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(labels))
    for i, m in enumerate(methods):
        vals = []
        for lab in labels:
            hit = [b for b in bins if b["method"] == m and b["bin"] == lab]
            v = hit[0]["mean_delta"] if hit else ""
            vals.append(np.nan if v in ("", None) else float(v))
        ax.bar(x + (i - (len(methods) - 1) / 2) * width, vals, width, label=m)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels([f"pretrained IoU {lab}" for lab in labels], fontsize=8)
    ax.set_ylabel("mean IoU change")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def plot_maps(map_files: list[Path], path: Path, n_classes: int | None = None) -> bool:
    """Observation-count heat maps (top row) and top-down map classes (bottom row)."""
    if not map_files:
        return False
    fig, axes = plt.subplots(2, len(map_files), figsize=(3.2 * len(map_files), 6.2), squeeze=False)
    for col, f in enumerate(map_files):
        with np.load(f) as d:
            hits, top, traj, vs = d["hits"], d["top_class"], d["trajectory"], float(d["voxel_size"])
        extent = (0, hits.shape[0] * vs, 0, hits.shape[1] * vs)
        ax = axes[0, col]
        ax.imshow(np.log1p(hits).T, origin="lower", extent=extent, cmap="magma")
        if len(traj):
            ax.plot(traj[:, 0], traj[:, 1], color="c", lw=0.6)
        ax.set_title(f.stem, fontsize=9)
        ax = axes[1, col]
        masked = np.ma.masked_less(top, 0)
        ax.imshow(masked.T, origin="lower", extent=extent, cmap="tab10", vmin=0,
                  vmax=max(9, (n_classes or 10) - 1), interpolation="nearest")
        for a in axes[:, col]:
            a.set_xticks([])
            a.set_yticks([])
    axes[0, 0].set_ylabel("log(1 + hits)")
    axes[1, 0].set_ylabel("map class (top view)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return True


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def make_plots(out_dir) -> list[Path]:
    """Render every figure that the directory has data for; returns written paths."""
    from .harness import read_metrics

    out = Path(out_dir)
    written = []
    metrics = out / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"no metrics.csv in {out}")
    rows = read_metrics(metrics)
    if plot_miou_curves(rows, out / "miou_vs_cycle.png"):
        written.append(out / "miou_vs_cycle.png")
    else:
        log.info("single method: skipping comparison plot")
    if plot_group_improvement(_read_csv(out / "group_improvement.csv"), out / "group_improvement.png"):
        written.append(out / "group_improvement.png")
    maps = sorted((out / "maps").glob("*.npz")) if (out / "maps").exists() else []
    # one panel per method, first seed only
    first: dict[str, Path] = {}
    for f in maps:
        first.setdefault(f.stem.rsplit("_s", 1)[0], f)
    n_classes = len(rows[0]["iou"]) if rows else None
    if plot_maps(list(first.values()), out / "observation_maps.png", n_classes):
        written.append(out / "observation_maps.png")
    return written
