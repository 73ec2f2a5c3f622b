"""Figure rendering for reports and sweep galleries (headless)."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

DPI = 150

_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
}


@contextmanager
def report_style():
    with plt.rc_context(_RC):
        yield


def save_figure(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def render_mask_overlay(image: np.ndarray, masks: Sequence, points: Sequence[tuple[int, int]],
                        path: str | Path, title: str = "") -> Path:
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    overlay = img.astype(float) / 255.0
    cmap = plt.get_cmap("tab20")
    for i, m in enumerate(masks):
        arr = m.array if hasattr(m, "array") else np.asarray(m, dtype=bool)
        color = np.asarray(cmap(i % 20)[:3])
        overlay[arr] = 0.45 * overlay[arr] + 0.55 * color
    with report_style():
        fig, ax = plt.subplots(figsize=(4, 4 * img.shape[0] / max(img.shape[1], 1)))
        ax.imshow(overlay, interpolation="nearest")
        if points:
            xs, ys = zip(*points)
            ax.scatter(xs, ys, s=6, c="white", edgecolors="black", linewidths=0.3)
        ax.set_title(f"{title}\n{len(masks)} masks" if title else f"{len(masks)} masks")
        ax.axis("off")
        return save_figure(fig, path)


def plot_strategy_bars(rows: Sequence[Mapping], path: str | Path, metric: str = "miou", title: str = "") -> Path:
    """Grouped bars: strategies along x, one bar per reinit policy.

    ``rows`` carry ``strategy``, ``policy``, the run value under ``metric``
    (a fraction) and optionally ``paper_<metric>`` (in percent).
    """
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    policies = list(dict.fromkeys(r["policy"] for r in rows))
    lookup = {(r["strategy"], r["policy"]): r for r in rows}
    width = 0.8 / max(len(policies), 1)
    labels = {"miou": "mIoU", "mdice": "mDice", "map": "mAP"}
    ref_labelled = False
    x = np.arange(len(strategies))
    with report_style():
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(strategies)), 3.0))
        for k, pol in enumerate(policies):
            vals = [100.0 * float(lookup[(s, pol)][metric]) if (s, pol) in lookup and lookup[(s, pol)].get(metric) not in (None, "") else np.nan
                    for s in strategies]
            ax.bar(x + (k - (len(policies) - 1) / 2) * width, vals, width, label=pol)
            ref = [lookup.get((s, pol), {}).get(f"paper_{metric}") for s in strategies]
            ref = [np.nan if v in (None, "") else float(v) for v in ref]
            if not np.all(np.isnan(ref)):
                ax.scatter(x + (k - (len(policies) - 1) / 2) * width, ref, marker="_", s=120, c="black", zorder=3,
                           label=None if ref_labelled else "published")
                ref_labelled = True
        ax.set_xticks(x)
        ax.set_xticklabels(strategies, rotation=20, ha="right")
        ax.set_ylabel(f"{labels.get(metric, metric)} (%)")
        ax.set_ylim(0, 100)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, ncol=min(len(policies) + ref_labelled, 4))
        return save_figure(fig, path)


def plot_iou_trace(frames: Sequence[int], ious: Sequence[float], events: Sequence[int], path: str | Path,
                   title: str = "") -> Path:
    """Per-frame IoU with re-seeding frames marked."""
    with report_style():
        fig, ax = plt.subplots(figsize=(5, 2.4))
        ax.plot(frames, ious, lw=1)
        for e in events:
            ax.axvline(e, color="grey", lw=0.6, ls="--")
        ax.set_xlabel("frame")
        ax.set_ylabel("IoU")
        ax.set_ylim(0, 1.02)
        if title:
            ax.set_title(title)
        return save_figure(fig, path)
