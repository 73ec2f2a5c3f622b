"""Hyperparameter sweeps for first-frame automatic mask generation.

A sweep runs every grid configuration on one frame and records, per cell,
statistics that stand in for the visual selection criteria: coverage
(completeness), boundary-length/area ratio (boundary quality) and the
maximum pairwise IoU (separation of close objects). Picking the final
configuration stays a manual step.
"""

from __future__ import annotations

import itertools
import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import (
    AnnotatedVideo,
    DatasetError,
    FrameRef,
    InstanceAnnotation,
    VideoSequence,
)
from .masks import BinaryMask, mask_iou

log = logging.getLogger(__name__)


class SweepError(RuntimeError):
    pass


@dataclass(frozen=True)
class AutoSegConfig:
    points_per_side: int = 32
    mask_quality_threshold: float = 0.8
    stability_score_threshold: float = 0.95
    stability_score_offset: float = 1.0
    nms_threshold: float = 0.7
    min_mask_region_area: int = 0
    crop_layers: int = 0
    mask_refinement: bool = False

    def __post_init__(self):
        if self.points_per_side < 1:
            raise ValueError("points_per_side must be >= 1")
        for name in ("mask_quality_threshold", "stability_score_threshold", "nms_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.crop_layers < 0 or self.min_mask_region_area < 0:
            raise ValueError("crop_layers and min_mask_region_area must be >= 0")

    @property
    def key(self) -> str:
        return (f"pps{self.points_per_side}-q{self.mask_quality_threshold:g}-s{self.stability_score_threshold:g}"
                f"-o{self.stability_score_offset:g}-nms{self.nms_threshold:g}-a{self.min_mask_region_area}"
                f"-c{self.crop_layers}-r{int(self.mask_refinement)}")


# documented starting grid; not values taken from any published setting
DEFAULT_GRID = {
    "points_per_side": [16, 32, 64],
    "mask_quality_threshold": [0.7, 0.8],
    "stability_score_threshold": [0.9, 0.95],
    "min_mask_region_area": [0, 100],
}


def expand_grid(axes: dict[str, Sequence] | None = None, base: AutoSegConfig | None = None) -> list[AutoSegConfig]:
    base = base or AutoSegConfig()
    axes = dict(DEFAULT_GRID if axes is None else axes)
    names = sorted(axes)
    return [replace(base, **dict(zip(names, values))) for values in itertools.product(*(axes[n] for n in names))]


@dataclass
class SweepCell:
    config_id: str
    config: AutoSegConfig
    ok: bool
    candidates: list[tuple[BinaryMask, list[tuple[int, int]]]] = field(default_factory=list)
    count: int = 0
    coverage: float = 0.0
    boundary_ratio: float = 0.0
    max_pairwise_iou: float = 0.0
    mean_pairwise_iou: float = 0.0
    error: str | None = None

    def stats(self) -> dict:
        return {
            "config_id": self.config_id,
            "config": asdict(self.config),
            "ok": self.ok,
            "count": self.count,
            "coverage": self.coverage,
            "boundary_ratio": self.boundary_ratio,
            "max_pairwise_iou": self.max_pairwise_iou,
            "mean_pairwise_iou": self.mean_pairwise_iou,
            "error": self.error,
        }


@dataclass
class SweepReport:
    frame: FrameRef
    generator: str
    cells: list[SweepCell]

    def cell(self, config_id: str) -> SweepCell:
        for c in self.cells:
            if c.config_id == config_id:
                return c
        raise KeyError(config_id)


def boundary_length(arr: np.ndarray) -> int:
    return int(np.count_nonzero(arr & ~ndimage.binary_erosion(arr, border_value=0)))


def cell_statistics(candidates, width: int, height: int) -> dict:
    masks = [m.array for m, _ in candidates]
    if not masks:
        return {"count": 0, "coverage": 0.0, "boundary_ratio": 0.0, "max_pairwise_iou": 0.0, "mean_pairwise_iou": 0.0}
    union = np.zeros((height, width), dtype=bool)
    for m in masks:
        union |= m
    ratios = [boundary_length(m) / max(int(m.sum()), 1) for m in masks]
    pair = [mask_iou(a, b) for a, b in itertools.combinations(masks, 2)]
    return {
        "count": len(masks),
        "coverage": float(union.sum()) / (width * height),
        "boundary_ratio": float(np.mean(ratios)),
        "max_pairwise_iou": max(pair, default=0.0),
        "mean_pairwise_iou": float(np.mean(pair)) if pair else 0.0,
    }


def sweep(frame: FrameRef, grid: Sequence[AutoSegConfig], bridge) -> SweepReport:
    """Run each configuration on ``frame``; failing cells are recorded, not raised.

    ``bridge`` must provide ``auto_generate_masks(frame, config)``.
    """
    if not grid:
        raise SweepError("empty sweep grid")
    cells = []
    seen: dict[str, int] = {}
    for config in grid:
        n = seen.get(config.key, 0)
        seen[config.key] = n + 1
        cid = config.key if n == 0 else f"{config.key}#{n}"
        try:
            cands = list(bridge.auto_generate_masks(frame, config))
        except Exception as exc:  # noqa: BLE001 - one bad cell must not stop the sweep
            log.warning("sweep cell %s failed: %s", cid, exc)
            cells.append(SweepCell(cid, config, False, error=f"{type(exc).__name__}: {exc}"))
            continue
        cells.append(SweepCell(cid, config, True, cands, **cell_statistics(cands, frame.width, frame.height)))
    return SweepReport(frame, getattr(bridge, "identity", type(bridge).__name__), cells)


def select_pseudo_ground_truth(report: SweepReport, config_id: str) -> list[InstanceAnnotation]:
    """Chosen cell's masks as frame annotations, ids 0.. by descending area.

    Each object is its own class (the generator is class-agnostic).
    """
    try:
        cell = report.cell(config_id)
    except KeyError:
        raise SweepError(f"no sweep cell {config_id!r}; known: {[c.config_id for c in report.cells]}") from None
    if not cell.ok:
        raise SweepError(f"cell {config_id} failed: {cell.error}")
    masks = [m for m, _ in cell.candidates if not m.is_empty()]
    if not masks:
        raise DatasetError(f"cell {config_id} produced no masks; video cannot be evaluated")
    order = sorted(range(len(masks)), key=lambda i: (-masks[i].area, int(np.flatnonzero(masks[i].array.ravel())[0])))
    return [InstanceAnnotation(report.frame.index, oid, oid, masks[i]) for oid, i in enumerate(order)]


def pseudo_annotated_video(sequence: VideoSequence, annotations: Iterable[InstanceAnnotation]) -> AnnotatedVideo:
    annotations = list(annotations)
    by_frame: dict[int, list] = {}
    for a in annotations:
        by_frame.setdefault(a.frame_index, []).append(a)
    classes = {a.class_id: f"pseudo-{a.class_id}" for a in annotations}
    return AnnotatedVideo(sequence, {f: tuple(v) for f, v in by_frame.items()}, classes, pseudo_ground_truth=True)


def write_gallery(report: SweepReport, directory: str | Path, image: np.ndarray | None = None) -> Path:
    """One overlay image per cell plus ``index.json`` listing cell statistics."""
    from . import plotting

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if image is None:
        from PIL import Image

        with Image.open(report.frame.image_locator) as img:
            image = np.asarray(img.convert("RGB"))
    index = {"frame": asdict(report.frame), "generator": report.generator, "cells": []}
    for i, cell in enumerate(report.cells):
        entry = cell.stats()
        if cell.ok:
            name = f"cell_{i:03d}.png"
            plotting.render_mask_overlay(image, [m for m, _ in cell.candidates],
                                         [p for _, pts in cell.candidates for p in pts],
                                         directory / name, title=cell.config_id)
            entry["image"] = name
        index["cells"].append(entry)
    path = directory / "index.json"
    path.write_text(json.dumps(index, indent=2, sort_keys=True))
    return path
