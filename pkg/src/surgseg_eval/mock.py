"""Deterministic stand-ins for the segmentation runtime.

``MockSession`` replays ground truth degraded by a drift model that grows
with the number of frames since the last prompt, so re-seeding measurably
resets the accumulated error. ``MockAutoMaskGenerator`` proposes candidate
masks from intensity plateaus of a frame image.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset import AnnotatedVideo
from .masks import (
    BinaryMask,
    connected_regions,
    erode_square,
    label_components,
    mask_iou,
    translate,
)
from .prompts import (
    POSITIVE,
    BoxPrompt,
    MaskPrompt,
    PointPrompt,
    Prompt,
    group_by_object,
)

# Seed quality ranking by prompt richness; higher seeds at least as much of the object.
PROMPT_FIDELITY = {"mask": 3, "box": 2, "point": 1}


@dataclass(frozen=True)
class DriftModel:
    translation: tuple[float, float] = (0.0, 0.0)
    erosion_rate: float = 0.0
    dropout_after: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if self.erosion_rate < 0:
            raise ValueError("erosion_rate must be >= 0")
        if self.dropout_after is not None and self.dropout_after <= 0:
            raise ValueError("dropout_after must be positive")

    @property
    def is_zero(self) -> bool:
        return self.translation == (0.0, 0.0) and self.erosion_rate == 0 and self.dropout_after is None


def apply_drift(arr: np.ndarray, elapsed: int, drift: DriftModel) -> np.ndarray:
    if drift.dropout_after is not None and elapsed > drift.dropout_after:
        return np.zeros_like(arr, dtype=bool)
    dx = round(elapsed * drift.translation[0])
    dy = round(elapsed * drift.translation[1])
    out = translate(arr, dx, dy) if (dx or dy) else np.asarray(arr, dtype=bool)
    return erode_square(out, math.floor(elapsed * drift.erosion_rate + 1e-9))


def mock_propagate(
    video: AnnotatedVideo, seeded_frame: int, object_id: int, target_frame: int, drift: DriftModel
) -> BinaryMask:
    """Ground truth at ``target_frame`` shifted, eroded and clipped by the drift
    accumulated since ``seeded_frame``."""
    if target_frame < seeded_frame:
        raise ValueError("target frame precedes the seeded frame")
    w, h = video.size
    inst = video.instance(target_frame, object_id)
    if inst is None:
        return BinaryMask.empty(w, h)
    return BinaryMask(apply_drift(inst.mask.array, target_frame - seeded_frame, drift))


def prompt_fidelity(kind: str) -> int:
    return PROMPT_FIDELITY[kind]


def seed_mask(video: AnnotatedVideo, frame_index: int, object_id: int, prompts: Sequence[Prompt]) -> BinaryMask:
    """Initial mask a prompt group yields for one object.

    A mask prompt seeds itself; a box seeds the object's ground truth inside
    the box; points seed the 4-connected ground-truth regions that contain a
    positive point. Negative points are ignored.
    """
    w, h = video.size
    inst = video.instance(frame_index, object_id)
    gt = inst.mask.array if inst is not None else np.zeros((h, w), dtype=bool)
    out = np.zeros((h, w), dtype=bool)
    for p in prompts:
        if isinstance(p, MaskPrompt):
            out |= p.mask.array
        elif isinstance(p, BoxPrompt):
            box = np.zeros_like(out)
            box[p.y0:p.y1 + 1, p.x0:p.x1 + 1] = True
            out |= gt & box
        elif isinstance(p, PointPrompt) and p.label == POSITIVE:
            for region in connected_regions(gt):
                if region[p.y, p.x]:
                    out |= region
    return BinaryMask(out)


class MockSession:
    """SegmenterSession over ground truth with drift since the last prompt.

    An object whose seed covers its full ground-truth mask follows the ground
    truth exactly (before drift); a partial seed keeps only the part of later
    ground truth that overlaps the seed carried along with the object's box
    origin.
    """

    accepted_kinds = frozenset({"point", "box", "mask"})

    def __init__(self, video: AnnotatedVideo, drift: DriftModel | None = None, identity: str = "mock"):
        self.video = video
        self.drift = drift or DriftModel()
        self.identity = identity
        self._seeds: dict[int, tuple[int, np.ndarray, bool, tuple[int, int]]] = {}

    def reset_memory(self) -> None:
        self._seeds.clear()

    def add_prompts(self, frame_index: int, prompts: Sequence[Prompt]) -> None:
        for obj, group in group_by_object(prompts).items():
            seed = seed_mask(self.video, frame_index, obj, group).array
            inst = self.video.instance(frame_index, obj)
            if inst is None:
                full, origin = False, (0, 0)
            else:
                full = bool(np.all(seed[inst.mask.array]))
                origin = inst.bbox[:2]
            self._seeds[obj] = (frame_index, seed, full, origin)

    def _base(self, obj: int, frame_index: int) -> np.ndarray:
        seeded_frame, seed, full, origin = self._seeds[obj]
        w, h = self.video.size
        if frame_index == seeded_frame:
            return seed
        inst = self.video.instance(frame_index, obj)
        if inst is None:
            return np.zeros((h, w), dtype=bool)
        if full:
            return inst.mask.array
        x0, y0 = inst.bbox[:2]
        return inst.mask.array & translate(seed, x0 - origin[0], y0 - origin[1])

    def propagate_to(self, frame_index: int) -> dict[int, BinaryMask]:
        out = {}
        for obj, (seeded_frame, *_rest) in sorted(self._seeds.items()):
            if frame_index < seeded_frame:
                continue
            out[obj] = BinaryMask(apply_drift(self._base(obj, frame_index), frame_index - seeded_frame, self.drift))
        return out

    def close(self) -> None:
        self._seeds.clear()


# --------------------------------------------------------------------------
# automatic mask generation stand-in


def _grid_points(points_per_side: int, width: int, height: int, x0: int = 0, y0: int = 0):
    for i in range(points_per_side):
        for j in range(points_per_side):
            yield (x0 + int((j + 0.5) * width / points_per_side), y0 + int((i + 0.5) * height / points_per_side))


class MockAutoMaskGenerator:
    """Candidate masks from quantised-intensity plateaus hit by a point grid.

    Mirrors the knobs of a real automatic mask generator: point density,
    predicted-quality and stability filtering, duplicate suppression, crop
    layers, hole filling as refinement, and a final minimum-area filter.
    """

    identity = "mock-automask"

    def __init__(self, levels: int = 8, background_fraction: float = 0.9):
        self.levels = levels
        self.background_fraction = background_fraction

    def _candidates(self, gray: np.ndarray, points_per_side: int, box) -> dict:
        x0, y0, x1, y1 = box
        step = 256 // self.levels
        q = (gray[y0:y1, x0:x1] // step).astype(np.int32)
        labels_by_level = {}
        found: dict[tuple, list] = {}
        for x, y in _grid_points(points_per_side, x1 - x0, y1 - y0):
            level = int(q[y, x])
            if level not in labels_by_level:
                labels_by_level[level] = label_components(q == level)[0]
            lab = int(labels_by_level[level][y, x])
            found.setdefault((level, lab), []).append((x + x0, y + y0))
        out = {}
        for (level, lab), pts in found.items():
            region = np.zeros(gray.shape, dtype=bool)
            region[y0:y1, x0:x1] = labels_by_level[level] == lab
            out[(box, level, lab)] = (region, pts)
        return out

    @staticmethod
    def _stability(gray: np.ndarray, region: np.ndarray, step: int, offset: float) -> float:
        """area / area of the region regrown under a tolerance loosened by ``offset`` (in quarter bins)."""
        tol = step + offset * step / 4.0
        loose = np.abs(gray.astype(np.float64) - gray[region].mean()) <= tol
        labels, _ = label_components(loose)
        grown = np.isin(labels, np.unique(labels[region & loose])) & (labels > 0)
        return float(region.sum()) / max(int((grown | region).sum()), 1)

    def generate(self, image: np.ndarray, config) -> list[tuple[BinaryMask, list[tuple[int, int]]]]:
        gray = np.asarray(image, dtype=np.float64)
        if gray.ndim == 3:
            gray = gray[..., :3].mean(axis=2)
        gray = np.clip(gray, 0, 255).astype(np.uint8)
        h, w = gray.shape
        boxes = [(0, 0, w, h)]
        for layer in range(1, config.crop_layers + 1):
            n = 2 ** layer
            xs = [round(k * w / n) for k in range(n + 1)]
            ys = [round(k * h / n) for k in range(n + 1)]
            boxes += [(xs[i], ys[j], xs[i + 1], ys[j + 1]) for j in range(n) for i in range(n)]

        scored = []
        step = 256 // self.levels
        for k, box in enumerate(boxes):
            pps = config.points_per_side if k == 0 else max(1, config.points_per_side // 2)
            for region, pts in self._candidates(gray, pps, box).values():
                area = int(region.sum())
                if area == 0 or area > self.background_fraction * w * h:
                    continue
                if config.mask_refinement:
                    region = ndimage.binary_fill_holes(region)
                    area = int(region.sum())
                quality = float(np.clip(1.0 - gray[region].std() / 64.0, 0.0, 1.0))
                stability = self._stability(gray, region, step, config.stability_score_offset)
                if quality < config.mask_quality_threshold or stability < config.stability_score_threshold:
                    continue
                scored.append((-quality, -area, int(np.flatnonzero(region.ravel())[0]), region, pts))
        scored.sort(key=lambda s: s[:3])

        kept = []
        for *_key, region, pts in scored:
            if all(mask_iou(region, other) <= config.nms_threshold for other, _ in kept):
                kept.append((region, pts))
        return [(BinaryMask(r), sorted(p)) for r, p in kept if r.sum() >= config.min_mask_region_area]
