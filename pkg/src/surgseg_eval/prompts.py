"""Prompt synthesis from ground-truth annotations.

Five strategies are provided: one center point, one random point, three random
points, a bounding box, or the full mask. Point labels are 1 (positive) and 0
(negative); box corners carry labels 2 (top-left) and 3 (bottom-right).
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import AnnotatedVideo, DatasetError, InstanceAnnotation
from .masks import BinaryMask, connected_regions

NEGATIVE = 0
POSITIVE = 1
BOX_TOP_LEFT = 2
BOX_BOTTOM_RIGHT = 3

DEFAULT_FLUCTUATION = 3
DEFAULT_NEGATIVES = 1


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int
    label: int
    object_id: int
    frame_index: int

    kind = "point"


@dataclass(frozen=True)
class BoxPrompt:
    x0: int
    y0: int
    x1: int
    y1: int
    object_id: int
    frame_index: int

    kind = "box"

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise PromptError(f"box corners not strictly ordered: ({self.x0},{self.y0})-({self.x1},{self.y1})")

    @property
    def top_left(self) -> tuple[int, int, int]:
        return self.x0, self.y0, BOX_TOP_LEFT

    @property
    def bottom_right(self) -> tuple[int, int, int]:
        return self.x1, self.y1, BOX_BOTTOM_RIGHT

    def as_points(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return (self.x0, self.y0), (self.x1, self.y1)

    def labels(self) -> tuple[int, int]:
        return BOX_TOP_LEFT, BOX_BOTTOM_RIGHT


@dataclass(frozen=True)
class MaskPrompt:
    mask: BinaryMask
    object_id: int
    frame_index: int

    kind = "mask"


Prompt = PointPrompt | BoxPrompt | MaskPrompt


@dataclass(frozen=True)
class PointSamplingConfig:
    """``positives_per_region`` points per 4-connected region, ``negatives_per_region``
    donor points per region, uniform +-``fluctuation_radius`` jitter."""

    positives_per_region: int = 1
    negatives_per_region: int = DEFAULT_NEGATIVES
    fluctuation_radius: int = DEFAULT_FLUCTUATION
    seed: int = 0

    def __post_init__(self):
        if self.positives_per_region < 0 or self.negatives_per_region < 0 or self.fluctuation_radius < 0:
            raise PromptError("point sampling counts and radius must be >= 0")


STRATEGY_KINDS = ("center_point", "random_points", "box", "mask")


@dataclass(frozen=True)
class PromptStrategy:
    kind: str
    point_config: PointSamplingConfig = field(default_factory=PointSamplingConfig)
    center_mode: str = "mass_center"
    name: str = ""

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise PromptError(f"unknown strategy kind {self.kind!r}")
        if self.center_mode not in ("box_center", "mass_center"):
            raise PromptError(f"unknown center mode {self.center_mode!r}")
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    @property
    def prompt_kinds(self) -> frozenset[str]:
        return frozenset({"box": {"box"}, "mask": {"mask"}}.get(self.kind, {"point"}))

    def with_seed(self, seed: int) -> PromptStrategy:
        return replace(self, point_config=replace(self.point_config, seed=seed))


NAMED_STRATEGIES = ("1Point-Center", "1Point-Random", "3Points-Random", "Bbox", "Mask")


def named_strategy(name: str, *, negatives: int = DEFAULT_NEGATIVES, fluctuation: int = DEFAULT_FLUCTUATION,
                   seed: int = 0, positives: int | None = None) -> PromptStrategy:
    """Strategy by its table name; ``<k>Points-Random`` is accepted for any k."""
    cfg = PointSamplingConfig(1, negatives, fluctuation, seed)
    if name == "1Point-Center":
        return PromptStrategy("center_point", cfg, name=name)
    if name == "Bbox":
        return PromptStrategy("box", cfg, name=name)
    if name == "Mask":
        return PromptStrategy("mask", cfg, name=name)
    head, _, tail = name.partition("Point")
    if tail in ("-Random", "s-Random") and head.isdigit():
        n = positives if positives is not None else int(head)
        return PromptStrategy("random_points", replace(cfg, positives_per_region=n), name=name)
    raise PromptError(f"unknown strategy name {name!r}; expected one of {NAMED_STRATEGIES}")


# --------------------------------------------------------------------------
# random streams


def _streams(seed: int, frame_index: int, object_id: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (sampling, fluctuation, negative-selection) generators.

    Keyed by object so results do not depend on iteration order, and split so
    that the pre-jitter sample is the same for every fluctuation radius.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(frame_index), int(object_id) & 0xFFFFFFFF])
    return tuple(np.random.default_rng(s) for s in ss.spawn(3))


# --------------------------------------------------------------------------
# operations


def fluctuate_point(p: PointPrompt, beta: int, bounds: tuple[int, int], rng: np.random.Generator) -> PointPrompt:
    if beta <= 0:
        return p
    width, height = bounds
    dx, dy = rng.integers(-beta, beta + 1, size=2)
    x = min(max(p.x + int(dx), 0), width - 1)
    y = min(max(p.y + int(dy), 0), height - 1)
    return replace(p, x=x, y=y)


def _region_samples(annotation: InstanceAnnotation, n: int, rng: np.random.Generator) -> list[list[tuple[int, int]]]:
    out = []
    for region in connected_regions(annotation.mask.array):
        ys, xs = np.nonzero(region)
        if n == 0:
            out.append([])
            continue
        pick = rng.choice(len(xs), size=n, replace=len(xs) < n)
        out.append([(int(xs[i]), int(ys[i])) for i in pick])
    return out


def sample_positive_points(annotation: InstanceAnnotation, config: PointSamplingConfig) -> list[PointPrompt]:
    """N points per 4-connected region, sampled without replacement when the
    region is large enough, then jittered."""
    sample_rng, jitter_rng, _ = _streams(config.seed, annotation.frame_index, annotation.object_id)
    bounds = (annotation.mask.width, annotation.mask.height)
    points = []
    for region in _region_samples(annotation, config.positives_per_region, sample_rng):
        for x, y in region:
            p = PointPrompt(x, y, POSITIVE, annotation.object_id, annotation.frame_index)
            points.append(fluctuate_point(p, config.fluctuation_radius, bounds, jitter_rng))
    return points


def sample_negative_points(
    target: InstanceAnnotation, others: Iterable[InstanceAnnotation], config: PointSamplingConfig
) -> list[PointPrompt]:
    """Up to M negatives per target region, drawn from other objects' positive points."""
    if config.negatives_per_region == 0:
        return []
    pool = []
    for other in others:
        if other.object_id == target.object_id or other.frame_index != target.frame_index:
            continue
        for p in sample_positive_points(other, config):
            if not target.mask.array[p.y, p.x]:
                pool.append(p)
    if not pool:
        return []
    _, _, pick_rng = _streams(config.seed, target.frame_index, target.object_id)
    n_regions = len(connected_regions(target.mask.array))
    out = []
    for _ in range(n_regions):
        k = min(config.negatives_per_region, len(pool))
        for i in sorted(pick_rng.choice(len(pool), size=k, replace=False)):
            d = pool[int(i)]
            out.append(PointPrompt(d.x, d.y, NEGATIVE, target.object_id, target.frame_index))
    return out


def _snap_to_mask(x: int, y: int, mask: np.ndarray) -> tuple[int, int]:
    if mask[y, x]:
        return x, y
    ys, xs = np.nonzero(mask)
    d2 = (xs - x) ** 2 + (ys - y) ** 2
    i = int(np.argmin(d2))  # ties resolve to raster order
    return int(xs[i]), int(ys[i])


def center_point(annotation: InstanceAnnotation, mode: str = "mass_center") -> PointPrompt:
    mask = annotation.mask.array
    if mode == "box_center":
        x0, y0, x1, y1 = annotation.bbox
        x, y = (x0 + x1) // 2, (y0 + y1) // 2
    elif mode == "mass_center":
        ys, xs = np.nonzero(mask)
        x, y = int(np.floor(xs.mean() + 0.5)), int(np.floor(ys.mean() + 0.5))
    else:
        raise PromptError(f"unknown center mode {mode!r}")
    x, y = _snap_to_mask(x, y, mask)
    return PointPrompt(x, y, POSITIVE, annotation.object_id, annotation.frame_index)


def box_from_annotation(annotation: InstanceAnnotation) -> BoxPrompt:
    """Tight box; a zero-extent side is widened by one pixel inside the frame."""
    x0, y0, x1, y1 = annotation.bbox
    w, h = annotation.mask.width, annotation.mask.height
    if x0 == x1:
        if x1 + 1 < w:
            x1 += 1
        elif x0 > 0:
            x0 -= 1
        else:
            raise PromptError("cannot form a box in a 1-pixel-wide frame")
    if y0 == y1:
        if y1 + 1 < h:
            y1 += 1
        elif y0 > 0:
            y0 -= 1
        else:
            raise PromptError("cannot form a box in a 1-pixel-high frame")
    return BoxPrompt(x0, y0, x1, y1, annotation.object_id, annotation.frame_index)


def prompts_for_object(
    annotation: InstanceAnnotation, others: Sequence[InstanceAnnotation], strategy: PromptStrategy
) -> list[Prompt]:
    if strategy.kind == "mask":
        return [MaskPrompt(annotation.mask, annotation.object_id, annotation.frame_index)]
    if strategy.kind == "box":
        return [box_from_annotation(annotation)]
    if strategy.kind == "center_point":
        return [center_point(annotation, strategy.center_mode)]
    cfg = strategy.point_config
    return sample_positive_points(annotation, cfg) + sample_negative_points(annotation, others, cfg)


def build_prompt_set(video: AnnotatedVideo, frame_index: int, strategy: PromptStrategy) -> list[Prompt]:
    insts = video.instances(frame_index)
    if not insts:
        raise DatasetError(
            f"video {video.video_id} frame {frame_index} has no annotations; "
            "use first_valid_prompt_frame() to choose a prompt frame"
        )
    prompts: list[Prompt] = []
    for inst in sorted(insts, key=lambda a: a.object_id):
        prompts.extend(prompts_for_object(inst, insts, strategy))
    return prompts


def group_by_object(prompts: Iterable[Prompt]) -> dict[int, list[Prompt]]:
    groups: dict[int, list[Prompt]] = {}
    for p in prompts:
        groups.setdefault(p.object_id, []).append(p)
    return groups


# --------------------------------------------------------------------------
# line records


def prompt_to_record(video_id: str, prompt: Prompt) -> dict:
    if isinstance(prompt, PointPrompt):
        payload = {"x": prompt.x, "y": prompt.y, "label": prompt.label}
    elif isinstance(prompt, BoxPrompt):
        payload = {"x0": prompt.x0, "y0": prompt.y0, "x1": prompt.x1, "y1": prompt.y1,
                   "labels": [BOX_TOP_LEFT, BOX_BOTTOM_RIGHT]}
    else:
        payload = {"size": [prompt.mask.height, prompt.mask.width], "counts": prompt.mask.to_rle()}
    return {"video_id": video_id, "frame_index": prompt.frame_index, "object_id": prompt.object_id,
            "kind": prompt.kind, "payload": payload}


def prompt_from_record(rec: dict) -> Prompt:
    p, f, o = rec["payload"], int(rec["frame_index"]), int(rec["object_id"])
    kind = rec["kind"]
    if kind == "point":
        return PointPrompt(int(p["x"]), int(p["y"]), int(p["label"]), o, f)
    if kind == "box":
        return BoxPrompt(int(p["x0"]), int(p["y0"]), int(p["x1"]), int(p["y1"]), o, f)
    if kind == "mask":
        h, w = p["size"]
        return MaskPrompt(BinaryMask.from_rle(p["counts"], int(w), int(h)), o, f)
    raise PromptError(f"unknown prompt kind {kind!r}")


def write_prompt_log(path: str | Path, video_id: str, prompts: Iterable[Prompt]) -> None:
    with Path(path).open("a") as fh:
        fh.writelines(json.dumps(prompt_to_record(video_id, p), separators=(",", ":")) + "\n" for p in prompts)


def read_prompt_log(path: str | Path) -> list[tuple[str, Prompt]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append((rec["video_id"], prompt_from_record(rec)))
    return out
