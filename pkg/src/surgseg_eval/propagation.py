"""Driving a promptable video segmenter through a sequence.

A session is seeded on the first annotated frame, propagated frame by frame,
and optionally re-seeded from ground truth on a fixed interval and/or when an
untracked object appears. Re-seeding clears the session memory and discards
all earlier prompts.
"""

from __future__ import annotations

import bisect
import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

from .dataset import AnnotatedVideo, InstanceAnnotation, first_valid_prompt_frame
from .masks import BinaryMask
from .prompts import POSITIVE, PointPrompt, Prompt, PromptStrategy, build_prompt_set

log = logging.getLogger(__name__)

INTERVAL = "interval"
NEW_OBJECT = "new_object"


class CapabilityError(RuntimeError):
    pass


class ScheduleError(ValueError):
    pass


@runtime_checkable
class SegmenterSession(Protocol):
    """A video-bound segmenter with per-object memory.

    After ``add_prompts`` on frame t, ``propagate_to(f)`` returns a mask for
    each prompted object on every frame f >= t (requested in increasing
    order) until ``reset_memory``. Resetting discards prompts and memory but
    keeps the video binding.
    """

    identity: str
    accepted_kinds: frozenset

    def add_prompts(self, frame_index: int, prompts: Sequence[Prompt]) -> None: ...

    def propagate_to(self, frame_index: int) -> dict[int, BinaryMask]: ...

    def reset_memory(self) -> None: ...


@dataclass(frozen=True)
class ReinitPolicy:
    interval: int | None = None
    new_object_trigger: bool = False

    def __post_init__(self):
        if self.interval is not None and self.interval <= 0:
            raise ScheduleError("reinit interval must be positive")

    @property
    def label(self) -> str:
        parts = []
        if self.interval:
            parts.append(f"Reinit {self.interval}")
        if self.new_object_trigger:
            parts.append("NewObj")
        return "+".join(parts) if parts else "none"


@dataclass(frozen=True)
class ReinitEvent:
    frame_index: int
    cause: str
    objects_seeded: tuple[int, ...]


@dataclass
class SegmentationResult:
    """Per-frame object masks plus provenance; treat as read-only once returned."""

    video_id: str
    width: int
    height: int
    masks: dict[int, dict[int, BinaryMask]]
    events: list[ReinitEvent] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    failed_at: int | None = None
    error: str | None = None

    @property
    def complete(self) -> bool:
        return self.failed_at is None

    def frames(self) -> list[int]:
        return sorted(self.masks)


# --------------------------------------------------------------------------
# triggers


def schedule_interval_reinits(annotated_frames: Sequence[int], interval: int, anchor: int | None = None) -> list[int]:
    """Frames anchor + kT (k >= 1), each replaced by the nearest annotated frame
    at or after it. ``anchor`` defaults to the first annotated frame."""
    if interval <= 0:
        raise ScheduleError("interval must be positive")
    frames = sorted(set(annotated_frames))
    if not frames:
        raise ScheduleError("no annotated frames to schedule against")
    if anchor is None:
        anchor = frames[0]
    out: list[int] = []
    target = anchor + interval
    last = frames[-1]
    while target <= last:
        i = bisect.bisect_left(frames, target)
        chosen = frames[i]
        if not out or chosen > out[-1]:
            out.append(chosen)
        target += interval
    return out


def detect_new_objects(gt_frame: Iterable[InstanceAnnotation], tracked: Iterable[int]) -> set[int]:
    tracked = set(tracked)
    return {a.object_id for a in gt_frame} - tracked


def reinitialize(
    session: SegmenterSession,
    video: AnnotatedVideo,
    frame_index: int,
    strategy: PromptStrategy,
    cause: str = INTERVAL,
) -> ReinitEvent:
    """Clear session memory and reseed from the ground truth of ``frame_index``."""
    missing = strategy.prompt_kinds - set(session.accepted_kinds)
    if missing:
        raise CapabilityError(f"session {session.identity} does not accept {sorted(missing)} prompts")
    prompts = build_prompt_set(video, frame_index, strategy)
    session.reset_memory()
    session.add_prompts(frame_index, prompts)
    seeded = tuple(sorted({p.object_id for p in prompts}))
    return ReinitEvent(frame_index, cause, seeded)


def mask_exit_rate(video: AnnotatedVideo, prompts: Iterable[Prompt]) -> tuple[int, int]:
    """(positive points outside their object's mask, positive points)."""
    outside = total = 0
    for p in prompts:
        if isinstance(p, PointPrompt) and p.label == POSITIVE:
            total += 1
            inst = video.instance(p.frame_index, p.object_id)
            if inst is None or not inst.mask.array[p.y, p.x]:
                outside += 1
    return outside, total


# --------------------------------------------------------------------------
# driver


class _CountingSession:
    """Wraps a session to count prompt submissions and exited points."""

    def __init__(self, inner: SegmenterSession, video: AnnotatedVideo):
        self.inner = inner
        self.video = video
        self.identity = inner.identity
        self.accepted_kinds = inner.accepted_kinds
        self.prompt_calls = 0
        self.points_outside = 0
        self.points_total = 0

    def add_prompts(self, frame_index, prompts):
        self.prompt_calls += 1
        out, tot = mask_exit_rate(self.video, prompts)
        self.points_outside += out
        self.points_total += tot
        self.inner.add_prompts(frame_index, prompts)

    def propagate_to(self, frame_index):
        return self.inner.propagate_to(frame_index)

    def reset_memory(self):
        self.inner.reset_memory()


def run_sequence(
    video: AnnotatedVideo,
    strategy: PromptStrategy,
    policy: ReinitPolicy,
    session: SegmenterSession,
) -> SegmentationResult:
    """Seed at the first annotated frame and propagate through the video.

    Interval and new-object checks happen on every annotated frame after the
    seed frame. A propagation failure ends the run; the partial result keeps
    every completed frame and records where it stopped.
    """
    width, height = video.size
    start = first_valid_prompt_frame(video)
    annotated = video.annotated_frames()
    scheduled = set(schedule_interval_reinits(annotated, policy.interval, start)) if policy.interval else set()
    annotated_set = set(annotated)
    all_objects = list(video.object_classes())
    empty = BinaryMask.empty(width, height)

    counting = _CountingSession(session, video)
    result = SegmentationResult(video.video_id, width, height, {})
    current = None
    try:
        first = reinitialize(counting, video, start, strategy)
        tracked = set(first.objects_seeded)
        for f in video.sequence.frame_indices:
            current = f
            if f < start:
                result.masks[f] = {o: empty for o in all_objects}
                continue
            if f > start and f in annotated_set:
                cause = None
                if f in scheduled:
                    cause = INTERVAL
                elif policy.new_object_trigger and detect_new_objects(video.instances(f), tracked):
                    cause = NEW_OBJECT
                if cause is not None:
                    event = reinitialize(counting, video, f, strategy, cause)
                    result.events.append(event)
                    tracked = set(event.objects_seeded)
            predicted = counting.propagate_to(f)
            result.masks[f] = {o: predicted.get(o, empty) if o in tracked else empty for o in all_objects}
    except Exception as exc:  # noqa: BLE001 - partial results are kept on purpose
        log.warning("video %s: propagation failed at frame %s: %s", video.video_id, current, exc)
        result.failed_at = current if current is not None else start
        result.error = f"{type(exc).__name__}: {exc}"
        result.masks.pop(result.failed_at, None)

    result.provenance = {
        "video_id": video.video_id,
        "strategy": strategy.name,
        "strategy_kind": strategy.kind,
        "point_config": {
            "positives_per_region": strategy.point_config.positives_per_region,
            "negatives_per_region": strategy.point_config.negatives_per_region,
            "fluctuation_radius": strategy.point_config.fluctuation_radius,
        },
        "seed": strategy.point_config.seed,
        "policy": policy.label,
        "segmenter": session.identity,
        "prompt_frame": start,
        "prompt_submissions": counting.prompt_calls,
        "positive_points": counting.points_total,
        "positive_points_outside_mask": counting.points_outside,
        "pseudo_ground_truth": video.pseudo_ground_truth,
        "events": [{"frame_index": e.frame_index, "cause": e.cause, "objects_seeded": list(e.objects_seeded)}
                   for e in result.events],
    }
    return result


# --------------------------------------------------------------------------
# persistence


def run_log_records(result: SegmentationResult) -> list[dict]:
    recs = []
    events = {e.frame_index: e for e in result.events}
    for f in result.frames():
        if f in events:
            e = events[f]
            recs.append({"type": "reinit", "frame_index": f, "cause": e.cause, "objects_seeded": list(e.objects_seeded)})
        recs.append({
            "type": "frame",
            "frame_index": f,
            "object_ids": sorted(result.masks[f]),
            "digests": {str(o): m.digest() for o, m in sorted(result.masks[f].items())},
        })
    if result.failed_at is not None:
        recs.append({"type": "failure", "frame_index": result.failed_at, "error": result.error})
    return recs


def save_result(result: SegmentationResult, directory: str | Path) -> Path:
    """Per-frame RLE files under ``masks/``, a run log and a provenance manifest."""
    directory = Path(directory)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    for f in result.frames():
        payload = {str(o): m.to_rle() for o, m in sorted(result.masks[f].items())}
        (directory / "masks" / f"frame_{f:06d}.json").write_text(json.dumps(payload, separators=(",", ":")))
    with (directory / "run_log.jsonl").open("w") as fh:
        for rec in run_log_records(result):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "video_id": result.video_id,
        "width": result.width,
        "height": result.height,
        "failed_at": result.failed_at,
        "error": result.error,
        "provenance": result.provenance,
    }
    (directory / "provenance.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_result(directory: str | Path) -> SegmentationResult:
    directory = Path(directory)
    manifest = json.loads((directory / "provenance.json").read_text())
    w, h = manifest["width"], manifest["height"]
    masks = {}
    for path in sorted((directory / "masks").glob("frame_*.json")):
        f = int(path.stem.split("_")[1])
        masks[f] = {int(o): BinaryMask.from_rle(c, w, h) for o, c in json.loads(path.read_text()).items()}
    events = [ReinitEvent(e["frame_index"], e["cause"], tuple(e["objects_seeded"]))
              for e in manifest["provenance"].get("events", [])]
    return SegmentationResult(manifest["video_id"], w, h, masks, events, manifest["provenance"],
                              manifest["failed_at"], manifest["error"])
