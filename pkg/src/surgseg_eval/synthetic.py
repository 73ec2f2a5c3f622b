"""Synthetic annotated videos for desk-scale runs.

Objects are flat-intensity shapes on a dark background moving on smooth
periodic paths. One object is drawn as two separated blocks, the way an
instrument looks when partially occluded.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .dataset import AnnotatedVideo, FrameRef, InstanceAnnotation, VideoSequence
from .masks import BinaryMask

SYNTHETIC_SCHEME = "synthetic:"
BACKGROUND_LEVEL = 30
OBJECT_LEVELS = (200, 140, 90, 240, 170, 110)


def _shape(kind: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    def sz(v: int) -> int:
        return max(2, round(v * scale))

    if kind == 0:
        return np.ones((sz(int(rng.integers(14, 19))), sz(int(rng.integers(20, 27)))), dtype=bool)
    if kind == 1:
        h, w = sz(int(rng.integers(12, 16))), sz(int(rng.integers(9, 12)))
        gap = sz(4)
        shape = np.zeros((h, 2 * w + gap), dtype=bool)
        shape[:, :w] = True
        shape[:, w + gap:] = True
        return shape
    r = sz(int(rng.integers(8, 11)))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx ** 2 + yy ** 2 <= r * r


def _paste(shape: np.ndarray, x0: int, y0: int, width: int, height: int) -> np.ndarray:
    """Place ``shape`` with its top-left at (x0, y0), clipped to the frame."""
    arr = np.zeros((height, width), dtype=bool)
    sh, sw = shape.shape
    ys, xs = max(0, -y0), max(0, -x0)
    ye, xe = min(sh, height - y0), min(sw, width - x0)
    if ye > ys and xe > xs:
        arr[y0 + ys:y0 + ye, x0 + xs:x0 + xe] = shape[ys:ye, xs:xe]
    return arr


def _center(rng: np.random.Generator, extent: int, size: int) -> float:
    if size > 2 * extent:
        return float(rng.uniform(extent, size - extent))
    return float(rng.uniform(extent / 2, max(size - extent / 2, extent / 2)))


def make_synthetic_video(
    num_frames: int = 120,
    width: int = 160,
    height: int = 120,
    num_objects: int = 3,
    seed: int = 0,
    annotation_stride: int = 1,
    appear_at: dict[int, int] | None = None,
    video_id: str | None = None,
    image_dir: str | Path | None = None,
) -> AnnotatedVideo:
    """Build a video whose frames are annotated every ``annotation_stride`` frames.

    ``appear_at`` maps object index -> first frame the object exists. When
    ``image_dir`` is given, frames are written there as PNG files.
    """
    rng = np.random.default_rng(seed)
    scale = min(1.0, width / 160, height / 120)
    video_id = video_id or f"synthetic-{seed}"
    appear_at = appear_at or {}
    objects = []
    for k in range(num_objects):
        shape = _shape(k % 3, rng, scale)
        sh, sw = shape.shape
        cx = _center(rng, sw, width)
        cy = _center(rng, sh, height)
        amp_x = min(cx - sw / 2 - 1, width - cx - sw / 2 - 1, float(rng.uniform(8, 20)) * scale)
        amp_y = min(cy - sh / 2 - 1, height - cy - sh / 2 - 1, float(rng.uniform(4, 10)) * scale)
        period = float(rng.uniform(60, 140))
        phase = float(rng.uniform(0, 2 * math.pi))
        objects.append((shape, cx, cy, max(amp_x, 0.0), max(amp_y, 0.0), period, phase))

    frames = []
    annotations = {}
    if image_dir is not None:
        out_dir = Path(image_dir) / video_id
        out_dir.mkdir(parents=True, exist_ok=True)
    for t in range(num_frames):
        insts = []
        canvas = np.full((height, width), BACKGROUND_LEVEL, dtype=np.uint8)
        for k, (shape, cx, cy, ax, ay, period, phase) in enumerate(objects):
            if t < appear_at.get(k, 0):
                continue
            sh, sw = shape.shape
            x0 = round(cx + ax * math.sin(2 * math.pi * t / period + phase) - sw / 2)
            y0 = round(cy + ay * math.cos(2 * math.pi * t / period + phase) - sh / 2)
            arr = _paste(shape, x0, y0, width, height)
            canvas[arr] = OBJECT_LEVELS[k % len(OBJECT_LEVELS)]
            insts.append((k, arr))
        # later objects are drawn on top; annotate visible pixels only
        visible = []
        for k, arr in insts:
            occluders = [a for j, a in insts if j > k]
            vis = arr & ~np.any(occluders, axis=0) if occluders else arr
            if vis.any():
                visible.append(InstanceAnnotation(t, k, 1 + (k % 2), BinaryMask(vis)))
        if t % annotation_stride == 0 and visible:
            annotations[t] = tuple(visible)
        if image_dir is not None:
            from PIL import Image

            path = out_dir / f"frame_{t:05d}.png"
            Image.fromarray(canvas).save(path)
            locator = str(path)
        else:
            locator = f"{SYNTHETIC_SCHEME}{video_id}/{t}"
        frames.append(FrameRef(t, locator, width, height))
    classes = {1: "instrument", 2: "tissue"}
    return AnnotatedVideo(VideoSequence(video_id, tuple(frames), 1.0), annotations, classes)


def render_frame(video: AnnotatedVideo, frame_index: int) -> np.ndarray:
    """Grey image reconstructed from the ground truth of one frame."""
    w, h = video.size
    canvas = np.full((h, w), BACKGROUND_LEVEL, dtype=np.uint8)
    for inst in video.instances(frame_index):
        canvas[inst.mask.array] = OBJECT_LEVELS[inst.object_id % len(OBJECT_LEVELS)]
    return canvas


def frame_image(video: AnnotatedVideo, frame_index: int) -> np.ndarray:
    """Pixel data of a frame: read from disk, or rendered for synthetic locators."""
    frame = video.sequence.frame(frame_index)
    if frame.image_locator.startswith(SYNTHETIC_SCHEME):
        return render_frame(video, frame_index)
    from PIL import Image

    with Image.open(frame.image_locator) as img:
        return np.asarray(img.convert("RGB"))
