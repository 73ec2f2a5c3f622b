"""Loading annotated surgical videos into one in-memory model.

Two annotation sources are supported: COCO-style JSON documents (RLE or
polygon segmentations) and per-pixel label images with a palette file.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import random
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .masks import (
    BinaryMask,
    MaskError,
    label_components,
    mask_iou,
    polygons_to_mask,
    rle_from_string,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
IDENTITY_MIN_IOU = 0.1
VIDEO_KEYS = ("video_id", "video", "video_name")
FRAME_KEYS = ("frame_index", "frame_id")
OBJECT_KEYS = ("object_id", "track_id", "instance_id")


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    pass


class IntegrityError(DatasetError):
    pass


class MappingError(DatasetError):
    pass


class UnusableVideoError(DatasetError):
    pass


@dataclass(frozen=True)
class FrameRef:
    index: int
    image_locator: str
    width: int
    height: int

    def __post_init__(self):
        if self.index < 0:
            raise DatasetError(f"frame index must be >= 0, got {self.index}")
        if self.width <= 0 or self.height <= 0:
            raise DatasetError(f"frame {self.index} has non-positive size {self.width}x{self.height}")


@dataclass(frozen=True)
class VideoSequence:
    video_id: str
    frames: tuple[FrameRef, ...]
    source_fps: float = 1.0
    sampled_fps: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.sampled_fps is None:
            object.__setattr__(self, "sampled_fps", self.source_fps)
        if self.sampled_fps > self.source_fps + 1e-9:
            raise DatasetError("sampled_fps cannot exceed source_fps")
        indices = [f.index for f in self.frames]
        if any(b <= a for a, b in itertools.pairwise(indices)):
            raise DatasetError(f"video {self.video_id}: frame indices must be strictly increasing")
        if len({(f.width, f.height) for f in self.frames}) > 1:
            raise DatasetError(f"video {self.video_id}: frames have differing sizes")

    @property
    def frame_indices(self) -> list[int]:
        return [f.index for f in self.frames]

    @property
    def size(self) -> tuple[int, int]:
        """(width, height) shared by all frames."""
        if not self.frames:
            raise DatasetError(f"video {self.video_id} has no frames")
        return self.frames[0].width, self.frames[0].height

    def frame(self, index: int) -> FrameRef:
        for f in self.frames:
            if f.index == index:
                return f
        raise KeyError(index)


@dataclass(frozen=True)
class InstanceAnnotation:
    frame_index: int
    object_id: int
    class_id: int
    mask: BinaryMask
    bbox: tuple[int, int, int, int] = field(default=None, compare=False)

    def __post_init__(self):
        box = self.mask.bbox()
        if box is None:
            raise DatasetError(
                f"annotation for object {self.object_id} on frame {self.frame_index} has an empty mask"
            )
        object.__setattr__(self, "bbox", box)


@dataclass(frozen=True)
class AnnotatedVideo:
    """A frame sequence with per-frame instance annotations.

    ``annotations`` maps frame index to the instances on that frame. Treat the
    value as immutable once constructed.
    """

    sequence: VideoSequence
    annotations: Mapping[int, tuple[InstanceAnnotation, ...]]
    class_names: Mapping[int, str]
    pseudo_ground_truth: bool = False
    subset: str | None = None

    def __post_init__(self):
        anns = {int(k): tuple(v) for k, v in sorted(self.annotations.items())}
        object.__setattr__(self, "annotations", anns)
        object.__setattr__(self, "class_names", dict(sorted(self.class_names.items())))
        known = set(self.sequence.frame_indices)
        owner: dict[int, int] = {}
        for f, insts in anns.items():
            if f not in known:
                raise IntegrityError(f"video {self.video_id}: annotations on unknown frame {f}")
            for inst in insts:
                if inst.frame_index != f:
                    raise IntegrityError(f"video {self.video_id}: instance filed under wrong frame {f}")
                prev = owner.setdefault(inst.object_id, inst.class_id)
                if prev != inst.class_id:
                    raise IntegrityError(
                        f"video {self.video_id}: object {inst.object_id} changes class {prev} -> {inst.class_id}"
                    )

    @property
    def video_id(self) -> str:
        return self.sequence.video_id

    @property
    def size(self) -> tuple[int, int]:
        return self.sequence.size

    def annotated_frames(self) -> list[int]:
        return [f for f, insts in self.annotations.items() if insts]

    def instances(self, frame_index: int) -> tuple[InstanceAnnotation, ...]:
        return self.annotations.get(frame_index, ())

    def instance(self, frame_index: int, object_id: int) -> InstanceAnnotation | None:
        for inst in self.instances(frame_index):
            if inst.object_id == object_id:
                return inst
        return None

    def object_classes(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for insts in self.annotations.values():
            for inst in insts:
                out[inst.object_id] = inst.class_id
        return dict(sorted(out.items()))

    def digest(self, frame_index: int) -> str:
        h = hashlib.sha256()
        for inst in sorted(self.instances(frame_index), key=lambda a: a.object_id):
            h.update(f"{inst.object_id}:{inst.class_id}:{inst.mask.digest()};".encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0
    unit: str = "video"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DatasetError("train_fraction must lie in (0, 1)")
        if self.unit not in ("video", "frame"):
            raise DatasetError(f"unknown split unit {self.unit!r}")


# --------------------------------------------------------------------------
# identity matching shared by the pixel-mask and track-less COCO paths


def match_identities(
    components: Sequence[tuple[int, np.ndarray]],
    previous: Iterable[InstanceAnnotation],
    next_object_id: int,
) -> tuple[list[int], int]:
    """Assign object ids to ``(class_id, mask)`` components.

    Components are matched to previous-frame instances of the same class by
    greedy maximal IoU; pairs below ``IDENTITY_MIN_IOU`` get fresh ids in
    component order.
    """
    previous = list(previous)
    pairs = []
    for ci, (cls, arr) in enumerate(components):
        for pi, prev in enumerate(previous):
            if prev.class_id != cls:
                continue
            score = mask_iou(arr, prev.mask.array)
            if score >= IDENTITY_MIN_IOU:
                pairs.append((-score, ci, pi))
    pairs.sort()
    ids: list[int | None] = [None] * len(components)
    used_prev = set()
    for _, ci, pi in pairs:
        if ids[ci] is None and pi not in used_prev:
            ids[ci] = previous[pi].object_id
            used_prev.add(pi)
    for ci in range(len(ids)):
        if ids[ci] is None:
            ids[ci] = next_object_id
            next_object_id += 1
    return ids, next_object_id


# --------------------------------------------------------------------------
# COCO


def _first_key(record: Mapping[str, Any], keys: Sequence[str]):
    for k in keys:
        if k in record:
            return record[k]
    return None


def _decode_segmentation(seg, width: int, height: int, where: str) -> np.ndarray:
    if isinstance(seg, Mapping):
        size = seg.get("size")
        counts = seg.get("counts")
        if size is None or counts is None:
            raise ParseError(f"{where}: RLE segmentation needs 'size' and 'counts'")
        h, w = int(size[0]), int(size[1])
        if (w, h) != (width, height):
            raise ParseError(f"{where}: RLE size {w}x{h} differs from image {width}x{height}")
        if isinstance(counts, str):
            counts = rle_from_string(counts)
        try:
            return BinaryMask.from_rle(counts, w, h).array
        except MaskError as exc:
            raise ParseError(f"{where}: {exc}") from exc
    if isinstance(seg, list):
        try:
            return polygons_to_mask(seg, width, height)
        except (MaskError, TypeError, ValueError) as exc:
            raise ParseError(f"{where}: bad polygon ({exc})") from exc
    raise ParseError(f"{where}: unsupported segmentation type {type(seg).__name__}")


def _read_document(document) -> dict:
    if isinstance(document, Mapping):
        return dict(document)
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        document = Path(document).read_text()
    try:
        return json.loads(document)
    except json.JSONDecodeError as exc:
        raise ParseError(f"annotation document is not valid JSON: {exc}") from exc


def load_coco_annotations(document, image_root: str | Path = "", default_video_id: str = "video") -> list[AnnotatedVideo]:
    """Load a COCO annotation document into one AnnotatedVideo per video.

    Images are grouped by an explicit ``video_id`` field. A document without
    any grouping field is loaded as a single video (with a warning).
    """
    doc = _read_document(document)
    for key in ("images", "annotations", "categories"):
        if key not in doc or not isinstance(doc[key], list):
            raise ParseError(f"document lacks a '{key}' list")

    class_names: dict[int, str] = {}
    for i, cat in enumerate(doc["categories"]):
        try:
            class_names[int(cat["id"])] = str(cat.get("name", cat["id"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"category record #{i}: {exc!r}") from exc

    fps_by_video: dict[str, tuple[float, float]] = {}
    pseudo_videos = set()
    for rec in doc.get("videos", []):
        vid = str(rec.get("id", rec.get("name")))
        src = float(rec.get("fps", rec.get("source_fps", 1.0)))
        fps_by_video[vid] = (src, float(rec.get("sampled_fps", src)))
        if rec.get("pseudo_ground_truth"):
            pseudo_videos.add(vid)

    grouped = any(_first_key(img, VIDEO_KEYS) is not None for img in doc["images"])
    if doc["images"] and not grouped:
        log.warning("no video grouping field in document; loading all images as video %r", default_video_id)

    images: dict[int, dict] = {}
    for i, img in enumerate(doc["images"]):
        try:
            iid = int(img["id"])
            width, height = int(img["width"]), int(img["height"])
            name = str(img["file_name"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"image record #{i} (id={img.get('id') if isinstance(img, Mapping) else '?'}): {exc!r}") from exc
        vid = _first_key(img, VIDEO_KEYS)
        if grouped and vid is None:
            raise ParseError(f"image id={iid} lacks a video grouping field while others have one")
        images[iid] = {
            "video": str(vid) if vid is not None else default_video_id,
            "frame": _first_key(img, FRAME_KEYS),
            "width": width,
            "height": height,
            "locator": str(Path(image_root) / name) if str(image_root) else name,
            "name": name,
        }

    by_video: dict[str, list[int]] = {}
    for iid, info in images.items():
        by_video.setdefault(info["video"], []).append(iid)

    frame_of: dict[int, int] = {}
    sequences: dict[str, VideoSequence] = {}
    for vid, iids in by_video.items():
        if all(images[i]["frame"] is not None for i in iids):
            iids.sort(key=lambda i: int(images[i]["frame"]))
            indices = [int(images[i]["frame"]) for i in iids]
        else:
            iids.sort(key=lambda i: (images[i]["name"], i))
            indices = list(range(len(iids)))
        frames = []
        for iid, idx in zip(iids, indices):
            info = images[iid]
            frame_of[iid] = idx
            frames.append(FrameRef(idx, info["locator"], info["width"], info["height"]))
        src, sampled = fps_by_video.get(vid, (1.0, 1.0))
        try:
            sequences[vid] = VideoSequence(vid, tuple(frames), src, sampled)
        except DatasetError as exc:
            raise ParseError(f"video {vid}: {exc}") from exc

    raw: dict[str, dict[int, list[dict]]] = {vid: {} for vid in by_video}
    for i, ann in enumerate(doc["annotations"]):
        where = f"annotation record #{i} (id={ann.get('id') if isinstance(ann, Mapping) else '?'})"
        try:
            iid = int(ann["image_id"])
            cls = int(ann["category_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{where}: {exc!r}") from exc
        if iid not in images:
            raise IntegrityError(f"{where} references unknown image id {iid}")
        if cls not in class_names:
            raise IntegrityError(f"{where} references unknown category id {cls}")
        info = images[iid]
        w, h = info["width"], info["height"]
        seg = ann.get("segmentation")
        if seg:
            arr = _decode_segmentation(seg, w, h, where)
        elif ann.get("bbox"):
            x, y, bw, bh = (float(v) for v in ann["bbox"])
            arr = BinaryMask.from_box(
                (math.floor(x), math.floor(y), math.ceil(x + bw) - 1, math.ceil(y + bh) - 1), w, h
            ).array
            log.warning("%s has no segmentation; rasterising its box", where)
        else:
            raise ParseError(f"{where}: neither segmentation nor bbox present")
        if not arr.any():
            log.warning("%s decodes to an empty mask; dropped", where)
            continue
        if ann.get("bbox") and seg:
            x, y, bw, bh = (float(v) for v in ann["bbox"])
            x0, y0, x1, y1 = BinaryMask(arr).bbox()
            if abs(x - x0) > 1 or abs(y - y0) > 1 or abs(x + bw - 1 - x1) > 1 or abs(y + bh - 1 - y1) > 1:
                log.info("%s: bbox inconsistent with mask; recomputed from mask", where)
        obj = _first_key(ann, OBJECT_KEYS)
        raw[info["video"]].setdefault(frame_of[iid], []).append(
            {"class": cls, "mask": arr, "object": None if obj is None else int(obj), "id": ann.get("id", i)}
        )

    videos = []
    for vid in sorted(sequences):
        annotations: dict[int, tuple[InstanceAnnotation, ...]] = {}
        previous: list[InstanceAnnotation] = []
        tracked = [r["object"] is not None for recs in raw[vid].values() for r in recs]
        if any(tracked) and not all(tracked):
            raise ParseError(f"video {vid}: object id present on some annotations but not others")
        next_id = 0
        for f in sorted(raw[vid]):
            recs = raw[vid][f]
            if tracked and tracked[0]:
                ids = [r["object"] for r in recs]
            else:
                ids, next_id = match_identities([(r["class"], r["mask"]) for r in recs], previous, next_id)
            insts = tuple(
                sorted(
                    (InstanceAnnotation(f, oid, r["class"], BinaryMask(r["mask"])) for oid, r in zip(ids, recs)),
                    key=lambda a: a.object_id,
                )
            )
            if len({a.object_id for a in insts}) != len(insts):
                raise IntegrityError(f"video {vid} frame {f}: duplicate object ids")
            annotations[f] = insts
            previous = list(insts)
        try:
            videos.append(AnnotatedVideo(sequences[vid], annotations, class_names,
                                         pseudo_ground_truth=vid in pseudo_videos))
        except IntegrityError as exc:
            raise IntegrityError(f"video {vid}: {exc}") from exc
    return videos


def dump_coco(videos: Sequence[AnnotatedVideo]) -> dict:
    """Serialise videos to a COCO document that ``load_coco_annotations`` reads back."""
    images, annotations, vids = [], [], []
    categories: dict[int, str] = {}
    image_id = 0
    ann_id = 0
    for video in videos:
        categories.update(video.class_names)
        rec = {"id": video.video_id, "fps": video.sequence.source_fps, "sampled_fps": video.sequence.sampled_fps}
        if video.pseudo_ground_truth:
            rec["pseudo_ground_truth"] = True
        vids.append(rec)
        for frame in video.sequence.frames:
            image_id += 1
            images.append(
                {
                    "id": image_id,
                    "file_name": frame.image_locator,
                    "width": frame.width,
                    "height": frame.height,
                    "video_id": video.video_id,
                    "frame_index": frame.index,
                }
            )
            for inst in video.instances(frame.index):
                ann_id += 1
                x0, y0, x1, y1 = inst.bbox
                annotations.append(
                    {
                        "id": ann_id,
                        "image_id": image_id,
                        "category_id": inst.class_id,
                        "object_id": inst.object_id,
                        "segmentation": {"size": [frame.height, frame.width], "counts": inst.mask.to_rle()},
                        "bbox": [x0, y0, x1 - x0 + 1, y1 - y0 + 1],
                        "area": inst.mask.area,
                        "iscrowd": 0,
                    }
                )
    return {
        "videos": vids,
        "images": images,
        "annotations": annotations,
        "categories": [{"id": k, "name": v} for k, v in sorted(categories.items())],
    }


# --------------------------------------------------------------------------
# pixel-level label images


@dataclass(frozen=True)
class Palette:
    """Pixel value -> class id; ``background`` values carry no instances."""

    classes: Mapping[Any, int]
    background: frozenset = frozenset({0})
    class_names: Mapping[int, str] = field(default_factory=dict)


def _parse_palette_value(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) == 1:
        return int(parts[0])
    return tuple(int(p) for p in parts)


def load_palette(path: str | Path) -> Palette:
    """Read ``value = class_id [name]`` / ``value = background`` lines.

    ``value`` is a grey level (``12``) or an RGB triple (``255,0,0``).
    """
    classes: dict[Any, int] = {}
    names: dict[int, str] = {}
    background = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected 'value = class_id [name]'")
        key, rhs = (s.strip() for s in line.split("=", 1))
        try:
            value = _parse_palette_value(key)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad pixel value {key!r}") from exc
        tokens = rhs.split(None, 1)
        if not tokens:
            raise ParseError(f"{path}:{lineno}: missing class id")
        if tokens[0].lower() == "background":
            background.add(value)
            continue
        try:
            cls = int(tokens[0])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad class id {tokens[0]!r}") from exc
        classes[value] = cls
        if len(tokens) > 1:
            names[cls] = tokens[1].strip()
    return Palette(classes, frozenset(background), names)


def _pixel_keys(label_image: np.ndarray) -> np.ndarray:
    arr = np.asarray(label_image)
    if arr.ndim == 3:
        arr = arr[..., :3].astype(np.int64)
        return (arr[..., 0] << 16) | (arr[..., 1] << 8) | arr[..., 2]
    if arr.ndim != 2:
        raise MappingError(f"label image must be 2-D or RGB, got shape {arr.shape}")
    return arr.astype(np.int64)


def _key_of(value) -> int:
    if isinstance(value, tuple):
        r, g, b = value[:3]
        return (int(r) << 16) | (int(g) << 8) | int(b)
    return int(value)


def pixel_masks_to_instances(
    label_image: np.ndarray,
    palette: Palette | Mapping[Any, int],
    *,
    frame_index: int = 0,
    previous: Iterable[InstanceAnnotation] = (),
    background: Iterable = (0,),
    next_object_id: int | None = None,
) -> list[InstanceAnnotation]:
    """Split a per-pixel class map into one instance per 4-connected component.

    Components are ordered by the raster position of their first pixel. Ids
    continue from ``previous`` via class-constrained overlap matching.
    """
    if not isinstance(palette, Palette):
        palette = Palette(dict(palette), frozenset(background))
    keys = _pixel_keys(label_image)
    class_of = {_key_of(v): c for v, c in palette.classes.items()}
    bg = {_key_of(v) for v in palette.background}
    present = set(np.unique(keys).tolist())
    unknown = sorted(present - set(class_of) - bg)
    if unknown:
        raise MappingError(f"pixel values not in palette: {unknown}")

    comps = []
    for key in sorted(present - bg):
        labels, n = label_components(keys == key)
        for i in range(1, n + 1):
            region = labels == i
            flat_first = int(np.flatnonzero(region.ravel())[0])
            comps.append((flat_first, class_of[key], region))
    comps.sort(key=lambda c: c[0])

    previous = list(previous)
    if next_object_id is None:
        next_object_id = max((p.object_id for p in previous), default=-1) + 1
    ids, _ = match_identities([(c[1], c[2]) for c in comps], previous, next_object_id)
    return [
        InstanceAnnotation(frame_index, oid, cls, BinaryMask(region))
        for oid, (_, cls, region) in zip(ids, comps)
    ]


def read_label_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        if img.mode in ("RGB", "RGBA", "P"):
            return np.asarray(img.convert("RGB"))
        return np.asarray(img)


def load_pixel_mask_video(
    video_id: str,
    image_paths: Sequence[str | Path],
    label_paths: Sequence[str | Path | None],
    palette: Palette,
    source_fps: float = 1.0,
) -> AnnotatedVideo:
    """Build an AnnotatedVideo from ordered frames and optional label images.

    ``label_paths[i]`` may be None for unannotated frames.
    """
    if len(image_paths) != len(label_paths):
        raise DatasetError("image and label lists differ in length")
    frames = []
    annotations: dict[int, tuple[InstanceAnnotation, ...]] = {}
    previous: list[InstanceAnnotation] = []
    next_id = 0
    for idx, (img, lab) in enumerate(zip(image_paths, label_paths)):
        if lab is None:
            from PIL import Image

            with Image.open(img) as im:
                w, h = im.size
        else:
            labels = read_label_image(lab)
            h, w = labels.shape[:2]
            insts = pixel_masks_to_instances(
                labels, palette, frame_index=idx, previous=previous, next_object_id=next_id
            )
            if insts:
                annotations[idx] = tuple(sorted(insts, key=lambda a: a.object_id))
                previous = insts
                next_id = max(next_id, max(a.object_id for a in insts) + 1)
        frames.append(FrameRef(idx, str(img), w, h))
    classes = {c: palette.class_names.get(c, str(c)) for c in sorted(set(palette.classes.values()))}
    return AnnotatedVideo(VideoSequence(video_id, tuple(frames), source_fps), annotations, classes)


def load_pixel_mask_dataset(root: str | Path, palette: Palette, source_fps: float = 1.0) -> list[AnnotatedVideo]:
    """Directory layout: ``root/<video_id>/images/*`` and ``root/<video_id>/masks/*``.

    Masks are matched to images by file stem.
    """
    root = Path(root)
    videos = []
    for vdir in sorted(p for p in root.iterdir() if p.is_dir()):
        imgs = sorted(p for p in (vdir / "images").iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        masks = {p.stem: p for p in (vdir / "masks").iterdir()} if (vdir / "masks").is_dir() else {}
        videos.append(load_pixel_mask_video(vdir.name, imgs, [masks.get(p.stem) for p in imgs], palette, source_fps))
    return videos


# --------------------------------------------------------------------------
# sampling, prompt frame, splitting


def sample_stride(source_fps: float, target_fps: float) -> int:
    if target_fps <= 0:
        raise DatasetError("target_fps must be positive")
    if target_fps > source_fps + 1e-9:
        raise DatasetError(f"cannot upsample from {source_fps} fps to {target_fps} fps")
    return max(1, math.ceil(source_fps / target_fps - 1e-9))


def sample_frames(sequence: VideoSequence, target_fps: float) -> VideoSequence:
    """Keep every ceil(source/target)-th frame from the first and reindex from 0."""
    stride = sample_stride(sequence.source_fps, target_fps)
    if stride == 1 and abs(target_fps - sequence.source_fps) < 1e-9:
        return sequence
    kept = sequence.frames[::stride]
    frames = tuple(replace(f, index=i) for i, f in enumerate(kept))
    return VideoSequence(sequence.video_id, frames, sequence.source_fps, target_fps)


def sample_video(video: AnnotatedVideo, target_fps: float) -> AnnotatedVideo:
    """``sample_frames`` applied to an annotated video; annotations follow their frames."""
    stride = sample_stride(video.sequence.source_fps, target_fps)
    sampled = sample_frames(video.sequence, target_fps)
    if sampled is video.sequence:
        return video
    kept = video.sequence.frames[::stride]
    annotations = {}
    for new, old in enumerate(kept):
        insts = video.instances(old.index)
        if insts:
            annotations[new] = tuple(replace(a, frame_index=new) for a in insts)
    return replace(video, sequence=sampled, annotations=annotations)


def first_valid_prompt_frame(video: AnnotatedVideo) -> int:
    frames = video.annotated_frames()
    if not frames:
        raise UnusableVideoError(f"video {video.video_id} has no annotated frame to prompt from")
    return min(frames)


def split_train_test(
    videos: Sequence[AnnotatedVideo], spec: SplitSpec
) -> tuple[list[AnnotatedVideo], list[AnnotatedVideo]]:
    """Seeded train/test partition by whole video or by annotated frame.

    Frame-level splits return per-video copies whose annotations are restricted
    to the frames of each side.
    """
    if spec.unit == "video":
        units = [v.video_id for v in videos]
    else:
        units = [(v.video_id, f) for v in videos for f in v.annotated_frames()]
    n = len(units)
    if n < 2:
        raise DatasetError(f"need at least 2 {spec.unit} units to split, got {n}")
    n_train = min(max(math.floor(n * spec.train_fraction + 0.5), 1), n - 1)
    order = sorted(units)
    random.Random(spec.seed).shuffle(order)
    train_units = set(order[:n_train])

    if spec.unit == "video":
        train = [v for v in videos if v.video_id in train_units]
        test = [v for v in videos if v.video_id not in train_units]
        return train, test

    train, test = [], []
    for v in videos:
        tr = {f: a for f, a in v.annotations.items() if (v.video_id, f) in train_units}
        te = {f: a for f, a in v.annotations.items() if a and (v.video_id, f) not in train_units}
        if tr:
            train.append(replace(v, annotations=tr))
        if te:
            test.append(replace(v, annotations=te))
    return train, test


def manifest_records(videos: Iterable[AnnotatedVideo]) -> list[dict]:
    return [
        {
            "video_id": v.video_id,
            "frame_index": f.index,
            "image_locator": f.image_locator,
            "annotation_digest": v.digest(f.index),
        }
        for v in videos
        for f in v.sequence.frames
    ]


def write_manifest(videos: Iterable[AnnotatedVideo], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in manifest_records(videos):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
