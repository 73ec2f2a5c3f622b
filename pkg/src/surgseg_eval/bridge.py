"""Binding of the session contract to the SAM2 video predictor.

The runtime is imported lazily; everything else in the package works without
it. Frames are handed to the predictor at their original resolution unless a
fixed processing size is configured, in which case masks are resized back.
"""

from __future__ import annotations

import logging
import os
import tempfile
import threading
from collections.abc import Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FrameRef, VideoSequence
from .masks import BinaryMask
from .prompts import BoxPrompt, MaskPrompt, PointPrompt, Prompt, group_by_object

log = logging.getLogger(__name__)

CHECKPOINT_ENV = "SURGSEG_CHECKPOINT"
DEVICE_ENV = "SURGSEG_DEVICE"

MODEL_CONFIGS = {
    "sam2_hiera_tiny": "sam2_hiera_t.yaml",
    "sam2_hiera_small": "sam2_hiera_s.yaml",
    "sam2_hiera_base_plus": "sam2_hiera_b+.yaml",
    "sam2_hiera_large": "sam2_hiera_l.yaml",
    "sam2.1_hiera_tiny": "configs/sam2.1/sam2.1_hiera_t.yaml",
    "sam2.1_hiera_small": "configs/sam2.1/sam2.1_hiera_s.yaml",
    "sam2.1_hiera_base_plus": "configs/sam2.1/sam2.1_hiera_b+.yaml",
    "sam2.1_hiera_large": "configs/sam2.1/sam2.1_hiera_l.yaml",
}


class BridgeError(RuntimeError):
    pass


class StartupError(BridgeError):
    pass


class ResourceError(BridgeError):
    pass


class RuntimeUnavailable(StartupError):
    pass


@dataclass(frozen=True)
class BridgeConfig:
    checkpoint_locator: str
    model_variant: str = "sam2_hiera_large"
    device: str = "cuda"
    processing_resolution: str | tuple[int, int] = "original"
    model_config: str | None = None
    deterministic: bool = True
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, data: dict) -> BridgeConfig:
        data = dict(data)
        data["checkpoint_locator"] = os.environ.get(CHECKPOINT_ENV, data.get("checkpoint_locator", data.get("checkpoint", "")))
        data.pop("checkpoint", None)
        data["device"] = os.environ.get(DEVICE_ENV, data.get("device", "cuda"))
        res = data.get("processing_resolution", "original")
        if isinstance(res, (list, tuple)):
            data["processing_resolution"] = (int(res[0]), int(res[1]))
        known = {f for f in cls.__dataclass_fields__}
        extra = {k: v for k, v in data.items() if k not in known}
        return cls(**{k: v for k, v in data.items() if k in known}, extra=extra)

    def resolved_model_config(self) -> str:
        if self.model_config:
            return self.model_config
        try:
            return MODEL_CONFIGS[self.model_variant]
        except KeyError as exc:
            raise StartupError(f"unknown model variant {self.model_variant!r}") from exc

    def validate(self) -> list[str]:
        problems = []
        if not self.checkpoint_locator or not Path(self.checkpoint_locator).is_file():
            problems.append(f"checkpoint not found: {self.checkpoint_locator!r}")
        if self.model_config is None and self.model_variant not in MODEL_CONFIGS:
            problems.append(f"unknown model variant {self.model_variant!r}")
        res = self.processing_resolution
        if res != "original" and not (isinstance(res, tuple) and len(res) == 2 and min(res) > 0):
            problems.append(f"bad processing_resolution {res!r}")
        return problems


_device_locks: dict[str, threading.Lock] = {}
_device_locks_guard = threading.Lock()


@contextmanager
def device_slot(device: str):
    """Serialise runtime use per device."""
    with _device_locks_guard:
        lock = _device_locks.setdefault(device, threading.Lock())
    with lock:
        yield


def _import_runtime():
    try:
        import torch  # noqa: F401
        from sam2 import build_sam
    except ImportError as exc:
        raise RuntimeUnavailable("the 'sam2' package (and torch) must be installed to use the model bridge") from exc
    return build_sam


def _set_deterministic(seed: int = 0):
    import torch

    torch.manual_seed(seed)
    np.random.seed(seed)
    try:
        torch.use_deterministic_algorithms(True, warn_only=True)
    except Exception as exc:  # noqa: BLE001 - best effort
        log.debug("deterministic algorithms unavailable: %s", exc)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def _check_checkpoint(config: BridgeConfig):
    problems = config.validate()
    if problems:
        raise StartupError("; ".join(problems))
    name = Path(config.checkpoint_locator).stem
    if config.model_variant.split("_")[-1] not in name:
        log.warning("checkpoint %s does not name variant %s", config.checkpoint_locator, config.model_variant)


def _stage_frames(frames: Sequence[FrameRef], directory: Path, size: tuple[int, int] | None) -> None:
    """Write frames as ``<position>.jpg``, the layout the video predictor reads."""
    from PIL import Image

    for pos, frame in enumerate(frames):
        with Image.open(frame.image_locator) as img:
            img = img.convert("RGB")
            if size is not None:
                img = img.resize(size, Image.BILINEAR)
            img.save(directory / f"{pos:05d}.jpg", quality=95)


def _is_oom(exc: BaseException) -> bool:
    return "out of memory" in str(exc).lower()


class Sam2Session:
    """SegmenterSession over a SAM2 video predictor inference state."""

    accepted_kinds = frozenset({"point", "box", "mask"})

    def __init__(self, predictor, state, sequence: VideoSequence, config: BridgeConfig, workdir):
        self._predictor = predictor
        self._state = state
        self._sequence = sequence
        self._config = config
        self._workdir = workdir
        self._pos = {f.index: i for i, f in enumerate(sequence.frames)}
        self._gen = None
        self._start: int | None = None
        self._buffer: dict[int, dict[int, BinaryMask]] = {}
        self.identity = f"sam2:{config.model_variant}:{Path(config.checkpoint_locator).name}"
        self.multimask_output = "runtime default"

    def _to_frame_size(self, logits) -> BinaryMask:
        arr = (logits > 0.0).squeeze().cpu().numpy().astype(bool)
        w, h = self._sequence.size
        if arr.shape != (h, w):
            from PIL import Image

            arr = np.asarray(Image.fromarray(arr.astype(np.uint8) * 255).resize((w, h), Image.NEAREST)) > 127
        return BinaryMask(arr)

    def _scale(self, x: float, y: float) -> tuple[float, float]:
        res = self._config.processing_resolution
        if res == "original":
            return x, y
        w, h = self._sequence.size
        return x * res[0] / w, y * res[1] / h

    def reset_memory(self) -> None:
        self._predictor.reset_state(self._state)
        self._gen = None
        self._start = None
        self._buffer.clear()

    def add_prompts(self, frame_index: int, prompts: Sequence[Prompt]) -> None:
        pos = self._pos[frame_index]
        self._gen = None
        self._buffer.clear()
        self._start = frame_index if self._start is None else min(self._start, frame_index)
        for obj, group in group_by_object(prompts).items():
            masks = [p for p in group if isinstance(p, MaskPrompt)]
            if masks:
                arr = masks[0].mask.array
                for extra in masks[1:]:
                    arr = arr | extra.mask.array
                self._predictor.add_new_mask(inference_state=self._state, frame_idx=pos, obj_id=obj, mask=arr)
                continue
            coords, labels = [], []
            for p in group:
                if isinstance(p, BoxPrompt):
                    coords += [self._scale(p.x0, p.y0), self._scale(p.x1, p.y1)]
                    labels += [2, 3]
            for p in group:
                if isinstance(p, PointPrompt):
                    coords.append(self._scale(p.x, p.y))
                    labels.append(p.label)
            self._predictor.add_new_points_or_box(
                inference_state=self._state,
                frame_idx=pos,
                obj_id=obj,
                points=np.asarray(coords, dtype=np.float32),
                labels=np.asarray(labels, dtype=np.int32),
                normalize_coords=True,
            )

    def propagate_to(self, frame_index: int) -> dict[int, BinaryMask]:
        if self._start is None:
            return {}
        if frame_index in self._buffer:
            return self._buffer.pop(frame_index)
        target = self._pos[frame_index]
        if self._gen is None:
            self._gen = self._predictor.propagate_in_video(self._state, start_frame_idx=self._pos[self._start])
        try:
            for pos, obj_ids, logits in self._gen:
                f = self._sequence.frames[pos].index
                masks = {int(o): self._to_frame_size(logits[i]) for i, o in enumerate(obj_ids)}
                if pos == target:
                    return masks
                if pos > target:
                    self._buffer[f] = masks
                    break
        except RuntimeError as exc:
            if _is_oom(exc):
                raise ResourceError(f"out of memory while propagating to frame {frame_index}") from exc
            raise
        raise BridgeError(f"predictor did not produce frame {frame_index}")

    def close(self) -> None:
        if self._workdir is not None:
            self._workdir.cleanup()
            self._workdir = None


def open_session(video: VideoSequence, config: BridgeConfig) -> Sam2Session:
    build_sam = _import_runtime()
    _check_checkpoint(config)
    if config.deterministic:
        _set_deterministic(int(config.extra.get("seed", 0)))
    workdir = tempfile.TemporaryDirectory(prefix="surgseg-frames-")
    size = None if config.processing_resolution == "original" else tuple(config.processing_resolution)
    _stage_frames(video.frames, Path(workdir.name), size)
    try:
        predictor = build_sam.build_sam2_video_predictor(
            config.resolved_model_config(), config.checkpoint_locator, device=config.device
        )
        state = predictor.init_state(video_path=workdir.name)
    except FileNotFoundError as exc:
        workdir.cleanup()
        raise StartupError(str(exc)) from exc
    except RuntimeError as exc:
        workdir.cleanup()
        if _is_oom(exc):
            raise ResourceError(f"out of memory loading video {video.video_id}") from exc
        raise StartupError(f"could not start the runtime: {exc}") from exc
    return Sam2Session(predictor, state, video, config, workdir)


def auto_generate_masks(frame: FrameRef, config, bridge_config: BridgeConfig | None = None, generator=None):
    """Candidate masks and the points that generated them for one frame.

    ``generator`` may be any object with ``generate(image, config)`` (see
    ``MockAutoMaskGenerator``); otherwise the SAM2 automatic mask generator is
    built from ``bridge_config``.
    """
    from PIL import Image

    with Image.open(frame.image_locator) as img:
        image = np.asarray(img.convert("RGB"))
    if generator is not None:
        return generator.generate(image, config)
    if bridge_config is None:
        raise StartupError("bridge_config is required when no generator is given")
    build_sam = _import_runtime()
    _check_checkpoint(bridge_config)
    from sam2.automatic_mask_generator import SAM2AutomaticMaskGenerator

    model = build_sam.build_sam2(bridge_config.resolved_model_config(), bridge_config.checkpoint_locator,
                                 device=bridge_config.device)
    gen = SAM2AutomaticMaskGenerator(
        model,
        points_per_side=config.points_per_side,
        pred_iou_thresh=config.mask_quality_threshold,
        stability_score_thresh=config.stability_score_threshold,
        stability_score_offset=config.stability_score_offset,
        box_nms_thresh=config.nms_threshold,
        min_mask_region_area=config.min_mask_region_area,
        crop_n_layers=config.crop_layers,
        use_m2m=config.mask_refinement,
    )
    out = []
    for rec in gen.generate(image):
        pts = [(round(x), round(y)) for x, y in rec.get("point_coords", [])]
        out.append((BinaryMask(rec["segmentation"]), pts))
    return out


class MockGeneratorBridge:
    """Sweep backend running the deterministic mock generator on frame files."""

    def __init__(self, generator=None):
        from .mock import MockAutoMaskGenerator

        self.generator = generator or MockAutoMaskGenerator()
        self.identity = self.generator.identity

    def auto_generate_masks(self, frame: FrameRef, config):
        return auto_generate_masks(frame, config, generator=self.generator)


class Sam2GeneratorBridge:
    def __init__(self, config: BridgeConfig):
        self.config = config
        self.identity = f"sam2-automask:{config.model_variant}"

    def auto_generate_masks(self, frame: FrameRef, config):
        with device_slot(self.config.device):
            return auto_generate_masks(frame, config, bridge_config=self.config)
