"""Finetuning ablations: which module groups train, on which frames, with which prompts.

Plans are pure data and need no deep-learning runtime. Freezing and training
go through a runtime object exposing the five named module groups; a small
convolutional stand-in (``TinySegmenterRuntime``) lets the whole loop run on
CPU, and ``Sam2TrainingRuntime`` adapts a SAM2 model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Protocol

import numpy as np

from .dataset import AnnotatedVideo, SplitSpec
from .masks import BinaryMask
from .prompts import (
    POSITIVE,
    BoxPrompt,
    MaskPrompt,
    PointPrompt,
    Prompt,
    PromptStrategy,
    group_by_object,
    named_strategy,
    prompts_for_object,
)

log = logging.getLogger(__name__)

MODULE_GROUPS = ("mask_decoder", "prompt_encoder", "image_encoder", "memory_encoder", "memory_attention")
NAMED_VARIANTS = {
    "MD": frozenset({"mask_decoder"}),
    "MD+PE": frozenset({"mask_decoder", "prompt_encoder"}),
    "MD+PE+IE": frozenset({"mask_decoder", "prompt_encoder", "image_encoder"}),
}
PROMPT_TYPES = {"point": "1Point-Random", "box": "Bbox", "mask": "Mask"}
REGIMES = ("image_dense", "image_sparse", "video_sparse")
LOSS_COMPOSITION = "bce_with_logits + soft_dice (weights 1:1)"


class FinetuneError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good_checkpoint: Path | None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


@dataclass(frozen=True)
class Regime:
    kind: str = "image_dense"
    stride: int = 4

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise FinetuneError(f"unknown regime {self.kind!r}")
        if self.kind != "image_dense" and self.stride < 2:
            raise FinetuneError("sparse regimes need stride >= 2")

    @property
    def label(self) -> str:
        return self.kind if self.kind == "image_dense" else f"{self.kind}({self.stride})"


@dataclass(frozen=True)
class FinetuneConfig:
    trainable: frozenset = NAMED_VARIANTS["MD"]
    regime: Regime = Regime()
    prompt_type: str = "mask"
    split: SplitSpec | None = None
    epochs: int = 10
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.trainable, str):
            object.__setattr__(self, "trainable", variant_groups(self.trainable))
        object.__setattr__(self, "trainable", frozenset(self.trainable))
        if not self.trainable:
            raise FinetuneError("at least one module group must be trainable")
        unknown = self.trainable - set(MODULE_GROUPS)
        if unknown:
            raise FinetuneError(f"unknown module groups {sorted(unknown)}")
        if self.prompt_type not in PROMPT_TYPES:
            raise FinetuneError(f"prompt_type must be one of {sorted(PROMPT_TYPES)}")
        if self.epochs < 1 or self.learning_rate <= 0:
            raise FinetuneError("epochs must be >= 1 and learning_rate > 0")

    @property
    def variant(self) -> str:
        for name, groups in NAMED_VARIANTS.items():
            if groups == self.trainable:
                return name
        return "+".join(sorted(self.trainable))

    def strategy(self) -> PromptStrategy:
        return named_strategy(PROMPT_TYPES[self.prompt_type], seed=self.seed)


def variant_groups(name: str) -> frozenset:
    try:
        return NAMED_VARIANTS[name]
    except KeyError as exc:
        raise FinetuneError(f"unknown variant {name!r}; expected one of {sorted(NAMED_VARIANTS)}") from exc


@dataclass(frozen=True)
class PlanEntry:
    video_id: str
    frame_index: int
    supervised: bool


@dataclass(frozen=True)
class TrainingPlan:
    entries: tuple[PlanEntry, ...]
    freeze_manifest: Mapping[str, bool]

    def supervised(self) -> list[PlanEntry]:
        return [e for e in self.entries if e.supervised]


def _sparse_frames(annotated: Sequence[int], stride: int) -> list[int]:
    anchor = annotated[0]
    return [f for f in annotated if (f - anchor) % stride == 0]


def build_plan(videos: Sequence[AnnotatedVideo], config: FinetuneConfig) -> TrainingPlan:
    """Frame schedule for the training split.

    Sparse strides are anchored at each video's first annotated frame. Videos
    whose schedule is empty are skipped with a warning.
    """
    if not videos:
        raise FinetuneError("training split is empty")
    entries: list[PlanEntry] = []
    for v in videos:
        annotated = v.annotated_frames()
        if not annotated:
            log.warning("video %s has no annotated frames; skipped", v.video_id)
            continue
        kind = config.regime.kind
        if kind == "image_dense":
            entries += [PlanEntry(v.video_id, f, True) for f in annotated]
        elif kind == "image_sparse":
            entries += [PlanEntry(v.video_id, f, True) for f in _sparse_frames(annotated, config.regime.stride)]
        else:
            sup = set(_sparse_frames(annotated, config.regime.stride))
            entries += [PlanEntry(v.video_id, f, f in sup) for f in v.sequence.frame_indices]
    manifest = {g: g in config.trainable for g in MODULE_GROUPS}
    return TrainingPlan(tuple(entries), manifest)


def check_isolation(plan: TrainingPlan, test_videos: Iterable[AnnotatedVideo]) -> None:
    """Raise when any test-split annotated frame is scheduled for training."""
    held_out = {(v.video_id, f) for v in test_videos for f in v.annotated_frames()}
    leaked = sorted((e.video_id, e.frame_index) for e in plan.entries if (e.video_id, e.frame_index) in held_out)
    if leaked:
        raise FinetuneError(f"{len(leaked)} test frames appear in the training plan, e.g. {leaked[:3]}")


# --------------------------------------------------------------------------
# runtime contract


class TrainableRuntime(Protocol):
    identity: str

    def module_groups(self) -> Mapping[str, object]: ...

    def reset_memory(self) -> None: ...

    def observe(self, video: AnnotatedVideo, frame_index: int) -> None: ...

    def forward_frame(self, video: AnnotatedVideo, frame_index: int, prompts: Sequence[Prompt]): ...

    def detach_memory(self) -> None: ...

    def save_checkpoint(self, path: str | Path) -> Path: ...


@dataclass
class FreezeReport:
    trainable: dict[str, bool]
    parameter_counts: dict[str, int]

    @property
    def trainable_groups(self) -> list[str]:
        return sorted(g for g, t in self.trainable.items() if t)


def apply_freeze(runtime, manifest: Mapping[str, bool]) -> FreezeReport:
    groups = runtime.module_groups()
    unknown = set(manifest) - set(MODULE_GROUPS)
    if unknown:
        raise FinetuneError(f"unknown module groups in manifest: {sorted(unknown)}")
    missing = set(MODULE_GROUPS) - set(groups)
    if missing:
        raise FinetuneError(f"runtime lacks module groups {sorted(missing)}")
    counts = {}
    for name in MODULE_GROUPS:
        flag = bool(manifest.get(name, False))
        n = 0
        for p in groups[name].parameters():
            p.requires_grad_(flag)
            n += p.numel()
        counts[name] = n
    return FreezeReport({g: bool(manifest.get(g, False)) for g in MODULE_GROUPS}, counts)


def group_digests(runtime) -> dict[str, str]:
    out = {}
    for name, module in runtime.module_groups().items():
        h = hashlib.sha256()
        for pname, p in sorted(module.state_dict().items()):
            h.update(pname.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        out[name] = h.hexdigest()
    return out


# --------------------------------------------------------------------------
# training loop


def _loss(logits, target):
    import torch
    import torch.nn.functional as F

    bce = F.binary_cross_entropy_with_logits(logits, target)
    prob = torch.sigmoid(logits)
    soft_dice = 1.0 - (2.0 * (prob * target).sum() + 1.0) / (prob.sum() + target.sum() + 1.0)
    return bce + soft_dice


def train(
    plan: TrainingPlan,
    config: FinetuneConfig,
    runtime,
    videos: Sequence[AnnotatedVideo],
    output_dir: str | Path,
    max_steps: int | None = None,
) -> tuple[Path, Path]:
    """Optimise the unfrozen groups with Adam; returns (checkpoint, log path).

    Loss terms exist only for supervised plan entries. Image regimes treat
    every frame independently; in the video regime every frame advances the
    runtime's memory and gradients reach the memory groups through it. A checkpoint is written
    before training and after every epoch; a non-finite loss aborts with the
    last one.
    """
    import torch

    if not plan.entries:
        raise FinetuneError("training plan is empty")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    by_id = {v.video_id: v for v in videos}
    report = apply_freeze(runtime, plan.freeze_manifest)
    params = [p for name in report.trainable_groups for p in runtime.module_groups()[name].parameters()]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    strategy = config.strategy()

    log_path = output_dir / "training_log.jsonl"
    ckpt = runtime.save_checkpoint(output_dir / "checkpoint_epoch000.pt")
    video_mode = config.regime.kind == "video_sparse"
    step = 0
    with log_path.open("w") as fh:
        def emit(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        emit({"type": "config", "loss": LOSS_COMPOSITION, "optimizer": "adam", "lr": config.learning_rate,
              "epochs": config.epochs, "trainable": report.trainable_groups, "regime": config.regime.label,
              "prompt_type": config.prompt_type, "parameter_counts": report.parameter_counts,
              "runtime": runtime.identity})
        for epoch in range(1, config.epochs + 1):
            losses = []
            current_video = None
            for entry in plan.entries:
                video = by_id[entry.video_id]
                if entry.video_id != current_video:
                    runtime.reset_memory()
                    current_video = entry.video_id
                if not entry.supervised:
                    runtime.observe(video, entry.frame_index)
                    continue
                insts = video.instances(entry.frame_index)
                if not insts:
                    continue
                if not video_mode:
                    runtime.reset_memory()
                optimizer.zero_grad()
                terms = []
                for inst in insts:
                    prompts = prompts_for_object(inst, insts, strategy)
                    logits = runtime.forward_frame(video, entry.frame_index, prompts)
                    target = torch.tensor(inst.mask.array, dtype=logits.dtype)
                    terms.append(_loss(logits, target))
                loss = torch.stack(terms).mean()
                value = float(loss.detach())
                if not math.isfinite(value):
                    emit({"type": "abort", "epoch": epoch, "step": step, "loss": value})
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", ckpt)
                loss.backward()
                optimizer.step()
                if video_mode:
                    runtime.observe(video, entry.frame_index)
                    runtime.detach_memory()
                step += 1
                losses.append(value)
                emit({"type": "step", "epoch": epoch, "step": step, "loss": value, "lr": config.learning_rate,
                      "video_id": entry.video_id, "frame_index": entry.frame_index, "supervised": True})
                if max_steps is not None and step >= max_steps:
                    break
            ckpt = runtime.save_checkpoint(output_dir / f"checkpoint_epoch{epoch:03d}.pt")
            emit({"type": "epoch", "epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else None,
                  "checkpoint": ckpt.name})
            if max_steps is not None and step >= max_steps:
                break
    return ckpt, log_path


# --------------------------------------------------------------------------
# runtimes


def prompt_map(prompts: Sequence[Prompt], width: int, height: int) -> np.ndarray:
    """Dense prompt encoding: +1 object evidence, -1 negative points."""
    out = np.zeros((height, width), dtype=np.float32)
    for p in prompts:
        if isinstance(p, MaskPrompt):
            out[p.mask.array] = 1.0
        elif isinstance(p, BoxPrompt):
            out[p.y0:p.y1 + 1, p.x0:p.x1 + 1] = np.maximum(out[p.y0:p.y1 + 1, p.x0:p.x1 + 1], 0.5)
        elif isinstance(p, PointPrompt):
            y0, y1 = max(p.y - 2, 0), min(p.y + 3, height)
            x0, x1 = max(p.x - 2, 0), min(p.x + 3, width)
            out[y0:y1, x0:x1] = 1.0 if p.label == POSITIVE else -1.0
    return out


def _tiny_module():
    import torch
    from torch import nn

    class TinySegmenter(nn.Module):
        def __init__(self, channels: int = 8):
            super().__init__()
            self.image_encoder = nn.Sequential(nn.Conv2d(1, channels, 3, padding=1), nn.ReLU())
            self.prompt_encoder = nn.Conv2d(1, channels, 3, padding=1)
            self.memory_encoder = nn.Conv2d(channels, channels, 1)
            self.memory_attention = nn.Conv2d(2 * channels, channels, 1)
            self.mask_decoder = nn.Conv2d(channels, 1, 3, padding=1)

        def forward(self, image, prompt, memory):
            feats = self.image_encoder(image)
            if memory is None:
                memory = torch.zeros_like(feats)
            feats = feats + self.memory_attention(torch.cat([feats, memory], dim=1))
            return self.mask_decoder(torch.relu(feats + self.prompt_encoder(prompt)))[0, 0]

    return TinySegmenter


class TinySegmenterRuntime:
    """CPU-sized five-group network used for smoke runs and desk-scale tests."""

    identity = "tiny-segmenter"

    def __init__(self, seed: int = 0, channels: int = 8, image_loader=None):
        import torch

        from .synthetic import frame_image

        torch.manual_seed(seed)
        self.model = _tiny_module()(channels)
        self.channels = channels
        self._memory = None
        self._load = image_loader or frame_image

    @classmethod
    def from_checkpoint(cls, path: str | Path, image_loader=None) -> TinySegmenterRuntime:
        import torch

        blob = torch.load(path, map_location="cpu", weights_only=True)
        rt = cls(channels=int(blob["channels"]), image_loader=image_loader)
        rt.model.load_state_dict(blob["model"])
        return rt

    def module_groups(self):
        return {name: getattr(self.model, name) for name in MODULE_GROUPS}

    def _image(self, video, frame_index):
        import torch

        img = np.asarray(self._load(video, frame_index), dtype=np.float32)
        if img.ndim == 3:
            img = img.mean(axis=2)
        return torch.from_numpy(img / 255.0)[None, None]

    def reset_memory(self) -> None:
        self._memory = None

    def detach_memory(self) -> None:
        if self._memory is not None:
            self._memory = self._memory.detach()

    def observe(self, video, frame_index) -> None:
        self._memory = self.model.memory_encoder(self.model.image_encoder(self._image(video, frame_index)))

    def forward_frame(self, video, frame_index, prompts):
        import torch

        w, h = video.size
        prompt = torch.from_numpy(prompt_map(prompts, w, h))[None, None]
        return self.model(self._image(video, frame_index), prompt, self._memory)

    def save_checkpoint(self, path) -> Path:
        import torch

        path = Path(path)
        torch.save({"model": self.model.state_dict(), "channels": self.channels}, path)
        return path


class RuntimeSession:
    """SegmenterSession over a trainable runtime: prompts from the seed frame are
    re-applied on every later frame, with memory advanced frame by frame."""

    accepted_kinds = frozenset({"point", "box", "mask"})

    def __init__(self, runtime, video: AnnotatedVideo):
        self.runtime = runtime
        self.video = video
        self.identity = f"finetuned:{runtime.identity}"
        self._prompts: dict[int, list[Prompt]] = {}
        self._seed_frame: int | None = None

    def reset_memory(self) -> None:
        self._prompts.clear()
        self._seed_frame = None
        self.runtime.reset_memory()

    def add_prompts(self, frame_index, prompts) -> None:
        self._seed_frame = frame_index if self._seed_frame is None else min(self._seed_frame, frame_index)
        for obj, group in group_by_object(prompts).items():
            self._prompts[obj] = list(group)

    def propagate_to(self, frame_index) -> dict[int, BinaryMask]:
        import torch

        if self._seed_frame is None or frame_index < self._seed_frame:
            return {}
        out = {}
        with torch.no_grad():
            for obj, group in sorted(self._prompts.items()):
                logits = self.runtime.forward_frame(self.video, frame_index, group)
                out[obj] = BinaryMask(logits.numpy() > 0)
            self.runtime.observe(self.video, frame_index)
        return out


class Sam2TrainingRuntime:
    """Module-group view and single-frame forward pass over a SAM2 model.

    Only the image regimes are supported here; the video regime needs the
    runtime's own multi-frame training loop.
    """

    ATTRIBUTES: ClassVar[dict[str, str]] = {
        "mask_decoder": "sam_mask_decoder",
        "prompt_encoder": "sam_prompt_encoder",
        "image_encoder": "image_encoder",
        "memory_encoder": "memory_encoder",
        "memory_attention": "memory_attention",
    }

    def __init__(self, model, image_loader=None, device: str = "cuda"):
        from .synthetic import frame_image

        self.model = model
        self.device = device
        self.identity = f"sam2-train:{type(model).__name__}"
        self._load = image_loader or frame_image

    @classmethod
    def from_bridge_config(cls, config) -> Sam2TrainingRuntime:
        from .bridge import _check_checkpoint, _import_runtime

        build_sam = _import_runtime()
        _check_checkpoint(config)
        model = build_sam.build_sam2(config.resolved_model_config(), config.checkpoint_locator, device=config.device)
        model.train()
        return cls(model, device=config.device)

    def module_groups(self):
        return {g: getattr(self.model, attr) for g, attr in self.ATTRIBUTES.items()}

    def reset_memory(self) -> None:
        pass

    def detach_memory(self) -> None:
        pass

    def observe(self, video, frame_index) -> None:
        raise FinetuneError("video_sparse training with SAM2 needs the runtime's multi-frame training loop")

    def forward_frame(self, video, frame_index, prompts):
        import torch
        import torch.nn.functional as F

        model = self.model
        size = model.image_size
        img = np.asarray(self._load(video, frame_index), dtype=np.float32) / 255.0
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        h, w = img.shape[:2]
        x = torch.from_numpy(img).permute(2, 0, 1)[None].to(self.device)
        x = F.interpolate(x, (size, size), mode="bilinear", align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406], device=self.device)[None, :, None, None]
        std = torch.tensor([0.229, 0.224, 0.225], device=self.device)[None, :, None, None]
        backbone = model.forward_image((x - mean) / std)
        _, feats, _, sizes = model._prepare_backbone_features(backbone)
        if model.directly_add_no_mem_embed:
            feats[-1] = feats[-1] + model.no_mem_embed
        maps = [f.permute(1, 2, 0).view(1, -1, *s) for f, s in zip(feats[::-1], sizes[::-1])][::-1]

        coords, labels, mask_input = [], [], None
        for p in prompts:
            if isinstance(p, PointPrompt):
                coords.append((p.x * size / w, p.y * size / h))
                labels.append(p.label)
            elif isinstance(p, BoxPrompt):
                coords += [(p.x0 * size / w, p.y0 * size / h), (p.x1 * size / w, p.y1 * size / h)]
                labels += [2, 3]
            elif isinstance(p, MaskPrompt):
                m = torch.as_tensor(p.mask.array, dtype=torch.float32, device=self.device)[None, None]
                low = size // 4
                mask_input = F.interpolate(m, (low, low), mode="bilinear", align_corners=False) * 20.0 - 10.0
        points = None
        if coords:
            points = (torch.tensor([coords], dtype=torch.float32, device=self.device),
                      torch.tensor([labels], dtype=torch.int32, device=self.device))
        sparse, dense = model.sam_prompt_encoder(points=points, boxes=None, masks=mask_input)
        low_res, _iou, _tok, _obj = model.sam_mask_decoder(
            image_embeddings=maps[-1],
            image_pe=model.sam_prompt_encoder.get_dense_pe(),
            sparse_prompt_embeddings=sparse,
            dense_prompt_embeddings=dense,
            multimask_output=False,
            repeat_image=False,
            high_res_features=maps[:-1],
        )
        return F.interpolate(low_res, (h, w), mode="bilinear", align_corners=False)[0, 0].cpu()

    def save_checkpoint(self, path) -> Path:
        import torch

        path = Path(path)
        torch.save({"model": self.model.state_dict()}, path)
        return path
