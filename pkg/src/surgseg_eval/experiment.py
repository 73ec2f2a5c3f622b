"""Experiment matrix: config parsing, expansion, execution and reporting.

A config declares datasets, prompt strategies, reinit policies and
segmenters; every combination (per seed) is one cell. Cells persist under
``<output_dir>/cells/<slug>/`` and a rerun only executes cells without a
successful manifest.
"""

from __future__ import annotations

import csv
import fnmatch
import hashlib
import io
import json
import logging
import re
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import yaml

from . import __version__
from .dataset import (
    AnnotatedVideo,
    load_coco_annotations,
    load_palette,
    load_pixel_mask_dataset,
    sample_video,
)
from .metrics import (
    AGGREGATIONS,
    MAP_NOTE,
    PER_CLASS_OVER_VIDEO,
    aggregate_many,
    mean_average_precision,
    write_report,
)
from .mock import DriftModel, MockSession
from .prompts import NAMED_STRATEGIES, named_strategy
from .propagation import ReinitPolicy, run_sequence, save_result
from .reference import (
    ReferenceTable,
    finetuned_row_name,
    load_reference_table,
    vanilla_row_name,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ADAPTERS = ("coco", "pixel_masks", "synthetic")
SEGMENTER_KINDS = ("mock", "subprocess", "bridge", "finetuned")


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        super().__init__("invalid experiment config:\n  - " + "\n  - ".join(problems))
        self.problems = list(problems)


# --------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    adapter: str
    locator: str = ""
    image_root: str = ""
    palette: str = ""
    options: dict = field(default_factory=dict)
    target_fps: float | None = None
    reference: str | None = None
    video_averaging: str = "pooled"


@dataclass(frozen=True)
class SegmenterSpec:
    name: str
    kind: str
    options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple[DatasetSpec, ...]
    strategies: tuple[str, ...]
    policies: tuple[ReinitPolicy, ...]
    segmenters: tuple[SegmenterSpec, ...]
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    aggregation: str = PER_CLASS_OVER_VIDEO
    compute_map: bool = True
    map_thresholds: tuple[float, ...] = (0.5,)
    negatives_per_region: int = 1
    fluctuation_radius: int = 3
    workers: int = 1
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _policy_from(raw, problems: list[str]) -> ReinitPolicy | None:
    if raw in (None, "none", "None"):
        return ReinitPolicy()
    try:
        if isinstance(raw, int) and not isinstance(raw, bool):
            return ReinitPolicy(raw)
        if isinstance(raw, dict):
            return ReinitPolicy(raw.get("interval"), bool(raw.get("new_object_trigger", False)))
    except ValueError as exc:
        problems.append(f"policy {raw!r}: {exc}")
        return None
    problems.append(f"cannot parse policy {raw!r}")
    return None


def _segmenter_name(raw: dict) -> str:
    if raw.get("name"):
        return str(raw["name"])
    kind = raw.get("kind", "mock")
    if kind == "mock":
        d = raw.get("drift", {})
        t = d.get("translation", [0, 0])
        return f"mock-dx{t[0]:g}dy{t[1]:g}-er{d.get('erosion_rate', 0):g}"
    return kind


def parse_config(raw: dict, base_dir: str | Path = ".", check_paths: bool = True) -> ExperimentConfig:
    """Validate a config mapping, collecting every problem before raising."""
    problems: list[str] = []
    base = Path(base_dir)
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping"])
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        problems.append(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")

    def resolve(p: str) -> str:
        if not p:
            return ""
        path = Path(p)
        return str(path if path.is_absolute() else base / path)

    datasets = []
    names = set()
    for i, d in enumerate(raw.get("datasets") or []):
        if not isinstance(d, dict):
            problems.append(f"datasets[{i}] must be a mapping")
            continue
        name = str(d.get("name", f"dataset{i}"))
        if name in names:
            problems.append(f"duplicate dataset name {name!r}")
        names.add(name)
        adapter = d.get("adapter")
        if adapter not in ADAPTERS:
            problems.append(f"dataset {name}: adapter must be one of {ADAPTERS}, got {adapter!r}")
            continue
        spec = DatasetSpec(
            name=name,
            adapter=adapter,
            locator=resolve(d.get("locator", "")),
            image_root=resolve(d.get("image_root", "")),
            palette=resolve(d.get("palette", "")),
            options=dict(d.get("options") or {}),
            target_fps=d.get("target_fps"),
            reference=d.get("reference"),
            video_averaging=d.get("video_averaging", "pooled"),
        )
        if spec.video_averaging not in ("pooled", "mean"):
            problems.append(f"dataset {name}: video_averaging must be 'pooled' or 'mean'")
        if check_paths and adapter != "synthetic" and not Path(spec.locator).exists():
            problems.append(f"dataset {name}: locator {spec.locator!r} does not exist")
        if check_paths and adapter == "pixel_masks" and not Path(spec.palette).is_file():
            problems.append(f"dataset {name}: palette {spec.palette!r} does not exist")
        datasets.append(spec)
    if not datasets:
        problems.append("at least one dataset is required")

    strategies = tuple(raw.get("strategies") or ())
    if not strategies:
        problems.append("at least one prompt strategy is required")
    for s in strategies:
        try:
            named_strategy(s)
        except ValueError:
            problems.append(f"unknown strategy {s!r}; expected one of {NAMED_STRATEGIES} or '<k>Points-Random'")

    policies = []
    for p in raw.get("policies") or []:
        pol = _policy_from(p, problems)
        if pol is not None:
            policies.append(pol)
    if not policies:
        problems.append("at least one reinit policy is required")

    segmenters = []
    seg_raw = raw.get("segmenters") or ([raw["segmenter"]] if raw.get("segmenter") else [])
    for s in seg_raw:
        kind = s.get("kind")
        if kind not in SEGMENTER_KINDS:
            problems.append(f"segmenter kind must be one of {SEGMENTER_KINDS}, got {kind!r}")
            continue
        opts = {k: v for k, v in s.items() if k not in ("kind", "name")}
        if kind in ("mock", "subprocess"):
            try:
                DriftModel(**opts.get("drift", {}))
            except (TypeError, ValueError) as exc:
                problems.append(f"segmenter {_segmenter_name(s)}: bad drift ({exc})")
        if kind in ("bridge", "finetuned"):
            ckpt = opts.get("checkpoint") or opts.get("checkpoint_locator")
            if not ckpt:
                problems.append(f"segmenter {_segmenter_name(s)}: checkpoint is required")
            else:
                opts["checkpoint"] = resolve(ckpt)
                opts.pop("checkpoint_locator", None)
                if check_paths and not Path(opts["checkpoint"]).is_file():
                    problems.append(f"segmenter {_segmenter_name(s)}: checkpoint {opts['checkpoint']!r} does not exist")
        segmenters.append(SegmenterSpec(_segmenter_name(s), kind, opts))
    if not segmenters:
        problems.append("at least one segmenter is required")
    if len({s.name for s in segmenters}) != len(segmenters):
        problems.append("segmenter names must be unique")

    seeds = raw.get("seeds")
    if seeds is None:
        seeds = [raw.get("seed", 0)]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        problems.append("seeds must be a non-empty list of integers")

    metrics = raw.get("metrics") or {}
    aggregation = metrics.get("aggregation", PER_CLASS_OVER_VIDEO)
    if aggregation not in AGGREGATIONS:
        problems.append(f"metrics.aggregation must be one of {AGGREGATIONS}")
    sampling = raw.get("point_sampling") or {}

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        datasets=tuple(datasets),
        strategies=strategies,
        policies=tuple(policies),
        segmenters=tuple(segmenters),
        seeds=tuple(seeds),
        output_dir=resolve(raw.get("output_dir", "runs")),
        aggregation=aggregation,
        compute_map=bool(metrics.get("map", True)),
        map_thresholds=tuple(float(t) for t in metrics.get("map_thresholds", [0.5])),
        negatives_per_region=int(sampling.get("negatives_per_region", 1)),
        fluctuation_radius=int(sampling.get("fluctuation_radius", 3)),
        workers=int(raw.get("workers", 1)),
        raw=raw,
    )


def load_config(path: str | Path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    return parse_config(raw, path.parent, check_paths)


# --------------------------------------------------------------------------
# matrix


@dataclass(frozen=True)
class RunDescriptor:
    dataset: str
    strategy: str
    policy: ReinitPolicy
    segmenter: str
    seed: int

    @property
    def key(self) -> str:
        return f"{self.dataset}/{self.strategy}/{self.policy.label}/{self.segmenter}/{self.seed}"

    @property
    def slug(self) -> str:
        return re.sub(r"[^A-Za-z0-9._+-]+", "_", self.key.replace("/", "__"))


def expand_matrix(config: ExperimentConfig, cell_filter: str | None = None) -> list[RunDescriptor]:
    """Cartesian product of the axes in declaration order; duplicates collapse."""
    seen = set()
    out = []
    for ds in config.datasets:
        for strategy in config.strategies:
            for policy in config.policies:
                for seg in config.segmenters:
                    for seed in config.seeds:
                        d = RunDescriptor(ds.name, strategy, policy, seg.name, seed)
                        if d.key in seen:
                            continue
                        if cell_filter and not fnmatch.fnmatchcase(d.key, cell_filter):
                            continue
                        seen.add(d.key)
                        out.append(d)
    return out


# --------------------------------------------------------------------------
# execution


@lru_cache(maxsize=8)
def _load_dataset_cached(spec_json: str) -> tuple[AnnotatedVideo, ...]:
    return tuple(load_dataset(DatasetSpec(**json.loads(spec_json))))


def load_dataset(spec: DatasetSpec) -> list[AnnotatedVideo]:
    if spec.adapter == "synthetic":
        from .synthetic import make_synthetic_video

        opts = dict(spec.options)
        count = int(opts.pop("videos", 1))
        base_seed = int(opts.pop("seed", 0))
        videos = [make_synthetic_video(seed=base_seed + i, **opts) for i in range(count)]
    elif spec.adapter == "coco":
        videos = load_coco_annotations(Path(spec.locator), spec.image_root)
    else:
        videos = load_pixel_mask_dataset(spec.locator, load_palette(spec.palette),
                                         float(spec.options.get("source_fps", 1.0)))
    if spec.target_fps:
        videos = [sample_video(v, float(spec.target_fps)) for v in videos]
    return videos


def _dataset_json(spec: DatasetSpec) -> str:
    return json.dumps(spec.__dict__, sort_keys=True, default=str)


def open_segmenter(spec: SegmenterSpec, video: AnnotatedVideo):
    opts = spec.options
    if spec.kind == "mock":
        return MockSession(video, DriftModel(**opts.get("drift", {})), identity=spec.name)
    if spec.kind == "subprocess":
        from .protocol import SubprocessSession

        return SubprocessSession(video, opts.get("backend", "mock"), {"drift": opts.get("drift", {}), "identity": spec.name})
    if spec.kind == "bridge":
        from .bridge import BridgeConfig, open_session

        return open_session(video.sequence, BridgeConfig.from_mapping(opts))
    from .finetune import RuntimeSession, TinySegmenterRuntime

    if opts.get("runtime", "tiny") == "tiny":
        return RuntimeSession(TinySegmenterRuntime.from_checkpoint(opts["checkpoint"]), video)
    from .bridge import BridgeConfig, open_session

    return open_session(video.sequence, BridgeConfig.from_mapping({**opts, "checkpoint_locator": opts["checkpoint"]}))


@dataclass
class CellResult:
    descriptor: RunDescriptor
    status: str
    summary: dict = field(default_factory=dict)
    error: str | None = None
    videos_failed: list[str] = field(default_factory=list)


@dataclass
class Bundle:
    config: ExperimentConfig | None
    cells: list[CellResult]

    @property
    def failed(self) -> list[CellResult]:
        return [c for c in self.cells if c.status != "ok"]


def _code_version() -> str:
    return __version__


def _execute_cell(config: ExperimentConfig, d: RunDescriptor, cell_dir: Path) -> CellResult:
    ds = next(s for s in config.datasets if s.name == d.dataset)
    seg = next(s for s in config.segmenters if s.name == d.segmenter)
    strategy = named_strategy(d.strategy, negatives=config.negatives_per_region,
                              fluctuation=config.fluctuation_radius, seed=d.seed)
    try:
        videos = _load_dataset_cached(_dataset_json(ds))
        pairs = []
        failed_videos = []
        for video in videos:
            session = open_segmenter(seg, video)
            try:
                result = run_sequence(video, strategy, d.policy, session)
            finally:
                if hasattr(session, "close"):
                    session.close()
            save_result(result, cell_dir / "videos" / video.video_id)
            if not result.complete:
                failed_videos.append(video.video_id)
            pairs.append((result, video))
        report = aggregate_many(pairs, config.aggregation, ds.video_averaging)
        if config.compute_map:
            report.map_score = mean_average_precision(pairs, iou_thresholds=config.map_thresholds)
            report.map_thresholds = config.map_thresholds
        write_report(report, cell_dir)
        summary = report.summary()
        status = "ok"
        error = None
        if failed_videos:
            status = "failed"
            error = f"propagation failed in {failed_videos}"
    except Exception as exc:
        log.exception("cell %s failed", d.key)
        summary, status, error, failed_videos = {}, "failed", f"{type(exc).__name__}: {exc}", []
    manifest = {
        "key": d.key,
        "dataset": d.dataset,
        "strategy": d.strategy,
        "policy": d.policy.label,
        "reinit_interval": d.policy.interval,
        "new_object_trigger": d.policy.new_object_trigger,
        "segmenter": d.segmenter,
        "segmenter_kind": seg.kind,
        "segmenter_options": seg.options,
        "seed": d.seed,
        "config_digest": config.digest,
        "code_version": _code_version(),
        "status": status,
        "error": error,
        "videos_failed": failed_videos,
        "summary": summary,
    }
    cell_dir.mkdir(parents=True, exist_ok=True)
    (cell_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return CellResult(d, status, summary, error, failed_videos)


def _execute_cell_star(args):
    return _execute_cell(*args)


def _load_cell(d: RunDescriptor, cell_dir: Path) -> CellResult | None:
    path = cell_dir / "manifest.json"
    if not path.is_file():
        return None
    m = json.loads(path.read_text())
    if m.get("status") != "ok":
        return None
    return CellResult(d, "ok", m.get("summary", {}), None, [])


def run_all(config: ExperimentConfig, descriptors: Sequence[RunDescriptor], output_dir: str | Path | None = None,
            workers: int | None = None) -> Bundle:
    """Execute missing cells; completed cells are loaded from disk."""
    out = Path(output_dir or config.output_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    results: dict[str, CellResult] = {}
    todo = []
    for d in descriptors:
        done = _load_cell(d, out / "cells" / d.slug)
        if done is not None:
            results[d.key] = done
        else:
            todo.append(d)
    workers = workers or config.workers
    jobs = [(config, d, out / "cells" / d.slug) for d in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cell in pool.map(_execute_cell_star, jobs):
                results[cell.descriptor.key] = cell
    else:
        for job in jobs:
            cell = _execute_cell(*job)
            results[cell.descriptor.key] = cell
    bundle = Bundle(config, [results[d.key] for d in descriptors])
    (out / "bundle.json").write_text(json.dumps(
        {"config_digest": config.digest, "code_version": _code_version(),
         "cells": [{"key": c.descriptor.key, "slug": c.descriptor.slug, "status": c.status, "error": c.error}
                   for c in bundle.cells]}, indent=2))
    return bundle


def load_bundle(config: ExperimentConfig, output_dir: str | Path | None = None, cell_filter: str | None = None) -> Bundle:
    out = Path(output_dir or config.output_dir)
    cells = []
    for d in expand_matrix(config, cell_filter):
        path = out / "cells" / d.slug / "manifest.json"
        if path.is_file():
            m = json.loads(path.read_text())
            cells.append(CellResult(d, m["status"], m.get("summary", {}), m.get("error"), m.get("videos_failed", [])))
    return Bundle(config, cells)


# --------------------------------------------------------------------------
# reports

REPORT_FIELDS = (
    "dataset", "method", "strategy", "policy", "segmenter", "seed", "status",
    "miou", "mdice", "map", "mae", "phi", "C", "frames", "gt_kind", "aggregation",
    "paper_method", "paper_miou", "paper_mdice", "paper_map", "delta_miou", "error",
)


def _fmt(v, digits=6) -> str:
    return "" if v is None or v == "" else f"{float(v):.{digits}f}"


def _reference_for(cell: CellResult, ds: DatasetSpec | None, seg: SegmenterSpec | None, table: ReferenceTable):
    if ds is None or not ds.reference or seg is None:
        return None, {}
    d = cell.descriptor
    if seg.kind == "finetuned":
        ft = seg.options
        named = finetuned_row_name(ft.get("prompt_type", "mask"), ft.get("variant", "MD"), ft.get("regime", "image_dense"))
        if named is None:
            return None, {}
        section, method = named
        return method, table.lookup(ds.reference, method, section)
    method = vanilla_row_name(d.strategy, d.policy.interval if not d.policy.new_object_trigger else None)
    if method is None or (d.policy.new_object_trigger and d.policy.interval):
        return None, {}
    return method, table.lookup(ds.reference, method, "vanilla")


def report_rows(bundle: Bundle, table: ReferenceTable | None = None) -> list[dict]:
    table = table or load_reference_table()
    datasets = {d.name: d for d in bundle.config.datasets} if bundle.config else {}
    segs = {s.name: s for s in bundle.config.segmenters} if bundle.config else {}
    rows = []
    for cell in bundle.cells:
        d = cell.descriptor
        s = cell.summary
        method = f"{d.segmenter}-{d.strategy}" + ("" if d.policy.label == "none" else f"-{d.policy.label}")
        paper_method, ref = _reference_for(cell, datasets.get(d.dataset), segs.get(d.segmenter), table)
        miou = s.get("miou")
        delta = None
        if miou is not None and "miou" in ref:
            delta = 100.0 * miou - ref["miou"]
        rows.append({
            "dataset": d.dataset, "method": method, "strategy": d.strategy, "policy": d.policy.label,
            "segmenter": d.segmenter, "seed": d.seed, "status": cell.status,
            "miou": _fmt(miou), "mdice": _fmt(s.get("mdice")), "map": _fmt(s.get("map")),
            "mae": _fmt(s.get("mae")), "phi": _fmt(s.get("phi")), "C": s.get("C", ""),
            "frames": s.get("frames_evaluated", ""), "gt_kind": s.get("gt_kind", ""),
            "aggregation": s.get("aggregation", ""), "paper_method": paper_method or "",
            "paper_miou": _fmt(ref.get("miou"), 2), "paper_mdice": _fmt(ref.get("mdice"), 2),
            "paper_map": _fmt(ref.get("map"), 2), "delta_miou": _fmt(delta, 2), "error": cell.error or "",
        })
    return rows


def rows_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _pct(v: str) -> str:
    return "" if v == "" else f"{100.0 * float(v):.2f}"


def rows_to_markdown(rows: Sequence[dict]) -> str:
    header = ("| Method | mIoU | mDice | mAP | MAE | phi | mIoU (paper) | mDice (paper) | mAP (paper) | "
              "ΔmIoU | status |\n|---|---|---|---|---|---|---|---|---|---|---|\n")
    by_ds: dict[str, list[dict]] = {}
    for r in rows:
        by_ds.setdefault(r["dataset"], []).append(r)
    if not by_ds:
        return "# Results\n\n" + header
    parts = ["# Results\n"]
    for ds, rs in by_ds.items():
        parts.append(f"\n## {ds}\n\n")
        parts.append(header)
        for r in rs:
            parts.append(
                f"| {r['method']} | {_pct(r['miou'])} | {_pct(r['mdice'])} | {_pct(r['map'])} | {_pct(r['mae'])} | "
                f"{_pct(r['phi'])} | {r['paper_miou']} | {r['paper_mdice']} | {r['paper_map']} | {r['delta_miou']} | "
                f"{r['status']} |\n"
            )
        notes = sorted({r["aggregation"] for r in rs if r["aggregation"]})
        parts.append(f"\nScores in %. Aggregation: {', '.join(notes) or 'n/a'}. {MAP_NOTE}.")
        if any(r["gt_kind"] == "pseudo" for r in rs):
            parts.append(" Scored against PSEUDO ground truth.")
        if any(r["paper_method"] for r in rs):
            parts.append(' "(paper)" columns are published values for the matching method row.')
        parts.append("\n")
    return "".join(parts)


def emit_report(bundle: Bundle, directory: str | Path, formats: Sequence[str] = ("csv", "markdown"),
                figures: bool = True, table: ReferenceTable | None = None) -> list[Path]:
    """Write ``report.csv`` / ``report.md`` and one bar chart per dataset."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = report_rows(bundle, table)
    written = []
    if "csv" in formats:
        path = directory / "report.csv"
        path.write_text(rows_to_csv(rows))
        written.append(path)
    if "markdown" in formats:
        path = directory / "report.md"
        path.write_text(rows_to_markdown(rows))
        written.append(path)
    if figures and rows:
        from .plotting import plot_strategy_bars

        for ds in dict.fromkeys(r["dataset"] for r in rows):
            for seg in dict.fromkeys(r["segmenter"] for r in rows if r["dataset"] == ds):
                sub = [r for r in rows if r["dataset"] == ds and r["segmenter"] == seg and r["status"] == "ok"]
                if not sub:
                    continue
                seed = sub[0]["seed"]
                sub = [r for r in sub if r["seed"] == seed]
                name = re.sub(r"[^A-Za-z0-9._+-]+", "_", f"figure_{ds}_{seg}.png")
                written.append(plot_strategy_bars(sub, directory / name, "miou", title=f"{ds} / {seg}"))
    return written
