"""Command-line entry point: ``surgseg {validate,run,report,sweep,finetune}``."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import yaml

from .autoseg import SweepError
from .dataset import DatasetError
from .experiment import (
    ConfigError,
    emit_report,
    expand_matrix,
    load_bundle,
    load_dataset,
    parse_config,
    run_all,
)
from .finetune import FinetuneError

log = logging.getLogger("surgseg")

EXIT_OK = 0
EXIT_CELL_FAILED = 1
EXIT_CONFIG = 2


def _read_raw(path: str) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping"])
    return raw


def _config(args, check_paths: bool = True):
    raw = _read_raw(args.config)
    if getattr(args, "seed", None) is not None:
        raw = {**raw, "seeds": [args.seed]}
        raw.pop("seed", None)
    if getattr(args, "output", None):
        raw = {**raw, "output_dir": str(Path(args.output).resolve())}
    return parse_config(raw, Path(args.config).parent, check_paths)


def cmd_validate(args) -> int:
    config = _config(args)
    cells = expand_matrix(config, args.filter)
    print(f"config ok: {len(config.datasets)} dataset(s), {len(cells)} cell(s), digest {config.digest}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _config(args)
    cells = expand_matrix(config, args.filter)
    if not cells:
        print("no cells selected", file=sys.stderr)
    bundle = run_all(config, cells, workers=args.workers)
    for cell in bundle.cells:
        line = f"{cell.status:6s} {cell.descriptor.key}"
        if cell.status == "ok":
            line += f"  mIoU={cell.summary.get('miou', float('nan')):.4f}"
        else:
            line += f"  {cell.error}"
        print(line)
    if not args.no_report:
        for path in emit_report(bundle, Path(config.output_dir), args.format):
            print(f"wrote {path}")
    return EXIT_CELL_FAILED if bundle.failed else EXIT_OK


def cmd_report(args) -> int:
    config = _config(args, check_paths=False)
    bundle = load_bundle(config, cell_filter=args.filter)
    target = Path(args.report_dir) if args.report_dir else Path(config.output_dir)
    for path in emit_report(bundle, target, args.format):
        print(f"wrote {path}")
    return EXIT_CELL_FAILED if bundle.failed else EXIT_OK


def cmd_sweep(args) -> int:
    from .autoseg import (
        AutoSegConfig,
        expand_grid,
        pseudo_annotated_video,
        select_pseudo_ground_truth,
        sweep,
        write_gallery,
    )
    from .bridge import BridgeConfig, MockGeneratorBridge, Sam2GeneratorBridge
    from .dataset import FrameRef, VideoSequence, dump_coco

    raw = _read_raw(args.config)
    section = raw.get("autoseg") or {}
    base_dir = Path(args.config).parent
    problems = []
    frame_path = section.get("frame")
    if not frame_path:
        problems.append("autoseg.frame (an image file) is required")
    else:
        frame_path = Path(frame_path) if Path(frame_path).is_absolute() else base_dir / frame_path
        if not frame_path.is_file():
            problems.append(f"autoseg.frame {str(frame_path)!r} does not exist")
    try:
        grid = expand_grid(section.get("grid"), AutoSegConfig(**(section.get("base") or {})))
    except (TypeError, ValueError) as exc:
        problems.append(f"autoseg grid: {exc}")
    if problems:
        raise ConfigError(problems)

    from PIL import Image

    with Image.open(frame_path) as img:
        width, height = img.size
    frame = FrameRef(int(section.get("frame_index", 0)), str(frame_path), width, height)
    if section.get("generator", "mock") == "sam2":
        bridge = Sam2GeneratorBridge(BridgeConfig.from_mapping(section.get("bridge") or {}))
    else:
        bridge = MockGeneratorBridge()
    out = Path(args.output) if args.output else base_dir / section.get("output_dir", "sweep")
    report = sweep(frame, grid, bridge)
    index = write_gallery(report, out)
    for cell in report.cells:
        print(f"{'ok' if cell.ok else 'FAILED':6s} {cell.config_id}  count={cell.count} coverage={cell.coverage:.3f} "
              f"max_iou={cell.max_pairwise_iou:.3f}")
    print(f"wrote {index}")
    if args.select:
        anns = select_pseudo_ground_truth(report, args.select)
        video = pseudo_annotated_video(VideoSequence(section.get("video_id", "pseudo"), (frame,)), anns)
        path = out / "pseudo_ground_truth.json"
        path.write_text(json.dumps(dump_coco([video])))
        print(f"wrote {path} ({len(anns)} objects)")
    return EXIT_CELL_FAILED if any(not c.ok for c in report.cells) else EXIT_OK


def cmd_finetune(args) -> int:
    from .dataset import SplitSpec, split_train_test
    from .finetune import (
        FinetuneConfig,
        Regime,
        TinySegmenterRuntime,
        build_plan,
        check_isolation,
        train,
    )

    config = _config(args)
    section = config.raw.get("finetune") or {}
    problems = []
    name = section.get("dataset", config.datasets[0].name)
    ds = next((d for d in config.datasets if d.name == name), None)
    if ds is None:
        problems.append(f"finetune.dataset {name!r} is not declared")
    try:
        split = section.get("split")
        ft = FinetuneConfig(
            trainable=section.get("variant", section.get("trainable", "MD")),
            regime=Regime(section.get("regime", "image_dense"), int(section.get("stride", 4))),
            prompt_type=section.get("prompt_type", "mask"),
            split=SplitSpec(**split) if isinstance(split, dict) else None,
            epochs=int(section.get("epochs", 10)),
            learning_rate=float(section.get("learning_rate", 1e-4)),
            seed=int(config.seeds[0]),
        )
    except (TypeError, ValueError) as exc:
        problems.append(f"finetune: {exc}")
    if problems:
        raise ConfigError(problems)

    videos = load_dataset(ds)
    train_videos, test_videos = split_train_test(videos, ft.split) if ft.split else (videos, [])
    plan = build_plan(train_videos, ft)
    check_isolation(plan, test_videos)
    run_name = re.sub(r"[^A-Za-z0-9._-]+", "_", f"{ds.name}-{ft.prompt_type}-{ft.variant}-{ft.regime.label}").strip("_")
    out = Path(args.output or Path(config.output_dir) / "finetune" / run_name)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps({
        "variant": ft.variant, "regime": ft.regime.label, "prompt_type": ft.prompt_type,
        "freeze_manifest": dict(plan.freeze_manifest),
        "train_videos": [v.video_id for v in train_videos], "test_videos": [v.video_id for v in test_videos],
        "entries": [[e.video_id, e.frame_index, e.supervised] for e in plan.entries],
    }, indent=1))
    if section.get("runtime", "tiny") == "tiny":
        runtime = TinySegmenterRuntime(seed=ft.seed, channels=int(section.get("channels", 8)))
    else:
        from .bridge import BridgeConfig
        from .finetune import Sam2TrainingRuntime

        runtime = Sam2TrainingRuntime.from_bridge_config(BridgeConfig.from_mapping(section.get("bridge") or {}))
    ckpt, log_path = train(plan, ft, runtime, train_videos, out, max_steps=section.get("max_steps"))
    print(f"checkpoint {ckpt}")
    print(f"training log {log_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surgseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, seed=True, filt=True):
        p.add_argument("--config", "-c", required=True, help="experiment config (YAML)")
        p.add_argument("--output", "-o", help="override output directory")
        if seed:
            p.add_argument("--seed", type=int, help="run only this seed")
        if filt:
            p.add_argument("--filter", help="glob over cell keys dataset/strategy/policy/segmenter/seed")

    p = sub.add_parser("validate", help="check a config and list every problem")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute missing cells and write reports")
    common(p)
    p.add_argument("--workers", type=int, help="parallel cells (default from config)")
    p.add_argument("--format", nargs="+", default=["csv", "markdown"], choices=["csv", "markdown"])
    p.add_argument("--no-report", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-emit reports from persisted cells")
    common(p)
    p.add_argument("--format", nargs="+", default=["csv", "markdown"], choices=["csv", "markdown"])
    p.add_argument("--report-dir", help="write reports here instead of the output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="automatic mask generation grid on one frame")
    common(p, seed=False, filt=False)
    p.add_argument("--select", help="write pseudo ground truth from this cell id")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("finetune", help="build a training plan and train")
    common(p, filt=False)
    p.set_defaults(func=cmd_finetune)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, SweepError, FinetuneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CELL_FAILED


if __name__ == "__main__":
    sys.exit(main())
