import json

import numpy as np
import pytest
from PIL import Image

from surgseg_eval.autoseg import (
    DEFAULT_GRID,
    AutoSegConfig,
    SweepError,
    boundary_length,
    expand_grid,
    pseudo_annotated_video,
    select_pseudo_ground_truth,
    sweep,
    write_gallery,
)
from surgseg_eval.bridge import MockGeneratorBridge
from surgseg_eval.dataset import DatasetError, FrameRef, VideoSequence
from surgseg_eval.masks import BinaryMask
from surgseg_eval.metrics import aggregate, report_to_csv
from surgseg_eval.mock import MockSession
from surgseg_eval.prompts import named_strategy
from surgseg_eval.propagation import ReinitPolicy, run_sequence, save_result
from surgseg_eval.synthetic import make_synthetic_video, render_frame


@pytest.fixture
def frame(tmp_path):
    v = make_synthetic_video(num_frames=1, seed=0)
    path = tmp_path / "frame.png"
    Image.fromarray(render_frame(v, 0)).save(path)
    return FrameRef(0, str(path), 160, 120)


class FlakyBridge(MockGeneratorBridge):
    def auto_generate_masks(self, frame, config):
        if config.points_per_side == 8:
            raise RuntimeError("out of memory")
        return super().auto_generate_masks(frame, config)


def test_config_validation():
    with pytest.raises(ValueError):
        AutoSegConfig(points_per_side=0)
    with pytest.raises(ValueError):
        AutoSegConfig(nms_threshold=1.5)
    with pytest.raises(ValueError):
        AutoSegConfig(crop_layers=-1)


def test_expand_grid():
    grid = expand_grid()
    assert len(grid) == np.prod([len(v) for v in DEFAULT_GRID.values()])
    assert len({c.key for c in grid}) == len(grid)
    assert expand_grid({"points_per_side": [4]}) == [AutoSegConfig(points_per_side=4)]


def test_single_cell(frame):
    report = sweep(frame, [AutoSegConfig(points_per_side=16)], MockGeneratorBridge())
    assert len(report.cells) == 1 and report.cells[0].ok
    assert report.generator == "mock-automask"


def test_duplicate_configs_identical(frame):
    cfg = AutoSegConfig(points_per_side=16)
    a, b = sweep(frame, [cfg, cfg], MockGeneratorBridge()).cells
    assert b.config_id == a.config_id + "#1"
    assert [m for m, _ in a.candidates] == [m for m, _ in b.candidates]
    assert a.coverage == b.coverage


def test_min_area_differential(frame):
    grid = expand_grid({"min_mask_region_area": [0, 50, 200, 400, 800]}, AutoSegConfig(points_per_side=16))
    counts = [c.count for c in sweep(frame, grid, MockGeneratorBridge()).cells]
    assert counts == sorted(counts, reverse=True)


def test_failed_cell_recorded(frame):
    grid = [AutoSegConfig(points_per_side=8), AutoSegConfig(points_per_side=16)]
    report = sweep(frame, grid, FlakyBridge())
    assert [c.ok for c in report.cells] == [False, True]
    assert "out of memory" in report.cells[0].error
    with pytest.raises(SweepError):
        select_pseudo_ground_truth(report, report.cells[0].config_id)
    with pytest.raises(SweepError):
        sweep(frame, [], MockGeneratorBridge())


def test_cell_statistics(frame):
    cell = sweep(frame, [AutoSegConfig(points_per_side=32)], MockGeneratorBridge()).cells[0]
    union = np.zeros((120, 160), bool)
    for m, _ in cell.candidates:
        union |= m.array
    assert cell.coverage == pytest.approx(union.mean())
    assert 0 <= cell.max_pairwise_iou <= 1 and cell.boundary_ratio > 0


def test_boundary_length():
    arr = np.zeros((6, 6), bool)
    arr[1:5, 1:5] = True
    assert boundary_length(arr) == 12


def test_selection_ids_by_area(frame):
    report = sweep(frame, [AutoSegConfig(points_per_side=32)], MockGeneratorBridge())
    cell = report.cells[0]
    anns = select_pseudo_ground_truth(report, cell.config_id)
    assert [a.object_id for a in anns] == list(range(len(cell.candidates)))
    areas = [a.mask.area for a in anns]
    assert areas == sorted(areas, reverse=True)


def test_empty_candidate_set(tmp_path):
    path = tmp_path / "flat.png"
    Image.fromarray(np.full((20, 20), 30, np.uint8)).save(path)
    report = sweep(FrameRef(0, str(path), 20, 20), [AutoSegConfig(points_per_side=4)], MockGeneratorBridge())
    with pytest.raises(DatasetError):
        select_pseudo_ground_truth(report, report.cells[0].config_id)


def test_pseudo_flag_propagates(frame, tmp_path):
    report = sweep(frame, [AutoSegConfig(points_per_side=32)], MockGeneratorBridge())
    anns = select_pseudo_ground_truth(report, report.cells[0].config_id)
    video = pseudo_annotated_video(VideoSequence("u", (frame,)), anns)
    assert video.pseudo_ground_truth
    r = run_sequence(video, named_strategy("Mask"), ReinitPolicy(), MockSession(video))
    assert r.provenance["pseudo_ground_truth"] is True
    save_result(r, tmp_path / "res")
    assert json.loads((tmp_path / "res" / "provenance.json").read_text())["provenance"]["pseudo_ground_truth"]
    rows = report_to_csv(aggregate(r, video)).splitlines()[1:]
    assert rows and all(row.endswith(",pseudo") for row in rows)


def test_gallery(frame, tmp_path):
    grid = [AutoSegConfig(points_per_side=8), AutoSegConfig(points_per_side=16)]
    report = sweep(frame, grid, FlakyBridge())
    index = json.loads(write_gallery(report, tmp_path / "gal").read_text())
    assert len(index["cells"]) == 2
    assert "image" not in index["cells"][0]
    assert (tmp_path / "gal" / index["cells"][1]["image"]).is_file()
    for key in ("coverage", "boundary_ratio", "max_pairwise_iou"):
        assert key in index["cells"][1]


def test_pseudo_annotations_are_nonempty(frame):
    report = sweep(frame, [AutoSegConfig(points_per_side=32)], MockGeneratorBridge())
    anns = select_pseudo_ground_truth(report, report.cells[0].config_id)
    assert all(isinstance(a.mask, BinaryMask) and a.mask.area > 0 for a in anns)
