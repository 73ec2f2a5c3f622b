import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from surgseg_eval.autoseg import AutoSegConfig
from surgseg_eval.masks import BinaryMask, connected_regions, mask_iou
from surgseg_eval.metrics import aggregate
from surgseg_eval.mock import (
    DriftModel,
    MockAutoMaskGenerator,
    MockSession,
    apply_drift,
    mock_propagate,
    prompt_fidelity,
    seed_mask,
)
from surgseg_eval.prompts import (
    BoxPrompt,
    MaskPrompt,
    PointPrompt,
    build_prompt_set,
    named_strategy,
)
from surgseg_eval.propagation import ReinitPolicy, run_sequence
from surgseg_eval.synthetic import make_synthetic_video, render_frame


def test_drift_validation():
    with pytest.raises(ValueError):
        DriftModel(erosion_rate=-1)
    with pytest.raises(ValueError):
        DriftModel(dropout_after=0)
    assert DriftModel().is_zero and not DriftModel((1, 0)).is_zero


def test_apply_drift_translation_and_dropout():
    arr = np.zeros((6, 8), bool)
    arr[1:3, 1:3] = True
    moved = apply_drift(arr, 2, DriftModel((1, 0)))
    assert moved[1:3, 3:5].all() and moved.sum() == 4
    assert not apply_drift(arr, 5, DriftModel(dropout_after=4)).any()
    assert apply_drift(arr, 4, DriftModel(dropout_after=4)).sum() == 4


@given(st.integers(0, 40))
def test_drift_area_never_grows(elapsed):
    arr = np.zeros((20, 20), bool)
    arr[4:15, 3:12] = True
    out = apply_drift(arr, elapsed, DriftModel((0.5, -0.25), 0.1))
    assert out.sum() <= arr.sum()


def test_mock_propagate_tracks_gt(small_video):
    f = small_video.annotated_frames()[5]
    inst = small_video.instances(f)[0]
    m = mock_propagate(small_video, f - 1, inst.object_id, f, DriftModel())
    assert m == inst.mask
    with pytest.raises(ValueError):
        mock_propagate(small_video, f, inst.object_id, f - 1, DriftModel())


def test_fidelity_ranking():
    assert prompt_fidelity("mask") > prompt_fidelity("box") > prompt_fidelity("point")


def test_seed_mask_rules(synth_video):
    f = synth_video.annotated_frames()[0]
    for inst in synth_video.instances(f):
        w, h = synth_video.size
        full = seed_mask(synth_video, f, inst.object_id, [MaskPrompt(inst.mask, inst.object_id, f)])
        x0, y0, x1, y1 = inst.bbox
        box = seed_mask(synth_video, f, inst.object_id, [BoxPrompt(x0, y0, x1, y1, inst.object_id, f)])
        ys, xs = np.nonzero(inst.mask.array)
        point = seed_mask(synth_video, f, inst.object_id, [PointPrompt(int(xs[0]), int(ys[0]), 1, inst.object_id, f)])
        assert full == inst.mask == box
        assert point.area <= box.area and (point & inst.mask) == point
        neg = seed_mask(synth_video, f, inst.object_id, [PointPrompt(int(xs[0]), int(ys[0]), 0, inst.object_id, f)])
        assert neg == BinaryMask.empty(w, h)


def test_partial_seed_stays_partial(synth_video):
    # object 1 is split into two blocks; a single point seeds only one of them
    f = synth_video.annotated_frames()[0]
    inst = synth_video.instance(f, 1)
    ys, xs = np.nonzero(inst.mask.array)
    s = MockSession(synth_video)
    s.add_prompts(f, [PointPrompt(int(xs[0]), int(ys[0]), 1, 1, f)])
    later = s.propagate_to(f + 10)[1]
    gt = synth_video.instance(f + 10, 1).mask
    assert 0 < later.area < gt.area
    assert (later & gt) == later


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_seed_frame_ordering_by_prompt_richness(seed):
    v = make_synthetic_video(num_frames=30, seed=seed)
    scores = []
    for name in ("Mask", "Bbox", "1Point-Random"):
        r = run_sequence(v, named_strategy(name, seed=seed), ReinitPolicy(), MockSession(v))
        scores.append(aggregate(r, v).miou)
    assert scores[0] >= scores[1] >= scores[2]


def test_reset_memory_clears(small_video):
    f = small_video.annotated_frames()[0]
    s = MockSession(small_video)
    s.add_prompts(f, build_prompt_set(small_video, f, named_strategy("Mask")))
    assert s.propagate_to(f + 1)
    s.reset_memory()
    assert s.propagate_to(f + 1) == {}


# ---------------------------------------------------------------- auto mask generator


def frame_image(seed=0):
    v = make_synthetic_video(num_frames=1, seed=seed)
    return v, render_frame(v, 0)


def test_generator_recovers_plateau_objects():
    v, img = frame_image()
    cands = MockAutoMaskGenerator().generate(img, AutoSegConfig(points_per_side=32))
    regions = [r for a in v.instances(0) for r in connected_regions(a.mask.array)]
    for g in regions:
        assert max(mask_iou(m.array, g) for m, _ in cands) == 1.0


def test_generator_deterministic():
    _, img = frame_image(1)
    cfg = AutoSegConfig(points_per_side=16, crop_layers=1)
    a = MockAutoMaskGenerator().generate(img, cfg)
    b = MockAutoMaskGenerator().generate(img, cfg)
    assert [(m, p) for m, p in a] == [(m, p) for m, p in b]


@given(st.integers(0, 400), st.integers(0, 400))
def test_min_area_monotone(a, b):
    _, img = frame_image(2)
    lo, hi = sorted((a, b))
    n_lo = len(MockAutoMaskGenerator().generate(img, AutoSegConfig(points_per_side=16, min_mask_region_area=lo)))
    n_hi = len(MockAutoMaskGenerator().generate(img, AutoSegConfig(points_per_side=16, min_mask_region_area=hi)))
    assert n_hi <= n_lo


def test_denser_grid_finds_at_least_as_many():
    _, img = frame_image(0)
    few = MockAutoMaskGenerator().generate(img, AutoSegConfig(points_per_side=4))
    many = MockAutoMaskGenerator().generate(img, AutoSegConfig(points_per_side=32))
    assert len(many) >= len(few)


def test_noisy_region_rejected_by_quality():
    rng = np.random.default_rng(0)
    img = np.full((40, 40), 30, np.uint8)
    img[5:20, 5:20] = 200
    img[22:38, 22:38] = rng.integers(96, 128, size=(16, 16))
    cands = MockAutoMaskGenerator().generate(img, AutoSegConfig(points_per_side=16, mask_quality_threshold=0.9))
    assert all(m.array[5:20, 5:20].all() or not m.array[22:38, 22:38].any() for m, _ in cands)
    assert any(m.area == 225 for m, _ in cands)
