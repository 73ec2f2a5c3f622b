import bisect

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from surgseg_eval.dataset import (
    AnnotatedVideo,
    FrameRef,
    InstanceAnnotation,
    VideoSequence,
)
from surgseg_eval.masks import BinaryMask
from surgseg_eval.mock import DriftModel, MockSession
from surgseg_eval.prompts import named_strategy
from surgseg_eval.propagation import (
    INTERVAL,
    NEW_OBJECT,
    CapabilityError,
    ReinitPolicy,
    ScheduleError,
    SegmenterSession,
    detect_new_objects,
    load_result,
    reinitialize,
    run_sequence,
    save_result,
    schedule_interval_reinits,
)
from surgseg_eval.synthetic import make_synthetic_video


def linear_scan_schedule(annotated, T, anchor):
    """Oracle: walk targets anchor+kT and scan forward for the first annotated frame."""
    frames = sorted(set(annotated))
    out = []
    k = 1
    while anchor + k * T <= frames[-1]:
        target = anchor + k * T
        for f in frames:
            if f >= target:
                if not out or f > out[-1]:
                    out.append(f)
                break
        k += 1
    return out


def toy_video(n=10, objects_per_frame=None, w=12, h=10):
    """Objects are 2x2 squares at fixed places; ``objects_per_frame`` maps frame -> ids."""
    objects_per_frame = objects_per_frame or {f: [0, 1] for f in range(n)}
    frames = tuple(FrameRef(i, f"{i}", w, h) for i in range(n))
    anns = {}
    for f, ids in objects_per_frame.items():
        anns[f] = tuple(InstanceAnnotation(f, o, 1 + o % 2, BinaryMask.from_box((3 * o, 1, 3 * o + 1, 2), w, h))
                        for o in ids)
    return AnnotatedVideo(VideoSequence("toy", frames), anns, {1: "a", 2: "b"})


# ---------------------------------------------------------------- schedule


def test_schedule_examples():
    dense = list(range(100))
    assert schedule_interval_reinits(dense, 30, 0) == [30, 60, 90]
    assert schedule_interval_reinits(dense, 60, 0) == [60]
    assert schedule_interval_reinits(list(range(0, 100, 4)), 30, 0) == [32, 60, 92]


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        schedule_interval_reinits([], 30)
    with pytest.raises(ScheduleError):
        schedule_interval_reinits([0, 1], 0)
    with pytest.raises(ScheduleError):
        ReinitPolicy(-1)


def test_schedule_anchor_defaults_to_first_annotated():
    assert schedule_interval_reinits(list(range(5, 100)), 30) == [35, 65, 95]


@given(st.integers(1, 500), st.integers(1, 100), st.integers(0, 10))
def test_schedule_dense_is_anchored_multiples(n, T, anchor):
    frames = list(range(n))
    got = schedule_interval_reinits(frames, T, anchor)
    assert got == [f for f in frames if f > anchor and (f - anchor) % T == 0]


@given(st.lists(st.integers(0, 500), min_size=1, max_size=80), st.integers(1, 100), st.integers(0, 10))
def test_schedule_sparse_matches_oracle(annotated, T, anchor):
    got = schedule_interval_reinits(annotated, T, anchor)
    assert got == linear_scan_schedule(annotated, T, anchor)
    assert got == sorted(set(got))
    assert all(f in annotated for f in got)


def test_detect_new_objects():
    v = toy_video(objects_per_frame={0: [0, 1], 1: [0, 1, 2], 2: []}, n=3)
    assert detect_new_objects(v.instances(0), {0, 1}) == set()
    assert detect_new_objects(v.instances(1), {0, 1}) == {2}
    assert detect_new_objects(v.instances(2), {1}) == set()


# ---------------------------------------------------------------- reinitialize


class PointOnlySession(MockSession):
    accepted_kinds = frozenset({"point"})


def test_reinitialize_event():
    v = toy_video(n=40, objects_per_frame={f: ([0, 1] if f < 30 else [1]) for f in range(40)})
    s = MockSession(v)
    ev = reinitialize(s, v, 30, named_strategy("Mask"))
    assert ev.frame_index == 30 and ev.cause == INTERVAL
    assert ev.objects_seeded == (1,)
    ev = reinitialize(s, v, 12, named_strategy("Mask"), NEW_OBJECT)
    assert ev.cause == NEW_OBJECT


def test_capability_error():
    v = toy_video()
    with pytest.raises(CapabilityError):
        reinitialize(PointOnlySession(v), v, 0, named_strategy("Mask"))


def test_mock_session_satisfies_protocol():
    assert isinstance(MockSession(toy_video()), SegmenterSession)


# ---------------------------------------------------------------- run_sequence


def test_zero_drift_mask_equals_gt(synth_video):
    r = run_sequence(synth_video, named_strategy("Mask"), ReinitPolicy(), MockSession(synth_video))
    assert r.complete
    for f in synth_video.annotated_frames():
        for inst in synth_video.instances(f):
            assert r.masks[f][inst.object_id] == inst.mask


def test_hundred_frames_three_interval_events():
    v = toy_video(n=100)
    r = run_sequence(v, named_strategy("Mask"), ReinitPolicy(30), MockSession(v))
    assert [(e.frame_index, e.cause) for e in r.events] == [(30, INTERVAL), (60, INTERVAL), (90, INTERVAL)]


class Recorder(MockSession):
    def __init__(self, video, **kw):
        super().__init__(video, **kw)
        self.prompt_frames = []

    def add_prompts(self, frame_index, prompts):
        self.prompt_frames.append(frame_index)
        super().add_prompts(frame_index, prompts)


def test_policy_none_prompts_once():
    v = toy_video(n=50)
    s = Recorder(v)
    r = run_sequence(v, named_strategy("Bbox"), ReinitPolicy(), s)
    assert s.prompt_frames == [0]
    assert r.events == []
    assert r.provenance["prompt_submissions"] == 1


def test_seed_frame_after_zero():
    v = toy_video(n=20, objects_per_frame={f: [0] for f in range(5, 20)})
    r = run_sequence(v, named_strategy("Mask"), ReinitPolicy(4), MockSession(v))
    assert r.provenance["prompt_frame"] == 5
    assert [e.frame_index for e in r.events] == [9, 13, 17]
    assert r.masks[2][0].is_empty()
    assert set(r.masks) == set(range(20))


def test_new_object_trigger_and_coverage():
    per_frame = {f: ([0] if f < 12 else [0, 1]) for f in range(30)}
    v = toy_video(n=30, objects_per_frame=per_frame)
    r = run_sequence(v, named_strategy("Mask"), ReinitPolicy(None, True), MockSession(v))
    assert [(e.frame_index, e.cause) for e in r.events] == [(12, NEW_OBJECT)]
    for f in range(12, 30):
        assert not r.masks[f][1].is_empty()
    for f in range(30):
        assert set(r.masks[f]) == {0, 1}  # absent objects map to empty masks


def test_interval_wins_when_both_fire():
    per_frame = {f: ([0] if f < 10 else [0, 1]) for f in range(21)}
    v = toy_video(n=21, objects_per_frame=per_frame)
    r = run_sequence(v, named_strategy("Mask"), ReinitPolicy(10, True), MockSession(v))
    assert [(e.frame_index, e.cause) for e in r.events] == [(10, INTERVAL), (20, INTERVAL)]


def test_vanished_object_dropped_at_reinit():
    per_frame = {f: ([0, 1] if f < 5 else [0]) for f in range(12)}
    per_frame.update({f: [0, 1] for f in range(8, 12)})
    v = toy_video(n=12, objects_per_frame=per_frame)
    r = run_sequence(v, named_strategy("Mask"), ReinitPolicy(6), MockSession(v))
    assert r.events[0].objects_seeded == (0,)
    # object 1 returns in GT at frame 8 but is no longer tracked
    assert r.masks[9][1].is_empty()


def test_events_strictly_increasing(synth_video):
    r = run_sequence(synth_video, named_strategy("1Point-Random"), ReinitPolicy(7, True),
                     MockSession(synth_video, DriftModel((1, 0))))
    frames = [e.frame_index for e in r.events]
    assert frames == sorted(set(frames))
    assert all(f > r.provenance["prompt_frame"] for f in frames)


class Exploding(MockSession):
    def propagate_to(self, frame_index):
        if frame_index == 7:
            raise RuntimeError("device lost")
        return super().propagate_to(frame_index)


def test_failure_returns_partial_result():
    v = toy_video(n=10)
    r = run_sequence(v, named_strategy("Mask"), ReinitPolicy(), Exploding(v))
    assert not r.complete
    assert r.failed_at == 7 and "device lost" in r.error
    assert r.frames() == list(range(7))


def test_replay_determinism(synth_video):
    def run():
        s = MockSession(synth_video, DriftModel((1, 1), 0.05))
        return run_sequence(synth_video, named_strategy("3Points-Random", seed=4), ReinitPolicy(30), s)

    a, b = run(), run()
    assert a.masks == b.masks and a.provenance == b.provenance


def test_provenance_fields(synth_video):
    r = run_sequence(synth_video, named_strategy("1Point-Random", seed=9), ReinitPolicy(60),
                     MockSession(synth_video, identity="mock-x"))
    p = r.provenance
    assert p["strategy"] == "1Point-Random" and p["seed"] == 9
    assert p["policy"] == "Reinit 60" and p["segmenter"] == "mock-x"
    assert p["point_config"]["fluctuation_radius"] == 3
    assert 0 <= p["positive_points_outside_mask"] <= p["positive_points"]


def test_save_and_load(tmp_path):
    v = make_synthetic_video(num_frames=15, width=40, height=30, num_objects=2, seed=2)
    r = run_sequence(v, named_strategy("Bbox"), ReinitPolicy(5), MockSession(v, DriftModel((1, 0))))
    save_result(r, tmp_path / "res")
    back = load_result(tmp_path / "res")
    assert back.masks == r.masks and back.events == r.events
    log = (tmp_path / "res" / "run_log.jsonl").read_text().splitlines()
    assert sum('"type": "reinit"' in line for line in log) == len(r.events)
    assert sum('"type": "frame"' in line for line in log) == 15


def test_bisect_matches_oracle_sanity():
    # guards the oracle itself against an off-by-one
    frames = [0, 4, 8, 33]
    assert linear_scan_schedule(frames, 30, 0) == [33]
    assert bisect.bisect_left(frames, 30) == 3
    assert np.array_equal(schedule_interval_reinits(frames, 30, 0), [33])
