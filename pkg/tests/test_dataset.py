import json
import logging

import numpy as np
import pytest
from helpers import crafted_coco, flood_fill_count, write_pixel_mask_dataset
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from surgseg_eval.dataset import (
    AnnotatedVideo,
    DatasetError,
    FrameRef,
    InstanceAnnotation,
    IntegrityError,
    MappingError,
    Palette,
    ParseError,
    SplitSpec,
    UnusableVideoError,
    VideoSequence,
    dump_coco,
    first_valid_prompt_frame,
    load_coco_annotations,
    load_palette,
    load_pixel_mask_dataset,
    manifest_records,
    pixel_masks_to_instances,
    sample_frames,
    sample_video,
    split_train_test,
    write_manifest,
)
from surgseg_eval.masks import BinaryMask


def one_image_doc(**ann):
    return {
        "images": [{"id": 1, "file_name": "a.png", "width": 4, "height": 4, "video_id": "v"}],
        "annotations": [dict({"id": 1, "image_id": 1, "category_id": 1}, **ann)] if ann else [],
        "categories": [{"id": 1, "name": "tool"}],
    }


def sequence(n, fps=1.0, video_id="v"):
    return VideoSequence(video_id, tuple(FrameRef(i, f"{i}.png", 4, 4) for i in range(n)), fps)


def video_with_frames(frames, n=100):
    m = BinaryMask.from_box((0, 0, 1, 1), 4, 4)
    anns = {f: (InstanceAnnotation(f, 0, 1, m),) for f in frames}
    return AnnotatedVideo(sequence(n), anns, {1: "tool"})


# ---------------------------------------------------------------- COCO


def test_rle_document_example():
    (video,) = load_coco_annotations(one_image_doc(segmentation={"size": [4, 4], "counts": [5, 3, 8]}))
    assert video.annotated_frames() == [0]
    (inst,) = video.instances(0)
    assert inst.mask.area == 3
    assert inst.bbox == (1, 1, 1, 3)


def test_document_without_annotations():
    (video,) = load_coco_annotations(one_image_doc())
    assert video.annotations == {}
    assert len(video.sequence.frames) == 1


def test_cholecseg_shaped_document():
    cats = [{"id": i, "name": f"c{i}"} for i in range(13)]
    images, anns = [], []
    for clip in range(17):
        for f in range(2):
            iid = clip * 2 + f + 1
            images.append({"id": iid, "file_name": f"{clip}/{f}.png", "width": 4, "height": 4,
                           "video_id": f"clip{clip:02d}", "frame_index": f})
            anns.append({"id": iid, "image_id": iid, "category_id": clip % 13, "object_id": 0,
                         "segmentation": {"size": [4, 4], "counts": [0, 2, 14]}})
    videos = load_coco_annotations({"images": images, "annotations": anns, "categories": cats})
    assert len(videos) == 17
    assert all(len(v.class_names) == 13 for v in videos)


def test_crafted_round_trip():
    doc = crafted_coco()
    videos = load_coco_annotations(doc)
    assert [v.video_id for v in videos] == ["vid0", "vid1", "vid2"]
    again = load_coco_annotations(json.loads(json.dumps(dump_coco(videos))))
    assert again == videos
    # polygon object decoded as a filled 4x4 square
    inst = videos[0].instance(0, 1)
    assert inst.mask.area == 16 and inst.bbox == (5, 4, 8, 7)


def test_string_and_list_rle_agree():
    videos = load_coco_annotations(crafted_coco())
    shifted = videos[1].instance(0, 0).mask.array
    np.testing.assert_array_equal(shifted[:, 1:], videos[0].instance(0, 0).mask.array[:, :-1])


def test_unknown_image_reference():
    doc = one_image_doc(segmentation={"size": [4, 4], "counts": [5, 3, 8]})
    doc["annotations"][0]["image_id"] = 99
    with pytest.raises(IntegrityError, match="unknown image id 99"):
        load_coco_annotations(doc)


def test_malformed_record_named():
    doc = one_image_doc(segmentation={"size": [4, 4], "counts": [5, 3, 7]})
    with pytest.raises(ParseError, match="annotation record #0"):
        load_coco_annotations(doc)
    doc = one_image_doc()
    del doc["images"][0]["width"]
    with pytest.raises(ParseError, match="image record #0"):
        load_coco_annotations(doc)
    with pytest.raises(ParseError):
        load_coco_annotations({"images": []})


def test_empty_mask_dropped(caplog):
    with caplog.at_level(logging.WARNING):
        (video,) = load_coco_annotations(one_image_doc(segmentation={"size": [4, 4], "counts": [16]}))
    assert video.annotations == {}
    assert "empty mask" in caplog.text


def test_missing_grouping_falls_back_to_single_video(caplog):
    doc = one_image_doc(segmentation={"size": [4, 4], "counts": [5, 3, 8]})
    del doc["images"][0]["video_id"]
    with caplog.at_level(logging.WARNING):
        (video,) = load_coco_annotations(doc, default_video_id="only")
    assert video.video_id == "only"
    assert "no video grouping" in caplog.text


def test_trackless_annotations_matched_by_overlap():
    doc = crafted_coco(num_videos=1)
    for a in doc["annotations"]:
        del a["object_id"]
    (video,) = load_coco_annotations(doc)
    assert video.instance(1, 0).class_id == 1
    assert video.instance(1, 1).class_id == 2
    # matching looks at the previous frame only, so a re-entering object gets a fresh id
    assert video.instance(3, 2).class_id == 2
    assert video.object_classes() == {0: 1, 1: 2, 2: 2}


def test_bbox_only_rasterised():
    (video,) = load_coco_annotations(one_image_doc(bbox=[1, 1, 2, 3]))
    assert video.instances(0)[0].mask.area == 6


def test_instance_rejects_empty_mask():
    with pytest.raises(DatasetError):
        InstanceAnnotation(0, 0, 1, BinaryMask.empty(4, 4))


def test_object_class_must_be_constant():
    a = InstanceAnnotation(0, 0, 1, BinaryMask.from_box((0, 0, 1, 1), 4, 4))
    b = InstanceAnnotation(1, 0, 2, BinaryMask.from_box((0, 0, 1, 1), 4, 4))
    with pytest.raises(IntegrityError):
        AnnotatedVideo(sequence(2), {0: (a,), 1: (b,)}, {1: "x", 2: "y"})


# ---------------------------------------------------------------- pixel masks


def test_single_component_left_columns():
    lab = np.zeros((4, 4), dtype=np.uint8)
    lab[:, :2] = 5
    (inst,) = pixel_masks_to_instances(lab, {5: 1})
    assert inst.bbox == (0, 0, 1, 3)


def test_split_blobs_get_distinct_ids():
    lab = np.zeros((4, 5), dtype=np.uint8)
    lab[:, 0] = 5
    lab[:, 3] = 5
    a, b = pixel_masks_to_instances(lab, {5: 1})
    assert a.class_id == b.class_id == 1
    assert a.object_id != b.object_id


def test_all_background():
    assert pixel_masks_to_instances(np.zeros((3, 3), np.uint8), {5: 1}) == []


def test_unknown_pixel_value():
    lab = np.full((2, 2), 7, dtype=np.uint8)
    with pytest.raises(MappingError, match="7"):
        pixel_masks_to_instances(lab, {5: 1})


def test_rgb_palette():
    lab = np.zeros((3, 3, 3), dtype=np.uint8)
    lab[0, 0] = (255, 0, 0)
    (inst,) = pixel_masks_to_instances(lab, Palette({(255, 0, 0): 4}, frozenset({(0, 0, 0)})))
    assert inst.class_id == 4


@given(arrays(np.uint8, (32, 32), elements=st.integers(0, 2)))
def test_component_count_matches_flood_fill(lab):
    insts = pixel_masks_to_instances(lab, {1: 1, 2: 2})
    assert len(insts) == flood_fill_count(lab == 1) + flood_fill_count(lab == 2)
    for inst in insts:
        x0, y0, x1, y1 = inst.bbox
        arr = inst.mask.array
        assert arr[y0, :].any() and arr[y1, :].any() and arr[:, x0].any() and arr[:, x1].any()


def test_identity_carried_across_frames():
    lab0 = np.zeros((6, 6), np.uint8)
    lab0[0:2, 0:2] = 1
    lab0[4:6, 4:6] = 1
    lab1 = np.zeros((6, 6), np.uint8)
    lab1[4:6, 3:5] = 1  # second blob moved left, first one vanished
    first = pixel_masks_to_instances(lab0, {1: 1})
    second = pixel_masks_to_instances(lab1, {1: 1}, frame_index=1, previous=first)
    assert [i.object_id for i in second] == [1]


def test_pixel_mask_dataset(tmp_path, rng):
    palette_path, labels = write_pixel_mask_dataset(tmp_path / "ds", rng)
    palette = load_palette(palette_path)
    assert palette.class_names[3] == "liver"
    videos = load_pixel_mask_dataset(tmp_path / "ds", palette)
    assert [v.video_id for v in videos] == ["video00", "video01"]
    for v in videos:
        assert len(v.sequence.frames) == 3
        for f in (0, 2):
            lab = labels[(v.video_id, f)]
            expected = sum(flood_fill_count(lab == val) for val in (60, 120, 200))
            assert len(v.instances(f)) == expected
        assert v.instances(1) == ()


def test_palette_parse_error(tmp_path):
    p = tmp_path / "pal.txt"
    p.write_text("12 13\n")
    with pytest.raises(ParseError):
        load_palette(p)


# ---------------------------------------------------------------- sampling, prompt frame, split


def test_sample_60fps_to_1fps():
    seq = sample_frames(sequence(120, fps=60), 1)
    assert [f.image_locator for f in seq.frames] == ["0.png", "60.png"]
    assert seq.frame_indices == [0, 1]
    assert seq.sampled_fps == 1


def test_sample_25fps():
    seq = sample_frames(sequence(50, fps=25), 1)
    assert [f.image_locator for f in seq.frames] == ["0.png", "25.png"]


def test_sample_identity_and_upsampling():
    seq = sequence(10, fps=5)
    assert sample_frames(seq, 5) is seq
    with pytest.raises(DatasetError):
        sample_frames(seq, 10)


@given(st.integers(1, 300), st.integers(1, 30))
def test_sample_length(n, stride):
    seq = sample_frames(sequence(n, fps=float(stride)), 1.0)
    assert len(seq.frames) == -(-n // stride)


def test_sample_video_keeps_annotations():
    v = video_with_frames([0, 3, 6], n=9)
    s = sample_video(VideoAnnotatedFps(v, 3.0), 1.0)
    assert s.annotated_frames() == [0, 1, 2]


def VideoAnnotatedFps(video, fps):
    from dataclasses import replace

    return replace(video, sequence=replace(video.sequence, source_fps=fps))


@pytest.mark.parametrize("frames,expected", [([0, 4, 8], 0), ([3, 5], 3), ([99], 99)])
def test_first_valid_prompt_frame(frames, expected):
    assert first_valid_prompt_frame(video_with_frames(frames)) == expected


def test_unusable_video():
    with pytest.raises(UnusableVideoError):
        first_valid_prompt_frame(video_with_frames([]))


def _videos(n):
    return [AnnotatedVideo(sequence(2, video_id=f"v{i:02d}"), {}, {}) for i in range(n)]


def test_split_ten_videos():
    vids = _videos(10)
    train, test = split_train_test(vids, SplitSpec(0.7, 17))
    assert (len(train), len(test)) == (7, 3)
    again = split_train_test(vids, SplitSpec(0.7, 17))
    assert [v.video_id for v in again[0]] == [v.video_id for v in train]


def test_split_two_videos():
    train, test = split_train_test(_videos(2), SplitSpec(0.7, 0))
    assert (len(train), len(test)) == (1, 1)
    with pytest.raises(DatasetError):
        split_train_test(_videos(1), SplitSpec(0.7, 0))


@given(st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_partition(n, frac, seed):
    vids = _videos(n)
    train, test = split_train_test(vids, SplitSpec(frac, seed))
    ids_tr = {v.video_id for v in train}
    ids_te = {v.video_id for v in test}
    assert not ids_tr & ids_te
    assert ids_tr | ids_te == {v.video_id for v in vids}
    assert test and train
    assert abs(len(train) - n * frac) <= 1


def test_frame_level_split():
    v = video_with_frames(list(range(10)), n=10)
    train, test = split_train_test([v], SplitSpec(0.7, 0, "frame"))
    tr = set(train[0].annotated_frames())
    te = set(test[0].annotated_frames())
    assert len(tr) == 7 and len(te) == 3 and not tr & te


def test_manifest(tmp_path):
    v = video_with_frames([0, 2], n=3)
    recs = manifest_records([v])
    assert len(recs) == 3
    assert recs[1]["frame_index"] == 1
    path = write_manifest([v], tmp_path / "m.jsonl")
    assert len(path.read_text().splitlines()) == 3
