import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_person
from kprefine.schema import (
    DEFAULT_SCHEME,
    FrameCategory,
    KeypointScheme,
    SchemaError,
    annotations_from_dict,
    annotations_to_dict,
    detection_record_to_dict,
    load_annotations,
    load_detection_file,
    load_detections,
    save_annotations,
    select_person,
    validate_frame_range,
    write_json,
)
from kprefine.rotation import expanded_canvas


def annotation_doc(frame_ids=(0,), category="fall", n_kp=24):
    return {
        "video": "clip",
        "image_size": [640, 480],
        "keypoint_names": list(DEFAULT_SCHEME.names),
        "frames": [
            {"frame_idx": i, "category": category, "keypoints": [[10.0 + j, 20.5, j % 2] for j in range(n_kp)]}
            for i in frame_ids
        ],
    }


def detection_doc(angle, frame_ids=(0, 1), video="clip"):
    canvas = expanded_canvas(640, 480, angle)
    return {
        "video": video,
        "image_size": [640, 480],
        "angle_deg": angle,
        "canvas_size": list(canvas),
        "frames": [
            {"frame_idx": i, "persons": [{"score": 0.8, "keypoints": [[1.5, 2.5, 0.7]] * 24}]}
            for i in frame_ids
        ],
    }


def test_default_scheme_shape():
    s = DEFAULT_SCHEME
    assert len(s.names) == 24 and len(set(s.names)) == 24
    assert len(s.body_indices) == 16
    assert s.names[s.torso_endpoints[0]] == "left_shoulder"
    assert s.names[s.torso_endpoints[1]] == "right_hip"


def test_scheme_rejects_bad_torso():
    with pytest.raises(SchemaError):
        KeypointScheme(DEFAULT_SCHEME.names, DEFAULT_SCHEME.body_indices, (3, 3))
    with pytest.raises(SchemaError):
        KeypointScheme(DEFAULT_SCHEME.names, DEFAULT_SCHEME.body_indices, (3, 20))


def test_minimal_annotation_loads(tmp_path):
    write_json(annotation_doc(), tmp_path / "a.json")
    seq = load_annotations(tmp_path / "a.json")
    assert len(seq.frames) == 1
    assert seq.frames[0].category is FrameCategory.FALL
    assert len(seq.frames[0].keypoints) == 24
    assert seq.frames[0].keypoints[1].visible and not seq.frames[0].keypoints[0].visible


def test_unordered_frames_rejected():
    with pytest.raises(SchemaError, match="strictly increasing"):
        annotations_from_dict(annotation_doc(frame_ids=(0, 2, 1)))


def test_duplicate_frame_rejected():
    with pytest.raises(SchemaError, match="duplicate frame_idx"):
        annotations_from_dict(annotation_doc(frame_ids=(0, 0)))


def test_wrong_keypoint_count_names_count():
    with pytest.raises(SchemaError, match="expected 24 keypoints, got 23"):
        annotations_from_dict(annotation_doc(n_kp=23))


@pytest.mark.parametrize("field", ["video", "image_size", "frames"])
def test_missing_field_is_named(field):
    doc = annotation_doc()
    del doc[field]
    with pytest.raises(SchemaError, match=field):
        annotations_from_dict(doc)


def test_mismatched_names_fail_loudly():
    doc = annotation_doc()
    doc["keypoint_names"] = list(reversed(doc["keypoint_names"]))
    with pytest.raises(SchemaError, match="keypoint_names"):
        annotations_from_dict(doc)


def test_bad_category_and_visibility():
    doc = annotation_doc(category="crash")
    with pytest.raises(SchemaError, match="category"):
        annotations_from_dict(doc)
    doc = annotation_doc()
    doc["frames"][0]["keypoints"][3][2] = 0.5
    with pytest.raises(SchemaError, match="visibility"):
        annotations_from_dict(doc)


coord = st.floats(-1e4, 1e4, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.lists(st.tuples(coord, coord, st.booleans()), min_size=24, max_size=24),
                       st.sampled_from(["regular", "oob", "fall"])), min_size=1, max_size=5)
)
def test_annotation_round_trip(tmp_path_factory, frames):
    doc = {
        "video": "rt",
        "image_size": [320, 240],
        "keypoint_names": list(DEFAULT_SCHEME.names),
        "frames": [
            {"frame_idx": 3 * i, "category": cat, "keypoints": [[x, y, int(v)] for x, y, v in kps]}
            for i, (kps, cat) in enumerate(frames)
        ],
    }
    seq = annotations_from_dict(doc)
    path = tmp_path_factory.mktemp("rt") / "a.json"
    save_annotations(seq, path)
    again = load_annotations(path)
    assert again == seq
    assert annotations_to_dict(again) == annotations_to_dict(seq)


def test_detection_round_trip(tmp_path):
    write_json(detection_doc(30.0), tmp_path / "d.json")
    rec = load_detection_file(tmp_path / "d.json")
    write_json(detection_record_to_dict(rec), tmp_path / "e.json")
    assert load_detection_file(tmp_path / "e.json") == rec


def test_detection_confidence_range(tmp_path):
    doc = detection_doc(0.0)
    doc["frames"][0]["persons"][0]["keypoints"][0] = [1, 2, 1.5]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="confidence"):
        load_detection_file(tmp_path / "bad.json")


def test_load_detections_36_angles_sorted(tmp_path):
    for a in reversed(range(0, 360, 10)):
        write_json(detection_doc(float(a)), tmp_path / f"det_{a}.json")
    dets = load_detections(tmp_path)
    assert len(dets.records) == 36
    assert dets.angles == [float(a) for a in range(0, 360, 10)]


def test_load_detections_single_angle(tmp_path):
    write_json(detection_doc(0.0), tmp_path / "only.json")
    assert len(load_detections(tmp_path).records) == 1


def test_duplicate_angle_rejected(tmp_path):
    write_json(detection_doc(90.0), tmp_path / "a.json")
    write_json(detection_doc(90.0), tmp_path / "b.json")
    with pytest.raises(SchemaError, match="duplicate rotation angle"):
        load_detections(tmp_path)


def test_canvas_mismatch_only_warns(tmp_path, caplog):
    doc = detection_doc(30.0)
    doc["canvas_size"] = [900, 900]
    write_json(doc, tmp_path / "a.json")
    dets = load_detections(tmp_path)
    assert dets.records[0].canvas_size == (900, 900)
    assert "canvas_size" in caplog.text


def test_angle_out_of_range(tmp_path):
    write_json(detection_doc(360.0), tmp_path / "a.json")
    with pytest.raises(SchemaError, match="angle_deg"):
        load_detections(tmp_path)


def test_frame_range_validation_names_frames(tmp_path):
    write_json(detection_doc(0.0, frame_ids=(0, 1, 5)), tmp_path / "a.json")
    dets = load_detections(tmp_path)
    seq = annotations_from_dict(annotation_doc(frame_ids=(0, 1, 2)))
    with pytest.raises(SchemaError, match=r"missing frames \[2\], extra frames \[5\]"):
        validate_frame_range(dets, seq)
    seq_ok = annotations_from_dict(annotation_doc(frame_ids=(0, 1, 5)))
    validate_frame_range(dets, seq_ok)


def test_select_person_examples():
    assert select_person([]) is None
    a, b = make_person(0.4), make_person(0.9)
    assert select_person([a, b]) is b
    lo, hi = make_person(0.5, conf=0.3), make_person(0.5, conf=0.8)
    assert select_person([lo, hi]) is hi
    # full tie: first in list order
    x, y = make_person(0.5, conf=0.5, xy=(1, 1)), make_person(0.5, conf=0.5, xy=(2, 2))
    assert select_person([x, y]) is x


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=6, unique=True))
def test_select_person_permutation_invariant(keys):
    persons = [make_person(s / 20, conf=c / 20) for s, c in keys]
    chosen = select_person(persons)
    for perm in itertools.islice(itertools.permutations(persons), 24):
        assert select_person(list(perm)) is chosen
