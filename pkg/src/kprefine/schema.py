"""Annotation and detection data model, JSON I/O and validation.

Keypoint order follows a 24-point skiing scheme: 16 body joints, 2 pole
tips and 3 points per ski. Files embed the name list so that a detector exported
with a different ordering fails at load time instead of silently shuffling.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

log = logging.getLogger(__name__)

N_KEYPOINTS = 24

BODY_JOINTS = (
    "head",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "right_hand",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "left_hand",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
)
POLE_POINTS = ("right_pole_tip", "left_pole_tip")
SKI_POINTS = (
    "right_ski_tip",
    "right_ski_binding",
    "right_ski_tail",
    "left_ski_tip",
    "left_ski_binding",
    "left_ski_tail",
)


class SchemaError(ValueError):
    """Malformed file or a value violating a data-model invariant."""


@dataclass(frozen=True)
class KeypointScheme:
    names: tuple[str, ...]
    body_indices: tuple[int, ...]
    torso_endpoints: tuple[int, int]

    def __post_init__(self):
        if len(self.names) != N_KEYPOINTS:
            raise SchemaError(f"keypoint scheme needs {N_KEYPOINTS} names, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("keypoint names must be unique")
        if len(self.body_indices) != 16 or any(not 0 <= i < N_KEYPOINTS for i in self.body_indices):
            raise SchemaError("body_indices must hold 16 indices below 24")
        a, b = self.torso_endpoints
        if a == b or a not in self.body_indices or b not in self.body_indices:
            raise SchemaError("torso_endpoints must be two distinct body joints")

    def index(self, name: str) -> int:
        return self.names.index(name)

    def with_torso(self, first: str, second: str) -> "KeypointScheme":
        return KeypointScheme(self.names, self.body_indices, (self.index(first), self.index(second)))


def _default_scheme() -> KeypointScheme:
    names = BODY_JOINTS + POLE_POINTS + SKI_POINTS
    return KeypointScheme(
        names=names,
        body_indices=tuple(range(len(BODY_JOINTS))),
        torso_endpoints=(names.index("left_shoulder"), names.index("right_hip")),
    )


DEFAULT_SCHEME = _default_scheme()


class FrameCategory(str, enum.Enum):
    REGULAR = "regular"
    OUT_OF_BALANCE = "oob"
    FALL = "fall"


@dataclass(frozen=True)
class GroundTruthKeypoint:
    x: float
    y: float
    visible: bool


@dataclass(frozen=True)
class AnnotatedFrame:
    frame_index: int
    category: FrameCategory
    keypoints: tuple[GroundTruthKeypoint, ...]


@dataclass(frozen=True)
class AnnotatedSequence:
    video_id: str
    image_size: tuple[int, int]
    frames: tuple[AnnotatedFrame, ...]
    scheme: KeypointScheme = field(default=DEFAULT_SCHEME, compare=False)

    def __post_init__(self):
        prev = None
        for fr in self.frames:
            if len(fr.keypoints) != N_KEYPOINTS:
                raise SchemaError(
                    f"frame {fr.frame_index}: expected {N_KEYPOINTS} keypoints, got {len(fr.keypoints)}"
                )
            if prev is not None and fr.frame_index <= prev:
                raise SchemaError(
                    f"frame_idx must be strictly increasing: {fr.frame_index} follows {prev}"
                )
            prev = fr.frame_index

    @property
    def frame_indices(self) -> list[int]:
        return [fr.frame_index for fr in self.frames]


class KeypointCandidate(NamedTuple):
    """One back-rotated detection of one keypoint, in original-image pixels."""

    x: float
    y: float
    c: float
    angle_index: int


@dataclass(frozen=True)
class Person:
    score: float
    # (x, y, confidence) in rotated-canvas pixels; confidence 0 means "not detected"
    keypoints: tuple[tuple[float, float, float], ...]
    # per-keypoint provenance, only present in refined outputs
    sources: Optional[tuple[str, ...]] = None

    @property
    def mean_confidence(self) -> float:
        return sum(k[2] for k in self.keypoints) / len(self.keypoints)


@dataclass(frozen=True)
class DetectionFrame:
    frame_index: int
    persons: tuple[Person, ...]


@dataclass(frozen=True)
class DetectionRecord:
    angle_deg: float
    canvas_size: tuple[int, int]
    frames: tuple[DetectionFrame, ...]
    video_id: str = ""
    image_size: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if not 0.0 <= self.angle_deg < 360.0:
            raise SchemaError(f"angle_deg must lie in [0, 360), got {self.angle_deg}")

    def frame_map(self) -> dict[int, DetectionFrame]:
        return {f.frame_index: f for f in self.frames}


@dataclass(frozen=True)
class DetectionSet:
    video_id: str
    image_size: tuple[int, int]
    records: tuple[DetectionRecord, ...]

    def __post_init__(self):
        angles = [r.angle_deg for r in self.records]
        if len(set(angles)) != len(angles):
            dup = sorted({a for a in angles if angles.count(a) > 1})
            raise SchemaError(f"duplicate rotation angle(s): {dup}")

    @property
    def angles(self) -> list[float]:
        return [r.angle_deg for r in self.records]

    def frame_indices(self) -> list[int]:
        idx: set[int] = set()
        for r in self.records:
            idx.update(f.frame_index for f in r.frames)
        return sorted(idx)


# -- parsing helpers --------------------------------------------------------


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field '{key}'")
    return obj[key]


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{where}: expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise SchemaError(f"{where}: non-finite value")
    return value


def _size(value, where: str) -> tuple[int, int]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise SchemaError(f"{where}: expected [width, height]")
    w, h = (_number(v, where) for v in value)
    if w <= 0 or h <= 0 or w != int(w) or h != int(h):
        raise SchemaError(f"{where}: sizes must be positive integers")
    return int(w), int(h)


def _check_names(names, scheme: KeypointScheme, where: str) -> None:
    if names is None:
        return
    if list(names) != list(scheme.names):
        raise SchemaError(f"{where}: keypoint_names do not match the expected scheme order")


def _triples(raw, where: str) -> list[tuple[float, float, float]]:
    if not isinstance(raw, list) or len(raw) != N_KEYPOINTS:
        n = len(raw) if isinstance(raw, list) else "non-list"
        raise SchemaError(f"{where}.keypoints: expected {N_KEYPOINTS} keypoints, got {n}")
    out = []
    for j, kp in enumerate(raw):
        if not isinstance(kp, (list, tuple)) or len(kp) != 3:
            raise SchemaError(f"{where}.keypoints[{j}]: expected [x, y, v]")
        out.append(tuple(_number(v, f"{where}.keypoints[{j}]") for v in kp))
    return out


# -- annotations ------------------------------------------------------------


def annotations_from_dict(doc: dict, scheme: KeypointScheme = DEFAULT_SCHEME) -> AnnotatedSequence:
    video = _require(doc, "video", "annotation")
    if not isinstance(video, str):
        raise SchemaError("annotation.video: expected a string")
    size = _size(_require(doc, "image_size", "annotation"), "annotation.image_size")
    _check_names(doc.get("keypoint_names"), scheme, "annotation")
    raw_frames = _require(doc, "frames", "annotation")
    if not isinstance(raw_frames, list):
        raise SchemaError("annotation.frames: expected a list")

    frames = []
    seen: set[int] = set()
    for i, fr in enumerate(raw_frames):
        where = f"annotation.frames[{i}]"
        idx = _require(fr, "frame_idx", where)
        if isinstance(idx, bool) or not isinstance(idx, int):
            raise SchemaError(f"{where}.frame_idx: expected an integer")
        if idx in seen:
            raise SchemaError(f"{where}: duplicate frame_idx {idx}")
        seen.add(idx)
        cat = _require(fr, "category", where)
        try:
            category = FrameCategory(cat)
        except ValueError:
            raise SchemaError(f"{where}.category: unknown category {cat!r}") from None
        kps = []
        for j, (x, y, v) in enumerate(_triples(_require(fr, "keypoints", where), where)):
            if v not in (0.0, 1.0):
                raise SchemaError(f"{where}.keypoints[{j}]: visibility must be 0 or 1")
            kps.append(GroundTruthKeypoint(x, y, v == 1.0))
        frames.append(AnnotatedFrame(idx, category, tuple(kps)))
    return AnnotatedSequence(video, size, tuple(frames), scheme)


def annotations_to_dict(seq: AnnotatedSequence) -> dict:
    return {
        "video": seq.video_id,
        "image_size": list(seq.image_size),
        "keypoint_names": list(seq.scheme.names),
        "frames": [
            {
                "frame_idx": fr.frame_index,
                "category": fr.category.value,
                "keypoints": [[k.x, k.y, int(k.visible)] for k in fr.keypoints],
            }
            for fr in seq.frames
        ],
    }


def load_annotations(path, scheme: KeypointScheme = DEFAULT_SCHEME) -> AnnotatedSequence:
    return annotations_from_dict(read_json(path), scheme)


def save_annotations(seq: AnnotatedSequence, path) -> None:
    write_json(annotations_to_dict(seq), path)


# -- detections -------------------------------------------------------------


def detection_record_from_dict(doc: dict, scheme: KeypointScheme = DEFAULT_SCHEME) -> DetectionRecord:
    video = _require(doc, "video", "detection")
    size = _size(_require(doc, "image_size", "detection"), "detection.image_size")
    angle = _number(_require(doc, "angle_deg", "detection"), "detection.angle_deg")
    canvas = _size(_require(doc, "canvas_size", "detection"), "detection.canvas_size")
    _check_names(doc.get("keypoint_names"), scheme, "detection")
    raw_frames = _require(doc, "frames", "detection")
    if not isinstance(raw_frames, list):
        raise SchemaError("detection.frames: expected a list")

    frames = []
    seen: set[int] = set()
    for i, fr in enumerate(raw_frames):
        where = f"detection.frames[{i}]"
        idx = _require(fr, "frame_idx", where)
        if isinstance(idx, bool) or not isinstance(idx, int):
            raise SchemaError(f"{where}.frame_idx: expected an integer")
        if idx in seen:
            raise SchemaError(f"{where}: duplicate frame_idx {idx}")
        seen.add(idx)
        persons = []
        for p, raw in enumerate(_require(fr, "persons", where)):
            pw = f"{where}.persons[{p}]"
            score = _number(_require(raw, "score", pw), f"{pw}.score")
            if not 0.0 <= score <= 1.0:
                raise SchemaError(f"{pw}.score: must lie in [0, 1]")
            kps = _triples(_require(raw, "keypoints", pw), pw)
            for j, (_, _, c) in enumerate(kps):
                if not 0.0 <= c <= 1.0:
                    raise SchemaError(f"{pw}.keypoints[{j}]: confidence must lie in [0, 1]")
            sources = raw.get("sources")
            if sources is not None:
                if len(sources) != N_KEYPOINTS:
                    raise SchemaError(f"{pw}.sources: expected {N_KEYPOINTS} entries")
                sources = tuple(str(s) for s in sources)
            persons.append(Person(score, tuple(kps), sources))
        frames.append(DetectionFrame(idx, tuple(persons)))
    frames.sort(key=lambda f: f.frame_index)
    return DetectionRecord(angle, canvas, tuple(frames), str(video), size)


def detection_record_to_dict(rec: DetectionRecord, scheme: KeypointScheme = DEFAULT_SCHEME) -> dict:
    frames = []
    for fr in rec.frames:
        persons = []
        for p in fr.persons:
            entry = {"score": p.score, "keypoints": [list(k) for k in p.keypoints]}
            if p.sources is not None:
                entry["sources"] = list(p.sources)
            persons.append(entry)
        frames.append({"frame_idx": fr.frame_index, "persons": persons})
    return {
        "video": rec.video_id,
        "image_size": list(rec.image_size),
        "angle_deg": rec.angle_deg,
        "canvas_size": list(rec.canvas_size),
        "keypoint_names": list(scheme.names),
        "frames": frames,
    }


def load_detection_file(path, scheme: KeypointScheme = DEFAULT_SCHEME) -> DetectionRecord:
    return detection_record_from_dict(read_json(path), scheme)


def detection_filename(angle_deg: float) -> str:
    return f"rot_{angle_deg:07.3f}.json"


def load_detections(directory, scheme: KeypointScheme = DEFAULT_SCHEME) -> DetectionSet:
    """Read one detection file per rotation angle from ``directory``."""
    from .rotation import expanded_canvas

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"detection directory not found: {directory}")
    paths = sorted(directory.glob("*.json"))
    if not paths:
        raise SchemaError(f"{directory}: no detection files")
    records = []
    for path in paths:
        try:
            rec = load_detection_file(path, scheme)
        except SchemaError as exc:
            raise SchemaError(f"{path.name}: {exc}") from None
        records.append(rec)

    videos = {r.video_id for r in records}
    sizes = {r.image_size for r in records}
    if len(videos) != 1 or len(sizes) != 1:
        raise SchemaError(f"{directory}: detection files disagree on video/image_size")
    size = sizes.pop()
    for rec in records:
        expect = expanded_canvas(size[0], size[1], rec.angle_deg)
        if max(abs(expect[0] - rec.canvas_size[0]), abs(expect[1] - rec.canvas_size[1])) > 1:
            log.warning(
                "angle %s: canvas_size %s differs from expanded canvas %s; using file value",
                rec.angle_deg, rec.canvas_size, expect,
            )
    records.sort(key=lambda r: r.angle_deg)
    return DetectionSet(videos.pop(), size, tuple(records))


def save_detections(dets: DetectionSet, directory, scheme: KeypointScheme = DEFAULT_SCHEME) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in dets.records:
        write_json(detection_record_to_dict(rec, scheme), directory / detection_filename(rec.angle_deg))


def validate_frame_range(dets: DetectionSet, seq: AnnotatedSequence) -> None:
    """Raise naming the exact frame indices a record is missing or has in excess."""
    expected = set(seq.frame_indices)
    problems = []
    for rec in dets.records:
        have = {f.frame_index for f in rec.frames}
        missing, extra = sorted(expected - have), sorted(have - expected)
        if missing or extra:
            problems.append(f"angle {rec.angle_deg:g}: missing frames {missing}, extra frames {extra}")
    if problems:
        raise SchemaError("detections do not match annotated frames; " + "; ".join(problems))


def select_person(persons: Sequence[Person]) -> Optional[Person]:
    """Highest score wins; ties go to the larger mean keypoint confidence, then list order."""
    best = None
    for p in persons:
        if best is None or (p.score, p.mean_confidence) > (best.score, best.mean_confidence):
            best = p
    return best


# -- json -------------------------------------------------------------------


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None


def write_json(doc, path) -> None:
    # json's float repr is round-trip exact, which the determinism checks rely on
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, ensure_ascii=False)
        fh.write("\n")
