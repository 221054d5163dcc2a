"""Synthetic skier sequences and a rotation-aware detector noise model.

A rigid 24-point skeleton is moved along a piecewise-kinematic root path
and turned by an orientation profile. The simulated detector works well
when the skier looks upright in the rotated canvas and degrades towards
horizontal and upside-down poses, where it misses the person or, with
``mirror_prob``, returns a point-mirrored pose instead.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .rotation import AngleSet, RotationSpec, expanded_canvas, forward_rotate_points
from .schema import (
    DEFAULT_SCHEME,
    N_KEYPOINTS,
    AnnotatedFrame,
    AnnotatedSequence,
    DetectionFrame,
    DetectionRecord,
    DetectionSet,
    FrameCategory,
    GroundTruthKeypoint,
    KeypointScheme,
    Person,
    save_annotations,
    save_detections,
)

# upright skeleton in body-height units, root at the hip center, y down
TEMPLATE = np.array([
    (0.00, -0.66),  # head
    (0.00, -0.52),  # neck
    (-0.12, -0.46), (-0.19, -0.29), (-0.22, -0.14), (-0.23, -0.09),  # right arm
    (0.12, -0.46), (0.19, -0.29), (0.22, -0.14), (0.23, -0.09),  # left arm
    (-0.08, 0.00), (-0.10, 0.24), (-0.10, 0.48),  # right leg
    (0.08, 0.00), (0.10, 0.24), (0.10, 0.48),  # left leg
    (-0.36, 0.50), (0.36, 0.50),  # pole tips
    (0.35, 0.53), (-0.10, 0.53), (-0.50, 0.53),  # right ski
    (0.40, 0.56), (0.05, 0.56), (-0.45, 0.56),  # left ski
])


class SimulationError(ValueError):
    pass


def _rotate(offsets: np.ndarray, deg: float) -> np.ndarray:
    # same screen convention as rotation.forward_rotate_point
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.stack([c * offsets[:, 0] + s * offsets[:, 1], -s * offsets[:, 0] + c * offsets[:, 1]], axis=1)


def wrap_deg(a):
    """Map angles to (-180, 180]."""
    a = np.mod(np.asarray(a, dtype=float) + 180.0, 360.0) - 180.0
    return np.where(a == -180.0, 180.0, a)


@dataclass(frozen=True)
class Segment:
    frames: int
    velocity: tuple[float, float] = (0.0, 0.0)
    acceleration: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class TrajectorySpec:
    n_frames: int = 60
    image_size: tuple[int, int] = (1280, 720)
    body_height: float = 220.0
    start: tuple[float, float] = (260.0, 300.0)
    segments: tuple[Segment, ...] = (Segment(60, (9.0, 1.5)),)
    # (frame, degrees) keyframes, linearly interpolated; positive turns the body counter-clockwise on screen
    orientation: tuple[tuple[float, float], ...] = ((0, 0.0), (24, 0.0), (34, 65.0), (44, 160.0), (59, 175.0))
    occlusion_prob: float = 0.0
    video_id: str = "synthetic"

    def __post_init__(self):
        if self.n_frames < 1:
            raise SimulationError("n_frames must be at least 1")
        if not self.orientation:
            raise SimulationError("orientation profile needs at least one keyframe")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise SimulationError("occlusion_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySpec":
        d = dict(d)
        if "segments" in d:
            d["segments"] = tuple(
                Segment(int(s["frames"]), tuple(s.get("velocity", (0, 0))), tuple(s.get("acceleration", (0, 0))))
                for s in d["segments"]
            )
        for key in ("image_size", "start"):
            if key in d:
                d[key] = tuple(d[key])
        if "orientation" in d:
            d["orientation"] = tuple(tuple(p) for p in d["orientation"])
        return cls(**d)

    def orientations(self) -> np.ndarray:
        frames, degs = zip(*sorted(self.orientation))
        return np.interp(np.arange(self.n_frames), frames, degs)

    def root_path(self) -> np.ndarray:
        """Root position per frame; each segment starts at its own velocity."""
        plan = [seg for seg in self.segments for _ in range(seg.frames)] or [Segment(1)]
        pos = np.array(self.start, dtype=float)
        out, vel, prev = [], None, None
        for i in range(self.n_frames):
            out.append(pos.copy())
            seg = plan[min(i, len(plan) - 1)]
            if seg is not prev:
                vel, prev = np.array(seg.velocity, dtype=float), seg
            acc = np.array(seg.acceleration, dtype=float)
            pos = pos + vel + 0.5 * acc
            vel = vel + acc
        return np.array(out)


def categorize(orientations: Sequence[float]) -> list[FrameCategory]:
    """Tilt up to 45 deg is regular, up to 90 deg out-of-balance, beyond is a fall.

    Once a fall happens every later frame stays a fall.
    """
    out, fallen = [], False
    for a in np.abs(wrap_deg(orientations)):
        if fallen or a > 90.0:
            fallen = True
            out.append(FrameCategory.FALL)
        elif a > 45.0:
            out.append(FrameCategory.OUT_OF_BALANCE)
        else:
            out.append(FrameCategory.REGULAR)
    return out


def skeleton_positions(spec: TrajectorySpec) -> np.ndarray:
    """Ground-truth keypoints, shape (n_frames, 24, 2)."""
    roots = spec.root_path()
    offsets = TEMPLATE * spec.body_height
    return np.stack([root + _rotate(offsets, deg) for root, deg in zip(roots, spec.orientations())])


def gen_ground_truth(spec: TrajectorySpec, seed: int = 0, scheme: KeypointScheme = DEFAULT_SCHEME) -> AnnotatedSequence:
    pts = skeleton_positions(spec)
    w, h = spec.image_size
    if pts[..., 0].min() < 0 or pts[..., 1].min() < 0 or pts[..., 0].max() > w or pts[..., 1].max() > h:
        raise SimulationError("trajectory leaves the image; adjust start, segments or body_height")
    rng = np.random.default_rng(seed)
    hidden = rng.random(pts.shape[:2]) < spec.occlusion_prob
    frames = []
    for i, (kp, cat) in enumerate(zip(pts, categorize(spec.orientations()))):
        frames.append(AnnotatedFrame(
            i, cat, tuple(GroundTruthKeypoint(float(x), float(y), not hidden[i, j]) for j, (x, y) in enumerate(kp))
        ))
    return AnnotatedSequence(spec.video_id, tuple(spec.image_size), tuple(frames), scheme)


def body_orientation(frame: AnnotatedFrame, scheme: KeypointScheme = DEFAULT_SCHEME) -> float:
    """Screen tilt of the hip-center-to-neck axis; 0 is upright, positive counter-clockwise."""
    k = frame.keypoints
    neck = k[scheme.index("neck")]
    rh, lh = k[scheme.index("right_hip")], k[scheme.index("left_hip")]
    dx = neck.x - (rh.x + lh.x) / 2
    dy = neck.y - (rh.y + lh.y) / 2
    # upright means the neck is straight above (dy < 0); turning counter-clockwise moves it left
    return float(math.degrees(math.atan2(-dx, -dy)))


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 3.0
    p_upright: float = 0.98
    p_inverted: float = 0.0
    upright_halfwidth: float = 40.0
    falloff: float = 50.0
    keypoint_dropout: float = 0.03
    outlier_prob: float = 0.04
    outlier_distance: float = 70.0
    mirror_prob: float = 0.0
    conf_max: float = 0.95
    conf_min: float = 0.05
    conf_scale: float = 10.0

    def __post_init__(self):
        for name in ("p_upright", "p_inverted", "keypoint_dropout", "outlier_prob", "mirror_prob", "conf_max", "conf_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SimulationError(f"{name} must lie in [0, 1], got {v}")
        if self.sigma < 0 or self.falloff < 0 or self.upright_halfwidth < 0 or self.conf_scale <= 0:
            raise SimulationError("noise scales must be non-negative")

    def success_probability(self, apparent_deg) -> np.ndarray:
        a = np.abs(wrap_deg(apparent_deg))
        if self.falloff == 0:
            t = (a > self.upright_halfwidth).astype(float)
        else:
            t = np.clip((a - self.upright_halfwidth) / self.falloff, 0.0, 1.0)
        return self.p_upright + (self.p_inverted - self.p_upright) * t

    def confidence(self, err: np.ndarray) -> np.ndarray:
        return self.conf_min + (self.conf_max - self.conf_min) * np.exp(-0.5 * (err / self.conf_scale) ** 2)

    def to_dict(self) -> dict:
        return asdict(self)


def _simulate_record(angle, pts, orientations, frame_indices, image_size, noise, seed, video_id) -> DetectionRecord:
    w, h = image_size
    rng = np.random.default_rng([seed, int(round(angle * 1000))])
    spec = RotationSpec(angle, (w, h), expanded_canvas(w, h, angle))
    p_ok = noise.success_probability(orientations + angle)
    frames = []
    for f, idx in enumerate(frame_indices):
        u_person, u_mirror = rng.random(2)
        noise_xy = rng.normal(0.0, 1.0, (N_KEYPOINTS, 2)) * noise.sigma
        u_drop = rng.random(N_KEYPOINTS)
        u_out = rng.random(N_KEYPOINTS)
        out_dir = rng.uniform(0.0, 2 * math.pi, N_KEYPOINTS)
        canvas = forward_rotate_points(pts[f], spec)
        if u_person < p_ok[f]:
            det = canvas + noise_xy
            is_out = u_out < noise.outlier_prob
            det[is_out] += noise.outlier_distance * np.stack([np.cos(out_dir), np.sin(out_dir)], axis=1)[is_out]
        elif u_mirror < noise.mirror_prob:
            # pose read the wrong way up: mirrored through the body center
            det = 2 * canvas.mean(axis=0) - canvas + noise_xy
        else:
            frames.append(DetectionFrame(idx, ()))
            continue
        conf = noise.confidence(np.linalg.norm(det - canvas, axis=1))
        conf = np.where(u_drop < noise.keypoint_dropout, 0.0, conf)
        kps = tuple(
            (float(x), float(y), float(c)) if c > 0 else (0.0, 0.0, 0.0) for (x, y), c in zip(det, conf)
        )
        frames.append(DetectionFrame(idx, (Person(float(np.mean(conf)), kps),)))
    return DetectionRecord(angle, spec.canvas_size, tuple(frames), video_id, (w, h))


def simulate_detections(
    gt: AnnotatedSequence,
    angle_set: AngleSet = AngleSet(),
    noise: NoiseModel = NoiseModel(),
    seed: int = 0,
    orientations: Optional[Sequence[float]] = None,
    jobs: int = 1,
) -> DetectionSet:
    """One detection record per angle in ``angle_set``.

    Each angle draws from its own seeded stream, so a record does not
    depend on which other angles are simulated or on ``jobs``.
    """
    if orientations is None:
        orientations = [body_orientation(f, gt.scheme) for f in gt.frames]
    orientations = np.asarray(orientations, dtype=float)
    pts = np.array([[(k.x, k.y) for k in f.keypoints] for f in gt.frames], dtype=float).reshape(-1, N_KEYPOINTS, 2)
    angles = angle_set.angles()
    args = (pts, orientations, gt.frame_indices, tuple(gt.image_size), noise, seed, gt.video_id)
    if jobs == 1:
        records = [_simulate_record(a, *args) for a in angles]
    else:
        with ProcessPoolExecutor(jobs) as ex:
            records = list(ex.map(_simulate_record, angles, *[[a] * len(angles) for a in args]))
    return DetectionSet(gt.video_id, tuple(gt.image_size), tuple(records))


def write_dataset(directory, gt: AnnotatedSequence, dets: DetectionSet) -> Path:
    """``annotations.json`` plus ``detections/rot_*.json`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_annotations(gt, directory / "annotations.json")
    save_detections(dets, directory / "detections", gt.scheme)
    return directory


@dataclass(frozen=True)
class Scenario:
    """A complete simulation recipe, as stored in a spec file."""

    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseModel = field(default_factory=NoiseModel)
    angles: AngleSet = field(default_factory=AngleSet)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        traj = TrajectorySpec.from_dict(d.get("trajectory", {}))
        noise = NoiseModel(**d.get("noise", {}))
        angles = AngleSet.parse(d["angles"]) if "angles" in d else AngleSet()
        return cls(traj, noise, angles)

    def to_dict(self) -> dict:
        return {"trajectory": self.trajectory.to_dict(), "noise": self.noise.to_dict(), "angles": str(self.angles)}

    def run(self, seed: int, jobs: int = 1) -> tuple[AnnotatedSequence, DetectionSet]:
        gt = gen_ground_truth(self.trajectory, seed)
        return gt, simulate_detections(gt, self.angles, self.noise, seed, self.trajectory.orientations(), jobs)


def detections_from_layers(
    video_id: str,
    image_size: tuple[int, int],
    frame_indices: Sequence[int],
    layers: Sequence[tuple[float, Sequence[Optional[np.ndarray]]]],
) -> DetectionSet:
    """Build a detection set from poses given in original-image coordinates.

    Each layer is ``(angle_deg, poses)`` with one entry per frame: ``None``
    for no person, else a (24, 3) array of x, y, confidence. Poses are
    forward-rotated onto that angle's expanded canvas, as a detector
    running on the rotated image would report them.
    """
    w, h = image_size
    records = []
    for angle, poses in layers:
        spec = RotationSpec.expanded((w, h), angle)
        frames = []
        for idx, pose in zip(frame_indices, poses):
            if pose is None:
                frames.append(DetectionFrame(idx, ()))
                continue
            pose = np.asarray(pose, dtype=float)
            canvas = forward_rotate_points(pose[:, :2], spec)
            kps = tuple(
                (float(x), float(y), float(c)) if c > 0 else (0.0, 0.0, 0.0)
                for (x, y), c in zip(canvas, pose[:, 2])
            )
            frames.append(DetectionFrame(idx, (Person(float(pose[:, 2].mean()), kps),)))
        records.append(DetectionRecord(angle, spec.canvas_size, tuple(frames), video_id, (w, h)))
    return DetectionSet(video_id, (w, h), tuple(records))
