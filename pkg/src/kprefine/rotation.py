"""Mappings between original-image and rotated-canvas pixel coordinates.

Convention: y points down, and a positive angle turns the image
counter-clockwise as displayed (same as ``cv2.getRotationMatrix2D`` and
``PIL.Image.rotate``). The image is rotated about its center onto an
expanded canvas that keeps every original pixel, and the canvas center maps
to the image center.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .schema import DetectionFrame, KeypointCandidate, SchemaError, select_person

_EPS = 1e-9


def _cos_sin(angle_deg: float) -> tuple[float, float]:
    # exact values on quarter turns so canvases and 180-degree reflections are exact
    q, r = divmod(angle_deg, 90.0)
    if r == 0.0:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[int(q) % 4]
    t = math.radians(angle_deg)
    return math.cos(t), math.sin(t)


def expanded_canvas(w: float, h: float, angle_deg: float) -> tuple[int, int]:
    if w <= 0 or h <= 0:
        raise ValueError("image sides must be positive")
    c, s = _cos_sin(angle_deg)
    W = abs(w * c) + abs(h * s)
    H = abs(w * s) + abs(h * c)
    return math.ceil(W - _EPS), math.ceil(H - _EPS)


@dataclass(frozen=True)
class RotationSpec:
    angle_deg: float
    original_size: tuple[int, int]
    canvas_size: tuple[int, int]

    def __post_init__(self):
        if not 0.0 <= self.angle_deg < 360.0:
            raise ValueError(f"angle_deg must lie in [0, 360), got {self.angle_deg}")
        w, h = self.original_size
        c, s = _cos_sin(self.angle_deg)
        W, H = self.canvas_size
        if W < abs(w * c) + abs(h * s) - 1.0 or H < abs(w * s) + abs(h * c) - 1.0:
            raise ValueError(f"canvas {self.canvas_size} cannot hold the rotated {self.original_size} image")

    @classmethod
    def expanded(cls, original_size: tuple[int, int], angle_deg: float) -> "RotationSpec":
        return cls(angle_deg, tuple(original_size), expanded_canvas(*original_size, angle_deg))


def forward_rotate_point(p: Sequence[float], spec: RotationSpec) -> tuple[float, float]:
    c, s = _cos_sin(spec.angle_deg)
    dx = p[0] - spec.original_size[0] / 2
    dy = p[1] - spec.original_size[1] / 2
    return (c * dx + s * dy + spec.canvas_size[0] / 2,
            -s * dx + c * dy + spec.canvas_size[1] / 2)


def forward_rotate_points(pts, spec: RotationSpec) -> np.ndarray:
    """Vectorized ``forward_rotate_point`` for an (N, 2) array."""
    pts = np.asarray(pts, dtype=float)
    c, s = _cos_sin(spec.angle_deg)
    dx = pts[..., 0] - spec.original_size[0] / 2
    dy = pts[..., 1] - spec.original_size[1] / 2
    return np.stack([c * dx + s * dy + spec.canvas_size[0] / 2,
                     -s * dx + c * dy + spec.canvas_size[1] / 2], axis=-1)


def back_rotate_point(p: Sequence[float], spec: RotationSpec) -> tuple[float, float]:
    c, s = _cos_sin(spec.angle_deg)
    dx = p[0] - spec.canvas_size[0] / 2
    dy = p[1] - spec.canvas_size[1] / 2
    return (c * dx - s * dy + spec.original_size[0] / 2,
            s * dx + c * dy + spec.original_size[1] / 2)


def back_rotate_frame(
    frame: DetectionFrame,
    spec: RotationSpec,
    angle_index: int = 0,
    floor: float = 0.0,
    select=select_person,
) -> list[Optional[KeypointCandidate]]:
    """Pick one person and map its keypoints into the original image.

    Keypoints with confidence at or below ``floor`` come back as ``None``.
    """
    person = select(frame.persons)
    if person is None:
        return [None] * 24
    out: list[Optional[KeypointCandidate]] = []
    for x, y, conf in person.keypoints:
        if conf <= floor:
            out.append(None)
            continue
        ox, oy = back_rotate_point((x, y), spec)
        out.append(KeypointCandidate(ox, oy, conf, angle_index))
    return out


@dataclass(frozen=True)
class AngleSet:
    start: float = 0.0
    stop: float = 360.0
    step: float = 10.0

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"angle step must be positive, got {self.step}")
        if not self.stop > self.start:
            raise ValueError("angle range is empty")
        if self.stop - self.start > 360.0 + _EPS:
            raise ValueError("angle range wraps past a full turn")

    @classmethod
    def parse(cls, text: str) -> "AngleSet":
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"expected start:stop:step, got {text!r}")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise ValueError(f"expected start:stop:step numbers, got {text!r}") from None
        return cls(start, stop, step)

    def angles(self) -> list[float]:
        out = []
        i = 0
        while True:
            a = self.start + i * self.step
            if a >= self.stop - _EPS:
                break
            out.append(a % 360.0)
            i += 1
        if len(set(out)) != len(out):
            raise ValueError("angle set repeats an angle modulo 360")
        return out

    def __str__(self) -> str:
        return f"{self.start:g}:{self.stop:g}:{self.step:g}"


def rotation_manifest(image_size: tuple[int, int], angle_set: AngleSet) -> dict:
    """Angles and canvas sizes external renderers must reproduce."""
    w, h = image_size
    if w <= 0 or h <= 0:
        raise SchemaError("image_size must be positive")
    return {
        "image_size": [int(w), int(h)],
        "rotations": [
            {"angle_deg": a, "canvas_size": list(expanded_canvas(w, h, a))}
            for a in angle_set.angles()
        ],
    }
