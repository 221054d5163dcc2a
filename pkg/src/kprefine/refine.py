"""Rotation-candidate fusion driven by the alpha-beta-gamma filter.

For each keypoint the filter predicts where it should be in the next frame,
the ``k`` candidates (across all rotations) closest to that prediction are
averaged with confidence weights, and the fused point is fed back to the
filter as its measurement.
"""
from __future__ import annotations

import enum
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

from . import abg
from .rotation import RotationSpec, back_rotate_frame
from .schema import N_KEYPOINTS, DetectionSet, KeypointCandidate

log = logging.getLogger(__name__)

CandidatePool = list[KeypointCandidate]

__all__ = [
    "CandidatePool",
    "FusionConfig",
    "KeypointCandidate",
    "RefineError",
    "RefinedKeypoint",
    "RefinedSequence",
    "Source",
    "build_pools",
    "k_nearest",
    "refine_sequence",
    "refine_trajectory",
    "weighted_mean",
]


class RefineError(ValueError):
    pass


class Source(str, enum.Enum):
    FUSED = "fused"
    PREDICTED = "predicted"


class RefinedKeypoint(NamedTuple):
    x: float
    y: float
    confidence: float
    source: Source


@dataclass(frozen=True)
class FusionConfig:
    k: int = 12
    params: abg.FilterParams = field(default_factory=abg.FilterParams)
    floor: float = 0.0

    def __post_init__(self):
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise RefineError(f"k must be a positive integer, got {self.k!r}")
        if not 0.0 <= self.floor < 1.0:
            raise RefineError(f"confidence floor must lie in [0, 1), got {self.floor}")

    def to_dict(self) -> dict:
        p = self.params
        return {"k": self.k, "alpha": p.alpha, "beta": p.beta, "gamma": p.gamma,
                "dt": p.dt, "confidence_floor": self.floor}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        params = abg.FilterParams(d.get("alpha", 1.0), d.get("beta", 1.0), d.get("gamma", 0.0), d.get("dt", 1.0))
        return cls(int(d.get("k", 12)), params, float(d.get("confidence_floor", 0.0)))


def k_nearest(pool: Sequence[KeypointCandidate], p_e: Sequence[float], k: int) -> list[KeypointCandidate]:
    """The ``min(k, len(pool))`` candidates closest to ``p_e``.

    Ordered by (distance, angle_index), which is also the tie rule.
    """
    if not pool:
        raise RefineError("k_nearest needs a non-empty pool")
    ex, ey = p_e

    def key(c: KeypointCandidate):
        dx, dy = c.x - ex, c.y - ey
        return dx * dx + dy * dy, c.angle_index

    return sorted(pool, key=key)[:k]


def weighted_mean(selected: Sequence[KeypointCandidate]) -> tuple[float, float, float]:
    """Confidence-weighted centroid; plain centroid when every weight is zero.

    The returned confidence is the mean confidence of ``selected``.
    """
    if not selected:
        raise RefineError("weighted_mean needs at least one candidate")
    n = len(selected)
    # explicit loops: builtin sum() changed its float rounding in Python 3.12
    sw = 0.0
    for c in selected:
        sw += c.c
    sx = sy = 0.0
    if sw == 0.0:
        for c in selected:
            sx += c.x
            sy += c.y
        return sx / n, sy / n, 0.0
    # normalizing the weights first keeps a lone candidate's coordinates exact
    for c in selected:
        w = c.c / sw
        sx += w * c.x
        sy += w * c.y
    return sx, sy, sw / n


def refine_trajectory(pools: Sequence[Sequence[KeypointCandidate]], config: FusionConfig) -> list[RefinedKeypoint]:
    params = config.params
    first = next((i for i, pool in enumerate(pools) if pool), None)
    if first is None:
        raise RefineError("every candidate pool is empty; nothing to track")

    # no estimate exists yet, so the first fix uses the whole pool
    x0, y0, c0 = weighted_mean(pools[first])
    state = abg.init_state((x0, y0))
    out = [RefinedKeypoint(x0, y0, 0.0, Source.PREDICTED)] * first
    out.append(RefinedKeypoint(x0, y0, c0, Source.FUSED))

    for pool in pools[first + 1:]:
        p_e = abg.predict(state, params)
        if pool:
            xm, ym, cm = weighted_mean(k_nearest(pool, p_e, config.k))
            state = abg.update(state, params, (xm, ym))
            out.append(RefinedKeypoint(xm, ym, cm, Source.FUSED))
        else:
            state = abg.coast(state, params)
            out.append(RefinedKeypoint(p_e[0], p_e[1], 0.0, Source.PREDICTED))
    return out


def build_pools(
    dets: DetectionSet,
    frame_indices: Optional[Sequence[int]] = None,
    floor: float = 0.0,
) -> list[list[CandidatePool]]:
    """Back-rotated candidates indexed as ``pools[frame][keypoint]``.

    Records are ordered by angle first, so ``angle_index`` does not depend
    on the order records were supplied in.
    """
    if not dets.records:
        raise RefineError(f"detection set for {dets.video_id!r} has no records")
    if frame_indices is None:
        frame_indices = dets.frame_indices()
    pos = {f: i for i, f in enumerate(frame_indices)}
    pools: list[list[CandidatePool]] = [[[] for _ in range(N_KEYPOINTS)] for _ in frame_indices]
    records = sorted(dets.records, key=lambda r: r.angle_deg)
    for ai, rec in enumerate(records):
        spec = RotationSpec(rec.angle_deg, dets.image_size, rec.canvas_size)
        for fr in rec.frames:
            i = pos.get(fr.frame_index)
            if i is None:
                continue
            for j, cand in enumerate(back_rotate_frame(fr, spec, ai, floor)):
                if cand is not None:
                    pools[i][j].append(cand)
    return pools


@dataclass(frozen=True)
class RefinedSequence:
    video_id: str
    image_size: tuple[int, int]
    frame_indices: tuple[int, ...]
    # keypoints[frame][joint]; None for joints never detected anywhere
    keypoints: tuple[tuple[Optional[RefinedKeypoint], ...], ...]
    config: FusionConfig = field(default_factory=FusionConfig)

    def to_dict(self, header: Optional[dict] = None) -> dict:
        """Detection-file shape at angle 0, plus per-keypoint sources and a config header."""
        frames = []
        for idx, row in zip(self.frame_indices, self.keypoints):
            kps, sources = [], []
            for kp in row:
                if kp is None:
                    kps.append([0.0, 0.0, 0.0])
                    sources.append("absent")
                else:
                    kps.append([kp.x, kp.y, kp.confidence])
                    sources.append(kp.source.value)
            score = sum(k[2] for k in kps) / len(kps)
            frames.append({"frame_idx": idx, "persons": [{"score": score, "keypoints": kps, "sources": sources}]})
        cfg = {"fusion": self.config.to_dict()}
        if header:
            cfg.update(header)
        return {
            "video": self.video_id,
            "image_size": list(self.image_size),
            "angle_deg": 0.0,
            "canvas_size": list(self.image_size),
            "config": cfg,
            "frames": frames,
        }


def _track(column: Sequence[CandidatePool], config: FusionConfig) -> Optional[list[RefinedKeypoint]]:
    return refine_trajectory(column, config) if any(column) else None


def refine_pools(
    pools: Sequence[Sequence[CandidatePool]],
    config: FusionConfig,
    video_id: str = "",
    jobs: int = 1,
) -> list[Optional[list[RefinedKeypoint]]]:
    """Run one trajectory per keypoint; ``None`` where a keypoint never appears."""
    columns = [[frame[j] for frame in pools] for j in range(N_KEYPOINTS)]
    if jobs == 1:
        tracks = [_track(c, config) for c in columns]
    else:
        with ProcessPoolExecutor(jobs) as ex:
            tracks = list(ex.map(_track, columns, [config] * len(columns)))
    for j, t in enumerate(tracks):
        if t is None:
            log.warning("%s: keypoint %d has no detections in any frame; emitted as absent", video_id, j)
    return tracks


def refine_sequence(
    dets: DetectionSet,
    config: FusionConfig = FusionConfig(),
    frame_indices: Optional[Sequence[int]] = None,
    pools: Optional[list[list[CandidatePool]]] = None,
    jobs: int = 1,
) -> RefinedSequence:
    if frame_indices is None:
        frame_indices = dets.frame_indices()
    if not frame_indices:
        raise RefineError(f"detection set for {dets.video_id!r} has no frames")
    if pools is None:
        pools = build_pools(dets, frame_indices, config.floor)
    tracks = refine_pools(pools, config, dets.video_id, jobs)
    if all(t is None for t in tracks):
        raise RefineError(f"{dets.video_id}: no keypoint was detected in any frame")
    rows = tuple(
        tuple(None if t is None else t[i] for t in tracks) for i in range(len(frame_indices))
    )
    return RefinedSequence(dets.video_id, tuple(dets.image_size), tuple(frame_indices), rows, config)
