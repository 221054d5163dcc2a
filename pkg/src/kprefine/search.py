"""Exhaustive grid search over (k, alpha, beta, gamma)."""
from __future__ import annotations

import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .abg import FilterParams
from .metrics import CATEGORIES, MetricConfig, MetricError, average_precision, pck, predictions_from_refined
from .refine import FusionConfig, build_pools, refine_sequence
from .schema import AnnotatedSequence, DetectionSet, validate_frame_range


def _gains() -> tuple[float, ...]:
    return tuple(round(0.1 * i, 10) for i in range(11))


@dataclass(frozen=True)
class GridSpec:
    k_values: tuple[int, ...] = tuple(range(1, 37))
    alpha_values: tuple[float, ...] = field(default_factory=_gains)
    beta_values: tuple[float, ...] = field(default_factory=_gains)
    gamma_values: tuple[float, ...] = field(default_factory=_gains)
    objective: str = "pck"
    category: Optional[str] = None
    floor: float = 0.0

    def __post_init__(self):
        for name in ("k_values", "alpha_values", "beta_values", "gamma_values"):
            if not getattr(self, name):
                raise ValueError(f"grid {name} is empty")
        if any(isinstance(k, bool) or int(k) != k or k < 1 for k in self.k_values):
            raise ValueError("k values must be positive integers")
        for v in itertools.chain(self.alpha_values, self.beta_values, self.gamma_values):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"gain {v} outside [0, 1]")
        if self.objective not in ("pck", "ap"):
            raise ValueError(f"objective must be 'pck' or 'ap', got {self.objective!r}")
        if self.category is not None and self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    def points(self) -> list[FusionConfig]:
        return [
            FusionConfig(int(k), FilterParams(a, b, g), self.floor)
            for k, a, b, g in itertools.product(self.k_values, self.alpha_values, self.beta_values, self.gamma_values)
        ]

    def to_dict(self) -> dict:
        return {
            "k_values": list(self.k_values),
            "alpha_values": list(self.alpha_values),
            "beta_values": list(self.beta_values),
            "gamma_values": list(self.gamma_values),
            "objective": self.objective,
            "category": self.category,
            "confidence_floor": self.floor,
        }


@dataclass(frozen=True)
class SearchResult:
    best: FusionConfig
    best_score: float
    table: tuple[tuple[int, float, float, float, float], ...]

    def to_csv(self) -> str:
        lines = ["k,alpha,beta,gamma,score"]
        lines += [f"{k},{a!r},{b!r},{g!r},{s!r}" for k, a, b, g, s in self.table]
        return "\n".join(lines) + "\n"


@dataclass
class PreparedVideo:
    dets: DetectionSet
    seq: AnnotatedSequence
    pools: list


def prepare(detections: Sequence[DetectionSet], annotations: Sequence[AnnotatedSequence], floor: float = 0.0) -> list[PreparedVideo]:
    """Back-rotate every video once; the pools do not depend on the filter gains."""
    if not detections or len(detections) != len(annotations):
        raise ValueError("need one detection set per annotated sequence, and at least one")
    out = []
    for dets, seq in zip(detections, annotations):
        validate_frame_range(dets, seq)
        out.append(PreparedVideo(dets, seq, build_pools(dets, seq.frame_indices, floor)))
    return out


def objective_eval(
    config: FusionConfig,
    videos: Sequence[PreparedVideo],
    metric_config: MetricConfig = MetricConfig(),
    objective: str = "pck",
    category: Optional[str] = None,
) -> float:
    pairs = []
    for v in videos:
        refined = refine_sequence(v.dets, config, v.seq.frame_indices, v.pools)
        pairs.append((predictions_from_refined(refined), v.seq))
    cat = category or "all"
    if objective == "pck":
        value = pck(pairs, metric_config).value[cat]
    else:
        value = average_precision(pairs, metric_config).value[cat]
    if value is None:
        raise MetricError(f"objective undefined: category {cat!r} has nothing to evaluate")
    return value


_WORKER: dict = {}


def _init_worker(videos, metric_config, objective, category):
    _WORKER.update(videos=videos, metric_config=metric_config, objective=objective, category=category)


def _eval_point(config: FusionConfig) -> float:
    w = _WORKER
    return objective_eval(config, w["videos"], w["metric_config"], w["objective"], w["category"])


def grid_search(
    detections: Sequence[DetectionSet],
    annotations: Sequence[AnnotatedSequence],
    grid: GridSpec = GridSpec(),
    metric_config: MetricConfig = MetricConfig(),
    jobs: int = 1,
) -> SearchResult:
    """Score every grid point on the pooled videos and return the best.

    Ties go to smaller k, then smaller gamma, beta and alpha.
    """
    videos = prepare(detections, annotations, grid.floor)
    points = grid.points()
    if jobs == 1:
        _init_worker(videos, metric_config, grid.objective, grid.category)
        scores = [_eval_point(p) for p in points]
    else:
        jobs = jobs or os.cpu_count() or 1
        chunk = max(1, len(points) // (4 * jobs))
        with ProcessPoolExecutor(jobs, initializer=_init_worker,
                                 initargs=(videos, metric_config, grid.objective, grid.category)) as ex:
            scores = list(ex.map(_eval_point, points, chunksize=chunk))

    table = tuple(
        (p.k, p.params.alpha, p.params.beta, p.params.gamma, s) for p, s in zip(points, scores)
    )
    i_best = min(
        range(len(points)),
        key=lambda i: (-scores[i], points[i].k, points[i].params.gamma, points[i].params.beta, points[i].params.alpha),
    )
    return SearchResult(points[i_best], scores[i_best], table)
