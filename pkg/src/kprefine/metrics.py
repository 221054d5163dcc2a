"""PCK and OKS-based AP, overall and per frame category.

Predictions are single-person poses keyed by frame index. A frame's
ranking score for AP is the mean keypoint confidence over the evaluated
subset (missing keypoints count as 0); frames scoring 0 carry no detection.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .schema import (
    DEFAULT_SCHEME,
    N_KEYPOINTS,
    AnnotatedFrame,
    AnnotatedSequence,
    DetectionRecord,
    FrameCategory,
    KeypointScheme,
    select_person,
)

log = logging.getLogger(__name__)

CATEGORIES = ("all", "reg", "oob", "fall")
_CAT_KEY = {FrameCategory.REGULAR: "reg", FrameCategory.OUT_OF_BALANCE: "oob", FrameCategory.FALL: "fall"}


class MetricError(ValueError):
    pass


def _default_thresholds() -> tuple[float, ...]:
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class MetricConfig:
    pck_fraction: float = 0.2
    subset: str = "body"
    torso_endpoints: tuple[int, int] = DEFAULT_SCHEME.torso_endpoints
    ap_thresholds: tuple[float, ...] = field(default_factory=_default_thresholds)
    oks_kappa: float | tuple[float, ...] = 0.1
    scheme: KeypointScheme = field(default=DEFAULT_SCHEME, compare=False, repr=False)

    def __post_init__(self):
        if not self.pck_fraction > 0:
            raise MetricError("pck_fraction must be positive")
        if self.subset not in ("body", "all"):
            raise MetricError(f"subset must be 'body' or 'all', got {self.subset!r}")
        t = self.ap_thresholds
        if not t or any(not 0 < v <= 1 for v in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise MetricError("ap_thresholds must be strictly increasing within (0, 1]")
        kappa = np.broadcast_to(np.asarray(self.oks_kappa, dtype=float), (N_KEYPOINTS,))
        if np.any(kappa <= 0):
            raise MetricError("oks_kappa must be positive")

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(self.scheme.body_indices) if self.subset == "body" else tuple(range(N_KEYPOINTS))

    @property
    def kappa(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.oks_kappa, dtype=float), (N_KEYPOINTS,))

    def to_dict(self) -> dict:
        kappa = self.oks_kappa if isinstance(self.oks_kappa, (int, float)) else list(self.oks_kappa)
        return {
            "pck_fraction": self.pck_fraction,
            "subset": self.subset,
            "torso_endpoints": [self.scheme.names[i] for i in self.torso_endpoints],
            "ap_thresholds": list(self.ap_thresholds),
            "oks_kappa": kappa,
        }

    @classmethod
    def from_dict(cls, d: dict, scheme: KeypointScheme = DEFAULT_SCHEME) -> "MetricConfig":
        ends = d.get("torso_endpoints")
        ends = scheme.torso_endpoints if ends is None else tuple(
            scheme.index(e) if isinstance(e, str) else int(e) for e in ends
        )
        kappa = d.get("oks_kappa", 0.1)
        return cls(
            pck_fraction=float(d.get("pck_fraction", 0.2)),
            subset=d.get("subset", "body"),
            torso_endpoints=ends,
            ap_thresholds=tuple(d.get("ap_thresholds", _default_thresholds())),
            oks_kappa=kappa if isinstance(kappa, (int, float)) else tuple(kappa),
            scheme=scheme,
        )


@dataclass(frozen=True)
class PosePrediction:
    coords: np.ndarray  # (24, 2); NaN where the keypoint is missing
    conf: np.ndarray  # (24,)

    @classmethod
    def from_triples(cls, triples, present=None) -> "PosePrediction":
        arr = np.asarray(triples, dtype=float).reshape(N_KEYPOINTS, 3)
        coords = arr[:, :2].copy()
        mask = arr[:, 2] > 0 if present is None else np.asarray(present, dtype=bool)
        coords[~mask] = np.nan
        return cls(coords, np.where(mask, arr[:, 2], 0.0))


Predictions = Mapping[int, PosePrediction]


def predictions_from_record(rec: DetectionRecord, floor: float = 0.0) -> dict[int, PosePrediction]:
    """Poses from one detection record, back-rotated into the original frame.

    Refined outputs (records carrying ``sources``) keep predicted-only
    keypoints even though their confidence is 0.
    """
    from .rotation import RotationSpec, back_rotate_point

    spec = RotationSpec(rec.angle_deg, rec.image_size, rec.canvas_size)
    out = {}
    for fr in rec.frames:
        person = select_person(fr.persons)
        if person is None:
            continue
        if person.sources is not None:
            present = [s != "absent" for s in person.sources]
        else:
            present = [c > floor for _, _, c in person.keypoints]
        triples = []
        for (x, y, c), keep in zip(person.keypoints, present):
            bx, by = back_rotate_point((x, y), spec) if keep else (x, y)
            triples.append((bx, by, c))
        out[fr.frame_index] = PosePrediction.from_triples(triples, present)
    return out


def predictions_from_refined(refined) -> dict[int, PosePrediction]:
    out = {}
    for idx, row in zip(refined.frame_indices, refined.keypoints):
        triples = [(0.0, 0.0, 0.0) if k is None else (k.x, k.y, k.confidence) for k in row]
        out[idx] = PosePrediction.from_triples(triples, [k is not None for k in row])
    return out


# -- torso scale ------------------------------------------------------------


def torso_diameter(frame: AnnotatedFrame, endpoints: tuple[int, int], fallback: Optional[float] = None) -> float:
    a, b = (frame.keypoints[i] for i in endpoints)
    if a.visible and b.visible:
        return math.hypot(a.x - b.x, a.y - b.y)
    if fallback is None:
        raise MetricError(f"frame {frame.frame_index}: torso endpoints hidden and no fallback scale")
    return fallback


def torso_diameters(seq: AnnotatedSequence, endpoints: tuple[int, int]) -> np.ndarray:
    """Per-frame torso diameters; hidden endpoints fall back to the sequence median.

    A value of 0 marks a frame with coincident endpoints, unusable for scaling.
    """
    direct = []
    for fr in seq.frames:
        a, b = (fr.keypoints[i] for i in endpoints)
        direct.append(math.hypot(a.x - b.x, a.y - b.y) if a.visible and b.visible else None)
    usable = [d for d in direct if d is not None and d > 0]
    if not usable:
        raise MetricError(f"{seq.video_id}: no frame shows both torso endpoints")
    median = float(np.median(usable))
    return np.array([median if d is None else d for d in direct])


# -- evaluation arrays ------------------------------------------------------


@dataclass
class _Batch:
    gt: np.ndarray  # (F, 24, 2)
    vis: np.ndarray  # (F, 24) bool
    pred: np.ndarray  # (F, 24, 2) NaN where missing
    conf: np.ndarray  # (F, 24)
    has_pred: np.ndarray  # (F,) bool, a pose was reported for the frame
    torso: np.ndarray  # (F,)
    cats: np.ndarray  # (F,) str


def _stack(pairs: Sequence[tuple[Predictions, AnnotatedSequence]], config: MetricConfig) -> _Batch:
    gt, vis, pred, conf, has, torso, cats = [], [], [], [], [], [], []
    for preds, seq in pairs:
        torso.append(torso_diameters(seq, config.torso_endpoints))
        for fr in seq.frames:
            gt.append([(k.x, k.y) for k in fr.keypoints])
            vis.append([k.visible for k in fr.keypoints])
            cats.append(_CAT_KEY[fr.category])
            p = preds.get(fr.frame_index)
            if p is None:
                pred.append(np.full((N_KEYPOINTS, 2), np.nan))
                conf.append(np.zeros(N_KEYPOINTS))
                has.append(False)
            else:
                pred.append(p.coords)
                conf.append(p.conf)
                has.append(True)
    if not gt:
        raise MetricError("nothing to evaluate")
    return _Batch(
        np.asarray(gt, dtype=float).reshape(-1, N_KEYPOINTS, 2),
        np.asarray(vis, dtype=bool).reshape(-1, N_KEYPOINTS),
        np.asarray(pred, dtype=float).reshape(-1, N_KEYPOINTS, 2),
        np.asarray(conf, dtype=float).reshape(-1, N_KEYPOINTS),
        np.asarray(has, dtype=bool),
        np.concatenate(torso),
        np.asarray(cats),
    )


def _category_masks(cats: np.ndarray) -> dict[str, np.ndarray]:
    masks = {"all": np.ones(len(cats), dtype=bool)}
    for c in CATEGORIES[1:]:
        masks[c] = cats == c
    return masks


# -- PCK --------------------------------------------------------------------


@dataclass(frozen=True)
class PCKResult:
    value: dict[str, Optional[float]]
    correct: dict[str, int]
    evaluated: dict[str, int]
    per_keypoint: dict[str, Optional[float]]


def _pck_hits(b: _Batch, config: MetricConfig) -> tuple[np.ndarray, np.ndarray]:
    idx = list(config.indices)
    usable = (b.torso > 0)[:, None]
    evaluated = b.vis[:, idx] & usable
    dist = np.linalg.norm(b.pred[:, idx] - b.gt[:, idx], axis=2)
    with np.errstate(invalid="ignore"):
        hit = dist <= config.pck_fraction * b.torso[:, None]
    return evaluated, hit & evaluated


def pck(pairs: Sequence[tuple[Predictions, AnnotatedSequence]], config: MetricConfig = MetricConfig()) -> PCKResult:
    b = _stack(pairs, config)
    if np.any(b.torso == 0):
        log.warning("%d frame(s) with coincident torso endpoints skipped", int(np.sum(b.torso == 0)))
    evaluated, correct = _pck_hits(b, config)
    value, ncor, neval = {}, {}, {}
    for cat, m in _category_masks(b.cats).items():
        n = int(evaluated[m].sum())
        c = int(correct[m].sum())
        neval[cat], ncor[cat] = n, c
        value[cat] = c / n if n else None
    per_kp = {}
    for col, j in enumerate(config.indices):
        n = int(evaluated[:, col].sum())
        per_kp[config.scheme.names[j]] = int(correct[:, col].sum()) / n if n else None
    return PCKResult(value, ncor, neval, per_kp)


# -- OKS / AP ---------------------------------------------------------------


def _oks_scale_sq(gt: np.ndarray, vis: np.ndarray, torso: float) -> float:
    pts = gt[vis]
    w, h = pts.max(axis=0) - pts.min(axis=0)
    area = float(w * h)
    if area > 0:
        return area
    return torso * torso


def oks(pred: PosePrediction, frame: AnnotatedFrame, config: MetricConfig = MetricConfig(), torso: Optional[float] = None) -> Optional[float]:
    """Object keypoint similarity over visible keypoints of the subset.

    The squared scale is the area of the visible-keypoint bounding box,
    or the squared torso diameter when that box is degenerate. Returns
    ``None`` when no visible keypoint or no usable scale exists.
    """
    idx = list(config.indices)
    gt = np.array([(k.x, k.y) for k in frame.keypoints])[idx]
    vis = np.array([k.visible for k in frame.keypoints])[idx]
    if not vis.any():
        return None
    if torso is None:
        a, b = (frame.keypoints[i] for i in config.torso_endpoints)
        torso = math.hypot(a.x - b.x, a.y - b.y) if a.visible and b.visible else 0.0
    s2 = _oks_scale_sq(gt, vis, torso)
    if s2 <= 0:
        return None
    return _oks_row(pred.coords[idx], gt, vis, s2, config.kappa[idx])


def _oks_row(pred: np.ndarray, gt: np.ndarray, vis: np.ndarray, s2: float, kappa: np.ndarray) -> float:
    d2 = np.sum((pred - gt) ** 2, axis=1)
    e = np.exp(-d2 / (2.0 * s2 * kappa**2))
    e = np.where(np.isnan(e), 0.0, e)
    return float(e[vis].sum() / vis.sum())


def _frame_oks(b: _Batch, config: MetricConfig) -> np.ndarray:
    """OKS per frame; NaN where the frame has no ground-truth instance."""
    idx = list(config.indices)
    kappa = config.kappa[idx]
    out = np.full(len(b.cats), np.nan)
    for f in range(len(b.cats)):
        vis = b.vis[f, idx]
        if not vis.any():
            continue
        gt = b.gt[f, idx]
        s2 = _oks_scale_sq(gt, vis, b.torso[f])
        if s2 <= 0:
            continue
        out[f] = _oks_row(b.pred[f, idx], gt, vis, s2, kappa)
    return out


def ap_from_ranked(tp: np.ndarray, n_positive: int) -> float:
    """All-point interpolated area under the precision/recall curve.

    ``tp`` flags each prediction, already in descending score order.
    """
    if n_positive == 0:
        raise MetricError("AP needs at least one ground-truth instance")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_positive
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    drecall = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(drecall * envelope))


@dataclass(frozen=True)
class APResult:
    value: dict[str, Optional[float]]
    instances: dict[str, int]
    per_threshold: dict[str, list[float]]


def frame_scores(b_conf: np.ndarray, has_pred: np.ndarray, config: MetricConfig) -> np.ndarray:
    s = b_conf[:, list(config.indices)].mean(axis=1)
    return np.where(has_pred, s, 0.0)


def average_precision(pairs: Sequence[tuple[Predictions, AnnotatedSequence]], config: MetricConfig = MetricConfig()) -> APResult:
    b = _stack(pairs, config)
    sim = _frame_oks(b, config)
    score = frame_scores(b.conf, b.has_pred, config)
    is_instance = ~np.isnan(sim)
    detected = score > 0
    value, inst, per_t = {}, {}, {}
    for cat, m in _category_masks(b.cats).items():
        n_pos = int((is_instance & m).sum())
        inst[cat] = n_pos
        if n_pos == 0:
            value[cat], per_t[cat] = None, []
            continue
        sel = np.flatnonzero(m & detected)
        # stable sort: equal scores keep frame order
        order = sel[np.argsort(-score[sel], kind="stable")]
        aps = [ap_from_ranked(np.nan_to_num(sim[order], nan=-1.0) >= t, n_pos) for t in config.ap_thresholds]
        per_t[cat] = aps
        value[cat] = float(np.mean(aps))
    return APResult(value, inst, per_t)


# -- reports ----------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    pck: dict[str, Optional[float]]
    ap: dict[str, Optional[float]]
    per_keypoint_pck: dict[str, Optional[float]]
    counts: dict[str, int]
    config: dict
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "config": self.config,
            "pck": self.pck,
            "ap": self.ap,
            "per_keypoint_pck": self.per_keypoint_pck,
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["pck"], d["ap"], d["per_keypoint_pck"], d["counts"], d["config"], d.get("label", ""))

    def pck_name(self) -> str:
        return f"PCK@{self.config['metric']['pck_fraction']:g}"

    def rows(self) -> list[list]:
        return [
            [self.pck_name()] + [self.pck[c] for c in CATEGORIES],
            ["AP"] + [self.ap[c] for c in CATEGORIES],
        ]

    def to_csv(self) -> str:
        return _csv([["metric", *CATEGORIES], *self.rows()])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def evaluate(
    pairs: Sequence[tuple[Predictions, AnnotatedSequence]],
    config: MetricConfig = MetricConfig(),
    label: str = "",
    extra_config: Optional[dict] = None,
) -> MetricReport:
    if not pairs:
        raise MetricError("nothing to evaluate")
    p = pck(pairs, config)
    a = average_precision(pairs, config)
    for cat in CATEGORIES:
        if p.value[cat] is None:
            log.info("category %s has no evaluable keypoints", cat)
    cfg = {"metric": config.to_dict()}
    if extra_config:
        cfg.update(extra_config)
    return MetricReport(p.value, a.value, p.per_keypoint, p.evaluated, cfg, label)


def compare_reports(before: MetricReport, after: MetricReport) -> list[list]:
    """Before/after/delta rows in ``metric, all, reg, oob, fall`` layout."""
    if before.config.get("metric") != after.config.get("metric"):
        raise MetricError("reports were produced with different metric configs")
    present_b = {c for c in CATEGORIES if before.pck[c] is not None}
    present_a = {c for c in CATEGORIES if after.pck[c] is not None}
    if present_b != present_a:
        raise MetricError(f"reports cover different categories: {sorted(present_b)} vs {sorted(present_a)}")
    nb, na = before.label or "before", after.label or "after"
    rows = [["metric", *CATEGORIES]]
    for name, b_row, a_row in zip((before.pck_name(), "AP"), before.rows(), after.rows()):
        delta = [None if x is None or y is None else round(y - x, 12) for x, y in zip(b_row[1:], a_row[1:])]
        rows.append([f"{name} {nb}", *b_row[1:]])
        rows.append([f"{name} {na}", *a_row[1:]])
        rows.append([f"{name} delta", *delta])
    return rows


def rows_to_csv(rows) -> str:
    return _csv(rows)


def format_table(rows) -> str:
    cells = [[_fmt(v) if not isinstance(v, float) else f"{v:.2f}" for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells)
