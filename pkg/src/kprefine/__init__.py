"""Rotation-candidate fusion and kinematic refinement of 2D keypoint detections."""

__version__ = "0.1.0"

from .abg import FilterParams, FilterState, coast, init_state, predict, update
from .metrics import MetricConfig, MetricReport, average_precision, compare_reports, evaluate, oks, pck
from .refine import FusionConfig, RefinedKeypoint, k_nearest, refine_sequence, refine_trajectory, weighted_mean
from .rotation import AngleSet, RotationSpec, back_rotate_point, expanded_canvas, forward_rotate_point, rotation_manifest
from .schema import (
    DEFAULT_SCHEME,
    AnnotatedSequence,
    DetectionSet,
    KeypointCandidate,
    load_annotations,
    load_detections,
    select_person,
)
from .search import GridSpec, grid_search
