import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kprefine.schema import (  # noqa: E402
    DEFAULT_SCHEME,
    AnnotatedFrame,
    AnnotatedSequence,
    FrameCategory,
    GroundTruthKeypoint,
    Person,
)
from kprefine.synth import TEMPLATE  # noqa: E402


def pose_at(x, y, scale=200.0):
    """Upright template pose rooted at (x, y), shape (24, 2)."""
    return TEMPLATE * scale + np.array([x, y])


def make_frame(idx, pts, category=FrameCategory.REGULAR, visible=None):
    visible = [True] * 24 if visible is None else visible
    return AnnotatedFrame(
        idx, FrameCategory(category),
        tuple(GroundTruthKeypoint(float(x), float(y), bool(v)) for (x, y), v in zip(pts, visible)),
    )


def make_sequence(frames, video="v", size=(1000, 800)):
    return AnnotatedSequence(video, size, tuple(frames), DEFAULT_SCHEME)


def make_person(score, conf=0.5, xy=(1.0, 1.0)):
    return Person(score, tuple((xy[0], xy[1], conf) for _ in range(24)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
