"""Fixed-gain alpha-beta-gamma filter for a 2D point.

Both axes use the standard gains ``alpha``, ``beta/dt`` and ``2*gamma/dt**2``
and are filtered independently. With ``gamma = 0`` and zero initial
acceleration the model is constant velocity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

Vec = tuple[float, float]


class FilterError(ValueError):
    pass


@dataclass(frozen=True)
class FilterParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise FilterError(f"{name} must lie in [0, 1], got {v}")
        if not self.dt > 0:
            raise FilterError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class FilterState:
    pos: Vec = (0.0, 0.0)
    vel: Vec = (0.0, 0.0)
    acc: Vec = (0.0, 0.0)
    initialized: bool = False


def _finite(p: Sequence[float], what: str) -> Vec:
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise FilterError(f"{what} must be finite, got {tuple(p)}")
    return x, y


def _guard(state: FilterState) -> None:
    if not state.initialized:
        raise FilterError("filter state is not initialized")


def init_state(p0: Sequence[float]) -> FilterState:
    return FilterState(pos=_finite(p0, "initial position"), initialized=True)


def _predict_axis(x: float, v: float, a: float, dt: float) -> tuple[float, float]:
    return x + v * dt + 0.5 * a * dt * dt, v + a * dt


def predict(state: FilterState, params: FilterParams) -> Vec:
    """Kinematic estimate of the position one step ahead; ``state`` is unchanged."""
    _guard(state)
    return tuple(
        _predict_axis(state.pos[i], state.vel[i], state.acc[i], params.dt)[0] for i in range(2)
    )


def update(state: FilterState, params: FilterParams, measurement: Sequence[float]) -> FilterState:
    _guard(state)
    z = _finite(measurement, "measurement")
    a, b, g, dt = params.alpha, params.beta, params.gamma, params.dt
    pos, vel, acc = [], [], []
    for i in range(2):
        xp, vp = _predict_axis(state.pos[i], state.vel[i], state.acc[i], dt)
        r = z[i] - xp
        # convex form keeps alpha=1 (and alpha=0) exact in floating point
        pos.append((1.0 - a) * xp + a * z[i])
        vel.append(vp + (b / dt) * r)
        acc.append(state.acc[i] + (2.0 * g / (dt * dt)) * r)
    return FilterState(tuple(pos), tuple(vel), tuple(acc), True)


def coast(state: FilterState, params: FilterParams) -> FilterState:
    """Advance to the prediction without a measurement."""
    _guard(state)
    pos, vel = [], []
    for i in range(2):
        xp, vp = _predict_axis(state.pos[i], state.vel[i], state.acc[i], params.dt)
        pos.append(xp)
        vel.append(vp)
    return FilterState(tuple(pos), tuple(vel), state.acc, True)


def residual(state: FilterState, params: FilterParams, measurement: Sequence[float]) -> Vec:
    xp, yp = predict(state, params)
    return measurement[0] - xp, measurement[1] - yp
