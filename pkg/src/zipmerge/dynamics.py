"""Kinematic bicycle model, discretised with forward Euler at the 10 Hz sim rate."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

DT = 0.1
ACCEL_MIN = -6.0
ACCEL_MAX = 4.0
STEER_BOUND = 0.5


class Signal(enum.IntEnum):
    OFF = 0
    LEFT = 1
    RIGHT = 2

    @property
    def lateral(self) -> int:
        """+1 for left, -1 for right, 0 when off."""
        return (0, 1, -1)[self]


class InvalidControlError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


class VehicleState(NamedTuple):
    x: float
    y: float
    psi: float
    v: float


@dataclass(frozen=True)
class VehicleGeometry:
    l_f: float = 1.4
    l_r: float = 1.4
    length: float = 4.6
    width: float = 1.9

    def __post_init__(self):
        if min(self.l_f, self.l_r, self.length, self.width) <= 0:
            raise ValueError("vehicle geometry must be positive")
        if self.length < 0.5 * (self.l_f + self.l_r):
            raise ValueError("vehicle length shorter than half the wheelbase")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r


class ControlInput(NamedTuple):
    accel: float
    steer: float
    signal: Signal = Signal.OFF


def slip_angle(steer: float, geom: VehicleGeometry) -> float:
    """Angle between velocity and the vehicle's longitudinal axis at the CoM."""
    return math.atan(geom.l_r * math.tan(steer) / (geom.l_f + geom.l_r))


def clamp_controls(raw: ControlInput, steer_bound: float = STEER_BOUND) -> ControlInput:
    if not (math.isfinite(raw.accel) and math.isfinite(raw.steer)):
        raise InvalidControlError(f"non-finite control {raw}")
    accel = min(max(raw.accel, ACCEL_MIN), ACCEL_MAX)
    steer = min(max(raw.steer, -steer_bound), steer_bound)
    if accel == raw.accel and steer == raw.steer:
        return raw
    return ControlInput(accel, steer, Signal(raw.signal))


def step(state: VehicleState, control: ControlInput, geom: VehicleGeometry,
         dt: float = DT) -> VehicleState:
    """One Euler step. ``control`` is assumed to be clamped already."""
    x, y, psi, v = state
    l_r = geom.l_r
    beta = math.atan(l_r * math.tan(control.steer) / (geom.l_f + l_r))  # slip_angle, inlined
    heading = psi + beta
    return VehicleState(
        x + v * math.cos(heading) * dt,
        y + v * math.sin(heading) * dt,
        wrap_angle(psi + (v / l_r) * math.sin(beta) * dt),
        max(0.0, v + control.accel * dt),
    )
