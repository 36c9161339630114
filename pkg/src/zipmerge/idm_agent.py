"""Rule-based sparring agents.

Longitudinal control is the intelligent driver model against the leader on
the agent's path; lane changes use a lead/lag gap-acceptance test and are
announced with the turn signal before the agent commits. Steering is a
pure-pursuit tracker on whichever path is active (route or keep-lane).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dynamics import ControlInput, Signal

INF = math.inf
# extra anticipation so the full signal period fits before the connector even while speeding up
SIGNAL_MARGIN = 0.5


@dataclass(frozen=True)
class IdmParams:
    v0: float = 15.0
    T: float = 1.5
    a_max: float = 1.5
    b_comf: float = 2.0
    s0: float = 2.0
    delta_exp: float = 4.0
    gap_lead_min: float = 6.0
    gap_lag_min: float = 8.0
    signal_lead_time: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise ValueError(f"IdmParams.{name} must be positive, got {value}")


@dataclass(frozen=True)
class IdmSampling:
    """Ranges used when drawing a population of IDM drivers."""
    v0_range: tuple[float, float] = (10.0, 20.0)
    jitter: float = 0.2
    b_comf_max: float = 6.0
    base: IdmParams = field(default_factory=IdmParams)


def sample_idm_params(rng: np.random.Generator, ranges: IdmSampling = IdmSampling()) -> IdmParams:
    base = ranges.base
    j = ranges.jitter

    def jit(v):
        return float(v * rng.uniform(1.0 - j, 1.0 + j))

    return IdmParams(
        v0=float(rng.uniform(*ranges.v0_range)),
        T=jit(base.T),
        a_max=jit(base.a_max),
        b_comf=min(jit(base.b_comf), ranges.b_comf_max),
        s0=jit(base.s0),
        delta_exp=jit(base.delta_exp),
        gap_lead_min=jit(base.gap_lead_min),
        gap_lag_min=jit(base.gap_lag_min),
        signal_lead_time=jit(base.signal_lead_time),
    )


def idm_accel(v: float, dv: float, s: float, p: IdmParams) -> float:
    """IDM acceleration before clamping.

    ``dv`` is the closing speed (own minus leader's), ``s`` the bumper gap;
    ``s = inf`` means free road. The dynamic part of the desired gap is
    floored at zero, so a fast-receding leader never causes braking.
    """
    free = 1.0 - (v / p.v0) ** p.delta_exp
    if math.isinf(s):
        return p.a_max * free
    s = max(s, 1e-3)
    s_star = p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))
    return p.a_max * (free - (s_star / s) ** 2)


def gap_accept(lead_gap: float, lag_gap: float, lead_dv: float, lag_dv: float,
               p: IdmParams) -> bool:
    """Lead/lag gap test; ``lead_dv``/``lag_dv`` are the other car's speed minus ours."""
    need_lead = p.gap_lead_min + max(0.0, -lead_dv) * p.T
    need_lag = p.gap_lag_min + max(0.0, lag_dv) * p.T
    return lead_gap >= need_lead and lag_gap >= need_lag


def pure_pursuit_steer(target_x: float, target_y: float, wheelbase: float) -> float:
    """Front-wheel angle that arcs toward a body-frame target point."""
    ld2 = target_x * target_x + target_y * target_y
    if ld2 < 1e-12:
        return 0.0
    return math.atan(2.0 * wheelbase * target_y / ld2)


def lookahead_distance(v: float) -> float:
    return max(3.0, 0.5 * v)


class IdmAgentState(NamedTuple):
    current_lane: int
    params: IdmParams = IdmParams()
    target_lane: int | None = None
    signal: Signal = Signal.OFF
    signal_elapsed: float = 0.0


class NeighborView(NamedTuple):
    """What an IDM agent sees this step, assembled by the simulator.

    Gaps are bumper to bumper (``inf`` when nobody is there). ``change_dir``
    is +1/-1 when the route's next lane is a left/right lane change, and
    ``connector`` that lane's id. Lookahead points are in the body frame.
    """
    v: float
    current_lane: int
    lead_gap: float = INF
    lead_dv: float = 0.0
    change_dir: int = 0
    connector: int | None = None
    time_to_change: float = INF
    on_connector: bool = False
    target_lead_gap: float = INF
    target_lead_dv: float = 0.0
    target_lag_gap: float = INF
    target_lag_dv: float = 0.0
    lookahead_keep: tuple[float, float] = (1.0, 0.0)
    lookahead_route: tuple[float, float] = (1.0, 0.0)
    wheelbase: float = 2.8


def idm_policy_step(view: NeighborView, st: IdmAgentState, dt: float) -> tuple[ControlInput, IdmAgentState]:
    p = st.params
    signal, elapsed, target = st.signal, st.signal_elapsed, st.target_lane

    if view.on_connector:
        # mid-manoeuvre: keep signalling until the connector is left behind
        follow_route = True
        elapsed += dt
    elif view.change_dir != 0:
        want = Signal.LEFT if view.change_dir > 0 else Signal.RIGHT
        if signal != want:
            if view.time_to_change <= p.signal_lead_time + SIGNAL_MARGIN:
                signal, elapsed = want, 0.0
            else:
                signal, elapsed = Signal.OFF, 0.0
            target = None
        else:
            elapsed += dt
        ok = gap_accept(view.target_lead_gap, view.target_lag_gap,
                        view.target_lead_dv, view.target_lag_dv, p)
        if signal == want and ok and elapsed >= p.signal_lead_time - 1e-9:
            target = view.connector
        elif not ok:
            target = None
        follow_route = target is not None
    else:
        signal, elapsed, target = Signal.OFF, 0.0, None
        follow_route = True

    accel = idm_accel(view.v, view.lead_dv, view.lead_gap, p)
    tx, ty = view.lookahead_route if follow_route else view.lookahead_keep
    steer = pure_pursuit_steer(tx, ty, view.wheelbase)
    new_state = IdmAgentState(view.current_lane, p, target, signal, elapsed)
    return ControlInput(accel, steer, signal), new_state
