"""Episode lifecycle for the zipper-merge world.

A :class:`World` holds every live vehicle of one environment instance. Each
call to :func:`step_world` advances it by one 10 Hz tick in a fixed order:
spawn, query controllers against the pre-step world, clamp and integrate all
vehicles at once, detect events, compute rewards, retire finished agents.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import chain
from typing import NamedTuple, Protocol

import numpy as np

from . import _kernels
from .dynamics import (DT, STEER_BOUND, ControlInput, Signal, VehicleGeometry,
                       VehicleState, clamp_controls, step)
from .idm_agent import (IdmAgentState, IdmSampling, NeighborView, idm_policy_step,
                        lookahead_distance, sample_idm_params)
from .road_network import (OOB_WIDTH_FRACTION, RoadMap, Route, RoutingError,
                           plan_from_lane, plan_route)

AGENT_KINDS = ("IDM", "RL", "SP1", "SP2", "EGO_LEARNER")
EGO = "EGO_LEARNER"
OUTCOMES = ("success", "collision", "oob", "timeout")


class EpisodeClosedError(RuntimeError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    scale: float = 340.0
    init_vel_range: tuple[float, float] = (0.0, 5.0)
    n_other_agents_max: int = 10
    spawn_prob: float = 0.01
    max_steps: int = 1000
    r_success: float = 100.0
    r_collision: float = -500.0
    r_oob: float = -250.0
    r_collision_start: float = -100.0
    r_oob_start: float = -100.0
    velocity_scale: float = 0.1
    velocity_cap: float = 15.0
    signal_pen: float = -0.1
    center_pen_per_m: float = -0.1
    steer_smooth_pen: float = -2.0
    anneal_updates: int = 1000
    success_radius: float = 5.0
    spawn_clearance: float = 1.0
    geometry: VehicleGeometry = field(default_factory=VehicleGeometry)

    def __post_init__(self):
        lo, hi = self.init_vel_range
        if not 0.0 <= lo <= hi:
            raise ValueError(f"init_vel_range must be ordered and non-negative, got {self.init_vel_range}")
        if not 0.0 <= self.spawn_prob <= 1.0:
            raise ValueError(f"spawn_prob must be in [0, 1], got {self.spawn_prob}")
        if self.n_other_agents_max < 0 or self.max_steps < 1 or self.anneal_updates < 1:
            raise ValueError("agent cap, max_steps and anneal_updates must be positive")
        if self.success_radius < 0 or self.spawn_clearance < 0:
            raise ValueError("success_radius and spawn_clearance must be non-negative")


class Controller(Protocol):
    def act(self, world: "World", agent: "AgentRecord") -> ControlInput: ...


class PopulationSampler(Protocol):
    def sample(self, rng: np.random.Generator) -> str: ...


@dataclass(eq=False)
class AgentRecord:
    id: int
    kind: str
    controller: Controller | None
    route: Route
    state: VehicleState
    geom: VehicleGeometry = field(default_factory=VehicleGeometry)
    signal: Signal = Signal.OFF
    alive: bool = True
    outcome: str | None = None
    control: ControlInput = ControlInput(0.0, 0.0)
    lane_offset: float = 0.0
    route_s: float = 0.0
    route_d: float = 0.0
    route_seg: int = 0
    spawn_step: int = 0
    prev_state: VehicleState | None = None

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        self.track(full=True)

    def track(self, full: bool = False) -> None:
        """Update arc-length progress; windowed search unless ``full``."""
        route = self.route
        if full:
            lo, hi = 0, len(route.px) - 1
        else:
            lo, hi = max(0, self.route_seg - 8), min(len(route.px) - 1, self.route_seg + 16)
        self.route_s, self.route_d, self.route_seg = _kernels.project_polyline(
            route.px, route.py, route.cum_s, float(self.state.x), float(self.state.y), lo, hi)

    def finish(self, outcome: str) -> None:
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {outcome!r}")
        if not self.alive:
            raise RuntimeError(f"agent {self.id} already finished with {self.outcome}")
        self.alive = False
        self.outcome = outcome


_LEDGER_FIELDS = ("success", "collision", "oob", "velocity", "signal", "center_offset", "steer_smooth")


@dataclass(frozen=True)
class RewardLedger:
    """Itemized reward; ``total`` is the correctly rounded sum of the components."""
    success: float = 0.0
    collision: float = 0.0
    oob: float = 0.0
    velocity: float = 0.0
    signal: float = 0.0
    center_offset: float = 0.0
    steer_smooth: float = 0.0

    @property
    def components(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in _LEDGER_FIELDS)

    @property
    def total(self) -> float:
        return math.fsum(self.components)

    @classmethod
    def combine(cls, ledgers) -> "RewardLedger":
        """Component-wise sum over an episode (each stream summed exactly)."""
        ledgers = list(ledgers)
        return cls(*(math.fsum(getattr(lg, f) for lg in ledgers) for f in _LEDGER_FIELDS))

    def __add__(self, other: "RewardLedger") -> "RewardLedger":
        return RewardLedger.combine([self, other])


@dataclass(frozen=True)
class RewardState:
    """The slice of an agent's state the reward looks at."""
    v: float = 0.0
    steer: float = 0.0
    signal: Signal = Signal.OFF
    lane_offset: float = 0.0


@dataclass(frozen=True)
class StepEvents:
    success: bool = False
    collision: bool = False
    oob: bool = False


class StepOutcome(NamedTuple):
    agent_id: int
    kind: str
    control: ControlInput
    events: StepEvents
    ledger: RewardLedger | None
    done: bool
    cause: str | None


def anneal_penalties(update_index: int, config: EpisodeConfig = EpisodeConfig()) -> tuple[float, float]:
    """Crash and off-road penalties, linear in the update count then constant."""
    if update_index < 0:
        raise ValueError("update_index must be non-negative")
    t = min(update_index, config.anneal_updates) / config.anneal_updates
    col = config.r_collision_start + t * (config.r_collision - config.r_collision_start)
    oob = config.r_oob_start + t * (config.r_oob - config.r_oob_start)
    return col, oob


def compute_reward(prev: RewardState, new: RewardState, events: StepEvents,
                   config: EpisodeConfig = EpisodeConfig(), update_index: int = 0) -> RewardLedger:
    """Per-step reward. ``events`` should already respect the termination priority."""
    col_pen, oob_pen = anneal_penalties(update_index, config)
    return RewardLedger(
        success=config.r_success if events.success else 0.0,
        collision=col_pen if events.collision else 0.0,
        oob=oob_pen if events.oob else 0.0,
        velocity=config.velocity_scale * min(new.v, config.velocity_cap),
        signal=config.signal_pen if new.signal != Signal.OFF else 0.0,
        center_offset=config.center_pen_per_m * abs(new.lane_offset),
        steer_smooth=config.steer_smooth_pen * abs(new.steer - prev.steer),
    )


def reached_goal(agent: AgentRecord, config: EpisodeConfig = EpisodeConfig()) -> bool:
    route = agent.route
    if not route.reaches_goal or agent.route_s < route.length - config.success_radius:
        return False
    w = route.width[route.lane_index_at(agent.route_s)]
    return (agent.route_s >= route.length - config.success_radius
            and abs(agent.route_d) <= OOB_WIDTH_FRACTION * w)


def check_termination(agent: AgentRecord, road: RoadMap, config: EpisodeConfig = EpisodeConfig(),
                      *, collided: bool = False, step_index: int = 0) -> str | None:
    """Termination cause with priority collision > oob > success > timeout."""
    if collided:
        return "collision"
    margin, _ = road.clearance(agent.state.x, agent.state.y)
    if margin > 0.0:
        return "oob"
    if reached_goal(agent, config):
        return "success"
    if step_index >= config.max_steps:
        return "timeout"
    return None


class _Snapshot:
    """Column view of the live agents, built once per step for the controllers."""

    def __init__(self, agents, previous: "_Snapshot | None" = None):
        n = len(agents)
        self.agents = list(agents)
        self.states = [a.state for a in agents]
        self.prev_states = [a.prev_state for a in agents]
        cols = np.fromiter(chain.from_iterable(self.states), np.float64, 4 * n).reshape(n, 4).T.copy()
        self.xs, self.ys, self.psis, self.vs = cols
        if previous is not None and previous.agents == self.agents:
            # same agents: ids and geometry cannot have changed
            self.ids, self.index = previous.ids, previous.index
            self.lens, self.wids, self.half_lens = previous.lens, previous.wids, previous.half_lens
        else:
            self.ids = np.fromiter((a.id for a in agents), np.int64, n)
            self.index = {a.id: i for i, a in enumerate(agents)}
            self.lens = np.fromiter((a.geom.length for a in agents), np.float64, n)
            self.wids = np.fromiter((a.geom.width for a in agents), np.float64, n)
            self.half_lens = 0.5 * self.lens
        self.cache = {}

    def matches(self, agents) -> bool:
        """True while ``agents`` and their states are the ones captured."""
        return len(agents) == len(self.agents) and all(
            a is b and a.state is s and a.prev_state is p
            for a, b, s, p in zip(agents, self.agents, self.states, self.prev_states))


@dataclass(eq=False)
class World:
    road: RoadMap
    config: EpisodeConfig
    rng: np.random.Generator
    population: PopulationSampler | None = None
    controller_factory: object = None
    agents: list[AgentRecord] = field(default_factory=list)
    retired: list[AgentRecord] = field(default_factory=list)
    step_index: int = 0
    update_index: int = 0
    ego_id: int | None = None
    learner_ids: set[int] = field(default_factory=set)
    learner_kinds: tuple[str, ...] = ()
    closed: bool = False
    next_id: int = 0
    trace: list[dict] | None = None
    idm_sampling: IdmSampling = field(default_factory=IdmSampling)
    snapshot: _Snapshot | None = None

    @property
    def ego(self) -> AgentRecord | None:
        for a in self.agents:
            if a.id == self.ego_id:
                return a
        for a in self.retired:
            if a.id == self.ego_id:
                return a
        return None

    def agent(self, agent_id: int) -> AgentRecord:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    def n_others(self) -> int:
        return sum(1 for a in self.agents if a.kind != EGO)

    def refresh_snapshot(self) -> _Snapshot:
        self.snapshot = _Snapshot(self.agents, self.snapshot)
        return self.snapshot

    def current_snapshot(self) -> _Snapshot:
        """The cached snapshot, rebuilt if agents or states changed since."""
        snap = self.snapshot
        if snap is None or not snap.matches(self.agents):
            snap = self.refresh_snapshot()
        return snap

    def add_agent(self, kind: str, route: Route, state: VehicleState,
                  controller: Controller | None = None) -> AgentRecord:
        if kind == EGO and self.ego_id is not None:
            raise ValueError("world already has an ego")
        agent = AgentRecord(id=self.next_id, kind=kind, controller=None, route=route,
                            state=state, geom=self.config.geometry, spawn_step=self.step_index)
        self.next_id += 1
        if controller is None and kind != EGO:
            factory = self.controller_factory or default_controller_factory
            controller = factory(self, agent)
        agent.controller = controller
        if kind == EGO:
            self.ego_id = agent.id
        if kind in self.learner_kinds:
            self.learner_ids.add(agent.id)
        self.agents.append(agent)
        self.snapshot = None
        return agent


def new_world(road: RoadMap, config: EpisodeConfig, seed, *, population=None,
              controller_factory=None, update_index: int = 0,
              learner_kinds: tuple[str, ...] = (), record_trace: bool = False) -> World:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return World(road=road, config=config, rng=rng, population=population,
                 controller_factory=controller_factory, update_index=update_index,
                 learner_kinds=tuple(learner_kinds), trace=[] if record_trace else None)


def default_controller_factory(world: World, agent: AgentRecord) -> Controller:
    if agent.kind == "IDM":
        return IdmDriver(sample_idm_params(world.rng, world.idm_sampling))
    raise ValueError(f"no controller available for kind {agent.kind!r}; "
                     "attach a policy controller factory")


class AlwaysIdm:
    """Population that only produces rule-based drivers."""

    def sample(self, rng: np.random.Generator) -> str:
        return "IDM"


def _occupied(world: World, x: float, y: float, psi: float, geom: VehicleGeometry, margin: float) -> bool:
    snap = world.current_snapshot()
    return _kernels.first_overlap(x, y, psi, geom.length + 2.0 * margin, geom.width + 2.0 * margin,
                                  snap.xs, snap.ys, snap.psis, snap.lens, snap.wids) >= 0


def spawn_tick(world: World, config: EpisodeConfig | None = None, population=None) -> list[AgentRecord]:
    """Try one spawn per entry point; returns the agents created this tick."""
    config = config or world.config
    population = population or world.population or AlwaysIdm()
    road = world.road
    rng = world.rng
    born = []
    if not road.goal_labels:
        return born
    n_others = world.n_others()
    for label in road.spawn_labels:
        if not rng.random() < config.spawn_prob:
            continue
        if n_others >= config.n_other_agents_max:
            continue
        x, y, psi, _ = road.spawn_pose(label)
        if _occupied(world, x, y, psi, config.geometry, config.spawn_clearance):
            continue
        kind = population.sample(rng)
        goal = road.goal_labels[int(rng.integers(len(road.goal_labels)))]
        v = float(rng.uniform(*config.init_vel_range))
        route = plan_route(road, label, goal, rng)
        agent = world.add_agent(kind, route, VehicleState(x, y, psi, v))
        born.append(agent)
        n_others += kind != EGO
    return born


def detect_collisions(world: World) -> set[frozenset]:
    """Unordered id pairs whose oriented boxes intersect (touching counts)."""
    snap = _Snapshot(world.agents)
    pairs = _kernels.colliding_pairs(snap.xs, snap.ys, snap.psis, snap.lens, snap.wids)
    return {frozenset((int(snap.ids[i]), int(snap.ids[j]))) for i, j in pairs}


class IdmDriver:
    """Controller wrapping the rule-based driver.

    Besides producing controls, it keeps the agent's route in sync with what
    the car is actually doing: if the car reaches a lane-change connector
    without having committed to it, the route is re-planned from the lane it
    kept.
    """

    window_behind = 80
    window_ahead = 200

    def __init__(self, params):
        self.state = IdmAgentState(current_lane=-1, params=params)
        self._route = None
        self._dirs: list[int] = []
        self._keep: dict[int, Route] = {}

    def _sync(self, road: RoadMap, route: Route) -> None:
        if route is not self._route:
            self._route = route
            ids = route.lane_ids
            self._dirs = [road.is_lane_change(a, b) for a, b in zip(ids[:-1], ids[1:])]
            self._keep = {}

    def _keep_route(self, road: RoadMap, k: int) -> Route:
        keep = self._keep.get(k)
        if keep is None:
            ids = list(self._route.lane_ids[:k + 1])
            seen = set(ids)
            nxt = road.straight_successor(ids[-1])
            while nxt is not None and nxt not in seen and len(ids) < k + 4:
                ids.append(nxt)
                seen.add(nxt)
                nxt = road.straight_successor(nxt)
            keep = Route(road, ids, goal=None)
            self._keep[k] = keep
        return keep

    def _replan(self, world: World, agent: AgentRecord, k: int) -> None:
        road = world.road
        route = agent.route
        keep_lane = road.straight_successor(route.lane_ids[k])
        prefix = list(route.lane_ids[:k + 1])
        goal = route.goal
        try:
            if keep_lane is None or goal is None:
                raise RoutingError("nothing to re-plan towards")
            ids = prefix + plan_from_lane(road, keep_lane, goal, world.rng)
        except RoutingError:
            ids = list(self._keep_route(road, k).lane_ids)
            goal = None
        agent.route = Route(road, ids, goal=goal)
        agent.track(full=True)
        self._sync(road, agent.route)

    def act(self, world: World, agent: AgentRecord) -> ControlInput:
        road = world.road
        route = agent.route
        if route is not self._route:
            self._sync(road, route)
        s = agent.route_s
        k = route.lane_index_at(s)
        ids = route.lane_ids
        st_prev = self.state
        if k > 0 and self._dirs[k - 1] != 0 and st_prev.target_lane != ids[k]:
            # drove past a connector start without committing: follow the kept lane
            self._replan(world, agent, k - 1)
            route = agent.route
            s = agent.route_s
            k = route.lane_index_at(s)
            ids = route.lane_ids
        dirs = self._dirs
        change_dir = dirs[k] if k < len(dirs) else 0
        on_connector = k > 0 and dirs[k - 1] != 0

        snap = world.snapshot or world.refresh_snapshot()
        me = snap.index[agent.id]
        x, y, psi, v = agent.state
        c, sn = math.cos(psi), math.sin(psi)
        half = 0.5 * agent.geom.length
        lane_w = route.width[k]
        ld = lookahead_distance(v)
        px, py, _ = _kernels.point_at(route.px, route.py, route.cum_s, s + ld)
        look_route = (c * (px - x) + sn * (py - y), -sn * (px - x) + c * (py - y))
        connector = ids[k + 1] if change_dir else None
        committed = change_dir != 0 and st_prev.target_lane == connector
        seg = agent.route_seg

        tl_gap = tg_gap = math.inf
        tl_v = tg_v = 0.0
        ttc = math.inf
        if change_dir:
            keep = self._keep_route(road, k)
            px, py, _ = _kernels.point_at(keep.px, keep.py, keep.cum_s, s + ld)
            look_keep = (c * (px - x) + sn * (py - y), -sn * (px - x) + c * (py - y))
            kseg = min(seg, len(keep.px) - 2)
            lead_gap, lead_v, tl_gap, tl_v, tg_gap, tg_v = _kernels.neighborhood(
                keep.px, keep.py, keep.cum_s, max(0, kseg - self.window_behind),
                min(len(keep.px) - 1, kseg + self.window_ahead), s, half, lane_w, change_dir,
                snap.xs, snap.ys, snap.psis, snap.vs, snap.half_lens, me)
            ttc = (route.lane_start_s[k + 1] - s) / max(v, 0.1)
        else:
            look_keep = look_route
        if not change_dir or committed:
            lead_gap, lead_v, _, _, _, _ = _kernels.neighborhood(
                route.px, route.py, route.cum_s, max(0, seg - self.window_behind),
                min(len(route.px) - 1, seg + self.window_ahead), s, half, lane_w, 0,
                snap.xs, snap.ys, snap.psis, snap.vs, snap.half_lens, me)

        view = NeighborView(v, ids[k], lead_gap, v - lead_v, change_dir, connector, ttc,
                            on_connector, tl_gap, tl_v - v, tg_gap, tg_v - v,
                            look_keep, look_route, agent.geom.wheelbase)
        control, self.state = idm_policy_step(view, st_prev, DT)
        return control


class ScriptedController:
    """Replays a fixed list of controls, then holds the last one."""

    def __init__(self, controls):
        self.controls = list(controls)
        self.t = 0

    def act(self, world: World, agent: AgentRecord) -> ControlInput:
        i = min(self.t, len(self.controls) - 1)
        self.t += 1
        return self.controls[i]


_SIGNALS = {int(sig): sig for sig in Signal}
_EVENTS = {
    None: StepEvents(),
    "timeout": StepEvents(),
    "success": StepEvents(success=True),
    "collision": StepEvents(collision=True),
    "oob": StepEvents(oob=True),
}


def _reward_state(agent: AgentRecord, control: ControlInput) -> RewardState:
    return RewardState(v=agent.state.v, steer=control.steer, signal=control.signal,
                       lane_offset=agent.lane_offset)


def step_world(world: World, ego_action: ControlInput | None, config: EpisodeConfig | None = None,
               external: dict[int, ControlInput] | None = None,
               spawn: bool = True) -> tuple[dict[int, StepOutcome], World]:
    """Advance the world by one tick.

    ``ego_action`` drives the ego (its controller is used when ``None``);
    ``external`` supplies actions for other agents. Pass ``spawn=False`` if
    :func:`spawn_tick` was already run for this tick.
    """
    if world.closed:
        raise EpisodeClosedError("episode closed; reset before stepping again")
    config = config or world.config
    if spawn:
        spawn_tick(world, config, world.population)

    agents = list(world.agents)
    world.current_snapshot()
    ego_id = world.ego_id
    controls = []
    for a in agents:
        if a.id == ego_id and ego_action is not None:
            raw = ego_action
        elif external is not None and a.id in external:
            raw = external[a.id]
        elif a.controller is not None:
            raw = a.controller.act(world, a)
        else:
            raise ValueError(f"agent {a.id} ({a.kind}) has no action and no controller")
        controls.append(clamp_controls(raw, STEER_BOUND))

    learners = [a.id == ego_id or a.id in world.learner_ids for a in agents]
    prev = [_reward_state(a, a.control) if ln else None for a, ln in zip(agents, learners)]
    for a, u in zip(agents, controls):
        a.prev_state = a.state
        a.state = step(a.state, u, a.geom)
        a.control = u
        sig = _SIGNALS.get(u.signal)
        a.signal = sig if sig is not None else Signal(u.signal)

    # events, all measured on the post-step configuration
    snap = world.refresh_snapshot()
    collided = set()
    for i, j in _kernels.colliding_pairs(snap.xs, snap.ys, snap.psis, snap.lens, snap.wids):
        collided.add(agents[i].id)
        collided.add(agents[j].id)
    margins, nearest = world.road.clearance_many(snap.xs, snap.ys)
    world.step_index += 1
    timed_out = world.step_index >= config.max_steps
    outcomes: dict[int, StepOutcome] = {}
    finished = []
    for i, a in enumerate(agents):
        a.lane_offset = float(nearest[i])
        a.track()
        if a.id in collided:
            cause = "collision"
        elif margins[i] > 0.0:
            cause = "oob"
        elif reached_goal(a, config):
            cause = "success"
        elif timed_out:
            cause = "timeout"
        else:
            cause = None
        events = _EVENTS[cause]
        ledger = None
        if learners[i]:
            ledger = compute_reward(prev[i], _reward_state(a, controls[i]), events, config,
                                    world.update_index)
        outcomes[a.id] = StepOutcome(a.id, a.kind, controls[i], events, ledger, cause is not None, cause)
        if cause is not None:
            finished.append((a, cause))

    for a, cause in finished:
        a.finish(cause)
    if world.ego_id is not None and any(a.id == world.ego_id for a, _ in finished):
        world.closed = True
        for a in world.agents:
            if a.alive:
                a.finish("timeout")
                o = outcomes[a.id]
                outcomes[a.id] = StepOutcome(o.agent_id, o.kind, o.control, o.events, o.ledger,
                                             True, "timeout")
    if finished:
        world.retired.extend(a for a in world.agents if not a.alive)
        world.agents = [a for a in world.agents if a.alive]
        world.snapshot = None
    if world.trace is not None:
        _record(world, agents, outcomes)
    return outcomes, world


TRACE_COLUMNS = ("step", "agent_id", "kind", "x", "y", "psi", "v", "accel", "steer", "signal",
                 *("r_" + f for f in _LEDGER_FIELDS), "r_total",
                 "ev_success", "ev_collision", "ev_oob", "outcome")


def _record(world: World, agents, outcomes) -> None:
    for a in agents:
        o = outcomes[a.id]
        lg = o.ledger
        row = {"step": world.step_index, "agent_id": a.id, "kind": a.kind,
               "x": a.state.x, "y": a.state.y, "psi": a.state.psi, "v": a.state.v,
               "accel": o.control.accel, "steer": o.control.steer, "signal": int(o.control.signal)}
        for f in _LEDGER_FIELDS:
            row["r_" + f] = getattr(lg, f) if lg is not None else ""
        row["r_total"] = lg.total if lg is not None else ""
        row["ev_success"] = int(o.events.success)
        row["ev_collision"] = int(o.events.collision)
        row["ev_oob"] = int(o.events.oob)
        row["outcome"] = o.cause or ""
        world.trace.append(row)


def trace_to_csv(rows, path=None) -> str:
    """Serialise trace rows; floats use ``repr`` so the file round-trips exactly."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_trace_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def reset_world(road: RoadMap, config: EpisodeConfig, seed, *, population=None,
                controller_factory=None, update_index: int = 0,
                learner_kinds: tuple[str, ...] = (), record_trace: bool = False,
                ego_start: str | None = None, ego_goal: str | None = None,
                ego_controller: Controller | None = None) -> World:
    """Fresh world with the ego placed at a random entry with a random goal."""
    world = new_world(road, config, seed, population=population,
                      controller_factory=controller_factory, update_index=update_index,
                      learner_kinds=learner_kinds, record_trace=record_trace)
    rng = world.rng
    start = ego_start or road.spawn_labels[int(rng.integers(len(road.spawn_labels)))]
    goal = ego_goal or road.goal_labels[int(rng.integers(len(road.goal_labels)))]
    v = float(rng.uniform(*config.init_vel_range))
    x, y, psi, _ = road.spawn_pose(start)
    route = plan_route(road, start, goal, rng)
    world.add_agent(EGO, route, VehicleState(x, y, psi, v), controller=ego_controller)
    return world


def ledger_fields() -> tuple[str, ...]:
    return _LEDGER_FIELDS
