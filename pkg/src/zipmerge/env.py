"""Gym-style wrapper around a :class:`~zipmerge.sim_env.World`.

``reset()`` returns the ego's first observation; ``step(action)`` applies it
and returns ``(obs, reward, done, info)`` with ``obs=None`` once the episode
is over. Sparring agents driven by a neural policy are evaluated in one
batched forward pass per policy per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dynamics import ControlInput
from .observation import ObsSpec, ObservationFrame, build_observation
from .policy import TwoStreamPolicy, controls_from, obs_to_tensors, sample_actions
from .road_network import RoadMap
from .sim_env import (EpisodeClosedError, EpisodeConfig, StepOutcome, World, reset_world,
                      spawn_tick, step_world)


class PolicyController:
    """Drives a sparring agent with a (frozen or live) policy network.

    Normally :class:`MergeEnv` batches these; :meth:`act` is the unbatched
    fallback used when a world is stepped directly.
    """

    def __init__(self, policy: TwoStreamPolicy, rng: np.random.Generator,
                 deterministic: bool = True, obs_spec: ObsSpec = ObsSpec()):
        self.policy = policy
        self.rng = rng
        self.deterministic = deterministic
        self.obs_spec = obs_spec

    def act(self, world: World, agent) -> ControlInput:
        frame = build_observation(world, agent.id, self.obs_spec)
        return batched_policy_actions([(self, frame)])[0]


def batched_policy_actions(items) -> list[ControlInput]:
    """``items`` is a list of ``(PolicyController, ObservationFrame)``."""
    out: list[ControlInput | None] = [None] * len(items)
    groups: dict[tuple, list[int]] = {}
    for i, (ctl, _) in enumerate(items):
        groups.setdefault((id(ctl.policy), ctl.deterministic), []).append(i)
    for idx in groups.values():
        ctl0 = items[idx[0]][0]
        raster, vector = obs_to_tensors([items[i][1] for i in idx])
        with torch.no_grad():
            dist = ctl0.policy(raster, vector)
        rngs = [items[i][0].rng for i in idx]
        u, sig, _, _ = sample_actions(dist, rngs, deterministic=ctl0.deterministic)
        for i, c in zip(idx, controls_from(u, sig)):
            out[i] = c
    return out


@dataclass
class StepInfo:
    outcome: StepOutcome
    cause: str | None
    extra: dict  # learner agent id -> StepOutcome for non-ego learners
    step_index: int


class MergeEnv:
    """One environment instance with an ego learner and a sparring population.

    Episode ``k`` uses ``default_rng([seed, k])`` so any episode can be
    reproduced on its own. ``ego_controller`` is an optional zero-argument
    factory; its controller drives the ego whenever ``step(None)`` is called.
    """

    def __init__(self, road: RoadMap, config: EpisodeConfig = EpisodeConfig(), *, population=None,
                 controller_factory=None, obs_spec: ObsSpec = ObsSpec(), seed: int = 0,
                 learner_kinds: tuple[str, ...] = (), ego_start: str | None = None,
                 ego_goal: str | None = None, record_trace: bool = False, ego_controller=None):
        self.road = road
        self.config = config
        self.population = population
        self.controller_factory = controller_factory
        self.obs_spec = obs_spec
        self.seed = int(seed)
        self.learner_kinds = tuple(learner_kinds)
        self.ego_start = ego_start
        self.ego_goal = ego_goal
        self.record_trace = record_trace
        self.ego_controller = ego_controller
        self.update_index = 0
        self.episode = -1
        self.world: World | None = None

    def reset(self) -> ObservationFrame:
        self.episode += 1
        self.world = reset_world(self.road, self.config, np.random.default_rng([self.seed, self.episode]),
                                 population=self.population,
                                 controller_factory=self.controller_factory,
                                 update_index=self.update_index, learner_kinds=self.learner_kinds,
                                 record_trace=self.record_trace, ego_start=self.ego_start,
                                 ego_goal=self.ego_goal,
                                 ego_controller=self.ego_controller() if self.ego_controller else None)
        return self.observe(self.world.ego_id)

    def observe(self, agent_id: int) -> ObservationFrame:
        return build_observation(self.world, agent_id, self.obs_spec)

    def extra_observations(self) -> dict[int, ObservationFrame]:
        """Observations of live non-ego learners, keyed by agent id."""
        w = self.world
        return {a.id: self.observe(a.id) for a in w.agents
                if a.id in w.learner_ids and a.id != w.ego_id}

    def _sparring_actions(self, skip) -> dict[int, ControlInput]:
        items, ids = [], []
        for a in self.world.agents:
            if a.id in skip or a.id == self.world.ego_id:
                continue
            if isinstance(a.controller, PolicyController):
                items.append((a.controller, build_observation(self.world, a.id, a.controller.obs_spec)))
                ids.append(a.id)
        if not items:
            return {}
        return dict(zip(ids, batched_policy_actions(items)))

    def step(self, action: ControlInput | None, extra_actions: dict[int, ControlInput] | None = None):
        w = self.world
        if w is None:
            raise RuntimeError("call reset() first")
        if w.closed:
            raise EpisodeClosedError("episode closed; reset before stepping again")
        extra_actions = dict(extra_actions or {})
        spawn_tick(w, self.config, w.population)
        external = self._sparring_actions(extra_actions)
        external.update(extra_actions)
        outcomes, _ = step_world(w, action, self.config, external=external, spawn=False)
        ego_out = outcomes[w.ego_id]
        extra = {aid: o for aid, o in outcomes.items() if aid in w.learner_ids and aid != w.ego_id}
        info = StepInfo(ego_out, ego_out.cause, extra, w.step_index)
        obs = None if ego_out.done else self.observe(w.ego_id)
        return obs, ego_out.ledger.total, ego_out.done, info
