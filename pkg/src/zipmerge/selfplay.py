"""Agent zoo, sparring populations and the staged self-play driver.

Each stage trains the live policy against a mix of rule-based drivers and
frozen earlier policies, then freezes the result into the zoo under the
stage's tag. Inside a stage, agents of the stage's own tag are driven by the
live policy; every other policy kind is a frozen zoo snapshot run without
exploration noise.

Schedule files hold one stage per line::

    stage tag=SP1 pop=IDM:0.3,RL:0.3,SP1:0.4 updates=2

Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .env import MergeEnv, PolicyController
from .idm_agent import sample_idm_params
from .observation import OBS_LAYOUT_VERSION, ObsSpec
from .policy import PolicyArch, SnapshotError, TwoStreamPolicy, load_snapshot, save_snapshot
from .ppo import MetricsWriter, PpoConfig, PPOTrainer, RolloutCollector
from .road_network import RoadMap
from .sim_env import EpisodeConfig, IdmDriver

log = logging.getLogger(__name__)

POLICY_KINDS = ("RL", "SP1", "SP2")
KINDS = ("IDM",) + POLICY_KINDS
NAMED_POPULATIONS = {
    "popul1": {"IDM": 1.0},
    "popul2": {"IDM": 0.5, "RL": 0.5},
    "popul3": {"IDM": 0.3, "RL": 0.3, "SP1": 0.4},
    "popul4": {"IDM": 0.1, "RL": 0.2, "SP1": 0.3, "SP2": 0.4},
}
ZOO_INDEX = "zoo.index"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PopulationSpec:
    """Fractions of spawned sparring agents per kind, in :data:`KINDS` order."""

    fractions: tuple[float, ...]

    def __post_init__(self):
        if len(self.fractions) != len(KINDS):
            raise ConfigError(f"expected {len(KINDS)} fractions, got {len(self.fractions)}")
        if any(not 0.0 <= p <= 1.0 for p in self.fractions):
            raise ConfigError(f"fractions must lie in [0, 1], got {self.fractions}")
        if abs(math.fsum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions must sum to 1, got {math.fsum(self.fractions)}")

    @classmethod
    def from_dict(cls, fractions: dict[str, float]) -> "PopulationSpec":
        unknown = set(fractions) - set(KINDS)
        if unknown:
            raise ConfigError(f"unknown agent kind(s): {sorted(unknown)}")
        return cls(tuple(float(fractions.get(k, 0.0)) for k in KINDS))

    @classmethod
    def parse(cls, text: str) -> "PopulationSpec":
        """``IDM:0.3,RL:0.3,SP1:0.4`` or a named population such as ``popul3``."""
        key = text.strip().lower().replace(" ", "").replace(".", "")
        if key in NAMED_POPULATIONS:
            return cls.from_dict(NAMED_POPULATIONS[key])
        out: dict[str, float] = {}
        for part in text.split(","):
            m = re.fullmatch(r"\s*(\w+)\s*:\s*([0-9.eE+-]+)\s*", part)
            if m is None:
                raise ConfigError(f"bad population entry {part!r}")
            if m.group(1) in out:
                raise ConfigError(f"kind {m.group(1)} listed twice")
            try:
                out[m.group(1)] = float(m.group(2))
            except ValueError as exc:
                raise ConfigError(f"bad fraction in {part!r}") from exc
        return cls.from_dict(out)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(KINDS, self.fractions))

    @property
    def active_kinds(self) -> tuple[str, ...]:
        return tuple(k for k, p in zip(KINDS, self.fractions) if p > 0)

    def __str__(self) -> str:
        return ",".join(f"{k}:{p:g}" for k, p in zip(KINDS, self.fractions) if p > 0)


class KindSampler:
    """Draws each spawned agent's kind i.i.d. from a :class:`PopulationSpec`."""

    def __init__(self, spec: PopulationSpec):
        self.spec = spec
        self.kinds = KINDS
        self._cum = np.cumsum(spec.fractions)
        # pin the top so rounding can never select a trailing zero-fraction kind
        last = max(i for i, p in enumerate(spec.fractions) if p > 0)
        self._cum[last:] = 1.0

    def sample(self, rng: np.random.Generator) -> str:
        return KINDS[int(np.searchsorted(self._cum, rng.random(), side="right"))]


def build_population(spec: PopulationSpec, zoo: "AgentZoo | None" = None,
                     current_tag: str | None = None) -> KindSampler:
    """Sampler for ``spec`` after checking every active kind can be driven."""
    available = {"IDM"} | set(zoo.tags() if zoo is not None else ()) | ({current_tag} - {None})
    missing = [k for k in spec.active_kinds if k not in available]
    if missing:
        raise ConfigError(f"population uses kind(s) {missing} with no controller "
                          f"(available: {sorted(available)})")
    return KindSampler(spec)


@dataclass(frozen=True)
class ZooEntry:
    tag: str
    filename: str
    layout_version: int


class AgentZoo:
    """Append-only directory of frozen policy snapshots plus an index file.

    The index has one ``tag<TAB>filename<TAB>layout`` line per entry, in
    registration order.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.entries: list[ZooEntry] = []
        self._cache: dict[str, TwoStreamPolicy] = {}
        index = self.root / ZOO_INDEX
        if index.exists():
            for line in index.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    tag, fname, layout = line.split("\t")
                    self.entries.append(ZooEntry(tag, fname, int(layout)))

    def tags(self) -> list[str]:
        return [e.tag for e in self.entries]

    def __contains__(self, tag: str) -> bool:
        return tag in self.tags()

    def path(self, tag: str) -> Path:
        for e in self.entries:
            if e.tag == tag:
                return self.root / e.filename
        raise KeyError(tag)

    def register(self, tag: str, policy: TwoStreamPolicy, meta: dict | None = None) -> ZooEntry:
        """Write ``policy`` as ``<tag>.snap`` and append it to the index."""
        if tag in self:
            raise ConfigError(f"zoo already holds tag {tag!r}")
        if not re.fullmatch(r"\w+", tag):
            raise ConfigError(f"bad zoo tag {tag!r}")
        fname = f"{tag}.snap"
        data = save_snapshot(policy, dict(meta or {}, tag=tag), self.root / fname)
        frozen, _ = load_snapshot(data, expected_arch=policy.arch)
        entry = ZooEntry(tag, fname, OBS_LAYOUT_VERSION)
        with open(self.root / ZOO_INDEX, "a", encoding="utf-8") as fh:
            fh.write(f"{entry.tag}\t{entry.filename}\t{entry.layout_version}\n")
        self.entries.append(entry)
        self._cache[tag] = _freeze(frozen)
        return entry

    def load(self, tag: str) -> TwoStreamPolicy:
        """Frozen (no-grad, eval mode) policy for ``tag``; cached."""
        if tag not in self._cache:
            entry = next((e for e in self.entries if e.tag == tag), None)
            if entry is None:
                raise KeyError(tag)
            if entry.layout_version != OBS_LAYOUT_VERSION:
                raise SnapshotError(f"zoo entry {tag!r} uses observation layout "
                                    f"{entry.layout_version}, this build uses {OBS_LAYOUT_VERSION}")
            policy, _ = load_snapshot(self.root / entry.filename)
            self._cache[tag] = _freeze(policy)
        return self._cache[tag]


def _freeze(policy: TwoStreamPolicy) -> TwoStreamPolicy:
    policy.eval()
    for p in policy.parameters():
        p.requires_grad_(False)
    return policy


@dataclass(frozen=True)
class StageSpec:
    tag: str
    population: PopulationSpec
    updates: int


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("schedule has no stages")
        emitted: set[str] = set()
        for i, st in enumerate(self.stages):
            if st.tag in emitted:
                raise ConfigError(f"stage {i + 1}: tag {st.tag!r} emitted twice")
            if st.updates < 0:
                raise ConfigError(f"stage {i + 1}: negative update count")
            allowed = {"IDM", st.tag} | emitted
            bad = [k for k in st.population.active_kinds if k not in allowed]
            if bad:
                raise ConfigError(f"stage {i + 1} ({st.tag}) references {bad} before they exist")
            emitted.add(st.tag)

    @property
    def total_updates(self) -> int:
        return sum(s.updates for s in self.stages)


_STAGE_RE = re.compile(r"stage\s+tag=(\w+)\s+pop=(\S+)\s+updates=(\d+)")


def parse_schedule(text: str) -> StageSchedule:
    stages = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _STAGE_RE.fullmatch(line)
        if m is None:
            raise ConfigError(f"schedule line {n}: cannot parse {raw!r}")
        tag = m.group(1)
        if tag not in POLICY_KINDS:
            raise ConfigError(f"schedule line {n}: tag must be one of {POLICY_KINDS}, got {tag!r}")
        stages.append(StageSpec(tag, PopulationSpec.parse(m.group(2)), int(m.group(3))))
    return StageSchedule(tuple(stages))


def load_schedule(path) -> StageSchedule:
    return parse_schedule(Path(path).read_text(encoding="utf-8"))


def default_schedule(name: str = "default") -> StageSchedule:
    """Schedules shipped with the package: ``default`` (2-update stub stages) or ``desk``."""
    text = resources.files("zipmerge").joinpath("schedules", f"{name}.txt").read_text(encoding="utf-8")
    return parse_schedule(text)


class PopulationControllers:
    """Controller factory for one stage.

    IDM agents get a rule-based driver with sampled parameters; agents of the
    stage's own tag share the live policy (sampling actions); other policy
    kinds get their frozen zoo snapshot in deterministic mode. Every policy
    controller observes the scene from its own agent.
    """

    def __init__(self, zoo: AgentZoo | None, current_tag: str | None,
                 live_policy: TwoStreamPolicy | None, obs_spec: ObsSpec = ObsSpec()):
        self.zoo = zoo
        self.current_tag = current_tag
        self.live_policy = live_policy
        self.obs_spec = obs_spec

    def __call__(self, world, agent):
        if agent.kind == "IDM":
            return IdmDriver(sample_idm_params(world.rng, world.idm_sampling))
        rng = np.random.default_rng(world.rng.integers(2**63))
        if agent.kind == self.current_tag and self.live_policy is not None:
            return PolicyController(self.live_policy, rng, deterministic=False, obs_spec=self.obs_spec)
        if self.zoo is not None and agent.kind in self.zoo:
            return PolicyController(self.zoo.load(agent.kind), rng, deterministic=True,
                                    obs_spec=self.obs_spec)
        raise ConfigError(f"no controller for agent kind {agent.kind!r}")


def attach_policy_agents(world, zoo: AgentZoo | None, current_tag: str | None = None,
                         live_policy: TwoStreamPolicy | None = None,
                         obs_spec: ObsSpec = ObsSpec()) -> dict[int, object]:
    """Install a :class:`PopulationControllers` factory on ``world``.

    Live non-ego agents that already exist get fresh controllers too.
    Returns ``{agent id: controller}`` for those agents.
    """
    factory = PopulationControllers(zoo, current_tag, live_policy, obs_spec)
    world.controller_factory = factory
    attached = {}
    for a in world.agents:
        if a.id != world.ego_id:
            a.controller = factory(world, a)
            attached[a.id] = a.controller
    return attached


@dataclass
class SelfPlayResult:
    policy: TwoStreamPolicy
    zoo: AgentZoo
    metrics_path: Path
    update_index: int


def run_selfplay(schedule: StageSchedule, road: RoadMap, env_config: EpisodeConfig = EpisodeConfig(),
                 ppo_config: PpoConfig = PpoConfig(), seed: int = 0, out_dir=".", *,
                 arch: PolicyArch | None = None, obs_spec: ObsSpec = ObsSpec(),
                 policy: TwoStreamPolicy | None = None) -> SelfPlayResult:
    """Train through every stage of ``schedule``, writing into ``out_dir``.

    ``out_dir`` receives ``metrics.csv`` (one row per update) and ``zoo/``.
    Reward annealing follows the global update index across stages.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    zoo = AgentZoo(out / "zoo")
    clash = [s.tag for s in schedule.stages if s.tag in zoo]
    if clash:
        raise ConfigError(f"zoo in {out} already holds {clash}")
    if policy is None:
        policy = TwoStreamPolicy(arch or PolicyArch(), seed=seed)
    trainer = PPOTrainer(policy, ppo_config, seed)
    metrics_path = out / "metrics.csv"
    env_steps = 0
    with MetricsWriter(metrics_path) as metrics:
        for s_idx, stage in enumerate(schedule.stages):
            sampler = build_population(stage.population, zoo, current_tag=stage.tag)
            factory = PopulationControllers(zoo, stage.tag, policy, obs_spec)
            learners = (stage.tag,) if ppo_config.learn_from_all_current else ()
            env_seeds = np.random.SeedSequence([seed, s_idx]).generate_state(ppo_config.n_envs)
            envs = [MergeEnv(road, env_config, population=sampler, controller_factory=factory,
                             obs_spec=obs_spec, seed=int(es), learner_kinds=learners)
                    for es in env_seeds]
            collector = RolloutCollector(envs, policy, ppo_config, seed=int(seed) * 1000 + s_idx)
            log.info("stage %d/%d tag=%s pop=%s updates=%d (global update %d)", s_idx + 1,
                     len(schedule.stages), stage.tag, stage.population, stage.updates,
                     trainer.update_index)
            for _ in range(stage.updates):
                for env in envs:
                    env.update_index = trainer.update_index
                    if env.world is not None:
                        env.world.update_index = trainer.update_index
                buffer, ep_stats = collector.collect()
                stats = trainer.update(buffer)
                env_steps += ppo_config.n_envs * ppo_config.horizon
                metrics.write(stage.tag, stats, ep_stats, env_steps)
                log.info("update %d return=%.2f success=%.2f policy_loss=%.4f", stats.update_index,
                         ep_stats.mean_return, ep_stats.rate("success"), stats.policy_loss)
            zoo.register(stage.tag, policy, {"stage": s_idx + 1, "seed": int(seed),
                                             "update_index": trainer.update_index,
                                             "population": str(stage.population)})
            log.info("stage %s done; zoo now %s", stage.tag, zoo.tags())
    return SelfPlayResult(policy, zoo, metrics_path, trainer.update_index)
