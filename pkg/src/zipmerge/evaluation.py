"""Evaluation protocol, training-curve export and replay frames.

Evaluation runs independent seeded episodes with the ego acting without
exploration noise and tallies how each one ended. Rates are percentages with
binomial standard errors ``sqrt(p (1 - p) / n) * 100``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import _kernels
from .dynamics import VehicleGeometry
from .env import MergeEnv
from .idm_agent import IdmParams
from .observation import KIND_COLORS, LANE_COLOR, ObsSpec, write_ppm
from .policy import TwoStreamPolicy, controls_from, obs_to_tensors, sample_actions
from .road_network import RoadMap
from .selfplay import AgentZoo, PopulationControllers, PopulationSpec, build_population
from .sim_env import OUTCOMES, EpisodeConfig, IdmDriver, trace_to_csv


def binomial_stderr(p: float, n: int) -> float:
    """Standard error of a rate ``p`` in [0, 1] over ``n`` trials, in percent."""
    return math.sqrt(p * (1.0 - p) / n) * 100.0 if n else float("nan")


@dataclass(frozen=True)
class EvalReport:
    n_trials: int
    counts: dict
    population: str
    policy_tag: str
    seed: int
    outcomes: tuple = field(default=(), repr=False)  # per-trial cause, in trial order

    def rate(self, cause: str) -> float:
        return 100.0 * self.counts.get(cause, 0) / self.n_trials

    def stderr(self, cause: str) -> float:
        return binomial_stderr(self.counts.get(cause, 0) / self.n_trials, self.n_trials)

    @property
    def success_rate(self) -> float:
        return self.rate("success")

    @property
    def collision_rate(self) -> float:
        return self.rate("collision")

    @property
    def oob_rate(self) -> float:
        return self.rate("oob")

    @property
    def timeout_rate(self) -> float:
        return self.rate("timeout")

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("outcomes")
        for c in OUTCOMES:
            d[f"{c}_rate"] = self.rate(c)
            d[f"{c}_stderr"] = self.stderr(c)
        return d

    def summary(self) -> str:
        parts = [f"{c} {self.rate(c):.1f}% (+/-{self.stderr(c):.1f})" for c in OUTCOMES]
        return (f"{self.policy_tag} vs {self.population}, {self.n_trials} trials, seed {self.seed}: "
                + ", ".join(parts))


def policy_ego_action(policy: TwoStreamPolicy):
    """Deterministic action function ``frame -> ControlInput``."""

    def act(frame):
        raster, vector = obs_to_tensors([frame])
        with torch.no_grad():
            out = policy(raster, vector)
        u, sig, _, _ = sample_actions(out, None, deterministic=True)
        return controls_from(u, sig)[0]

    return act


def evaluate(policy: TwoStreamPolicy | None, population: PopulationSpec, road: RoadMap,
             n: int = 250, seed: int = 0, *, config: EpisodeConfig = EpisodeConfig(),
             zoo: AgentZoo | None = None, policy_tag: str = "policy",
             obs_spec: ObsSpec = ObsSpec(), ego_idm: IdmParams = IdmParams(),
             trace_path=None) -> EvalReport:
    """Run ``n`` trials; trial ``k`` resets with ``default_rng([seed, k])``.

    ``policy=None`` evaluates a rule-based ego with ``ego_idm`` parameters,
    which gives the baseline row. Sparring policy kinds come from ``zoo``.
    With ``trace_path`` every trial's trace is appended to one CSV.
    """
    sampler = build_population(population, zoo)
    factory = PopulationControllers(zoo, None, None, obs_spec)
    ego_ctl = (lambda: IdmDriver(ego_idm)) if policy is None else None
    env = MergeEnv(road, config, population=sampler, controller_factory=factory, obs_spec=obs_spec,
                   seed=seed, ego_controller=ego_ctl, record_trace=trace_path is not None)
    act = policy_ego_action(policy) if policy is not None else None
    outcomes = []
    trace = []
    for _ in range(n):
        obs = env.reset()
        done = False
        info = None
        while not done:
            obs, _, done, info = env.step(act(obs) if act else None)
        outcomes.append(info.cause)
        if trace_path is not None:
            trace.extend(env.world.trace)
    if trace_path is not None:
        trace_to_csv(trace, trace_path)
    counts = {c: outcomes.count(c) for c in OUTCOMES}
    return EvalReport(n, counts, str(population), policy_tag if policy is not None else "IDM",
                      int(seed), tuple(outcomes))


def tally_trace(rows) -> dict:
    """Ego outcome counts from a trace (rows from :func:`~zipmerge.sim_env.read_trace_csv`)."""
    counts = {c: 0 for c in OUTCOMES}
    for r in rows:
        if r["kind"] == "EGO_LEARNER" and r["outcome"]:
            counts[r["outcome"]] += 1
    return counts


CURVE_COLUMNS = ("update", "stage", "env_steps", "episodes", "success_rate", "collision_rate",
                 "oob_rate", "mean_return", "policy_loss", "value_loss", "entropy")


def training_curve(metrics_path) -> list[dict]:
    """Rows of a training metrics CSV with rates as percentages.

    Rates and the mean return stay blank for updates whose rollout window
    finished no episode.
    """
    rows = []
    with open(metrics_path, encoding="utf-8", newline="") as fh:
        for r in csv.DictReader(fh):
            row = {k: r[k] for k in CURVE_COLUMNS if k in r}
            for k in ("success_rate", "collision_rate", "oob_rate"):
                v = float(r[k]) if r[k] else math.nan
                row[k] = "" if math.isnan(v) else repr(100.0 * v)
            if row.get("mean_return") == "nan":
                row["mean_return"] = ""
            rows.append(row)
    return rows


def emit_training_curve(rows, sink) -> int:
    """Write curve rows as CSV to a path or text file object; returns the row count."""
    rows = list(rows)
    prev = -math.inf
    for r in rows:
        u = int(r["update"])
        if u <= prev:
            raise ValueError(f"update indices must increase, got {u} after {prev}")
        prev = u
    own = not hasattr(sink, "write")
    fh = open(sink, "w", encoding="utf-8", newline="") if own else sink
    try:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    finally:
        if own:
            fh.close()
    return len(rows)


# 3x5 bitmap digits for agent-id labels
_DIGITS = {
    "0": ("111", "101", "101", "101", "111"), "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"), "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"), "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"), "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"), "9": ("111", "101", "111", "001", "111"),
}
LABEL_COLOR = (255, 255, 255)
COLLISION_COLOR = (255, 255, 0)


def _draw_label(img: np.ndarray, text: str, row: int, col: int) -> None:
    h, w, _ = img.shape
    for k, ch in enumerate(text):
        glyph = _DIGITS[ch]
        for dr, line in enumerate(glyph):
            for dc, bit in enumerate(line):
                r, c = row + dr, col + 4 * k + dc
                if bit == "1" and 0 <= r < h and 0 <= c < w:
                    img[r, c] = LABEL_COLOR


@dataclass(frozen=True)
class ReplayView:
    """North-up view: world ``(cx, cy)`` at the image centre, ``+y`` towards row 0."""

    cx: float
    cy: float
    size: int = 256
    mpp: float = 1.0

    @classmethod
    def fit(cls, road: RoadMap, size: int = 256, margin: float = 5.0) -> "ReplayView":
        ax, ay, bx, by, _ = road.segments
        xs = np.concatenate([ax, bx])
        ys = np.concatenate([ay, by])
        span = max(xs.max() - xs.min(), ys.max() - ys.min()) + 2 * margin
        return cls(float(0.5 * (xs.min() + xs.max())), float(0.5 * (ys.min() + ys.max())),
                   size, span / size)

    def pixel(self, x: float, y: float) -> tuple[int, int]:
        h = self.size // 2
        return int(round(h - (y - self.cy) / self.mpp)), int(round(h + (x - self.cx) / self.mpp))


def render_replay_frame(road: RoadMap, rows, view: ReplayView,
                        geometry: VehicleGeometry = VehicleGeometry()) -> np.ndarray:
    """One frame for the trace rows of a single step.

    Agents use the observation colors; both members of a colliding pair are
    drawn in yellow. Each agent carries its id in white digits.
    """
    img = np.zeros((view.size, view.size, 3), dtype=np.uint8)
    ax, ay, bx, by, hw = road.segments
    # a heading of pi/2 puts world +y at the top of the image
    pose = (view.cx, view.cy, math.pi / 2, view.mpp)
    _kernels.draw_bands(img, ax, ay, bx, by, hw, *pose, np.array(LANE_COLOR, np.uint8))
    rows = sorted(rows, key=lambda r: (str(r["kind"]) == "EGO_LEARNER", int(r["agent_id"])))
    n = len(rows)
    if n:
        xs = np.array([float(r["x"]) for r in rows])
        ys = np.array([float(r["y"]) for r in rows])
        psis = np.array([float(r["psi"]) for r in rows])
        cols = np.array([COLLISION_COLOR if int(r["ev_collision"]) else KIND_COLORS[r["kind"]]
                         for r in rows], dtype=np.uint8)
        _kernels.draw_boxes(img, xs, ys, psis, np.full(n, geometry.length), np.full(n, geometry.width),
                            cols, *pose)
        for r, x, y in zip(rows, xs, ys):
            pr, pc = view.pixel(x, y)
            _draw_label(img, str(int(r["agent_id"])), pr - 8, pc + 3)
    return img


def split_episodes(trace_rows) -> list[list]:
    """Split concatenated trace rows wherever the step counter goes back."""
    episodes: list[list] = []
    last = math.inf
    for r in trace_rows:
        step = int(r["step"])
        if step < last:
            episodes.append([])
        episodes[-1].append(r)
        last = step
    return episodes


def export_replay(trace_rows, road: RoadMap, out_dir, *, view: ReplayView | None = None,
                  geometry: VehicleGeometry = VehicleGeometry()) -> list[Path]:
    """Write one PPM per recorded step.

    Single-episode traces give ``frame_00001.ppm`` and so on; traces holding
    several episodes prefix each name with ``ep0000_``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    view = view or ReplayView.fit(road)
    episodes = split_episodes(trace_rows)
    paths = []
    for e, rows in enumerate(episodes):
        prefix = f"ep{e:04d}_" if len(episodes) > 1 else ""
        by_step: dict[int, list] = {}
        for r in rows:
            by_step.setdefault(int(r["step"]), []).append(r)
        for step in sorted(by_step):
            p = out / f"{prefix}frame_{step:05d}.ppm"
            write_ppm(render_replay_frame(road, by_step[step], view, geometry), p)
            paths.append(p)
    return paths
