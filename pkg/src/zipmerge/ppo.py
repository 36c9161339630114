"""Clipped-surrogate PPO with GAE, momentum SGD and gradient-norm clipping.

Rollouts step ``n_envs`` environments in lock-step and evaluate the policy on
all of them in one batch. Every environment owns its own numpy generator
(spawned from the master seed), and the buffer is indexed by
``(stream, t)``, so results do not depend on evaluation order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .policy import (PolicyOutput, TwoStreamPolicy, controls_from, log_prob_and_entropy,
                     obs_to_tensors, sample_actions)


@dataclass(frozen=True)
class PpoConfig:
    batch_size: int = 32
    lr: float = 0.0025
    entropy_coef: float = 0.001
    horizon: int = 1024
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    value_coef: float = 0.5
    n_envs: int = 32
    max_grad_norm: float = 0.5
    momentum: float = 0.9
    learn_from_all_current: bool = False
    reward_scale: float = 1.0  # applied to stored rewards only; reported returns stay unscaled

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if min(self.batch_size, self.horizon, self.epochs, self.n_envs) < 1:
            raise ValueError("batch_size, horizon, epochs and n_envs must be positive")
        if self.lr <= 0 or self.max_grad_norm <= 0 or self.reward_scale <= 0:
            raise ValueError("lr, max_grad_norm and reward_scale must be positive")


class NonFiniteLossError(FloatingPointError):
    pass


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float, lam: float):
    """Generalized advantage estimates for one stream of transitions.

    ``dones[t]`` marks that the episode ended at step ``t``; nothing is
    bootstrapped across it. ``bootstrap_value`` is ``V`` of the state after
    the last transition. Returns ``(advantages, returns)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    next_v = float(bootstrap_value)
    next_a = 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_v * live - values[t]
        next_a = delta + gamma * lam * live * next_a
        adv[t] = next_a
        next_v = values[t]
    return adv, adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


@dataclass
class _Stream:
    raster: list = field(default_factory=list)
    vector: list = field(default_factory=list)
    u: list = field(default_factory=list)
    signal: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    value: list = field(default_factory=list)
    log_prob: list = field(default_factory=list)
    done: list = field(default_factory=list)
    episode: list = field(default_factory=list)
    bootstrap: float = 0.0

    def __len__(self):
        return len(self.reward)


class RolloutBuffer:
    """Flat transition arrays plus advantages once :meth:`finish` has run.

    Streams are concatenated in a fixed order: one per environment for the
    ego, then extra learner trajectories sorted by ``(env, agent id)``.
    """

    FIELDS = ("raster", "vector", "u", "signal", "reward", "value", "log_prob", "done", "episode")

    def __init__(self, streams: list[_Stream], stream_keys: list[tuple]):
        self.stream_keys = stream_keys
        self.stream_lengths = [len(s) for s in streams]
        self._streams = streams
        self.advantages: np.ndarray | None = None
        self.returns: np.ndarray | None = None
        cat = {}
        for f in self.FIELDS:
            parts = [np.asarray(getattr(s, f)) for s in streams if len(s)]
            cat[f] = np.concatenate(parts) if parts else np.zeros(0)
        self.raster = cat["raster"].astype(np.uint8)
        self.vector = cat["vector"].astype(np.float32)
        self.u = cat["u"].astype(np.float32)
        self.signal = cat["signal"].astype(np.int64)
        self.reward = cat["reward"].astype(np.float64)
        self.value = cat["value"].astype(np.float64)
        self.log_prob = cat["log_prob"].astype(np.float32)
        self.done = cat["done"].astype(bool)
        self.episode = cat["episode"].astype(np.int64)

    def __len__(self):
        return len(self.reward)

    def finish(self, gamma: float, lam: float) -> None:
        advs, rets = [], []
        start = 0
        for s, n in zip(self._streams, self.stream_lengths):
            if n == 0:
                continue
            sl = slice(start, start + n)
            a, r = compute_gae(self.reward[sl], self.value[sl], self.done[sl], s.bootstrap, gamma, lam)
            advs.append(a)
            rets.append(r)
            start += n
        self.advantages = np.concatenate(advs) if advs else np.zeros(0)
        self.returns = np.concatenate(rets) if rets else np.zeros(0)


@dataclass
class EpisodeStats:
    returns: list = field(default_factory=list)
    causes: list = field(default_factory=list)

    def rate(self, cause: str) -> float:
        return self.causes.count(cause) / len(self.causes) if self.causes else float("nan")

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns)) if self.returns else float("nan")


class RolloutCollector:
    """Keeps ``n_envs`` environments alive across updates and fills buffers."""

    def __init__(self, envs, policy: TwoStreamPolicy, config: PpoConfig, seed: int):
        self.envs = list(envs)
        if len(self.envs) != config.n_envs:
            raise ValueError(f"expected {config.n_envs} environments, got {len(self.envs)}")
        self.policy = policy
        self.config = config
        ss = np.random.SeedSequence(seed)
        self.rngs = [np.random.default_rng(s) for s in ss.spawn(len(self.envs))]
        self.obs = [None] * len(self.envs)
        self.ep_return = [0.0] * len(self.envs)
        self.ep_count = [0] * len(self.envs)

    def _reset(self, i: int):
        try:
            self.obs[i] = self.envs[i].reset()
        except Exception as exc:
            raise RuntimeError(f"environment {i} failed on reset: {exc}") from exc
        self.ep_return[i] = 0.0

    def _evaluate(self, frames, rngs):
        raster, vector = obs_to_tensors(frames)
        with torch.no_grad():
            out = self.policy(raster, vector)
        u, sig, lp, _ = sample_actions(out, rngs)
        return raster.numpy(), vector.numpy(), u, sig, lp, out.value.numpy().astype(np.float64)

    def collect(self, horizon: int | None = None) -> tuple[RolloutBuffer, EpisodeStats]:
        horizon = horizon or self.config.horizon
        n = len(self.envs)
        for i in range(n):
            if self.obs[i] is None:
                self._reset(i)
        ego = [_Stream() for _ in range(n)]
        extras: dict[tuple, _Stream] = {}
        stats = EpisodeStats()
        use_extra = self.config.learn_from_all_current

        for _t in range(horizon):
            frames = list(self.obs)
            keys = [None] * n
            if use_extra:
                for i, env in enumerate(self.envs):
                    for aid, fr in sorted(env.extra_observations().items()):
                        frames.append(fr)
                        keys.append((i, aid))
            rngs = self.rngs + [self.rngs[k[0]] for k in keys[n:]]
            raster, vector, u, sig, lp, val = self._evaluate(frames, rngs)
            controls = controls_from(u, sig)
            extra_actions = [dict() for _ in range(n)]
            for j in range(n, len(frames)):
                extra_actions[keys[j][0]][keys[j][1]] = controls[j]

            for i, env in enumerate(self.envs):
                try:
                    obs, reward, done, info = env.step(controls[i], extra_actions[i] or None)
                except Exception as exc:
                    raise RuntimeError(f"environment {i} failed at step: {exc}") from exc
                s = ego[i]
                s.raster.append(raster[i])
                s.vector.append(vector[i])
                s.u.append(u[i])
                s.signal.append(sig[i])
                s.reward.append(reward * self.config.reward_scale)
                s.value.append(val[i])
                s.log_prob.append(lp[i])
                s.done.append(done)
                s.episode.append(self.ep_count[i])
                self.ep_return[i] += reward
                if done:
                    stats.returns.append(self.ep_return[i])
                    stats.causes.append(getattr(info, "cause", None))
                    self.ep_count[i] += 1
                    self._reset(i)
                else:
                    self.obs[i] = obs
                if use_extra:
                    self._log_extras(i, info, extras, keys, raster, vector, u, sig, val, lp, n,
                                     self.config.reward_scale)

        # bootstrap values of the states after the last transition
        tail = list(self.obs)
        tail_keys = [(i, None) for i in range(n)]
        if use_extra:
            for i, env in enumerate(self.envs):
                for aid, fr in sorted(env.extra_observations().items()):
                    if (i, aid) in extras:
                        tail.append(fr)
                        tail_keys.append((i, aid))
        raster, vector = obs_to_tensors(tail)
        with torch.no_grad():
            v_tail = self.policy(raster, vector).value.numpy().astype(np.float64)
        for (i, aid), v in zip(tail_keys, v_tail):
            stream = ego[i] if aid is None else extras[(i, aid)]
            stream.bootstrap = 0.0 if stream.done and stream.done[-1] else float(v)
        keys_sorted = sorted(extras)
        streams = ego + [extras[k] for k in keys_sorted]
        stream_keys = [(i, None) for i in range(n)] + keys_sorted
        return RolloutBuffer(streams, stream_keys), stats

    @staticmethod
    def _log_extras(i, info, extras, keys, raster, vector, u, sig, val, lp, n, scale):
        outcomes = getattr(info, "extra", {}) or {}
        for j in range(n, len(keys)):
            if keys[j][0] != i:
                continue
            aid = keys[j][1]
            o = outcomes.get(aid)
            if o is None or o.ledger is None:
                continue
            s = extras.setdefault((i, aid), _Stream())
            s.raster.append(raster[j])
            s.vector.append(vector[j])
            s.u.append(u[j])
            s.signal.append(sig[j])
            s.reward.append(o.ledger.total * scale)
            s.value.append(val[j])
            s.log_prob.append(lp[j])
            s.done.append(o.done)
            s.episode.append(aid)


@dataclass
class LossStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_frac: float


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, eps: float) -> torch.Tensor:
    """Pointwise ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    return torch.minimum(ratio * adv, ratio.clamp(1.0 - eps, 1.0 + eps) * adv)


def ppo_loss(policy: TwoStreamPolicy, batch: dict, config: PpoConfig) -> tuple[torch.Tensor, LossStats]:
    """Scalar PPO loss on a minibatch dict of tensors.

    Keys: ``raster, vector, u, signal, old_log_prob, advantages, returns``.
    """
    out: PolicyOutput = policy(batch["raster"], batch["vector"])
    dtype = out.mean.dtype
    lp, ent = log_prob_and_entropy(out, batch["u"].to(dtype), batch["signal"])
    ratio = torch.exp(lp - batch["old_log_prob"].to(dtype))
    adv = batch["advantages"].to(dtype)
    pol = -clipped_surrogate(ratio, adv, config.clip_eps).mean()
    vloss = ((out.value - batch["returns"].to(dtype)) ** 2).mean()
    ent_m = ent.mean()
    loss = pol + config.value_coef * vloss - config.entropy_coef * ent_m
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite PPO loss: policy={pol.item()}, value={vloss.item()}, entropy={ent_m.item()}, "
            f"max|ratio|={ratio.abs().max().item()}")
    with torch.no_grad():
        clip_frac = ((ratio - 1.0).abs() > config.clip_eps).to(dtype).mean().item()
    return loss, LossStats(pol.item(), vloss.item(), ent_m.item(), clip_frac)


def loss_and_grad(policy: TwoStreamPolicy, batch: dict, config: PpoConfig):
    """Loss value and flat gradient vector (for checks)."""
    policy.zero_grad(set_to_none=True)
    loss, _ = ppo_loss(policy, batch, config)
    loss.backward()
    grad = torch.cat([p.grad.reshape(-1) if p.grad is not None else torch.zeros_like(p).reshape(-1)
                      for p in policy.parameters()])
    return loss.item(), grad.detach().clone()


@dataclass
class UpdateStats:
    update_index: int
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float
    clip_frac: float
    n_samples: int


class PPOTrainer:
    """Owns the optimizer state and the global update counter."""

    def __init__(self, policy: TwoStreamPolicy, config: PpoConfig, seed: int = 0):
        self.policy = policy
        self.config = config
        self.optimizer = torch.optim.SGD(policy.parameters(), lr=config.lr, momentum=config.momentum)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5eed]))
        self.update_index = 0

    def update(self, buffer: RolloutBuffer) -> UpdateStats:
        cfg = self.config
        if buffer.advantages is None:
            buffer.finish(cfg.gamma, cfg.gae_lambda)
        n = len(buffer)
        adv = normalize(buffer.advantages)
        tensors = {
            "raster": torch.from_numpy(buffer.raster),
            "vector": torch.from_numpy(buffer.vector),
            "u": torch.from_numpy(buffer.u),
            "signal": torch.from_numpy(buffer.signal),
            "old_log_prob": torch.from_numpy(buffer.log_prob),
            "advantages": torch.from_numpy(adv.astype(np.float32)),
            "returns": torch.from_numpy(buffer.returns.astype(np.float32)),
        }
        acc = {"policy_loss": [], "value_loss": [], "entropy": [], "grad_norm": [], "clip_frac": []}
        for _ in range(cfg.epochs):
            perm = self.rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = torch.from_numpy(perm[start:start + cfg.batch_size])
                batch = {k: v[idx] for k, v in tensors.items()}
                self.optimizer.zero_grad(set_to_none=True)
                loss, ls = ppo_loss(self.policy, batch, cfg)
                loss.backward()
                gn = torch.nn.utils.clip_grad_norm_(self.policy.parameters(), cfg.max_grad_norm)
                self.optimizer.step()
                acc["policy_loss"].append(ls.policy_loss)
                acc["value_loss"].append(ls.value_loss)
                acc["entropy"].append(ls.entropy)
                acc["grad_norm"].append(float(gn))
                acc["clip_frac"].append(ls.clip_frac)
        self.update_index += 1
        mean = {k: float(np.mean(v)) if v else float("nan") for k, v in acc.items()}
        return UpdateStats(self.update_index, mean["policy_loss"], mean["value_loss"], mean["entropy"],
                           mean["grad_norm"], mean["clip_frac"], n)


METRIC_COLUMNS = ("update", "stage", "env_steps", "episodes", "mean_return", "success_rate",
                  "collision_rate", "oob_rate", "policy_loss", "value_loss", "entropy", "grad_norm")


class MetricsWriter:
    """Appends one CSV line per update; floats are written with ``repr``."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(METRIC_COLUMNS)

    def write(self, stage: str, stats: UpdateStats, episodes: EpisodeStats, env_steps: int) -> None:
        row = [stats.update_index, stage, env_steps, len(episodes.returns), episodes.mean_return,
               episodes.rate("success"), episodes.rate("collision"), episodes.rate("oob"),
               stats.policy_loss, stats.value_loss, stats.entropy, stats.grad_norm]
        self._w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

