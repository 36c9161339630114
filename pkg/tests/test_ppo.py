import csv

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from zipmerge.env import MergeEnv
from zipmerge.observation import ObsSpec
from zipmerge.policy import MICRO_ARCH, PolicyArch, TwoStreamPolicy, log_prob, parameters_equal
from zipmerge.ppo import (EpisodeStats, MetricsWriter, PpoConfig, PPOTrainer, RolloutBuffer, RolloutCollector,
                          UpdateStats, _Stream, clipped_surrogate, compute_gae, normalize)
from zipmerge.road_network import shipped_map
from zipmerge.sim_env import EpisodeConfig


def test_gae_hand_example():
    adv, ret = compute_gae([1, 1, 1], [0, 0, 0], [False] * 3, 0.0, gamma=0.5, lam=1.0)
    np.testing.assert_allclose(adv, [1.75, 1.5, 1.0])
    np.testing.assert_allclose(ret, adv)


def test_gae_no_bootstrap_across_done():
    adv, _ = compute_gae([1, 1, 1], [0, 0, 0], [False, True, False], 4.0, gamma=0.5, lam=1.0)
    np.testing.assert_allclose(adv, [1.5, 1.0, 3.0])


def test_gae_returns_are_adv_plus_value():
    v = np.array([0.5, -1.0, 2.0])
    adv, ret = compute_gae([1, 0, 2], v, [False, False, False], 1.0, 0.9, 0.8)
    np.testing.assert_allclose(ret, adv + v)


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.booleans()), min_size=1, max_size=30),
       st.floats(-10, 10), st.floats(0, 1))
def test_gae_lambda_zero_is_td_error(rows, boot, gamma):
    r, v, d = (np.array(x) for x in zip(*rows))
    adv, _ = compute_gae(r, v, d, boot, gamma, 0.0)
    v_next = np.append(v[1:], boot)
    np.testing.assert_allclose(adv, r + gamma * v_next * (~d) - v, atol=1e-9)


def test_normalize():
    a = normalize(np.array([1.0, 2.0, 3.0, 6.0]))
    assert a.mean() == pytest.approx(0.0, abs=1e-12)
    assert a.std() == pytest.approx(1.0, rel=1e-6)
    np.testing.assert_array_equal(normalize(np.array([5.0])), [0.0])
    np.testing.assert_array_equal(normalize(np.zeros(4)), np.zeros(4))


@given(st.floats(0, 5), st.floats(-10, 10))
def test_clipped_never_exceeds_unclipped(r, a):
    out = clipped_surrogate(torch.tensor(r, dtype=torch.float64), torch.tensor(a, dtype=torch.float64), 0.2)
    assert out.item() <= r * a + 1e-12


@given(st.floats(0.8, 1.2), st.floats(-10, 10))
def test_clip_inactive_inside_band(r, a):
    out = clipped_surrogate(torch.tensor(r, dtype=torch.float64), torch.tensor(a, dtype=torch.float64), 0.2)
    assert out.item() == pytest.approx(r * a)


@pytest.mark.parametrize("r, a, zero", [(1.5, 1.0, True), (0.5, -1.0, True), (1.5, -1.0, False),
                                        (0.5, 1.0, False), (1.1, 1.0, False)])
def test_clip_gradient(r, a, zero):
    ratio = torch.tensor(r, dtype=torch.float64, requires_grad=True)
    clipped_surrogate(ratio, torch.tensor(a, dtype=torch.float64), 0.2).backward()
    assert (ratio.grad.item() == 0.0) == zero


@pytest.mark.parametrize("kw", [dict(clip_eps=0.0), dict(clip_eps=1.0), dict(gamma=1.1), dict(gae_lambda=-0.1),
                                dict(batch_size=0), dict(horizon=0), dict(lr=0.0), dict(max_grad_norm=-1.0),
                                dict(reward_scale=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        PpoConfig(**kw)


def synthetic_buffer(policy, n, seed=0, reward_fn=None, done=True):
    """One stream of single-step episodes on random micro observations."""
    rng = np.random.default_rng(seed)
    s = _Stream()
    raster = rng.integers(0, 256, (n, 8, 8, 3), dtype=np.uint8)
    vector = rng.normal(size=(n, 4)).astype(np.float32)
    with torch.no_grad():
        out = policy(torch.from_numpy(raster), torch.from_numpy(vector))
    u = (out.mean + out.log_std.exp() * torch.from_numpy(rng.normal(size=(n, 2))).float()).numpy()
    sig = rng.integers(0, 3, n)
    with torch.no_grad():
        lp = log_prob(out, torch.from_numpy(u), torch.from_numpy(sig)).numpy()
    for t in range(n):
        s.raster.append(raster[t])
        s.vector.append(vector[t])
        s.u.append(u[t])
        s.signal.append(sig[t])
        s.reward.append(reward_fn(u[t]) if reward_fn else 0.0)
        s.value.append(float(out.value[t]))
        s.log_prob.append(lp[t])
        s.done.append(done)
        s.episode.append(t)
    return RolloutBuffer([s], [(0, None)])


def test_zero_advantage_leaves_parameters_unchanged():
    pol = TwoStreamPolicy(MICRO_ARCH, seed=0)
    ref = TwoStreamPolicy(MICRO_ARCH, seed=0)
    buf = synthetic_buffer(pol, 32)
    buf.advantages = np.zeros(32)
    buf.returns = np.zeros(32)
    cfg = PpoConfig(value_coef=0.0, entropy_coef=0.0, batch_size=8, epochs=2)
    PPOTrainer(pol, cfg).update(buf)
    assert parameters_equal(pol, ref)


def test_first_step_bounded_by_grad_clip():
    pol = TwoStreamPolicy(MICRO_ARCH, seed=0)
    before = torch.cat([p.detach().reshape(-1).clone() for p in pol.parameters()])
    buf = synthetic_buffer(pol, 16, reward_fn=lambda u: 1e6 * u[1])
    cfg = PpoConfig(batch_size=16, epochs=1, lr=0.1, max_grad_norm=0.5)
    stats = PPOTrainer(pol, cfg).update(buf)
    after = torch.cat([p.detach().reshape(-1) for p in pol.parameters()])
    assert stats.grad_norm > cfg.max_grad_norm
    # first momentum step is lr times the clipped gradient
    assert torch.linalg.norm(after - before).item() <= cfg.lr * cfg.max_grad_norm * (1 + 1e-5)


def test_bandit_moves_mean_toward_reward():
    pol = TwoStreamPolicy(MICRO_ARCH, seed=0)
    probe = synthetic_buffer(pol, 64, seed=99)
    x = (torch.from_numpy(probe.raster), torch.from_numpy(probe.vector))
    start = pol(*x).mean[:, 1].mean().item()
    trainer = PPOTrainer(pol, PpoConfig(batch_size=32, lr=0.01))
    for k in range(15):
        trainer.update(synthetic_buffer(pol, 64, seed=k, reward_fn=lambda u: float(np.sign(u[1]))))
    assert pol(*x).mean[:, 1].mean().item() > start + 0.1


def test_update_deterministic_given_seed():
    pols = [TwoStreamPolicy(MICRO_ARCH, seed=0) for _ in range(2)]
    for p in pols:
        buf = synthetic_buffer(p, 40, seed=1, reward_fn=lambda u: float(u[0]))
        PPOTrainer(p, PpoConfig(batch_size=16), seed=5).update(buf)
    assert parameters_equal(*pols)


def test_update_counter_and_stats():
    pol = TwoStreamPolicy(MICRO_ARCH, seed=0)
    trainer = PPOTrainer(pol, PpoConfig(batch_size=16, epochs=2))
    s1 = trainer.update(synthetic_buffer(pol, 40))
    s2 = trainer.update(synthetic_buffer(pol, 40, seed=1))
    assert (s1.update_index, s2.update_index) == (1, 2)
    assert s1.n_samples == 40
    assert np.isfinite([s1.policy_loss, s1.value_loss, s1.entropy, s1.grad_norm]).all()


def test_buffer_finish_per_stream():
    pol = TwoStreamPolicy(MICRO_ARCH, seed=0)
    a = synthetic_buffer(pol, 3, reward_fn=lambda u: 1.0, done=False)._streams[0]
    b = synthetic_buffer(pol, 2, reward_fn=lambda u: 2.0, done=False)._streams[0]
    a.bootstrap, b.bootstrap = 10.0, -3.0
    buf = RolloutBuffer([a, b], [(0, None), (1, None)])
    buf.finish(0.9, 0.95)
    ea, _ = compute_gae(a.reward, a.value, a.done, 10.0, 0.9, 0.95)
    eb, _ = compute_gae(b.reward, b.value, b.done, -3.0, 0.9, 0.95)
    np.testing.assert_allclose(buf.advantages, np.concatenate([ea, eb]))


SMOKE_ARCH = PolicyArch(raster_size=32)
SMOKE_OBS = ObsSpec(size=32, mpp=2.0)
SMOKE_ENV = EpisodeConfig(spawn_prob=0.0, max_steps=20, init_vel_range=(5.0, 8.0))


def _collect(seed, scale=1.0):
    road = shipped_map("straight")
    cfg = PpoConfig(n_envs=2, horizon=25, reward_scale=scale)
    envs = [MergeEnv(road, SMOKE_ENV, seed=i, obs_spec=SMOKE_OBS) for i in range(2)]
    pol = TwoStreamPolicy(SMOKE_ARCH, seed=0)
    return RolloutCollector(envs, pol, cfg, seed).collect()


def test_collector_layout_and_determinism():
    buf, stats = _collect(3)
    assert len(buf) == 50 and buf.stream_lengths == [25, 25]
    assert buf.raster.shape == (50, 32, 32, 3)
    # 20-step episodes end inside a 25-step window
    assert len(stats.returns) == 2 and buf.done.sum() == 2
    again, _ = _collect(3)
    np.testing.assert_array_equal(buf.u, again.u)
    np.testing.assert_array_equal(buf.reward, again.reward)


def test_reward_scale_applies_to_stored_rewards_only():
    b1, s1 = _collect(3)
    b2, s2 = _collect(3, scale=0.01)
    np.testing.assert_allclose(b2.reward, 0.01 * b1.reward)
    assert s1.returns == s2.returns


def test_collector_env_count_checked():
    pol = TwoStreamPolicy(SMOKE_ARCH)
    with pytest.raises(ValueError):
        RolloutCollector([], pol, PpoConfig(n_envs=2), 0)


def test_episode_stats():
    s = EpisodeStats([1.0, 3.0], ["success", "oob"])
    assert s.mean_return == 2.0 and s.rate("oob") == 0.5
    assert np.isnan(EpisodeStats().mean_return) and np.isnan(EpisodeStats().rate("oob"))


def test_metrics_writer_appends(tmp_path):
    path = tmp_path / "m.csv"
    stats = UpdateStats(1, 0.1, 0.2, 0.3, 0.4, 0.0, 10)
    for _ in range(2):
        with MetricsWriter(path) as w:
            w.write("RL", stats, EpisodeStats([1.5], ["success"]), 100)
    rows = list(csv.reader(path.open()))
    assert rows[0][0] == "update" and len(rows) == 3
    assert float(rows[1][4]) == 1.5 and rows[2][1] == "RL"
