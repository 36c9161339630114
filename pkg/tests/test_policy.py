import io
import math
import struct
import zlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from zipmerge.dynamics import ACCEL_MAX, ACCEL_MIN, STEER_BOUND, Signal
from zipmerge.observation import VECTOR_DIM
from zipmerge.policy import (LOG_STD_MAX, LOG_STD_MIN, MICRO_ARCH, PolicyArch, PolicyOutput,
                             SnapshotCorruptError, SnapshotShapeError, SnapshotVersionError,
                             TwoStreamPolicy, controls_from, entropy, entropy_bounds, load_snapshot,
                             log_prob, parameters_equal, sample_action, sample_actions, save_snapshot,
                             squash)

HALF_LOG_2PI_E = 0.5 * math.log(2 * math.pi * math.e)


def micro_inputs(b=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    raster = torch.randint(0, 256, (b, 8, 8, 3), dtype=torch.uint8, generator=g)
    return raster, torch.randn(b, 4, generator=g)


def output(mean=(0.0, 0.0), log_std=(0.0, 0.0), logits=(0.0, 0.0, 0.0)):
    t = lambda x: torch.tensor([x], dtype=torch.float64)  # noqa: E731
    return PolicyOutput(t(mean), t(log_std), t(logits), torch.zeros(1, dtype=torch.float64))


def test_forward_shapes_default_arch():
    pol = TwoStreamPolicy(seed=0)
    raster = torch.zeros(2, 128, 128, 3, dtype=torch.uint8)
    out = pol(raster, torch.zeros(2, VECTOR_DIM))
    assert out.mean.shape == (2, 2) and out.log_std.shape == (2, 2)
    assert out.logits.shape == (2, 3) and out.value.shape == (2,)


def test_uint8_and_unit_float_rasters_agree():
    pol = TwoStreamPolicy(MICRO_ARCH, seed=1)
    raster, vector = micro_inputs()
    a = pol(raster, vector)
    b = pol(raster.float() / 255.0, vector)
    torch.testing.assert_close(a.mean, b.mean)
    torch.testing.assert_close(a.value, b.value)


@pytest.mark.parametrize("raster_shape, vector_shape", [((2, 8, 8), (2, 4)), ((2, 9, 8, 3), (2, 4)),
                                                        ((2, 8, 8, 3), (2, 5)), ((2, 8, 8, 3), (3, 4))])
def test_bad_shapes_rejected(raster_shape, vector_shape):
    pol = TwoStreamPolicy(MICRO_ARCH)
    with pytest.raises(ValueError):
        pol(torch.zeros(raster_shape), torch.zeros(vector_shape))


def test_same_seed_same_parameters():
    assert parameters_equal(TwoStreamPolicy(MICRO_ARCH, seed=4), TwoStreamPolicy(MICRO_ARCH, seed=4))
    assert not parameters_equal(TwoStreamPolicy(MICRO_ARCH, seed=4), TwoStreamPolicy(MICRO_ARCH, seed=5))


def test_init_log_std():
    arch = PolicyArch(**{**MICRO_ARCH.__dict__, "init_log_std": -1.0})
    pol = TwoStreamPolicy(arch, seed=0)
    out = pol(*micro_inputs())
    # head weights are tiny, so the bias dominates
    assert torch.allclose(out.log_std, torch.full_like(out.log_std, -1.0), atol=0.05)


@pytest.mark.parametrize("bias, bound", [(10.0, LOG_STD_MAX), (-10.0, LOG_STD_MIN)])
def test_log_std_clamped(bias, bound):
    pol = TwoStreamPolicy(MICRO_ARCH, seed=0)
    with torch.no_grad():
        pol.log_std_head.bias.fill_(bias)
    out = pol(*micro_inputs())
    assert torch.all(out.log_std == bound)


def test_squash_range():
    u = torch.tensor([[-50.0, -50.0], [0.0, 0.0], [50.0, 50.0]], dtype=torch.float64)
    a = squash(u)
    torch.testing.assert_close(a[0], torch.tensor([-STEER_BOUND, ACCEL_MIN], dtype=torch.float64))
    torch.testing.assert_close(a[1], torch.tensor([0.0, -1.0], dtype=torch.float64))
    torch.testing.assert_close(a[2], torch.tensor([STEER_BOUND, ACCEL_MAX], dtype=torch.float64))


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1, 0.5), st.floats(-4, 4), st.floats(-4, 4),
       st.sampled_from([0, 1, 2]))
@settings(max_examples=50)
def test_log_prob_change_of_variables(m0, m1, ls, u0, u1, sig):
    out = output((m0, m1), (ls, ls), (0.3, -0.2, 0.1))
    u = torch.tensor([[u0, u1]], dtype=torch.float64)
    got = log_prob(out, u, torch.tensor([sig])).item()
    half = (STEER_BOUND, 0.5 * (ACCEL_MAX - ACCEL_MIN))
    want = 0.0
    for ui, mi, hi in zip((u0, u1), (m0, m1), half):
        want += stats.norm.logpdf(ui, mi, math.exp(ls)) - math.log(hi * (1 - math.tanh(ui) ** 2))
    logits = np.array([0.3, -0.2, 0.1])
    want += logits[sig] - math.log(np.exp(logits).sum())
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_log_prob_matches_sample_histogram():
    out = output((0.3, -0.5), (-0.5, -0.2))
    rng = np.random.default_rng(0)
    n = 200_000
    batch = PolicyOutput(out.mean.expand(n, 2), out.log_std.expand(n, 2), out.logits.expand(n, 3),
                         out.value.expand(n))
    u, _, _, _ = sample_actions(batch, rng)
    accel = squash(torch.from_numpy(u))[:, 1].numpy()
    edges = np.linspace(ACCEL_MIN + 0.5, ACCEL_MAX - 0.5, 19)
    hist, _ = np.histogram(accel, edges)
    centres = 0.5 * (edges[1:] + edges[:-1])
    # marginal density of accel at bin centres from the steer-free part of log_prob
    uc = np.arctanh((centres + 1.0) / 5.0)
    dens = stats.norm.pdf(uc, -0.5, math.exp(-0.2)) / (5.0 * (1 - np.tanh(uc) ** 2))
    expect = dens * np.diff(edges) * n
    assert np.max(np.abs(hist - expect) / np.sqrt(expect + 1)) < 5.0


def test_entropy_uniform_signal():
    assert entropy(output()).item() == pytest.approx(2 * HALF_LOG_2PI_E + math.log(3))
    lo, hi = entropy_bounds()
    assert lo == pytest.approx(2 * (HALF_LOG_2PI_E - 5))
    assert hi == pytest.approx(2 * (HALF_LOG_2PI_E + 1) + math.log(3))


def test_deterministic_sampling_uses_mode():
    out = output((0.4, -0.1), (0.0, 0.0), (0.0, 2.0, 0.0))
    u, sig, _, _ = sample_actions(out, None, deterministic=True)
    np.testing.assert_allclose(u, [[0.4, -0.1]])
    assert sig.tolist() == [Signal.LEFT]


def test_sampling_reproducible():
    out = output()
    a = sample_actions(out, np.random.default_rng(9))
    b = sample_actions(out, np.random.default_rng(9))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_per_row_generators_isolated():
    pol = TwoStreamPolicy(MICRO_ARCH)
    out = pol(*micro_inputs(2))
    u, _, _, _ = sample_actions(out, [np.random.default_rng(1), np.random.default_rng(2)])
    single = PolicyOutput(out.mean[1:], out.log_std[1:], out.logits[1:], out.value[1:])
    u1, _, _, _ = sample_actions(single, [np.random.default_rng(2)])
    np.testing.assert_array_equal(u[1], u1[0])


def test_sample_action_and_controls():
    s = sample_action(output(), np.random.default_rng(0))
    c = controls_from(s.raw[None], np.array([int(s.signal)]))[0]
    assert c == s.control()
    with pytest.raises(ValueError):
        sample_action(output(), np.random.default_rng(0), mode="greedy")


def test_snapshot_roundtrip(tmp_path):
    pol = TwoStreamPolicy(MICRO_ARCH, seed=3)
    path = tmp_path / "p.snap"
    data = save_snapshot(pol, {"update": 12}, path)
    assert path.read_bytes() == data
    loaded, meta = load_snapshot(path, expected_arch=MICRO_ARCH)
    assert meta["update"] == 12
    assert parameters_equal(pol, loaded)
    buf = io.BytesIO()
    save_snapshot(loaded, {"update": 12}, buf)
    assert buf.getvalue() == data


def _snapshot():
    return save_snapshot(TwoStreamPolicy(MICRO_ARCH, seed=0), {}, None)


@pytest.mark.parametrize("mutate", [
    lambda d: d[:-10],
    lambda d: b"NOTAPOLICY" + d[10:],
    lambda d: d[:40] + bytes([d[40] ^ 1]) + d[41:],
    lambda d: b"",
])
def test_snapshot_corruption(mutate):
    with pytest.raises(SnapshotCorruptError):
        load_snapshot(mutate(_snapshot()))


def test_snapshot_version_mismatch():
    data = _snapshot()
    body = data[:8] + struct.pack("<H", 99) + data[10:-4]
    with pytest.raises(SnapshotVersionError):
        load_snapshot(body + struct.pack("<I", zlib.crc32(body)))


def test_snapshot_arch_mismatch():
    with pytest.raises(SnapshotShapeError):
        load_snapshot(_snapshot(), expected_arch=PolicyArch())
