import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zipmerge.checks import random_scene, transform_road, transformed_world
from zipmerge.dynamics import ControlInput, Signal, VehicleState
from zipmerge.observation import (KIND_COLORS, VECTOR_DIM, ObsSpec, build_observation, encode_vector,
                                  nearest_neighbors, rasterize, read_ppm, write_ppm)
from zipmerge.road_network import default_map, load_map, plan_route
from zipmerge.sim_env import EGO, EpisodeConfig, new_world

GOLDEN = Path(__file__).parent / "data" / "golden_raster.ppm"
STRAIGHT = load_map("lane 1 kind=straight width=3.7 label=A pts=0,0;100,0\n"
                    "lane 2 kind=straight width=3.7 label=D pts=100,0;200,0\nedge 1 2\n")
IDLE = ControlInput(0.0, 0.0)


def world_with_ego(v=10.0, x=50.0):
    w = new_world(STRAIGHT, EpisodeConfig(spawn_prob=0.0), 0)
    route = plan_route(STRAIGHT, "A", "D", np.random.default_rng(0))
    ego = w.add_agent(EGO, route, VehicleState(x, 0.0, 0.0, v))
    return w, ego, route


def color_mask(img, color):
    return np.all(img == np.array(color, dtype=np.uint8), axis=-1)


def test_ego_only_raster_centred_and_heading_up():
    w, ego, _ = world_with_ego()
    img = rasterize(w, ego.id).data
    assert img.shape == (128, 128, 3) and img.dtype == np.uint8
    rows, cols = np.nonzero(color_mask(img, KIND_COLORS[EGO]))
    assert abs(rows.mean() - 63.5) <= 1.0
    assert abs(cols.mean() - 63.5) <= 1.0
    # 4.6 m long and 1.9 m wide at 0.5 m per pixel
    assert 8 <= np.ptp(rows) + 1 <= 11
    assert 3 <= np.ptp(cols) + 1 <= 5
    assert not any(color_mask(img, c).any() for k, c in KIND_COLORS.items() if c != KIND_COLORS[EGO])


def test_neighbor_ahead_encoding():
    w, ego, route = world_with_ego(v=10.0)
    w.add_agent("IDM", route, VehicleState(60.0, 0.0, 0.0, 8.0), controller=object())
    vec = encode_vector(w, ego.id)
    assert len(vec) == VECTOR_DIM == 76
    np.testing.assert_allclose(vec[:8], (10 / 64, 0, 0, 1, 8 / 20, 0, 0, 1), atol=1e-12)
    assert np.all(vec[8:64] == 0)
    np.testing.assert_allclose(vec[64:68], (10 / 20, 0, 0, 0), atol=1e-12)


def test_neighbor_features_use_ego_frame():
    w, ego, route = world_with_ego()
    ego.state = VehicleState(50.0, 0.0, math.pi / 2, 10.0)
    other = w.add_agent("IDM", route, VehicleState(50.0, 10.0, math.pi / 2, 5.0), controller=object())
    other.control = ControlInput(-3.0, 0.0, Signal.LEFT)
    vec = encode_vector(w, ego.id)
    np.testing.assert_allclose(vec[:8], (10 / 64, 0, 0, 1, 5 / 20, -0.5, 1, 1), atol=1e-12)


def test_no_neighbors_zero_slots():
    w, ego, _ = world_with_ego()
    vec = encode_vector(w, ego.id)
    assert np.all(vec[:64] == 0)
    # waypoints sit straight ahead
    wp = vec[68:].reshape(-1, 2) * 64
    np.testing.assert_allclose(wp[:, 0], (5, 10, 20, 40), atol=1e-9)
    np.testing.assert_allclose(wp[:, 1], 0, atol=1e-9)


def test_neighbor_out_of_range_excluded():
    w, ego, route = world_with_ego()
    w.add_agent("IDM", route, VehicleState(50.0 + 64.5, 0.0, 0.0, 0.0), controller=object())
    assert nearest_neighbors(w, ego.id, 8, 64.0) == []
    assert np.all(encode_vector(w, ego.id)[:64] == 0)


def test_ten_neighbors_keep_closest_eight():
    w, ego, route = world_with_ego()
    offsets = [30, -3, 12, -20, 7, 25, -9, 40, 15, -50]
    for dx in offsets:
        w.add_agent("IDM", route, VehicleState(50.0 + dx, 0.0, 0.0, 0.0), controller=object())
    vec = encode_vector(w, ego.id)
    got = vec[0:64:8] * 64
    want = sorted(offsets, key=abs)[:8]
    np.testing.assert_allclose(got, want, atol=1e-9)
    assert np.all(vec[7:64:8] == 1)


# distances keep the whole car inside the 32 m half-window for any heading and clear of the ego
@given(st.floats(6, 27), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
@settings(max_examples=100, deadline=None)
def test_every_vehicle_covers_a_pixel(dist, bearing, psi, ego_psi):
    dx, dy = dist * math.cos(bearing), dist * math.sin(bearing)
    w, ego, route = world_with_ego()
    ego.state = VehicleState(50.0, 0.0, ego_psi, 0.0)
    w.add_agent("IDM", route, VehicleState(50.0 + dx, dy, psi, 0.0), controller=object())
    img = rasterize(w, ego.id).data
    assert color_mask(img, KIND_COLORS["IDM"]).sum() >= 1


def test_previous_footprint_half_intensity():
    w, ego, route = world_with_ego()
    other = w.add_agent("IDM", route, VehicleState(70.0, 0.0, 0.0, 10.0), controller=object())
    other.prev_state = VehicleState(62.0, 0.0, 0.0, 10.0)
    img = rasterize(w, ego.id).data
    faded = tuple(c // 2 for c in KIND_COLORS["IDM"])
    assert faded == (0, 0, 127)
    rows, _ = np.nonzero(color_mask(img, faded))
    cur, _ = np.nonzero(color_mask(img, KIND_COLORS["IDM"]))
    assert len(rows) > 0
    # further back means lower in the image
    assert rows.mean() > cur.mean()


def test_rigid_motion_invariance():
    road = default_map()
    world = random_scene(road, 5, n_steps=50)
    theta, tx, ty = 1.1, -230.0, 415.0
    moved = transformed_world(world, transform_road(road, theta, tx, ty), theta, tx, ty)
    for a in world.agents:
        f1, f2 = build_observation(world, a.id), build_observation(moved, a.id)
        np.testing.assert_array_equal(f1.raster.data, f2.raster.data)
        np.testing.assert_allclose(f1.vector, f2.vector, atol=1e-9)


def test_golden_raster():
    world = random_scene(default_map(), 11, n_steps=60, spawn_prob=0.3)
    frame = build_observation(world, world.ego_id)
    np.testing.assert_array_equal(frame.raster.data, read_ppm(GOLDEN))


def test_custom_spec_size():
    w, ego, _ = world_with_ego()
    spec = ObsSpec(size=64, mpp=1.0)
    assert rasterize(w, ego.id, spec=spec).data.shape == (64, 64, 3)


def test_ppm_roundtrip(tmp_path):
    data = np.random.default_rng(0).integers(0, 256, (17, 23, 3), dtype=np.uint8)
    write_ppm(data, tmp_path / "x.ppm")
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), data)


def test_read_ppm_rejects_other_formats(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "bad.ppm")
