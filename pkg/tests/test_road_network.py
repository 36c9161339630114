import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import fresnel

from zipmerge.road_network import (DEFAULT_LANE_WIDTH, MapGeometryError, MapGraphError, MapParseError,
                                   Route, RoutingError, default_map, is_out_of_bounds, load_map,
                                   plan_route, project_to_lane, reference_waypoints, tessellate_clothoid)

TWO_LANES = """
lane 1 kind=straight width=3.7 label=A pts=0,0;50,0
lane 2 kind=straight width=3.7 label=D pts=50,0;100,0
edge 1 2
"""

ARC_MAP = """
lane 1 kind=clothoid width=4 label=A start=0,0,0 k0=0.02 krate=0.0004 len=60
lane 2 kind=straight width=4 label=D pts={x},{y};{x2},{y2}
edge 1 2
"""


def arc_map():
    pts = tessellate_clothoid((0, 0, 0), 0.02, 0.0004, 60)
    h = 0.02 * 60 + 0.5 * 0.0004 * 60 ** 2
    x, y = pts[-1]
    return load_map(ARC_MAP.format(x=x, y=y, x2=x + 30 * math.cos(h), y2=y + 30 * math.sin(h)))


def fresnel_endpoint(k_rate, length):
    # theta = k_rate s^2 / 2 = (pi/2) t^2 with t = s * sqrt(k_rate / pi)
    c = math.sqrt(k_rate / math.pi)
    S, C = fresnel(length * c)
    return C / c, S / c


# load_map

def test_two_connected_lanes():
    road = load_map(TWO_LANES)
    assert sorted(road.lanes) == [1, 2]
    assert road.lanes[1].successors == (2,) and road.lanes[1].predecessors == ()
    assert road.lanes[2].predecessors == (1,) and road.lanes[2].successors == ()


def test_shipped_map_labels_reachable():
    road = default_map()
    assert road.spawn_labels == ("A", "B", "C")
    assert road.goal_labels == ("D", "E", "F")
    rng = np.random.default_rng(0)
    for s in road.spawn_labels:
        reachable = [g for g in road.goal_labels if _reaches(road, s, g, rng)]
        assert reachable, s


def _reaches(road, s, g, rng):
    try:
        plan_route(road, s, g, rng)
        return True
    except RoutingError:
        return False


def test_shipped_map_scale():
    x0, y0, x1, y1 = default_map().extent
    assert 300 <= max(x1 - x0, y1 - y0) <= 380


def test_edges_are_symmetric():
    road = default_map()
    for lid, lane in road.lanes.items():
        for s in lane.successors:
            assert lid in road.lanes[s].predecessors
        for p in lane.predecessors:
            assert lid in road.lanes[p].successors


def test_missing_lane_id_is_graph_error():
    with pytest.raises(MapGraphError):
        load_map(TWO_LANES + "edge 1 99\n")


def test_zero_length_lane_is_geometry_error():
    with pytest.raises(MapGeometryError):
        load_map("lane 1 kind=straight width=3 label=A pts=0,0;0,0\n")


@pytest.mark.parametrize("text", [
    "lane x kind=straight pts=0,0;1,0",
    "lane 1 kind=spline pts=0,0;1,0",
    "road 1 2",
    "lane 1 kind=straight pts=0,0;1",
])
def test_malformed_record_is_parse_error(text):
    with pytest.raises(MapParseError):
        load_map(text)


def test_default_width():
    road = load_map("lane 1 kind=straight label=A pts=0,0;10,0\nlane 2 kind=straight label=D pts=10,0;20,0\nedge 1 2\n")
    assert road.lanes[1].width == DEFAULT_LANE_WIDTH


def test_comments_ignored():
    road = load_map("# header\n" + TWO_LANES.replace("edge 1 2", "edge 1 2  # join"))
    assert road.lanes[1].successors == (2,)


# tessellate_clothoid

def test_zero_curvature_is_straight():
    pts = tessellate_clothoid((1, 2, 0.3), 0.0, 0.0, 10.0)
    end = np.array([1 + 10 * math.cos(0.3), 2 + 10 * math.sin(0.3)])
    np.testing.assert_allclose(pts[-1], end, atol=1e-12)
    assert np.all(np.hypot(*np.diff(pts, axis=0).T) <= 0.5 + 1e-12)


def test_constant_curvature_on_circle():
    pts = tessellate_clothoid((0, 0, 0), 0.1, 0.0, math.pi / 0.1 * 0.7)
    center = np.array([0.0, 10.0])
    np.testing.assert_allclose(np.hypot(*(pts - center).T), 10.0, atol=1e-9)


def test_clothoid_matches_fresnel():
    pts = tessellate_clothoid((0, 0, 0), 0.0, 0.01, 20.0)
    np.testing.assert_allclose(pts[-1], fresnel_endpoint(0.01, 20.0), atol=1e-6)


@given(st.floats(-0.05, 0.05), st.floats(-0.002, 0.002), st.floats(5, 80))
@settings(max_examples=40, deadline=None)
def test_tessellation_refinement(k0, k_rate, length):
    step = 0.5
    coarse = tessellate_clothoid((0, 0, 0), k0, k_rate, length, step)
    fine = tessellate_clothoid((0, 0, 0), k0, k_rate, length, step / 2)
    k_max = max(abs(k0), abs(k0 + k_rate * length)) + 1e-12
    # every coarse sample is also a fine sample (same arc lengths)
    s_c = np.minimum(np.arange(len(coarse)) * step, length)
    s_f = np.minimum(np.arange(len(fine)) * step / 2, length)
    idx = np.searchsorted(s_f, s_c - 1e-9)
    assert np.max(np.hypot(*(coarse - fine[idx]).T)) < step ** 2 * k_max + 1e-9


# project_to_lane

def test_projection_axis_aligned():
    lane = load_map(TWO_LANES).lanes[1]
    assert project_to_lane((5, 1.5), lane) == pytest.approx((5.0, 1.5))
    assert project_to_lane((25, 0), lane) == pytest.approx((25.0, 0.0))
    assert project_to_lane((5, -2), lane)[1] == pytest.approx(-2.0)


def test_projection_matches_dense_oracle():
    lane = arc_map().lanes[1]
    pts = lane.centerline
    # 10^4 samples along the polyline
    t = np.linspace(0, lane.length, 10_000)
    dense = np.stack([np.interp(t, lane.cum_s, pts[:, 0]), np.interp(t, lane.cum_s, pts[:, 1])], 1)
    rng = np.random.default_rng(5)
    for _ in range(50):
        i = rng.integers(len(pts))
        p = pts[i] + rng.uniform(-3, 3, 2)
        s, d = project_to_lane(p, lane)
        dist = np.hypot(*(dense - p).T)
        assert abs(abs(d) - dist.min()) < 1e-3
        assert abs(s - t[dist.argmin()]) < 0.05


@given(st.floats(-20, 120), st.floats(-10, 10))
@settings(max_examples=100, deadline=None)
def test_projection_distance_consistent(x, y):
    lane = arc_map().lanes[1]
    s, d = project_to_lane((x, y), lane)
    foot = np.array([np.interp(s, lane.cum_s, lane.centerline[:, 0]),
                     np.interp(s, lane.cum_s, lane.centerline[:, 1])])
    assert abs(math.hypot(x - foot[0], y - foot[1]) - abs(d)) < 1e-9


# is_out_of_bounds

def test_centerline_points_in_bounds():
    road = default_map()
    for lane in road.lanes.values():
        for p in lane.centerline[:: max(1, len(lane.centerline) // 5)]:
            assert not is_out_of_bounds(p, road)


def test_out_of_bounds_rule():
    road = load_map(TWO_LANES)
    w = 3.7
    assert is_out_of_bounds((25, 0.75 * w + 0.01), road)
    assert is_out_of_bounds((25, -(0.75 * w + 0.01)), road)
    assert not is_out_of_bounds((25, 0.75 * w - 0.01), road)


def test_out_of_bounds_boundary_inclusive():
    road = load_map("lane 1 kind=straight width=4 label=A pts=0,0;50,0\n"
                    "lane 2 kind=straight width=4 label=D pts=50,0;100,0\nedge 1 2\n")
    assert not is_out_of_bounds((25, 3.0), road)  # exactly 0.75 * 4


@given(st.floats(0, 100), st.floats(-6, 6), st.floats(1.0, 3.0))
@settings(max_examples=100, deadline=None)
def test_out_of_bounds_monotone(x, y, k):
    road = load_map(TWO_LANES)
    if is_out_of_bounds((x, y), road):
        assert is_out_of_bounds((x, y * k), road)


# plan_route

def test_single_chain_route():
    route = plan_route(load_map(TWO_LANES), "A", "D", np.random.default_rng(0))
    assert route.lane_ids == (1, 2)
    assert route.length == pytest.approx(100.0)


def test_shipped_route_a_to_f_merges():
    road = default_map()
    route = plan_route(road, "A", "F", np.random.default_rng(0))
    changes = [road.is_lane_change(a, b) for a, b in zip(route.lane_ids[:-1], route.lane_ids[1:])]
    assert changes.count(0) < len(changes)  # crosses at least one connector
    assert road.lanes[route.lane_ids[-1]].label == "F"


def test_disconnected_map_routing_error():
    road = load_map("lane 1 kind=straight width=3 label=A pts=0,0;10,0\n"
                    "lane 2 kind=straight width=3 label=D pts=10,0;20,0\nedge 1 2\n"
                    "lane 3 kind=straight width=3 label=B pts=0,50;10,50\n"
                    "lane 4 kind=straight width=3 label=E pts=10,50;20,50\nedge 3 4\n")
    with pytest.raises(RoutingError):
        plan_route(road, "A", "E", np.random.default_rng(0))


def test_route_requires_edges():
    road = load_map(TWO_LANES)
    with pytest.raises(RoutingError):
        Route(road, [2, 1])


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from("ABC"), st.sampled_from("DEF"))
@settings(max_examples=40, deadline=None)
def test_route_invariants_and_determinism(seed, start, goal):
    road = default_map()
    try:
        r1 = plan_route(road, start, goal, np.random.default_rng(seed))
    except RoutingError:
        return
    r2 = plan_route(road, start, goal, np.random.default_rng(seed))
    assert r1.lane_ids == r2.lane_ids
    for a, b in zip(r1.lane_ids[:-1], r1.lane_ids[1:]):
        assert b in road.lanes[a].successors
    assert np.max(np.hypot(*np.diff(r1.reference_path, axis=0).T)) < 1.0


def test_equal_length_ties_use_rng():
    # two equal-length parallel paths from A to D
    road = load_map("""
lane 1 kind=straight width=3 label=A pts=0,0;10,0
lane 2 kind=polyline width=3 pts=10,0;15,3;20,0
lane 3 kind=polyline width=3 pts=10,0;15,-3;20,0
lane 4 kind=straight width=3 label=D pts=20,0;30,0
edge 1 2
edge 1 3
edge 2 4
edge 3 4
""")
    picks = {plan_route(road, "A", "D", np.random.default_rng(s)).lane_ids[1] for s in range(40)}
    assert picks == {2, 3}


# reference_waypoints

def test_waypoints_straight():
    route = plan_route(load_map(TWO_LANES), "A", "D", np.random.default_rng(0))
    wp = reference_waypoints(route, (20, 0, 0), [5, 10])
    np.testing.assert_allclose(wp, [[5, 0], [10, 0]], atol=1e-9)


def test_waypoints_clamp_at_route_end():
    route = plan_route(load_map(TWO_LANES), "A", "D", np.random.default_rng(0))
    wp = reference_waypoints(route, (100, 0, 0), [0, 5, 30])
    np.testing.assert_allclose(wp, np.zeros((3, 2)), atol=1e-9)


def test_waypoints_curved_match_resampling():
    road = arc_map()
    route = Route(road, [1, 2], goal="D")
    rng = np.random.default_rng(2)
    offsets = [0.0, 4.0, 10.0, 25.0]
    for _ in range(10):
        s0 = rng.uniform(0, 50)
        x, y, h = route.point_at(s0)
        psi = h + rng.uniform(-0.3, 0.3)
        wp = reference_waypoints(route, (x, y, psi), offsets)
        # oracle: resample the route at 1e-3 m and walk the arc length
        t = np.arange(0, route.length, 1e-3)
        px = np.interp(t, route.cum_s, route.px)
        py = np.interp(t, route.cum_s, route.py)
        for o, (bx, by) in zip(offsets, wp):
            k = np.searchsorted(t, s0 + o)
            gx, gy = px[k] - x, py[k] - y
            ex = math.cos(psi) * gx + math.sin(psi) * gy
            ey = -math.sin(psi) * gx + math.cos(psi) * gy
            assert math.hypot(ex - bx, ey - by) < 1e-3 + 1e-3
