"""Policy inputs: an ego-centric raster of the scene plus a flat feature vector.

Raster layout: ``size x size x 3`` uint8, ``mpp`` meters per pixel, ego
centroid at pixel ``(size//2, size//2)`` with its heading pointing to row 0.
Pixel ``(r, c)`` covers the ego-frame point ``forward = (size//2 - r) * mpp``,
``left = (size//2 - c) * mpp``. Vehicles from the previous frame are drawn
underneath at half intensity.

Vector layout (version 1, 76 entries):

* 8 neighbor slots of ``(rel_x, rel_y, sin dpsi, cos dpsi, speed, accel,
  signal, valid)``, nearest first, ties broken by agent id;
* ego block ``(speed, accel, steer, signal)``;
* route block: 4 ego-frame waypoints ``(x, y)`` at 5, 10, 20 and 40 m ahead.

Positions are divided by 64 m, speeds by 20 m/s, accelerations by 6 m/s^2 and
steering by its 0.5 rad bound. Neighbors farther than 64 m are left out.
"""

from __future__ import annotations

import math
import re
from itertools import chain
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .dynamics import STEER_BOUND, Signal
from .road_network import reference_waypoints

OBS_LAYOUT_VERSION = 1
N_NEIGHBORS = 8
NEIGHBOR_FEATURES = 8
EGO_FEATURES = 4
WAYPOINT_OFFSETS = (5.0, 10.0, 20.0, 40.0)
VECTOR_DIM = N_NEIGHBORS * NEIGHBOR_FEATURES + EGO_FEATURES + 2 * len(WAYPOINT_OFFSETS)

BACKGROUND = (0, 0, 0)
LANE_COLOR = (76, 76, 76)
ROUTE_COLOR = (150, 150, 40)
# off the 0.5 m pixel pitch so centred egos never put pixel centres on the band edge
ROUTE_HALF_WIDTH = 0.6
# vehicle colors are even so the faded copy is exactly half
KIND_COLORS = {
    "EGO_LEARNER": (0, 254, 0),
    "IDM": (0, 0, 254),
    "RL": (254, 0, 0),
    "SP1": (254, 0, 0),
    "SP2": (254, 0, 0),
}


_LANE_RGB = np.array(LANE_COLOR, dtype=np.uint8)
_ROUTE_RGB = np.array(ROUTE_COLOR, dtype=np.uint8)
_KIND_ROW = {kind: i for i, kind in enumerate(KIND_COLORS)}
_KIND_RGB = np.array(list(KIND_COLORS.values()), dtype=np.uint8)
_LATERAL = {int(sig): sig.lateral for sig in Signal}


@dataclass(frozen=True)
class ObsSpec:
    size: int = 128
    mpp: float = 0.5
    n_neighbors: int = N_NEIGHBORS
    neighbor_range: float = 64.0
    pos_scale: float = 64.0
    speed_scale: float = 20.0
    accel_scale: float = 6.0
    steer_scale: float = STEER_BOUND
    waypoint_offsets: tuple[float, ...] = WAYPOINT_OFFSETS
    draw_route: bool = True

    @property
    def vector_dim(self) -> int:
        return self.n_neighbors * NEIGHBOR_FEATURES + EGO_FEATURES + 2 * len(self.waypoint_offsets)


@dataclass(frozen=True)
class RasterImage:
    data: np.ndarray  # uint8 (size, size, 3)
    meters_per_pixel: float

    @property
    def pixels(self) -> np.ndarray:
        """Intensities in [0, 1]."""
        return self.data.astype(np.float32) / 255.0


@dataclass(frozen=True)
class ObservationFrame:
    raster: RasterImage
    vector: np.ndarray


def _route_segments(route):
    cache = getattr(route, "_raster_segments", None)
    if cache is None:
        ax = np.ascontiguousarray(route.px[:-1])
        ay = np.ascontiguousarray(route.py[:-1])
        bx = np.ascontiguousarray(route.px[1:])
        by = np.ascontiguousarray(route.py[1:])
        cache = (ax, ay, bx, by, np.full(len(ax), ROUTE_HALF_WIDTH))
        route._raster_segments = cache
    return cache


def _box_arrays(agents, states, color_scale_num=1, color_scale_den=1):
    n = len(agents)
    xs = np.empty(n)
    ys = np.empty(n)
    psis = np.empty(n)
    lens = np.empty(n)
    wids = np.empty(n)
    cols = np.empty((n, 3), dtype=np.uint8)
    for i, (a, s) in enumerate(zip(agents, states)):
        xs[i], ys[i], psis[i] = s.x, s.y, s.psi
        lens[i], wids[i] = a.geom.length, a.geom.width
        r, g, b = KIND_COLORS[a.kind]
        cols[i] = (r * color_scale_num // color_scale_den,
                   g * color_scale_num // color_scale_den,
                   b * color_scale_num // color_scale_den)
    return xs, ys, psis, lens, wids, cols


_NO_STATE = (math.nan,) * 4


def _vehicle_columns(snap):
    """Palette rows and previous poses (NaN when unknown), cached per snapshot."""
    cols = snap.cache.get("vehicles")
    if cols is None:
        n = len(snap.agents)
        rows = np.fromiter((_KIND_ROW[a.kind] for a in snap.agents), np.intp, n)
        prev = np.fromiter(chain.from_iterable(_NO_STATE if p is None else p for p in snap.prev_states),
                           np.float64, 4 * n).reshape(n, 4)
        cols = snap.cache["vehicles"] = (rows, prev)
    return cols


def rasterize(world, ego_id: int, prev_world=None, spec: ObsSpec = ObsSpec()) -> RasterImage:
    """Draw lanes, the ego route, faded previous footprints and vehicles.

    Previous footprints come from ``prev_world`` when given, otherwise from
    each agent's ``prev_state``.
    """
    snap = world.current_snapshot()
    ego_i = snap.index.get(ego_id)
    if ego_i is None:
        raise KeyError(ego_id)
    ego = snap.agents[ego_i]
    ex, ey, epsi = snap.xs[ego_i], snap.ys[ego_i], snap.psis[ego_i]
    img = np.zeros((spec.size, spec.size, 3), dtype=np.uint8)
    ax, ay, bx, by, hw = world.road.segments
    _kernels.draw_bands(img, ax, ay, bx, by, hw, ex, ey, epsi, spec.mpp, _LANE_RGB)
    if spec.draw_route:
        ax, ay, bx, by, hw = _route_segments(ego.route)
        _kernels.draw_bands(img, ax, ay, bx, by, hw, ex, ey, epsi, spec.mpp, _ROUTE_RGB)

    rows, prev = _vehicle_columns(snap)
    if prev_world is not None:
        boxes = _box_arrays(prev_world.agents, [a.state for a in prev_world.agents], 1, 2)
        _kernels.draw_boxes(img, *boxes, ex, ey, epsi, spec.mpp)
        prev = np.full_like(prev, math.nan)
    # ego last so it is never hidden
    _kernels.draw_vehicles(img, snap.xs, snap.ys, snap.psis, prev, snap.lens, snap.wids, rows, _KIND_RGB,
                           ego_i, spec.mpp)
    return RasterImage(img, spec.mpp)


def _nearest_indices(snap, ego_i: int, k: int, max_range: float) -> np.ndarray:
    """Snapshot rows of up to ``k`` other agents by centroid distance, ties by id."""
    d = np.hypot(snap.xs - snap.xs[ego_i], snap.ys - snap.ys[ego_i])
    order = np.lexsort((snap.ids, d))
    order = order[order != ego_i][:k]
    return order[d[order] <= max_range]


def nearest_neighbors(world, ego_id: int, k: int = N_NEIGHBORS, max_range: float = math.inf):
    """Up to ``k`` other live agents by centroid distance, ties by id."""
    snap = world.current_snapshot()
    if ego_id not in snap.index:
        raise KeyError(ego_id)
    return [snap.agents[i] for i in _nearest_indices(snap, snap.index[ego_id], k, max_range)]


def encode_vector(world, ego_id: int, route=None, spec: ObsSpec = ObsSpec()) -> np.ndarray:
    snap = world.current_snapshot()
    ego_i = snap.index.get(ego_id)
    if ego_i is None:
        raise KeyError(ego_id)
    ego = snap.agents[ego_i]
    route = route or ego.route
    st = ego.state
    vec = np.zeros(spec.vector_dim)
    near = _nearest_indices(snap, ego_i, spec.n_neighbors, spec.neighbor_range)
    if len(near):
        controls = [snap.agents[i].control for i in near]
        accels = np.array([u.accel for u in controls])
        laterals = np.array([_LATERAL[u.signal] for u in controls], dtype=np.float64)
        _kernels.neighbor_slots(vec, snap.xs[near], snap.ys[near], snap.psis[near], snap.vs[near], accels,
                                laterals, st.x, st.y, st.psi, spec.pos_scale, spec.speed_scale,
                                spec.accel_scale)
    j = spec.n_neighbors * NEIGHBOR_FEATURES
    vec[j:j + EGO_FEATURES] = (
        st.v / spec.speed_scale,
        ego.control.accel / spec.accel_scale,
        ego.control.steer / spec.steer_scale,
        _LATERAL[ego.control.signal],
    )
    j += EGO_FEATURES
    s_ego = ego.route_s if route is ego.route else None
    wp = reference_waypoints(route, (st.x, st.y, st.psi), spec.waypoint_offsets, s_ego=s_ego)
    vec[j:] = wp.ravel() / spec.pos_scale
    return vec


def build_observation(world, ego_id: int, spec: ObsSpec = ObsSpec(), prev_world=None) -> ObservationFrame:
    return ObservationFrame(rasterize(world, ego_id, prev_world, spec),
                            encode_vector(world, ego_id, spec=spec))


def write_ppm(image: RasterImage | np.ndarray, path) -> None:
    """Binary PPM (P6), handy for eyeballing frames."""
    data = image.data if isinstance(image, RasterImage) else np.asarray(image, dtype=np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=m.end()).reshape(h, w, 3).copy()
