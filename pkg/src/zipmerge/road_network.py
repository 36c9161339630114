"""Lane graph of the merge scene: map loading, geometry queries and routing.

Lanes are nodes of a directed graph; edges give the direction of travel.
Clothoid records are tessellated into polylines at load time, so every
downstream consumer only ever sees centerline polylines.

Map file format (one record per line, ``#`` starts a comment)::

    lane <id> kind=straight|polyline width=<m> [label=<A..F>] pts=<x0,y0;x1,y1;...>
    lane <id> kind=clothoid width=<m> [label=<A..F>] start=<x,y,heading> k0=<v> krate=<v> len=<m>
    edge <from_id> <to_id>
"""

from __future__ import annotations

import bisect
import heapq
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels

DEFAULT_LANE_WIDTH = 3.7
CLOTHOID_STEP = 0.5
ROUTE_SPACING = 0.5
OOB_WIDTH_FRACTION = 0.75
SPAWN_LABELS = ("A", "B", "C")
GOAL_LABELS = ("D", "E", "F")
LANE_KINDS = ("straight", "clothoid", "polyline")
JOIN_TOLERANCE = 0.5
_CLEARANCE_BLOCK = 16


class MapError(ValueError):
    """Base class for map loading failures."""


class MapParseError(MapError):
    pass


class MapGraphError(MapError):
    pass


class MapGeometryError(MapError):
    pass


class RoutingError(RuntimeError):
    pass


def _cumulative_length(points: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(points, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


@dataclass(frozen=True, eq=False)
class LaneSegment:
    id: int
    kind: str
    centerline: np.ndarray
    width: float = DEFAULT_LANE_WIDTH
    label: str | None = None
    successors: tuple[int, ...] = ()
    predecessors: tuple[int, ...] = ()
    cum_s: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise MapGeometryError(f"lane {self.id}: centerline needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise MapGeometryError(f"lane {self.id}: non-finite coordinates")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise MapGeometryError(f"lane {self.id}: repeated consecutive point (zero-length segment)")
        if not self.width > 0:
            raise MapGeometryError(f"lane {self.id}: width must be positive")
        if self.kind not in LANE_KINDS:
            raise MapParseError(f"lane {self.id}: unknown kind {self.kind!r}")
        pts.setflags(write=False)
        cum = _cumulative_length(pts)
        cum.setflags(write=False)
        object.__setattr__(self, "centerline", pts)
        object.__setattr__(self, "cum_s", cum)

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])

    @property
    def start(self) -> np.ndarray:
        return self.centerline[0]

    @property
    def end(self) -> np.ndarray:
        return self.centerline[-1]

    def heading_at_start(self) -> float:
        d = self.centerline[1] - self.centerline[0]
        return math.atan2(d[1], d[0])

    def heading_at_end(self) -> float:
        d = self.centerline[-1] - self.centerline[-2]
        return math.atan2(d[1], d[0])


def tessellate_clothoid(start_pose: Sequence[float], k0: float, k_rate: float,
                        length: float, step: float = CLOTHOID_STEP) -> np.ndarray:
    """Sample an Euler spiral every ``step`` meters (last interval may be shorter).

    Heading follows ``theta(s) = theta0 + k0*s + k_rate*s**2/2``. Positions are
    integrated interval by interval with 10-point Gauss-Legendre quadrature,
    which is exact to rounding for the step sizes used here.
    """
    if not length > 0 or not step > 0:
        raise ValueError("length and step must be positive")
    x0, y0, th0 = (float(v) for v in start_pose)
    n = int(math.ceil(length / step - 1e-12))
    s = np.minimum(np.arange(n + 1) * step, length)
    if n >= 1 and s[-1] - s[-2] < 1e-9:
        s = np.concatenate([s[:-2], [length]])
    nodes, weights = np.polynomial.legendre.leggauss(10)
    a = s[:-1, None]
    half = 0.5 * (s[1:] - s[:-1])[:, None]
    q = a + half * (nodes[None, :] + 1.0)
    theta = th0 + k0 * q + 0.5 * k_rate * q * q
    dx = (half * np.cos(theta) * weights).sum(axis=1)
    dy = (half * np.sin(theta) * weights).sum(axis=1)
    pts = np.empty((len(s), 2))
    pts[0] = (x0, y0)
    pts[1:, 0] = x0 + np.cumsum(dx)
    pts[1:, 1] = y0 + np.cumsum(dy)
    return pts


def project_to_lane(point: Sequence[float], lane: LaneSegment) -> tuple[float, float]:
    """Arc length and signed lateral offset (left positive) of ``point``."""
    pts = lane.centerline
    s, d, _ = _kernels.project_polyline(pts[:, 0], pts[:, 1], lane.cum_s,
                                        float(point[0]), float(point[1]), 0, len(pts) - 1)
    return float(s), float(d)


class RoadMap:
    """Immutable lane graph. Build with :func:`load_map`."""

    def __init__(self, lanes: Iterable[LaneSegment]):
        self.lanes: dict[int, LaneSegment] = {lane.id: lane for lane in lanes}
        labels = {lane.label for lane in self.lanes.values()}
        self.spawn_labels = tuple(lb for lb in SPAWN_LABELS if lb in labels)
        self.goal_labels = tuple(lb for lb in GOAL_LABELS if lb in labels)
        allpts = np.concatenate([lane.centerline for lane in self.lanes.values()])
        lo = allpts.min(axis=0)
        hi = allpts.max(axis=0)
        self.extent = (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

        segs, limits = [], []
        for lane in self.lanes.values():
            p = lane.centerline
            segs.append(np.hstack([p[:-1], p[1:]]))
            limits.append(np.full(len(p) - 1, OOB_WIDTH_FRACTION * lane.width))
        seg = np.concatenate(segs)
        self._seg_ax = np.ascontiguousarray(seg[:, 0])
        self._seg_ay = np.ascontiguousarray(seg[:, 1])
        self._seg_bx = np.ascontiguousarray(seg[:, 2])
        self._seg_by = np.ascontiguousarray(seg[:, 3])
        self._seg_limit = np.concatenate(limits)
        self._seg_half_width = self._seg_limit / OOB_WIDTH_FRACTION * 0.5
        self._blocks = _kernels.block_bounds(self._seg_ax, self._seg_ay, self._seg_bx,
                                             self._seg_by, self._seg_limit, _CLEARANCE_BLOCK)
        self._dense: dict[int, np.ndarray] = {}
        self._spawn_poses: dict[str, tuple[float, float, float, int]] = {}

    def __repr__(self):
        return (f"RoadMap({len(self.lanes)} lanes, spawn={self.spawn_labels}, "
                f"goals={self.goal_labels}, extent={self.extent})")

    def lanes_with_label(self, label: str) -> list[int]:
        return sorted(lid for lid, lane in self.lanes.items() if lane.label == label)

    @property
    def segments(self):
        """Flattened centerline segments ``(ax, ay, bx, by, half_width)``."""
        return self._seg_ax, self._seg_ay, self._seg_bx, self._seg_by, self._seg_half_width

    def clearance(self, x: float, y: float) -> tuple[float, float]:
        """``(margin, nearest)``: margin > 0 means off-road, nearest is the
        distance to the closest centerline of any lane."""
        m, n = _kernels.lane_clearance_blocked(self._seg_ax, self._seg_ay, self._seg_bx,
                                               self._seg_by, self._seg_limit, self._blocks,
                                               _CLEARANCE_BLOCK, float(x), float(y))
        return float(m), float(n)

    def clearance_many(self, xs: np.ndarray, ys: np.ndarray):
        return _kernels.lane_clearance_many(self._seg_ax, self._seg_ay, self._seg_bx,
                                            self._seg_by, self._seg_limit, self._blocks,
                                            _CLEARANCE_BLOCK,
                                            np.ascontiguousarray(xs, dtype=np.float64),
                                            np.ascontiguousarray(ys, dtype=np.float64))

    def spawn_pose(self, label: str) -> tuple[float, float, float, int]:
        """Entry end of the (first) lane carrying ``label``: ``(x, y, heading, lane_id)``."""
        pose = self._spawn_poses.get(label)
        if pose is None:
            lane = self.lanes[self.lanes_with_label(label)[0]]
            pose = float(lane.start[0]), float(lane.start[1]), lane.heading_at_start(), lane.id
            self._spawn_poses[label] = pose
        return pose

    def straight_successor(self, lane_id: int) -> int | None:
        """The successor that continues the lane without shifting sideways."""
        lane = self.lanes[lane_id]
        if not lane.successors:
            return None
        h = lane.heading_at_end()
        nx, ny = -math.sin(h), math.cos(h)
        end = lane.end
        return min(lane.successors,
                   key=lambda sid: (abs(float(np.dot(self.lanes[sid].end - end, (nx, ny)))), sid))

    def lateral_shift(self, from_id: int, to_id: int) -> float:
        """Signed lateral displacement of ``to``'s end relative to ``from``'s
        extended centerline (left positive)."""
        lane = self.lanes[from_id]
        h = lane.heading_at_end()
        return float(np.dot(self.lanes[to_id].end - lane.end, (-math.sin(h), math.cos(h))))

    def is_lane_change(self, from_id: int, to_id: int) -> int:
        """+1 / -1 when moving ``from -> to`` is a left / right lane change, else 0."""
        if to_id == self.straight_successor(from_id):
            return 0
        shift = self.lateral_shift(from_id, to_id)
        if abs(shift) < 0.5 * self.lanes[from_id].width:
            return 0
        return 1 if shift > 0 else -1

    def dense_centerline(self, lane_id: int) -> np.ndarray:
        pts = self._dense.get(lane_id)
        if pts is None:
            pts = densify(self.lanes[lane_id].centerline, ROUTE_SPACING)
            pts.setflags(write=False)
            self._dense[lane_id] = pts
        return pts


def densify(points: np.ndarray, spacing: float) -> np.ndarray:
    """Insert points so that consecutive samples are at most ``spacing`` apart."""
    out = [points[:1]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(1, int(math.ceil(float(np.hypot(*(b - a))) / spacing - 1e-12)))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.concatenate(out)


def load_map(source: str) -> RoadMap:
    """Parse map text into a validated :class:`RoadMap`."""
    records: dict[int, dict] = {}
    edges: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(source.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "lane":
                lid = int(tok[1])
                if lid in records:
                    raise MapParseError(f"line {lineno}: duplicate lane id {lid}")
                kv = dict(t.split("=", 1) for t in tok[2:])
                records[lid] = _lane_from_record(lid, kv)
            elif tok[0] == "edge":
                if len(tok) != 3:
                    raise MapParseError(f"line {lineno}: edge needs exactly two ids")
                edges.append((int(tok[1]), int(tok[2]), lineno))
            else:
                raise MapParseError(f"line {lineno}: unknown record {tok[0]!r}")
        except MapError as exc:
            if str(exc).startswith("line"):
                raise
            raise type(exc)(f"line {lineno}: {exc}") from None
        except (ValueError, IndexError, KeyError) as exc:
            raise MapParseError(f"line {lineno}: malformed record ({exc})") from None

    succ: dict[int, set[int]] = {lid: set() for lid in records}
    pred: dict[int, set[int]] = {lid: set() for lid in records}
    for a, b, lineno in edges:
        for lid in (a, b):
            if lid not in records:
                raise MapGraphError(f"line {lineno}: edge references missing lane id {lid}")
        gap = float(np.hypot(*(records[b]["centerline"][0] - records[a]["centerline"][-1])))
        if gap > JOIN_TOLERANCE:
            raise MapGeometryError(f"line {lineno}: lanes {a} -> {b} do not meet (gap {gap:.3f} m)")
        succ[a].add(b)
        pred[b].add(a)

    lanes = [LaneSegment(id=lid, successors=tuple(sorted(succ[lid])),
                         predecessors=tuple(sorted(pred[lid])), **rec)
             for lid, rec in sorted(records.items())]
    if not lanes:
        raise MapParseError("map contains no lanes")
    road = RoadMap(lanes)
    _check_reachability(road)
    return road


def _parse_floats(text: str, n: int | None = None) -> list[float]:
    vals = [float(v) for v in text.split(",")]
    if n is not None and len(vals) != n:
        raise MapParseError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _lane_from_record(lid: int, kv: dict[str, str]) -> dict:
    kind = kv.get("kind")
    if kind not in LANE_KINDS:
        raise MapParseError(f"lane {lid}: unknown kind {kind!r}")
    width = float(kv.get("width", DEFAULT_LANE_WIDTH))
    label = kv.get("label")
    if label is not None and label not in SPAWN_LABELS + GOAL_LABELS:
        raise MapParseError(f"lane {lid}: bad label {label!r}")
    if kind == "clothoid":
        start = _parse_floats(kv["start"], 3)
        length = float(kv["len"])
        if not length > 0:
            raise MapGeometryError(f"lane {lid}: zero-length clothoid")
        pts = tessellate_clothoid(start, float(kv.get("k0", 0.0)), float(kv.get("krate", 0.0)), length)
    else:
        pts = np.array([_parse_floats(p, 2) for p in kv["pts"].split(";") if p.strip()])
        if pts.ndim != 2 or len(pts) < 2:
            raise MapGeometryError(f"lane {lid}: needs at least 2 points")
    return {"kind": kind, "centerline": pts, "width": width, "label": label}


def _check_reachability(road: RoadMap) -> None:
    for label in road.spawn_labels:
        starts = road.lanes_with_label(label)
        seen = set(starts)
        stack = list(starts)
        found = False
        while stack:
            lid = stack.pop()
            if road.lanes[lid].label in GOAL_LABELS:
                found = True
                break
            for nxt in road.lanes[lid].successors:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if road.goal_labels and not found:
            raise MapGraphError(f"spawn label {label} cannot reach any goal label")


def load_map_file(path: str | Path) -> RoadMap:
    return load_map(Path(path).read_text(encoding="utf-8"))


def shipped_map(name: str) -> RoadMap:
    """A map bundled with the package, by file stem (``zipper_merge``, ``straight``)."""
    path = resources.files("zipmerge").joinpath(f"maps/{name}.map")
    if not path.is_file():
        raise FileNotFoundError(f"no shipped map named {name!r}")
    return load_map(path.read_text(encoding="utf-8"))


def default_map() -> RoadMap:
    """The shipped zipper-merge map (3 entrances, weaving section, 3 exits)."""
    return shipped_map("zipper_merge")


def is_out_of_bounds(point: Sequence[float], road: RoadMap) -> bool:
    """True iff the point is farther than 0.75 lane widths from every centerline."""
    margin, _ = road.clearance(point[0], point[1])
    return margin > 0.0


class Route:
    """Connected lane sequence plus its densely sampled reference path."""

    def __init__(self, road: RoadMap, lane_ids: Sequence[int], goal: str | None = None):
        lane_ids = tuple(int(i) for i in lane_ids)
        if not lane_ids:
            raise RoutingError("empty route")
        for a, b in zip(lane_ids[:-1], lane_ids[1:]):
            if b not in road.lanes[a].successors:
                raise RoutingError(f"lanes {a} -> {b} are not connected")
        parts = []
        start_idx = []
        total = 0
        for k, lid in enumerate(lane_ids):
            pts = road.dense_centerline(lid)
            if k > 0 and np.hypot(*(pts[0] - parts[-1][-1])) < 1e-9:
                start_idx.append(total - 1)
                pts = pts[1:]
            else:
                start_idx.append(total)
            parts.append(pts)
            total += len(pts)
        # lane parts are dense and joins are < JOIN_TOLERANCE, so no resampling needed
        path = np.concatenate(parts)
        self.lane_ids = lane_ids
        self.goal = goal
        self.reference_path = path
        self.px = np.ascontiguousarray(path[:, 0])
        self.py = np.ascontiguousarray(path[:, 1])
        self.cum_s = _cumulative_length(path)
        self.lane_start_s = self.cum_s[start_idx]
        self._starts = tuple(float(v) for v in self.lane_start_s)
        self.width = tuple(float(road.lanes[lid].width) for lid in lane_ids)

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])

    @property
    def reaches_goal(self) -> bool:
        return self.goal is not None

    def lane_index_at(self, s: float) -> int:
        return bisect.bisect_right(self._starts, s) - 1

    def point_at(self, s: float) -> tuple[float, float, float]:
        return _kernels.point_at(self.px, self.py, self.cum_s, float(s))

    def project(self, x: float, y: float, hint: int | None = None,
                behind: int = 20, ahead: int = 60) -> tuple[float, float, int]:
        """``(s, d, segment)`` of a point; windowed around ``hint`` if given."""
        nseg = len(self.px) - 1
        if hint is None:
            lo, hi = 0, nseg
        else:
            lo, hi = max(0, hint - behind), min(nseg, hint + ahead)
        s, d, i = _kernels.project_polyline(self.px, self.py, self.cum_s, float(x), float(y), lo, hi)
        return float(s), float(d), int(i)

    def __repr__(self):
        return f"Route(lanes={self.lane_ids}, goal={self.goal}, length={self.length:.1f})"


def _shortest_paths(road: RoadMap, sources: Iterable[int], goal_label: str,
                    rng: np.random.Generator) -> list[int]:
    """Uniform sample among all minimum-arc-length lane paths to ``goal_label``."""
    dist: dict[int, float] = {}
    preds: dict[int, list[int]] = {}
    heap = []
    for lid in sources:
        dist[lid] = road.lanes[lid].length
        preds[lid] = []
        heapq.heappush(heap, (dist[lid], lid))
    done = set()
    order = []
    while heap:
        d, lid = heapq.heappop(heap)
        if lid in done or d > dist[lid] + _tol(dist[lid]):
            continue
        done.add(lid)
        order.append(lid)
        if road.lanes[lid].label == goal_label:
            continue
        for nxt in road.lanes[lid].successors:
            nd = d + road.lanes[nxt].length
            if nxt not in dist or nd < dist[nxt] - _tol(nd):
                dist[nxt] = nd
                preds[nxt] = [lid]
                heapq.heappush(heap, (nd, nxt))
            elif abs(nd - dist[nxt]) <= _tol(nd) and lid not in preds[nxt]:
                preds[nxt].append(lid)
    goals = [lid for lid in order if road.lanes[lid].label == goal_label]
    if not goals:
        raise RoutingError(f"goal {goal_label} unreachable")
    best = min(dist[g] for g in goals)
    goals = [g for g in goals if dist[g] <= best + _tol(best)]

    count: dict[int, int] = {}
    for lid in order:
        count[lid] = 1 if not preds[lid] else sum(count[p] for p in preds[lid])

    def pick(options):
        if len(options) == 1:
            return options[0]
        w = np.array([count[o] for o in options], dtype=float)
        return options[int(rng.choice(len(options), p=w / w.sum()))]

    node = pick(sorted(goals))
    path = [node]
    while preds[node]:
        node = pick(sorted(preds[node]))
        path.append(node)
    return path[::-1]


def _tol(x: float) -> float:
    return 1e-9 * max(1.0, abs(x))


def plan_route(road: RoadMap, start: str, goal: str, rng: np.random.Generator) -> Route:
    """Shortest-by-arc-length route from a lane labeled ``start`` to one labeled ``goal``."""
    starts = road.lanes_with_label(start)
    if not starts:
        raise RoutingError(f"no lane labeled {start}")
    return Route(road, _shortest_paths(road, starts, goal, rng), goal=goal)


def plan_from_lane(road: RoadMap, lane_id: int, goal: str, rng: np.random.Generator) -> list[int]:
    """Lane ids of a shortest path starting at ``lane_id`` (used for re-planning)."""
    return _shortest_paths(road, [lane_id], goal, rng)


def reference_waypoints(route: Route, ego_pose: Sequence[float], offsets: Sequence[float],
                        s_ego: float | None = None) -> np.ndarray:
    """Route points ``offsets`` meters ahead of the ego, in the ego frame.

    Past the end of the route the final point is repeated.
    """
    x, y, psi = float(ego_pose[0]), float(ego_pose[1]), float(ego_pose[2])
    if s_ego is None:
        s_ego, _, _ = route.project(x, y)
    s = np.minimum(s_ego + np.asarray(offsets, dtype=float), route.length)
    px = np.interp(s, route.cum_s, route.px)
    py = np.interp(s, route.cum_s, route.py)
    c, sn = math.cos(psi), math.sin(psi)
    dx, dy = px - x, py - y
    out = np.empty((len(s), 2))
    out[:, 0] = c * dx + sn * dy
    out[:, 1] = -sn * dx + c * dy
    return out
