"""Compiled geometry kernels shared by the road, collision and raster code.

Everything here works on plain float64 arrays so the callers can keep their
own data structures. Conventions:

* polylines are given as ``px, py, cum_s`` with ``cum_s[0] == 0``;
* lateral offsets are positive to the left of the direction of travel;
* raster pixel ``(row, col)`` has its center at continuous coordinates
  ``(u=col, v=row)``.
"""

import math

import numba as nb
import numpy as np


@nb.njit(cache=True)
def project_polyline(px, py, cum_s, x, y, lo, hi):
    """Closest point on segments ``lo .. hi-1``. Returns ``(s, d, seg)``."""
    best = np.inf
    best_s = 0.0
    best_d = 0.0
    best_i = lo
    for i in range(lo, hi):
        ax = px[i]
        ay = py[i]
        dx = px[i + 1] - ax
        dy = py[i + 1] - ay
        l2 = dx * dx + dy * dy
        t = ((x - ax) * dx + (y - ay) * dy) / l2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        ex = x - (ax + t * dx)
        ey = y - (ay + t * dy)
        dist2 = ex * ex + ey * ey
        if dist2 < best:
            best = dist2
            best_i = i
            best_s = cum_s[i] + t * (cum_s[i + 1] - cum_s[i])
            dist = math.sqrt(dist2)
            if dx * ey - dy * ex >= 0.0:
                best_d = dist
            else:
                best_d = -dist
    return best_s, best_d, best_i


@nb.njit(cache=True)
def project_points(px, py, cum_s, xs, ys, lo, hi):
    n = xs.shape[0]
    s_out = np.empty(n)
    d_out = np.empty(n)
    for k in range(n):
        s, d, _ = project_polyline(px, py, cum_s, xs[k], ys[k], lo, hi)
        s_out[k] = s
        d_out[k] = d
    return s_out, d_out


@nb.njit(cache=True)
def point_at(px, py, cum_s, s):
    """Point and heading at arc length ``s``; extrapolates past both ends."""
    n = px.shape[0]
    if s <= 0.0:
        i = 0
    elif s >= cum_s[n - 1]:
        i = n - 2
    else:
        i = np.searchsorted(cum_s, s, side="right") - 1
        if i > n - 2:
            i = n - 2
    seg = cum_s[i + 1] - cum_s[i]
    dx = px[i + 1] - px[i]
    dy = py[i + 1] - py[i]
    t = (s - cum_s[i]) / seg
    return px[i] + t * dx, py[i] + t * dy, math.atan2(dy, dx)


@nb.njit(cache=True)
def lane_clearance(ax, ay, bx, by, limit, x, y):
    """``(min(dist - limit), min dist)`` of a point over all lane segments.

    The point is off-road iff the first value is strictly positive.
    """
    margin = np.inf
    nearest = np.inf
    for i in range(ax.shape[0]):
        dx = bx[i] - ax[i]
        dy = by[i] - ay[i]
        t = ((x - ax[i]) * dx + (y - ay[i]) * dy) / (dx * dx + dy * dy)
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        ex = x - (ax[i] + t * dx)
        ey = y - (ay[i] + t * dy)
        dist = math.sqrt(ex * ex + ey * ey)
        if dist < nearest:
            nearest = dist
        if dist - limit[i] < margin:
            margin = dist - limit[i]
    return margin, nearest


@nb.njit(cache=True)
def block_bounds(ax, ay, bx, by, limit, bsize):
    """Bounding boxes and max limit of consecutive runs of ``bsize`` segments."""
    n = ax.shape[0]
    nb_ = (n + bsize - 1) // bsize
    out = np.empty((nb_, 5))
    for b in range(nb_):
        i0 = b * bsize
        i1 = min(n, i0 + bsize)
        out[b, 0] = min(ax[i0:i1].min(), bx[i0:i1].min())
        out[b, 1] = min(ay[i0:i1].min(), by[i0:i1].min())
        out[b, 2] = max(ax[i0:i1].max(), bx[i0:i1].max())
        out[b, 3] = max(ay[i0:i1].max(), by[i0:i1].max())
        out[b, 4] = limit[i0:i1].max()
    return out


@nb.njit(cache=True)
def lane_clearance_blocked(ax, ay, bx, by, limit, blocks, bsize, x, y):
    """Same result as :func:`lane_clearance`, skipping blocks that cannot
    improve either minimum."""
    margin = np.inf
    nearest = np.inf
    n = ax.shape[0]
    for b in range(blocks.shape[0]):
        ddx = max(blocks[b, 0] - x, 0.0, x - blocks[b, 2])
        ddy = max(blocks[b, 1] - y, 0.0, y - blocks[b, 3])
        dbox = math.sqrt(ddx * ddx + ddy * ddy)
        if dbox >= nearest and dbox - blocks[b, 4] >= margin:
            continue
        for i in range(b * bsize, min(n, (b + 1) * bsize)):
            dx = bx[i] - ax[i]
            dy = by[i] - ay[i]
            t = ((x - ax[i]) * dx + (y - ay[i]) * dy) / (dx * dx + dy * dy)
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            ex = x - (ax[i] + t * dx)
            ey = y - (ay[i] + t * dy)
            dist = math.sqrt(ex * ex + ey * ey)
            if dist < nearest:
                nearest = dist
            if dist - limit[i] < margin:
                margin = dist - limit[i]
    return margin, nearest


@nb.njit(cache=True)
def lane_clearance_many(ax, ay, bx, by, limit, blocks, bsize, xs, ys):
    n = xs.shape[0]
    margins = np.empty(n)
    nearest = np.empty(n)
    for k in range(n):
        margins[k], nearest[k] = lane_clearance_blocked(ax, ay, bx, by, limit, blocks, bsize,
                                                        xs[k], ys[k])
    return margins, nearest


@nb.njit(cache=True)
def obb_separation(x1, y1, psi1, len1, wid1, x2, y2, psi2, len2, wid2):
    """Largest separating-axis gap between two rectangles (> 0 means apart)."""
    c1 = math.cos(psi1)
    s1 = math.sin(psi1)
    c2 = math.cos(psi2)
    s2 = math.sin(psi2)
    tx = x2 - x1
    ty = y2 - y1
    h1l = 0.5 * len1
    h1w = 0.5 * wid1
    h2l = 0.5 * len2
    h2w = 0.5 * wid2
    gap = -np.inf
    for k in range(4):
        if k == 0:
            nx, ny = c1, s1
        elif k == 1:
            nx, ny = -s1, c1
        elif k == 2:
            nx, ny = c2, s2
        else:
            nx, ny = -s2, c2
        r1 = h1l * abs(c1 * nx + s1 * ny) + h1w * abs(-s1 * nx + c1 * ny)
        r2 = h2l * abs(c2 * nx + s2 * ny) + h2w * abs(-s2 * nx + c2 * ny)
        g = abs(tx * nx + ty * ny) - r1 - r2
        if g > gap:
            gap = g
    return gap


@nb.njit(cache=True)
def first_overlap(x, y, psi, length, width, xs, ys, psis, lens, wids):
    """Index of the first box touching the query box, or -1."""
    for i in range(xs.shape[0]):
        if obb_separation(x, y, psi, length, width, xs[i], ys[i], psis[i], lens[i], wids[i]) <= 0.0:
            return i
    return -1


@nb.njit(cache=True)
def colliding_pairs(xs, ys, psis, lens, wids):
    """Index pairs ``(i, j), i < j`` whose boxes intersect (touching counts)."""
    n = xs.shape[0]
    out = np.empty((n * (n - 1) // 2, 2), dtype=np.int64)
    m = 0
    for i in range(n):
        for j in range(i + 1, n):
            # bounding circles first
            dx = xs[j] - xs[i]
            dy = ys[j] - ys[i]
            rr = 0.5 * (math.hypot(lens[i], wids[i]) + math.hypot(lens[j], wids[j]))
            if dx * dx + dy * dy > rr * rr:
                continue
            g = obb_separation(xs[i], ys[i], psis[i], lens[i], wids[i],
                               xs[j], ys[j], psis[j], lens[j], wids[j])
            if g <= 0.0:
                out[m, 0] = i
                out[m, 1] = j
                m += 1
    return out[:m]


@nb.njit(cache=True)
def fill_convex(img, us, vs, r, g, b):
    """Scanline fill of a convex polygon; a pixel is set iff its center is inside."""
    h = img.shape[0]
    w = img.shape[1]
    n = us.shape[0]
    vmin = vs[0]
    vmax = vs[0]
    for k in range(1, n):
        if vs[k] < vmin:
            vmin = vs[k]
        if vs[k] > vmax:
            vmax = vs[k]
    r0 = max(0, int(math.ceil(vmin)))
    r1 = min(h - 1, int(math.floor(vmax)))
    for row in range(r0, r1 + 1):
        xl = np.inf
        xr = -np.inf
        fr = float(row)
        for k in range(n):
            u0 = us[k]
            v0 = vs[k]
            u1 = us[(k + 1) % n]
            v1 = vs[(k + 1) % n]
            if (v0 <= fr <= v1) or (v1 <= fr <= v0):
                if v0 == v1:
                    lo = min(u0, u1)
                    hi = max(u0, u1)
                else:
                    u = u0 + (fr - v0) / (v1 - v0) * (u1 - u0)
                    lo = u
                    hi = u
                if lo < xl:
                    xl = lo
                if hi > xr:
                    xr = hi
        if xl > xr:
            continue
        c0 = max(0, int(math.ceil(xl)))
        c1 = min(w - 1, int(math.floor(xr)))
        for col in range(c0, c1 + 1):
            img[row, col, 0] = r
            img[row, col, 1] = g
            img[row, col, 2] = b


@nb.njit(cache=True)
def _to_pixels(X, Y, ex, ey, c, s, center, inv_mpp):
    dx = X - ex
    dy = Y - ey
    fwd = c * dx + s * dy
    left = -s * dx + c * dy
    return center - left * inv_mpp, center - fwd * inv_mpp


@nb.njit(cache=True)
def draw_bands(img, ax, ay, bx, by, half_w, ex, ey, epsi, mpp, color):
    """Draw segments as width-true quads in the ego frame, culling far ones."""
    c = math.cos(epsi)
    s = math.sin(epsi)
    center = img.shape[0] // 2
    inv = 1.0 / mpp
    reach = (img.shape[0] * mpp) * 0.75
    us = np.empty(4)
    vs = np.empty(4)
    for i in range(ax.shape[0]):
        # cull segments whose bounding box misses the window neighbourhood
        if min(ax[i], bx[i]) - half_w[i] > ex + reach or max(ax[i], bx[i]) + half_w[i] < ex - reach:
            continue
        if min(ay[i], by[i]) - half_w[i] > ey + reach or max(ay[i], by[i]) + half_w[i] < ey - reach:
            continue
        dx = bx[i] - ax[i]
        dy = by[i] - ay[i]
        ln = math.sqrt(dx * dx + dy * dy)
        nx = -dy / ln * half_w[i]
        ny = dx / ln * half_w[i]
        us[0], vs[0] = _to_pixels(ax[i] + nx, ay[i] + ny, ex, ey, c, s, center, inv)
        us[1], vs[1] = _to_pixels(bx[i] + nx, by[i] + ny, ex, ey, c, s, center, inv)
        us[2], vs[2] = _to_pixels(bx[i] - nx, by[i] - ny, ex, ey, c, s, center, inv)
        us[3], vs[3] = _to_pixels(ax[i] - nx, ay[i] - ny, ex, ey, c, s, center, inv)
        fill_convex(img, us, vs, color[0], color[1], color[2])


@nb.njit(cache=True)
def _draw_box(img, x, y, psi, length, width, r, g, b, ex, ey, c, s, center, inv, us, vs):
    cb = math.cos(psi)
    sb = math.sin(psi)
    hl = 0.5 * length
    hw = 0.5 * width
    for k in range(4):
        fl = hl if (k == 0 or k == 1) else -hl
        fw = hw if (k == 0 or k == 3) else -hw
        X = x + cb * fl - sb * fw
        Y = y + sb * fl + cb * fw
        us[k], vs[k] = _to_pixels(X, Y, ex, ey, c, s, center, inv)
    fill_convex(img, us, vs, r, g, b)


@nb.njit(cache=True)
def draw_boxes(img, xs, ys, psis, lens, wids, colors, ex, ey, epsi, mpp):
    """Draw oriented rectangles; ``colors`` is ``(n, 3)``. Later boxes overwrite."""
    c = math.cos(epsi)
    s = math.sin(epsi)
    center = img.shape[0] // 2
    inv = 1.0 / mpp
    us = np.empty(4)
    vs = np.empty(4)
    for i in range(xs.shape[0]):
        _draw_box(img, xs[i], ys[i], psis[i], lens[i], wids[i], colors[i, 0], colors[i, 1], colors[i, 2],
                  ex, ey, c, s, center, inv, us, vs)


@nb.njit(cache=True)
def draw_vehicles(img, xs, ys, psis, prev, lens, wids, rows, palette, ego_i, mpp):
    """Faded previous footprints (``prev`` rows of NaN are skipped), then the
    other vehicles in order, then vehicle ``ego_i``, in the frame of ``ego_i``.
    ``rows`` index the ``palette`` colors."""
    ex = xs[ego_i]
    ey = ys[ego_i]
    c = math.cos(psis[ego_i])
    s = math.sin(psis[ego_i])
    center = img.shape[0] // 2
    inv = 1.0 / mpp
    us = np.empty(4)
    vs = np.empty(4)
    n = xs.shape[0]
    for i in range(n):
        if not math.isnan(prev[i, 0]):
            k = rows[i]
            _draw_box(img, prev[i, 0], prev[i, 1], prev[i, 2], lens[i], wids[i], palette[k, 0] // 2,
                      palette[k, 1] // 2, palette[k, 2] // 2, ex, ey, c, s, center, inv, us, vs)
    for j in range(n):
        i = j + 1 if j >= ego_i else j
        if j == n - 1:
            i = ego_i
        k = rows[i]
        _draw_box(img, xs[i], ys[i], psis[i], lens[i], wids[i], palette[k, 0], palette[k, 1], palette[k, 2],
                  ex, ey, c, s, center, inv, us, vs)


@nb.njit(cache=True)
def neighbor_slots(vec, xs, ys, psis, vs, accels, laterals, ex, ey, epsi, pos_scale, speed_scale, accel_scale):
    """Fill the leading 8-wide neighbor slots of ``vec`` in the ego frame."""
    c = math.cos(epsi)
    s = math.sin(epsi)
    for i in range(xs.shape[0]):
        dx = xs[i] - ex
        dy = ys[i] - ey
        dpsi = psis[i] - epsi
        j = 8 * i
        vec[j] = (c * dx + s * dy) / pos_scale
        vec[j + 1] = (-s * dx + c * dy) / pos_scale
        vec[j + 2] = math.sin(dpsi)
        vec[j + 3] = math.cos(dpsi)
        vec[j + 4] = vs[i] / speed_scale
        vec[j + 5] = accels[i] / accel_scale
        vec[j + 6] = laterals[i]
        vec[j + 7] = 1.0


@nb.njit(cache=True)
def project_coarse(px, py, cum_s, x, y, lo, hi):
    """Like :func:`project_polyline` but scans every 8th vertex first and
    refines around the best one. Meant for dense, gently curving paths."""
    if hi - lo <= 32:
        return project_polyline(px, py, cum_s, x, y, lo, hi)
    best = np.inf
    best_i = lo
    for i in range(lo, hi + 1, 8):
        dx = px[i] - x
        dy = py[i] - y
        d2 = dx * dx + dy * dy
        if d2 < best:
            best = d2
            best_i = i
    return project_polyline(px, py, cum_s, x, y, max(lo, best_i - 9), min(hi, best_i + 9))


@nb.njit(cache=True)
def neighborhood(px, py, cum_s, lo, hi, s_me, half_len_me, lane_w, side,
                 xs, ys, psis, vs, half_lens, skip):
    """Leader on the path plus lead/lag in the adjacent band on ``side``.

    Other vehicles are projected onto the agent's own path (segments
    ``lo .. hi-1``); projections clamped to the window ends are ignored.
    Returns ``(lead_gap, lead_v, tlead_gap, tlead_v, tlag_gap, tlag_v)`` with
    bumper-to-bumper gaps and speeds measured along the path.
    """
    lead_gap = np.inf
    lead_v = 0.0
    tl_gap = np.inf
    tl_v = 0.0
    tg_gap = np.inf
    tg_v = 0.0
    s_lo = cum_s[lo]
    s_hi = cum_s[hi]
    same = 0.5 * lane_w + 0.25
    adj_lo = 0.5 * lane_w - 0.25
    adj_hi = 1.5 * lane_w
    sx = xs[skip] if skip >= 0 else px[lo]
    sy = ys[skip] if skip >= 0 else py[lo]
    reach = s_hi - s_lo
    for k in range(xs.shape[0]):
        if k == skip:
            continue
        if abs(xs[k] - sx) > reach or abs(ys[k] - sy) > reach:
            continue
        s, d, seg = project_coarse(px, py, cum_s, xs[k], ys[k], lo, hi)
        if s <= s_lo or s >= s_hi:
            continue
        h = math.atan2(py[seg + 1] - py[seg], px[seg + 1] - px[seg])
        v_along = vs[k] * math.cos(psis[k] - h)
        ds = s - s_me
        if abs(d) < same and ds > 0.0:
            gap = ds - half_len_me - half_lens[k]
            if gap < lead_gap:
                lead_gap = gap
                lead_v = v_along
        if side != 0:
            sd = d * side
            if adj_lo < sd < adj_hi:
                if ds >= 0.0:
                    gap = ds - half_len_me - half_lens[k]
                    if gap < tl_gap:
                        tl_gap = gap
                        tl_v = v_along
                else:
                    gap = -ds - half_len_me - half_lens[k]
                    if gap < tg_gap:
                        tg_gap = gap
                        tg_v = v_along
    return lead_gap, lead_v, tl_gap, tl_v, tg_gap, tg_v
