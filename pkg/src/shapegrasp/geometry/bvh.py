"""Bounding-volume hierarchy over triangles with numba kernels.

Queries are sequential loops, so results never depend on thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

LEAF_SIZE = 4
_STACK = 128


@dataclass(frozen=True)
class Bvh:
    tri_a: np.ndarray   # (M, 3) corners, permuted into leaf order
    tri_b: np.ndarray
    tri_c: np.ndarray
    tri_index: np.ndarray  # permuted -> original triangle id
    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray  # -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray

    @property
    def n_triangles(self) -> int:
        return len(self.tri_index)


@njit(cache=True)
def _build(centroids, lo, hi, leaf_size):
    m = centroids.shape[0]
    cap = 2 * m + 1
    order = np.arange(m)
    nmin = np.empty((cap, 3))
    nmax = np.empty((cap, 3))
    left = -np.ones(cap, dtype=np.int64)
    right = -np.ones(cap, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    stack = np.empty(cap, dtype=np.int64)
    n_nodes = 1
    start[0] = 0
    count[0] = m
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        c = count[node]
        for k in range(3):
            nmin[node, k] = np.inf
            nmax[node, k] = -np.inf
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for i in range(s, s + c):
            t = order[i]
            for k in range(3):
                if lo[t, k] < nmin[node, k]:
                    nmin[node, k] = lo[t, k]
                if hi[t, k] > nmax[node, k]:
                    nmax[node, k] = hi[t, k]
                if centroids[t, k] < cmin[k]:
                    cmin[k] = centroids[t, k]
                if centroids[t, k] > cmax[k]:
                    cmax[k] = centroids[t, k]
        if c <= leaf_size:
            continue
        axis = 0
        ext = cmax[0] - cmin[0]
        for k in range(1, 3):
            if cmax[k] - cmin[k] > ext:
                ext = cmax[k] - cmin[k]
                axis = k
        seg = order[s:s + c].copy()
        keys = np.empty(c)
        for i in range(c):
            keys[i] = centroids[seg[i], axis]
        idx = np.argsort(keys, kind="mergesort")
        for i in range(c):
            order[s + i] = seg[idx[i]]
        half = c // 2
        l = n_nodes
        r = n_nodes + 1
        n_nodes += 2
        left[node] = l
        right[node] = r
        start[l] = s
        count[l] = half
        start[r] = s + half
        count[r] = c - half
        stack[sp] = l
        sp += 1
        stack[sp] = r
        sp += 1
    return order, nmin[:n_nodes], nmax[:n_nodes], left[:n_nodes], right[:n_nodes], start[:n_nodes], count[:n_nodes]


def build_bvh(vertices: np.ndarray, triangles: np.ndarray) -> Bvh:
    v = np.ascontiguousarray(vertices, dtype=np.float64)
    t = np.ascontiguousarray(triangles, dtype=np.int64)
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    order, nmin, nmax, left, right, start, count = _build((a + b + c) / 3.0, lo, hi, LEAF_SIZE)
    return Bvh(
        np.ascontiguousarray(a[order]), np.ascontiguousarray(b[order]), np.ascontiguousarray(c[order]),
        order, nmin, nmax, left, right, start, count,
    )


@njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    """Squared distance from p to triangle abc (Ericson, Real-Time Collision Detection 5.1.5)."""
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ac0, ac1, ac2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return ap0 * ap0 + ap1 * ap1 + ap2 * ap2
    bp0, bp1, bp2 = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return bp0 * bp0 + bp1 * bp1 + bp2 * bp2
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        q0, q1, q2 = a[0] + v * ab0 - p[0], a[1] + v * ab1 - p[1], a[2] + v * ab2 - p[2]
        return q0 * q0 + q1 * q1 + q2 * q2
    cp0, cp1, cp2 = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return cp0 * cp0 + cp1 * cp1 + cp2 * cp2
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        q0, q1, q2 = a[0] + w * ac0 - p[0], a[1] + w * ac1 - p[1], a[2] + w * ac2 - p[2]
        return q0 * q0 + q1 * q1 + q2 * q2
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        q0 = b[0] + w * (c[0] - b[0]) - p[0]
        q1 = b[1] + w * (c[1] - b[1]) - p[1]
        q2 = b[2] + w * (c[2] - b[2]) - p[2]
        return q0 * q0 + q1 * q1 + q2 * q2
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    q0 = a[0] + ab0 * v + ac0 * w - p[0]
    q1 = a[1] + ab1 * v + ac1 * w - p[1]
    q2 = a[2] + ab2 * v + ac2 * w - p[2]
    return q0 * q0 + q1 * q1 + q2 * q2


@njit(cache=True)
def _box_dist2(p, lo, hi):
    d = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            d += (p[k] - hi[k]) ** 2
    return d


@njit(cache=True)
def _closest_distances(points, ta, tb, tc, tidx, nmin, nmax, left, right, start, count):
    n = points.shape[0]
    out = np.empty(n)
    nearest = np.empty(n, dtype=np.int64)
    stack = np.empty(_STACK, dtype=np.int64)
    prev = -1
    best_j = -1
    for i in range(n):
        p = points[i]
        best = np.inf
        best_t = -1
        if prev >= 0:
            # grid-ordered queries: the previous winner is a tight initial bound
            best = _closest_on_triangle(p, ta[prev], tb[prev], tc[prev])
            best_t = tidx[prev]
            best_j = prev
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist2(p, nmin[node], nmax[node]) >= best:
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    d = _closest_on_triangle(p, ta[j], tb[j], tc[j])
                    if d < best:
                        best = d
                        best_t = tidx[j]
                        best_j = j
            else:
                l = left[node]
                r = right[node]
                dl = _box_dist2(p, nmin[l], nmax[l])
                dr = _box_dist2(p, nmin[r], nmax[r])
                # push the farther child first so the nearer one is popped next
                if dl < dr:
                    stack[sp] = r
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = r
                sp += 2
        out[i] = np.sqrt(best)
        nearest[i] = best_t
        prev = best_j
    return out, nearest


def closest_distances(bvh: Bvh, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unsigned distance from each point to the nearest triangle, plus that triangle's id."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return _closest_distances(
        pts, bvh.tri_a, bvh.tri_b, bvh.tri_c, bvh.tri_index,
        bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right, bvh.node_start, bvh.node_count,
    )


@njit(cache=True)
def _ray_box(o, inv, lo, hi, tmax):
    t0 = 0.0
    t1 = tmax
    for k in range(3):
        ta = (lo[k] - o[k]) * inv[k]
        tb = (hi[k] - o[k]) * inv[k]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@njit(cache=True)
def ray_triangle(o, d, a, b, c, eps):
    """Moller-Trumbore; returns hit distance or inf. ``eps`` widens edges to close cracks."""
    e10, e11, e12 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    e20, e21, e22 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    p0 = d[1] * e22 - d[2] * e21
    p1 = d[2] * e20 - d[0] * e22
    p2 = d[0] * e21 - d[1] * e20
    det = e10 * p0 + e11 * p1 + e12 * p2
    if abs(det) < 1e-14:
        return np.inf
    inv = 1.0 / det
    s0, s1, s2 = o[0] - a[0], o[1] - a[1], o[2] - a[2]
    u = (s0 * p0 + s1 * p1 + s2 * p2) * inv
    if u < -eps or u > 1.0 + eps:
        return np.inf
    q0 = s1 * e12 - s2 * e11
    q1 = s2 * e10 - s0 * e12
    q2 = s0 * e11 - s1 * e10
    v = (d[0] * q0 + d[1] * q1 + d[2] * q2) * inv
    if v < -eps or u + v > 1.0 + eps:
        return np.inf
    return (e20 * q0 + e21 * q1 + e22 * q2) * inv


@njit(cache=True)
def _first_hits(origins, dirs, tmin, tmax, labels, ta, tb, tc, tidx, nmin, nmax, left, right, start, count):
    n = origins.shape[0]
    out_t = np.full(n, np.inf)
    out_i = -np.ones(n, dtype=np.int64)
    stack = np.empty(_STACK, dtype=np.int64)
    inv = np.empty(3)
    for i in range(n):
        o = origins[i]
        d = dirs[i]
        for k in range(3):
            inv[k] = 1.0 / d[k] if d[k] != 0.0 else 1e300
        best = tmax[i]
        hit = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _ray_box(o, inv, nmin[node], nmax[node], best):
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    t = ray_triangle(o, d, ta[j], tb[j], tc[j], 1e-9)
                    if t > tmin[i] and (t < best or (t == best and hit >= 0
                                                       and labels[tidx[j]] < labels[hit])):
                        best = t
                        hit = tidx[j]
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        if hit >= 0:
            out_t[i] = best
            out_i[i] = hit
    return out_t, out_i


def first_hits(bvh: Bvh, origins, dirs, tmin=1e-9, tmax=np.inf, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit along each ray within (tmin, tmax); inf / -1 where nothing is hit.

    Hits at exactly equal range go to the triangle with the lowest ``labels`` entry
    (default: the lowest triangle id), so traversal order never decides a tie.
    """
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    n = len(o)
    tmin_a = np.broadcast_to(np.asarray(tmin, dtype=np.float64), (n,)).copy()
    tmax_a = np.broadcast_to(np.asarray(tmax, dtype=np.float64), (n,)).copy()
    lab = np.arange(bvh.n_triangles, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    return _first_hits(
        o, d, tmin_a, tmax_a, lab, bvh.tri_a, bvh.tri_b, bvh.tri_c, bvh.tri_index,
        bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right, bvh.node_start, bvh.node_count,
    )


@njit(cache=True)
def _count_crossings(origins, d, ta, tb, tc, nmin, nmax, left, right, start, count):
    n = origins.shape[0]
    out = np.zeros(n, dtype=np.int64)
    stack = np.empty(_STACK, dtype=np.int64)
    inv = np.empty(3)
    for k in range(3):
        inv[k] = 1.0 / d[k] if d[k] != 0.0 else 1e300
    for i in range(n):
        o = origins[i]
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _ray_box(o, inv, nmin[node], nmax[node], np.inf):
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    t = ray_triangle(o, d, ta[j], tb[j], tc[j], 0.0)
                    if t > 0.0 and t < np.inf:
                        out[i] += 1
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
    return out


# irrational-ish direction so rays rarely graze edges or vertices of axis-aligned meshes
_PARITY_DIR = np.array([0.5773502691896258, 0.5163977794943222, 0.6324555320336759])


def inside_by_parity(bvh: Bvh, points) -> np.ndarray:
    """Odd ray-crossing count means inside a closed mesh."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    d = _PARITY_DIR / np.linalg.norm(_PARITY_DIR)
    hits = _count_crossings(pts, d, bvh.tri_a, bvh.tri_b, bvh.tri_c, bvh.node_min, bvh.node_max,
                            bvh.node_left, bvh.node_right, bvh.node_start, bvh.node_count)
    return (hits % 2) == 1
