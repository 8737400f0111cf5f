"""Small 2-D geometry kernels shared by the searches, the cycle builder and the audits."""

from __future__ import annotations

import math

import numpy as np


def clearances(pos, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Signed distance from ``pos`` to every ball surface (negative inside)."""
    if len(radii) == 0:
        return np.empty(0)
    d = np.asarray(centers, float) - np.asarray(pos, float)[:2]
    return np.hypot(d[:, 0], d[:, 1]) - radii


def min_clearance(pos, centers: np.ndarray, radii: np.ndarray) -> float:
    c = clearances(pos, centers, radii)
    return float(c.min()) if c.size else math.inf


def ray_entry_time(q, v, centers: np.ndarray, radii: np.ndarray, t_max: float) -> float:
    """Earliest t in [0, t_max] at which q + v t lies in any closed ball, else inf.

    Solves ||(q - p) + v t||^2 = r^2 per ball; a start inside a ball gives 0.
    """
    if len(radii) == 0:
        return math.inf
    q = np.asarray(q, float)[:2]
    v = np.asarray(v, float)[:2]
    d = q - np.asarray(centers, float)
    c = np.einsum("ij,ij->i", d, d) - radii * radii
    inside = c <= 0.0
    if inside.any():
        return 0.0
    a = float(v @ v)
    if a == 0.0:
        return math.inf
    b = d @ v  # half the linear coefficient
    disc = b * b - a * c
    ok = (disc >= 0.0) & (b < 0.0)
    if not ok.any():
        return math.inf
    t = (-b[ok] - np.sqrt(disc[ok])) / a
    t = t[(t >= 0.0) & (t <= t_max)]
    return float(t.min()) if t.size else math.inf


def segment_ball_roots(a, b, center, r: float) -> list[float]:
    """Real roots in [0, 1] of ||(1-lam) a + lam b - center|| = r."""
    a = np.asarray(a, float)[:2]
    b = np.asarray(b, float)[:2]
    d = a - np.asarray(center, float)[:2]
    e = b - a
    qa = float(e @ e)
    qb = 2.0 * float(d @ e)
    qc = float(d @ d) - r * r
    if qa == 0.0:
        return []
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0.0:
        return []
    sq = math.sqrt(disc)
    # numerically stable pair
    if qb >= 0:
        t1 = (-qb - sq) / (2 * qa)
        t2 = (2 * qc) / (-qb - sq) if (-qb - sq) != 0 else t1
    else:
        t2 = (-qb + sq) / (2 * qa)
        t1 = (2 * qc) / (-qb + sq) if (-qb + sq) != 0 else t2
    return [t for t in (t1, t2) if 0.0 <= t <= 1.0]


def point_segment_distance(p, a, b) -> float:
    p = np.asarray(p, float)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    e = b - a
    ee = float(e @ e)
    if ee == 0.0:
        return float(np.hypot(*(p - a)))
    t = min(1.0, max(0.0, float((p - a) @ e) / ee))
    return float(np.hypot(*(p - (a + t * e))))


def point_triangle_distance(p, a, b, c) -> float:
    """Euclidean distance from ``p`` to the closed triangle abc (0 if inside).

    Degenerate triangles fall back to the longest edge.
    """
    p = np.asarray(p, float)[:2]
    a = np.asarray(a, float)[:2]
    b = np.asarray(b, float)[:2]
    c = np.asarray(c, float)[:2]
    area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    scale = max(float(np.ptp(np.stack([a, b, c]), axis=0).max()), 1e-300)
    if abs(area2) > 1e-14 * scale * scale:
        s = 1.0 if area2 > 0 else -1.0
        e1 = s * ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]))
        e2 = s * ((c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0]))
        e3 = s * ((a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0]))
        if e1 >= 0 and e2 >= 0 and e3 >= 0:
            return 0.0
    return min(
        point_segment_distance(p, a, b),
        point_segment_distance(p, b, c),
        point_segment_distance(p, c, a),
    )


def points_triangle_distance(pts, a, b, c) -> np.ndarray:
    """Vectorised ``point_triangle_distance`` for an (m, 2) array of points."""
    pts = np.atleast_2d(np.asarray(pts, float))[:, :2]
    a = np.asarray(a, float)[:2]
    b = np.asarray(b, float)[:2]
    c = np.asarray(c, float)[:2]

    def seg(p0, p1):
        e = p1 - p0
        ee = float(e @ e)
        if ee == 0.0:
            d = pts - p0
        else:
            t = np.clip((pts - p0) @ e / ee, 0.0, 1.0)
            d = pts - (p0 + t[:, None] * e)
        return np.hypot(d[:, 0], d[:, 1])

    dist = np.minimum(np.minimum(seg(a, b), seg(b, c)), seg(c, a))
    area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    scale = max(float(np.ptp(np.stack([a, b, c]), axis=0).max()), 1e-300)
    if abs(area2) > 1e-14 * scale * scale:
        s = 1.0 if area2 > 0 else -1.0
        x, y = pts[:, 0], pts[:, 1]
        e1 = s * ((b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]))
        e2 = s * ((c[0] - b[0]) * (y - b[1]) - (c[1] - b[1]) * (x - b[0]))
        e3 = s * ((a[0] - c[0]) * (y - c[1]) - (a[1] - c[1]) * (x - c[0]))
        dist[(e1 >= 0) & (e2 >= 0) & (e3 >= 0)] = 0.0
    return dist
