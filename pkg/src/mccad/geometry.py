"""Small planar geometry helpers (convex hull, areas, point-polygon distance)."""
from __future__ import annotations

import math

import numpy as np


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> list[tuple[float, float]]:
    """Monotone-chain hull, counter-clockwise, collinear points dropped."""
    pts = sorted(set((float(p[0]), float(p[1])) for p in points))
    if len(pts) <= 2:
        return pts
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    s = 0.0
    for i in range(len(poly)):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % len(poly)]
        s += x0 * y1 - x1 * y0
    return abs(s) * 0.5


def _seg_dist(p, a, b) -> float:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    den = dx * dx + dy * dy
    t = 0.0 if den == 0 else max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / den))
    return math.hypot(p[0] - (ax + t * dx), p[1] - (ay + t * dy))


def point_in_convex(p, hull) -> bool:
    if len(hull) < 3:
        return False
    for i in range(len(hull)):
        if _cross(hull[i], hull[(i + 1) % len(hull)], p) < 0:
            return False
    return True


def distance_to_hull(p, hull) -> float:
    """0 inside the (counter-clockwise) hull, else distance to its boundary."""
    if not hull:
        return math.inf
    if len(hull) == 1:
        return math.hypot(p[0] - hull[0][0], p[1] - hull[0][1])
    if point_in_convex(p, hull):
        return 0.0
    n = len(hull)
    segs = [(hull[i], hull[(i + 1) % n]) for i in range(n if n > 2 else 1)]
    return min(_seg_dist(p, a, b) for a, b in segs)


def covariance_eigenvalues(xy) -> tuple[float, float]:
    """Descending eigenvalues of the population covariance of 2D points."""
    pts = np.asarray(xy, dtype=np.float64)
    d = pts - pts.mean(axis=0)
    cov = d.T @ d / len(pts)
    ev = np.linalg.eigvalsh(cov)
    ev = np.clip(ev, 0.0, None)
    return float(ev[1]), float(ev[0])
