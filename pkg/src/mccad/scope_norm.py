"""Scopes and scope-based normalization.

A scope is a region in physical (mm) coordinates.  Against a target grid it
selects the pixels whose centers fall inside it; statistics and the
zero-mean/unit-std normalization are then taken over exactly those pixels.
Pixel ``(row, col)`` of slice ``k`` has its center at
``(col * sx, row * sy, k * sz)`` mm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .image_core import Image2D, Volume3D

# slack for point-in-scope tests, in pixel units
_TOL = 1e-9

KINDS = ("ellipse2d", "box2d", "box3d")


@dataclass(frozen=True)
class Scope:
    kind: str
    center: tuple
    half: tuple
    angle: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scope kind {self.kind!r}")
        if not all(h > 0 for h in self.half):
            raise ValueError(f"scope half-extents must be positive, got {self.half}")
        need = 3 if self.kind == "box3d" else 2
        if len(self.half) != need:
            raise ValueError(f"{self.kind} needs {need} half-extents")

    @classmethod
    def ellipse2d(cls, center, semi_axes, angle=0.0) -> "Scope":
        """Ellipse whose first semi-axis points along ``angle`` (rad from +x).

        A 3-element center places the ellipse in the slice nearest to z.
        """
        return cls("ellipse2d", tuple(float(c) for c in center),
                   tuple(float(a) for a in semi_axes), float(angle))

    @classmethod
    def box2d(cls, center, half) -> "Scope":
        return cls("box2d", tuple(float(c) for c in center), tuple(float(h) for h in half))

    @classmethod
    def box3d(cls, center, half) -> "Scope":
        return cls("box3d", tuple(float(c) for c in center), tuple(float(h) for h in half))


@dataclass(frozen=True)
class ScopeStats:
    mean: float
    std: float
    count: int


def _grid_of(grid):
    """(data as (nz, ny, nx), spacing (sx, sy, sz), is_volume)."""
    if isinstance(grid, Image2D):
        return grid.data[None], (*grid.spacing, 1.0), False
    if isinstance(grid, Volume3D):
        return grid.data, grid.spacing, True
    data, spacing = grid
    data = np.asarray(data)
    if data.ndim == 2:
        return data[None], (*spacing[:2], 1.0), False
    return data, tuple(spacing), True


def _axis_range(center, half, step, n):
    lo = math.ceil(center / step - half / step - _TOL)
    hi = math.floor(center / step + half / step + _TOL)
    return max(lo, 0), min(hi, n - 1)


def _slice_index(z, sz, nz, is_volume):
    if not is_volume:
        return 0
    k = int(round(z / sz))
    if k < 0 or k >= nz:
        raise ValueError("scope outside image")
    return k


def box_bounds(scope: Scope, shape, spacing, is_volume=True):
    """``(z0, z1, y0, y1, x0, x1)`` half-open bounds of a box scope, clipped."""
    nz, ny, nx = shape
    sx, sy, sz = spacing
    cx, cy = scope.center[0], scope.center[1]
    x0, x1 = _axis_range(cx, scope.half[0], sx, nx)
    y0, y1 = _axis_range(cy, scope.half[1], sy, ny)
    if scope.kind == "box3d" and is_volume:
        z0, z1 = _axis_range(scope.center[2], scope.half[2], sz, nz)
    else:
        cz = scope.center[2] if len(scope.center) > 2 else 0.0
        z0 = z1 = _slice_index(cz, sz, nz, is_volume)
    if x0 > x1 or y0 > y1 or z0 > z1:
        raise ValueError("scope outside image")
    return z0, z1 + 1, y0, y1 + 1, x0, x1 + 1


def ellipse_mask(semi_axes, angle, spacing2, shape_hw, origin_rc, center_rc):
    """Boolean mask over a ``shape_hw`` window whose top-left pixel is ``origin_rc``."""
    sx, sy = spacing2
    a, b = semi_axes
    rows = (np.arange(shape_hw[0]) + origin_rc[0] - center_rc[0]) * sy
    cols = (np.arange(shape_hw[1]) + origin_rc[1] - center_rc[1]) * sx
    dy, dx = np.meshgrid(rows, cols, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0 + 1e-9


def ellipse_halfwidths(semi_axes, angle) -> tuple[float, float]:
    """Axis-aligned half extents (x, y) in mm of a rotated ellipse."""
    a, b = semi_axes
    c, s = math.cos(angle), math.sin(angle)
    return math.sqrt((a * c) ** 2 + (b * s) ** 2), math.sqrt((a * s) ** 2 + (b * c) ** 2)


def scope_pixels(scope: Scope, grid) -> tuple[np.ndarray, ...]:
    """Indices of grid pixels inside the scope, as numpy index arrays.

    Returns ``(rows, cols)`` for a 2D grid and ``(slices, rows, cols)`` for a
    volume; raises ``ValueError("scope outside image")`` when empty.
    """
    data, spacing, is_volume = _grid_of(grid)
    shape = data.shape
    if scope.kind == "ellipse2d":
        sx, sy, sz = spacing
        cz = scope.center[2] if len(scope.center) > 2 else 0.0
        k = _slice_index(cz, sz, shape[0], is_volume)
        hx, hy = ellipse_halfwidths(scope.half, scope.angle)
        x0, x1 = _axis_range(scope.center[0], hx, sx, shape[2])
        y0, y1 = _axis_range(scope.center[1], hy, sy, shape[1])
        if x0 > x1 or y0 > y1:
            raise ValueError("scope outside image")
        m = ellipse_mask(scope.half, scope.angle, (sx, sy), (y1 - y0 + 1, x1 - x0 + 1),
                         (y0, x0), (scope.center[1] / sy, scope.center[0] / sx))
        rr, cc = np.nonzero(m)
        if rr.size == 0:
            raise ValueError("scope outside image")
        rr = rr + y0
        cc = cc + x0
        if is_volume:
            return np.full(rr.shape, k), rr, cc
        return rr, cc
    z0, z1, y0, y1, x0, x1 = box_bounds(scope, shape, spacing, is_volume)
    zz, rr, cc = np.meshgrid(np.arange(z0, z1), np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
    if is_volume:
        return zz.ravel(), rr.ravel(), cc.ravel()
    return rr.ravel(), cc.ravel()


def _values(map_, scope):
    data = map_.data if isinstance(map_, (Image2D, Volume3D)) else np.asarray(map_[0])
    idx = scope_pixels(scope, map_)
    return idx, np.asarray(data[idx], dtype=np.float64)


def scope_statistics(map_, scope: Scope) -> ScopeStats:
    """Mean and population standard deviation over the scope's pixels."""
    _, v = _values(map_, scope)
    mean = float(np.mean(v))
    std = float(np.sqrt(np.mean((v - mean) ** 2)))
    return ScopeStats(mean, std, int(v.size))


def default_epsilon(data) -> float:
    """Flat-scope guard: 1e-6 of the map's value range, floored at 1e-12."""
    if isinstance(data, (Image2D, Volume3D)):
        data = data.data
    elif isinstance(data, tuple):
        data = data[0]
    data = np.asarray(data)
    rng = float(np.max(data)) - float(np.min(data))
    return max(1e-6 * rng, 1e-12)


def normalize_in_scope(map_, scope: Scope, epsilon: float | None = None):
    """Scope-local zero-mean/unit-std values: ``(index_arrays, values)``.

    Only scope members are returned; the map itself is never rewritten.
    """
    if epsilon is None:
        epsilon = default_epsilon(map_)
    idx, v = _values(map_, scope)
    mean = np.mean(v)
    std = np.sqrt(np.mean((v - mean) ** 2))
    return idx, (v - mean) / max(std, epsilon)


# ---------------------------------------------------------------------------
# Batch moment engine used by the feature extractors
# ---------------------------------------------------------------------------

STAT_FIELDS = ("min", "max", "mean", "std", "skew", "kurt")


def masked_moments(vals: np.ndarray, mask: np.ndarray, eps: float) -> np.ndarray:
    """Two-pass region moments for a batch of flattened windows.

    ``vals`` and ``mask`` are ``(n, k)``; returns ``(n, 6)`` columns
    ``STAT_FIELDS``.  Skewness/excess kurtosis are 0 where std <= eps.
    """
    cnt = mask.sum(axis=1).astype(np.float64)
    if np.any(cnt == 0):
        raise ValueError("empty region")
    mean = np.where(mask, vals, 0.0).sum(axis=1) / cnt
    d = np.where(mask, vals - mean[:, None], 0.0)
    d2 = d * d
    m2 = d2.sum(axis=1) / cnt
    m3 = (d2 * d).sum(axis=1) / cnt
    m4 = (d2 * d2).sum(axis=1) / cnt
    std = np.sqrt(m2)
    ok = std > eps
    safe = np.where(ok, m2, 1.0)
    skew = np.where(ok, m3 / safe ** 1.5, 0.0)
    kurt = np.where(ok, m4 / (safe * safe) - 3.0, 0.0)
    mn = np.where(mask, vals, np.inf).min(axis=1)
    mx = np.where(mask, vals, -np.inf).max(axis=1)
    return np.stack([mn, mx, mean, std, skew, kurt], axis=1)


def block_moments(block: np.ndarray, eps: float) -> np.ndarray:
    """Same six statistics for one dense block of values."""
    v = np.asarray(block, dtype=np.float64).ravel()
    return masked_moments(v[None], np.ones((1, v.size), dtype=bool), eps)[0]
