"""Layer feature sets: individual (Sa), first/second neighborhood (Sn1, Sn2), cluster (Sc).

Every intensity statistic is taken on scope-normalized values, so all layer
vectors are invariant to a global affine change ``a*I + b`` (a > 0).  The
shape descriptors use eigenvalues divided by the top-hat scope std, which is
the Hessian of the normalized top-hat map.

Two code paths exist: single-candidate functions built directly on
``scope_norm`` (``individual_layer`` and friends), and ``FeatureContext``, a
batched engine that caches per-candidate region moments and is what the
cascade uses.  Tests hold them equal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace as dataclasses_replace

import numpy as np
from scipy.spatial import cKDTree

from .candidates import Candidate
from .geometry import convex_hull, covariance_eigenvalues, polygon_area
from .image_core import MAP_NAMES, FeatureMapSet, MapStack
from .scope_norm import (
    Scope, block_moments, box_bounds, default_epsilon, ellipse_halfwidths, masked_moments,
    scope_pixels,
)

MOMENT_NAMES = ("min", "max", "skew", "kurt")
SHAPE_NAMES = ("lambda1", "lambda2", "ratio", "angle", "scale")
APPEARANCE_NAMES = tuple(f"{m}_{s}" for m in MAP_NAMES for s in MOMENT_NAMES) + SHAPE_NAMES
SA_NAMES = tuple("sa_" + n for n in APPEARANCE_NAMES)
SN1_NAMES = tuple("sn1_" + n for n in APPEARANCE_NAMES)
SN2_NAMES = tuple("sn2_mdiff_" + n for n in APPEARANCE_NAMES) + \
    tuple("sn2_rms_" + n for n in APPEARANCE_NAMES)
SC_SPATIAL_NAMES = ("sc_eig_major", "sc_eig_minor", "sc_hull_area", "sc_density", "sc_count",
                    "sc_d_mean", "sc_d_std")
SC_NAMES = SC_SPATIAL_NAMES + tuple("sc_mean_" + n for n in APPEARANCE_NAMES) + \
    tuple("sc_std_" + n for n in APPEARANCE_NAMES) + ("sc_max_prob",)
LAYER_NAMES = {"Sa": SA_NAMES, "Sn1": SN1_NAMES, "Sn2": SN2_NAMES, "Sc": SC_NAMES}

STAGE1_NAMES = SA_NAMES + SN1_NAMES
STAGE2_NAMES = SA_NAMES + SN1_NAMES + SN2_NAMES
STAGE3_NAMES = SC_NAMES

_N_APP = len(APPEARANCE_NAMES)
_TOPHAT = MAP_NAMES.index("tophat")
# window half-sizes (pixels) used to bucket ellipse gathers
_BUCKETS = (2, 3, 4, 5, 6, 8, 10, 12, 14, 16, 20, 24, 28, 32, 40, 48, 56, 64, 80, 96, 128, 160,
            192, 256)
_CHUNK = 2_000_000


@dataclass(frozen=True)
class FeatureParams:
    l_max: float = 10.0
    sn1_half_mm: float = 3.0
    axis_floor_px: float = 2.0
    axis_cap_mm: float = 5.0
    # "scope" or "global" (the whole-image baseline used for ablation only)
    normalization: str = "scope"

    def __post_init__(self):
        if self.normalization not in ("scope", "global"):
            raise ValueError(f"normalization must be 'scope' or 'global', got {self.normalization!r}")
        if self.l_max <= 0 or self.sn1_half_mm <= 0:
            raise ValueError("l_max and sn1_half_mm must be positive")


@dataclass
class FeatureVector:
    layer: str
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.names) != len(self.values):
            raise ValueError("names/values length mismatch")
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite value in {self.layer} features")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


@dataclass
class NeighborhoodIndex:
    """Symmetric neighbor lists over candidate positions, ``dist <= l_max`` (mm)."""

    neighbors: list[np.ndarray]
    l_max: float
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def n(self, c: int) -> int:
        return len(self.neighbors[c])


def build_neighborhood(cands, l_max: float = 10.0) -> NeighborhoodIndex:
    if l_max <= 0:
        raise ValueError("l_max must be positive")
    n = len(cands)
    if n == 0:
        return NeighborhoodIndex([], l_max)
    pts = np.array([[c.x, c.y, c.z] for c in cands], dtype=np.float64)
    pairs = cKDTree(pts).query_pairs(r=l_max, output_type="ndarray")
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))] if len(pairs) else \
        np.zeros((0, 2), dtype=np.int64)
    nb: list[list[int]] = [[] for _ in range(n)]
    for i, j in pairs:
        nb[i].append(int(j))
        nb[j].append(int(i))
    return NeighborhoodIndex([np.array(sorted(x), dtype=np.int64) for x in nb], l_max, pairs)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _as_stack(maps) -> MapStack:
    return maps if isinstance(maps, MapStack) else MapStack.from_maps(maps)


def _map_eps(stack: MapStack) -> np.ndarray:
    return np.array([default_epsilon(stack[m]) for m in MAP_NAMES])


def _global_norm(stack: MapStack) -> np.ndarray:
    out = np.empty((len(MAP_NAMES), 2))
    for i, m in enumerate(MAP_NAMES):
        a = stack[m]
        mu = float(np.mean(a, dtype=np.float64))
        var = float(np.mean((a.astype(np.float64) - mu) ** 2))
        out[i] = (mu, math.sqrt(var))
    return out


def candidate_axes(c: Candidate, spacing, params: FeatureParams) -> tuple[float, float]:
    floor = params.axis_floor_px * max(spacing[0], spacing[1])
    a, b = c.semi_axes(params.axis_cap_mm)
    return max(a, floor), max(b, floor)


def candidate_scope(c: Candidate, spacing, params: FeatureParams) -> Scope:
    return Scope.ellipse2d((c.x, c.y, c.z), candidate_axes(c, spacing, params), c.angle)


def sn1_scope(c: Candidate, params: FeatureParams) -> Scope:
    return Scope.box2d((c.x, c.y, c.z), (params.sn1_half_mm, params.sn1_half_mm))


def enclosing_box(cands, spacing, params: FeatureParams, is_volume: bool) -> Scope:
    """Axis-aligned box around the members' ellipses (and their slices)."""
    lo = np.array([np.inf, np.inf])
    hi = -lo
    zs = []
    for c in cands:
        hx, hy = ellipse_halfwidths(candidate_axes(c, spacing, params), c.angle)
        lo = np.minimum(lo, (c.x - hx, c.y - hy))
        hi = np.maximum(hi, (c.x + hx, c.y + hy))
        zs.append(c.z)
    center = (0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]))
    half = (0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1]))
    if is_volume:
        sz = spacing[2]
        z0, z1 = min(zs), max(zs)
        return Scope.box3d((*center, 0.5 * (z0 + z1)), (*half, 0.5 * (z1 - z0) + 0.5 * sz))
    return Scope.box2d((*center, zs[0]), half)


def appearance_rows(raw: np.ndarray, norm: np.ndarray, eps: np.ndarray, shape: np.ndarray) -> np.ndarray:
    """Assemble 25-feature rows.

    raw: (n, 5, 6) region moments; norm: (n, 5, 2) normalizing (mean, std);
    shape: (n, 4) of (lambda1, lambda2, angle, scale).
    """
    n = raw.shape[0]
    mu = norm[..., 0]
    sd = np.maximum(norm[..., 1], eps[None, :])
    out = np.empty((n, _N_APP))
    block = np.stack([(raw[..., 0] - mu) / sd, (raw[..., 1] - mu) / sd, raw[..., 4], raw[..., 5]],
                     axis=2)
    out[:, :4 * len(MAP_NAMES)] = block.reshape(n, -1)
    l1, l2 = shape[:, 0], shape[:, 1]
    sdt = sd[:, _TOPHAT]
    out[:, 20] = l1 / sdt
    out[:, 21] = l2 / sdt
    out[:, 22] = np.divide(l1, l2, out=np.zeros(n), where=l2 != 0)
    out[:, 23] = shape[:, 2]
    out[:, 24] = shape[:, 3]
    return out


def _shape_of(cands) -> np.ndarray:
    return np.array([[c.lambda1, c.lambda2, c.angle, c.scale] for c in cands], dtype=np.float64) \
        .reshape(-1, 4)


# ---------------------------------------------------------------------------
# Single-candidate API (direct scope path)
# ---------------------------------------------------------------------------

def _grid(stack: MapStack, name: str):
    arr = stack[name]
    if stack.is_volume:
        return (arr, stack.spacing)
    return (arr[0], stack.spacing[:2])


def _scope_raw(stack: MapStack, scope: Scope, eps: np.ndarray) -> tuple[np.ndarray, int]:
    raw = np.empty((len(MAP_NAMES), 6))
    count = 0
    for i, m in enumerate(MAP_NAMES):
        g = _grid(stack, m)
        idx = scope_pixels(scope, g)
        v = np.asarray(g[0][idx], dtype=np.float64)
        raw[i] = block_moments(v, eps[i])
        count = v.size
    return raw, count


def appearance_features(maps, cand: Candidate, scope: Scope, params: FeatureParams | None = None,
                        norm_scope: Scope | None = None) -> FeatureVector:
    """Moments of each map over ``scope`` normalized by ``norm_scope`` (default: ``scope``).

    Per map: min, max, skewness, excess kurtosis; then the five shape terms.
    """
    params = params or FeatureParams()
    stack = _as_stack(maps)
    eps = _map_eps(stack)
    raw, count = _scope_raw(stack, scope, eps)
    if count < 4:
        raise ValueError(f"scope has {count} pixels; at least 4 are needed")
    if params.normalization == "global":
        norm = _global_norm(stack)
    elif norm_scope is None:
        norm = raw[:, 2:4]
    else:
        norm = _scope_raw(stack, norm_scope, eps)[0][:, 2:4]
    row = appearance_rows(raw[None], norm[None], eps, _shape_of([cand]))[0]
    return FeatureVector("Sa", APPEARANCE_NAMES, row)


def individual_layer(maps, cand: Candidate, params: FeatureParams | None = None) -> FeatureVector:
    params = params or FeatureParams()
    stack = _as_stack(maps)
    fv = appearance_features(stack, cand, candidate_scope(cand, stack.spacing, params), params)
    return FeatureVector("Sa", SA_NAMES, fv.values)


def neighborhood1_layer(maps, cand: Candidate, params: FeatureParams | None = None) -> FeatureVector:
    params = params or FeatureParams()
    fv = appearance_features(maps, cand, sn1_scope(cand, params), params)
    return FeatureVector("Sn1", SN1_NAMES, fv.values)


def neighborhood2_layer(maps, cands, index: NeighborhoodIndex, c: int,
                        params: FeatureParams | None = None) -> FeatureVector:
    """Consistency of ``c`` against its neighbors under S_n2 normalization.

    Emits the mean difference and the root-mean-square difference of the
    25 appearance features; zeros for an isolated candidate.
    """
    params = params or FeatureParams()
    stack = _as_stack(maps)
    nbrs = list(index.neighbors[c])
    if not nbrs:
        return FeatureVector("Sn2", SN2_NAMES, np.zeros(len(SN2_NAMES)))
    members = [cands[c]] + [cands[j] for j in nbrs]
    box = enclosing_box(members, stack.spacing, params, stack.is_volume)
    rows = np.array([
        appearance_features(stack, m, candidate_scope(m, stack.spacing, params), params, box).values
        for m in members])
    fc, fn = rows[0], rows[1:]
    mdiff = fc - fn.mean(axis=0)
    rms = np.sqrt(((fc - fn) ** 2).mean(axis=0))
    return FeatureVector("Sn2", SN2_NAMES, np.concatenate([mdiff, rms]))


def spatial_features(members, pair_d) -> np.ndarray:
    """The 7 distribution features; depth is ignored."""
    xy = [(m.x, m.y) for m in members]
    ev1, ev2 = covariance_eigenvalues(xy)
    area = polygon_area(convex_hull(xy))
    count = len(members)
    density = count / max(area, 1.0)
    d = np.asarray(pair_d, dtype=np.float64)
    d_mean = float(d.mean()) if d.size else 0.0
    d_std = float(d.std()) if d.size else 0.0
    return np.array([ev1, ev2, area, density, count, d_mean, d_std])


def cluster_layer(maps, cands, group, params: FeatureParams | None = None) -> FeatureVector:
    """Group distribution features plus S_c-normalized member appearance summary."""
    params = params or FeatureParams()
    stack = _as_stack(maps)
    members = [cands[i] for i in group.member_ids]
    if len(members) < 2:
        raise ValueError("cluster features need at least 2 members")
    box = enclosing_box(members, stack.spacing, params, stack.is_volume)
    rows = np.array([
        appearance_features(stack, m, candidate_scope(m, stack.spacing, params), params, box).values
        for m in members])
    vals = np.concatenate([
        spatial_features(members, [d for _, _, d in group.pair_links]),
        rows.mean(axis=0), rows.std(axis=0), [max(m.prob for m in members)]])
    return FeatureVector("Sc", SC_NAMES, vals)


# ---------------------------------------------------------------------------
# Batched engine
# ---------------------------------------------------------------------------

def _bucket(h: int) -> int:
    for b in _BUCKETS:
        if h <= b:
            return b
    return h


class FeatureContext:
    """Per-case feature engine over a fixed candidate list.

    Region moments of every candidate ellipse and S_n1 box are computed once
    (vectorized) and reused by all layers; only the normalizing statistics
    change between layers.
    """

    def __init__(self, stack: MapStack, cands, params: FeatureParams | None = None):
        self.stack = stack
        self.cands = list(cands)
        self.params = params or FeatureParams()
        self.eps = _map_eps(stack)
        self._global = None
        self._ellipse_raw = None
        self._sn1_raw = None
        self._box_cache: dict[tuple, np.ndarray] = {}

    def subset(self, ids) -> "FeatureContext":
        ids = np.asarray(ids, dtype=np.int64)
        sub = FeatureContext.__new__(FeatureContext)
        sub.stack, sub.params, sub.eps = self.stack, self.params, self.eps
        sub.cands = [self.cands[i] for i in ids]
        sub._global = self._global
        sub._ellipse_raw = None if self._ellipse_raw is None else self._ellipse_raw[ids]
        sub._sn1_raw = None if self._sn1_raw is None else self._sn1_raw[ids]
        sub._box_cache = self._box_cache
        return sub

    def with_params(self, params: FeatureParams) -> "FeatureContext":
        """Same candidates and cached region moments under other parameters.

        Only the normalization mode may differ; geometry-changing parameters
        would invalidate the caches.
        """
        if dataclasses_replace(params, normalization=self.params.normalization) != self.params:
            raise ValueError("only the normalization mode may change")
        sub = self.subset(np.arange(len(self.cands)))
        sub.params = params
        return sub

    # -- statistics -------------------------------------------------------
    @property
    def global_norm(self) -> np.ndarray:
        if self._global is None:
            self._global = _global_norm(self.stack)
        return self._global

    def _window_moments(self, idx, hy, hx, axes=None) -> np.ndarray:
        nz, ny, nx = self.stack.shape
        sx, sy = self.stack.spacing[:2]
        idx = np.asarray(idx)
        out = np.empty((len(idx), len(MAP_NAMES), 6))
        dy = np.arange(-hy, hy + 1)
        dx = np.arange(-hx, hx + 1)
        step = max(1, _CHUNK // ((2 * hy + 1) * (2 * hx + 1)))
        for s in range(0, len(idx), step):
            part = idx[s:s + step]
            zs = np.array([self.cands[i].slice_index for i in part]) if self.stack.is_volume \
                else np.zeros(len(part), dtype=np.int64)
            rows = np.array([self.cands[i].row for i in part])
            cols = np.array([self.cands[i].col for i in part])
            rr = rows[:, None, None] + dy[None, :, None]
            cc = cols[:, None, None] + dx[None, None, :]
            mask = (rr >= 0) & (rr < ny) & (cc >= 0) & (cc < nx)
            if axes is not None:
                a, b, th = (axes[s:s + step, k][:, None, None] for k in range(3))
                ddx = (dx * sx)[None, None, :]
                ddy = (dy * sy)[None, :, None]
                cos, sin = np.cos(th), np.sin(th)
                u = ddx * cos + ddy * sin
                v = -ddx * sin + ddy * cos
                mask &= (u / a) ** 2 + (v / b) ** 2 <= 1.0 + 1e-9
            rr = np.clip(rr, 0, ny - 1)
            cc = np.clip(cc, 0, nx - 1)
            n = len(part)
            m2 = mask.reshape(n, -1)
            for mi, m in enumerate(MAP_NAMES):
                vals = self.stack[m][zs[:, None, None], rr, cc].astype(np.float64)
                out[s:s + n, mi] = masked_moments(vals.reshape(n, -1), m2, self.eps[mi])
        return out

    @property
    def ellipse_raw(self) -> np.ndarray:
        if self._ellipse_raw is None:
            n = len(self.cands)
            out = np.empty((n, len(MAP_NAMES), 6))
            sp = self.stack.spacing
            axes = np.empty((n, 3))
            buckets: dict[tuple[int, int], list[int]] = {}
            for i, c in enumerate(self.cands):
                a, b = candidate_axes(c, sp, self.params)
                axes[i] = (a, b, c.angle)
                hx, hy = ellipse_halfwidths((a, b), c.angle)
                key = (_bucket(int(math.floor(hy / sp[1] + 1e-9))),
                       _bucket(int(math.floor(hx / sp[0] + 1e-9))))
                buckets.setdefault(key, []).append(i)
            for (hy, hx), ids in sorted(buckets.items()):
                ids = np.array(ids)
                out[ids] = self._window_moments(ids, hy, hx, axes[ids])
            self._ellipse_raw = out
        return self._ellipse_raw

    @property
    def sn1_raw(self) -> np.ndarray:
        if self._sn1_raw is None:
            sx, sy = self.stack.spacing[:2]
            h = self.params.sn1_half_mm
            hx = int(math.floor(h / sx + 1e-9))
            hy = int(math.floor(h / sy + 1e-9))
            self._sn1_raw = self._window_moments(np.arange(len(self.cands)), hy, hx)
        return self._sn1_raw

    def box_norm(self, scope: Scope) -> np.ndarray:
        """(5, 2) mean/std of each map over a box scope."""
        if self.params.normalization == "global":
            return self.global_norm
        b = box_bounds(scope, self.stack.shape, self.stack.spacing, self.stack.is_volume)
        hit = self._box_cache.get(b)
        if hit is not None:
            return hit
        out = np.empty((len(MAP_NAMES), 2))
        z0, z1, y0, y1, x0, x1 = b
        for i, m in enumerate(MAP_NAMES):
            v = self.stack[m][z0:z1, y0:y1, x0:x1].astype(np.float64)
            mu = v.mean()
            out[i] = (mu, math.sqrt(np.mean((v - mu) ** 2)))
        if len(self._box_cache) > 4096:
            self._box_cache.clear()
        self._box_cache[b] = out
        return out

    # -- layers -----------------------------------------------------------
    def _own_norm(self, raw):
        if self.params.normalization == "global":
            return np.broadcast_to(self.global_norm, raw.shape[:2] + (2,))
        return raw[..., 2:4]

    def sa(self, ids=None) -> np.ndarray:
        ids = np.arange(len(self.cands)) if ids is None else np.asarray(ids, dtype=np.int64)
        raw = self.ellipse_raw[ids]
        return appearance_rows(raw, self._own_norm(raw), self.eps,
                               _shape_of([self.cands[i] for i in ids]))

    def sn1(self, ids=None) -> np.ndarray:
        ids = np.arange(len(self.cands)) if ids is None else np.asarray(ids, dtype=np.int64)
        raw = self.sn1_raw[ids]
        return appearance_rows(raw, self._own_norm(raw), self.eps,
                               _shape_of([self.cands[i] for i in ids]))

    def members_under(self, ids, scope: Scope) -> np.ndarray:
        """Appearance rows of candidates ``ids`` normalized over ``scope``."""
        ids = np.asarray(ids, dtype=np.int64)
        raw = self.ellipse_raw[ids]
        norm = np.broadcast_to(self.box_norm(scope), raw.shape[:2] + (2,))
        return appearance_rows(raw, norm, self.eps, _shape_of([self.cands[i] for i in ids]))

    def sn2(self, index: NeighborhoodIndex) -> np.ndarray:
        n = len(self.cands)
        out = np.zeros((n, len(SN2_NAMES)))
        sp, vol = self.stack.spacing, self.stack.is_volume
        for c in range(n):
            nbrs = index.neighbors[c]
            if len(nbrs) == 0:
                continue
            ids = np.concatenate([[c], nbrs])
            box = enclosing_box([self.cands[i] for i in ids], sp, self.params, vol)
            rows = self.members_under(ids, box)
            fc, fn = rows[0], rows[1:]
            out[c, :_N_APP] = fc - fn.mean(axis=0)
            out[c, _N_APP:] = np.sqrt(((fc - fn) ** 2).mean(axis=0))
        return out

    def sc(self, group) -> np.ndarray:
        ids = np.asarray(group.member_ids, dtype=np.int64)
        if len(ids) < 2:
            raise ValueError("cluster features need at least 2 members")
        members = [self.cands[i] for i in ids]
        box = enclosing_box(members, self.stack.spacing, self.params, self.stack.is_volume)
        rows = self.members_under(ids, box)
        return np.concatenate([
            spatial_features(members, [d for _, _, d in group.pair_links]),
            rows.mean(axis=0), rows.std(axis=0), [max(m.prob for m in members)]])


def write_feature_csv(path, ids, names, matrix) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *names])
        for i, row in zip(ids, matrix):
            w.writerow([i, *[repr(float(v)) for v in row]])
