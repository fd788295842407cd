"""Bright-blob candidate generation by multiscale Hessian objectness.

Candidates are strict local maxima of the scale-maximized objectness response
computed on the white top-hat map, described as rotated ellipses from the
Hessian eigen-decomposition at the winning scale.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .image_core import (
    GAUSS_TRUNCATE, FeatureMapSet, Image2D, MapParams, Volume3D, compute_feature_maps,
    second_derivatives, sigma_pixels,
)

DEFAULT_SIGMAS = tuple(round(s, 10) for s in np.linspace(0.1, 0.6, 6))

CANDIDATE_CSV_HEADER = ["x_mm", "y_mm", "z_mm", "slice", "scale_mm", "lambda1", "lambda2",
                        "angle_rad", "response", "prob"]


@dataclass(frozen=True)
class ObjectnessParams:
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    alpha: float = 0.5
    # None: half the 99th percentile of the per-pixel max |lambda2|, per image
    gamma: float | None = None
    gamma_fraction: float = 0.5
    gamma_percentile: float = 99.0
    max_candidates: int = 2000
    max_candidates_3d: int | None = None
    min_response: float = 0.0
    axis_cap_mm: float = 5.0

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sig)
        if not sig or any(s <= 0 for s in sig) or list(sig) != sorted(sig):
            raise ValueError("sigmas must be positive and sorted ascending")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.max_candidates < 1:
            raise ValueError("max_candidates must be >= 1")

    def cap_3d(self, nz: int) -> int:
        if self.max_candidates_3d is not None:
            return int(self.max_candidates_3d)
        return min(self.max_candidates * nz, 20000)


@dataclass(slots=True)
class Candidate:
    x: float
    y: float
    z: float
    row: int
    col: int
    slice_index: int
    lambda1: float
    lambda2: float
    angle: float
    scale: float
    response: float
    prob: float = 0.0

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    def semi_axes(self, cap: float = 5.0) -> tuple[float, float]:
        """(major along ``angle``, minor) in mm."""
        l1, l2 = abs(self.lambda1), abs(self.lambda2)
        major = self.scale * math.sqrt(l2 / l1) if l1 > 0 else math.inf
        return min(major, cap), min(self.scale, cap)


# ---------------------------------------------------------------------------
# Hessian eigen-analysis
# ---------------------------------------------------------------------------

def eig_sym2(a, b, c):
    """Eigen-decomposition of [[a, b], [b, c]] ordered by magnitude.

    Returns ``(lambda1, lambda2, angle)`` with ``|lambda1| <= |lambda2|`` and
    ``angle`` the direction of lambda1's eigenvector in (-pi/2, pi/2].
    """
    a, b, c = np.asarray(a, float), np.asarray(b, float), np.asarray(c, float)
    half_tr = 0.5 * (a + c)
    d = np.hypot(0.5 * (a - c), b)
    hi = half_tr + d
    lo = half_tr - d
    theta_hi = 0.5 * np.arctan2(2.0 * b, a - c)
    first_is_hi = np.abs(hi) <= np.abs(lo)
    l1 = np.where(first_is_hi, hi, lo)
    l2 = np.where(first_is_hi, lo, hi)
    ang = np.where(first_is_hi, theta_hi, theta_hi + 0.5 * np.pi)
    ang = np.where(ang > 0.5 * np.pi, ang - np.pi, ang)
    ang = np.where(ang <= -0.5 * np.pi, ang + np.pi, ang)
    return l1, l2, ang


def hessian_eig_maps(data: np.ndarray, sigma: float, spacing):
    """Per-pixel scale-normalized (sigma^2) Hessian eigen-data."""
    ixx, ixy, iyy = second_derivatives(data, sigma, spacing)
    s2 = sigma * sigma
    return eig_sym2(s2 * ixx, s2 * ixy, s2 * iyy)


def kernel_radius(sigma: float, spacing) -> tuple[int, int]:
    sr, sc = sigma_pixels(sigma, spacing)
    return int(GAUSS_TRUNCATE * sr + 0.5), int(GAUSS_TRUNCATE * sc + 0.5)


def hessian_eigs(img: Image2D, sigma: float, location: tuple[int, int]):
    """Scale-normalized Hessian eigenvalues at one interior pixel ``(row, col)``."""
    r, c = location
    kr, kc = kernel_radius(sigma, img.spacing)
    h, w = img.data.shape
    if r < kr or c < kc or r >= h - kr or c >= w - kc:
        raise ValueError(f"location {location} is within the kernel support of the border")
    patch = img.data[r - kr:r + kr + 1, c - kc:c + kc + 1]
    l1, l2, ang = hessian_eig_maps(patch, sigma, img.spacing)
    return float(l1[kr, kc]), float(l2[kr, kc]), float(ang[kr, kc])


def objectness_response(lambda1, lambda2, params: ObjectnessParams | None = None, *,
                        alpha: float | None = None, gamma: float | None = None):
    """Blob objectness; zero unless both eigenvalues are negative."""
    if params is not None:
        alpha = params.alpha if alpha is None else alpha
        gamma = params.gamma if gamma is None else gamma
    if alpha is None or gamma is None:
        raise ValueError("alpha and gamma are required")
    l1 = np.asarray(lambda1, dtype=np.float64)
    l2 = np.asarray(lambda2, dtype=np.float64)
    gate = (l1 < 0) & (l2 < 0)
    ratio = np.divide(l1, l2, out=np.zeros(np.broadcast(l1, l2).shape), where=gate)
    s2 = l1 * l1 + l2 * l2
    g2 = max(gamma * gamma, np.finfo(np.float64).tiny)
    r = np.abs(l2) * (1.0 - np.exp(-ratio * ratio / (2.0 * alpha * alpha))) \
        * (1.0 - np.exp(-s2 / (2.0 * g2)))
    r = np.where(gate, r, 0.0)
    return float(r) if r.ndim == 0 else r


@dataclass
class MultiscaleResult:
    response: np.ndarray
    scale_index: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    angle: np.ndarray
    gamma: float
    sigmas: tuple[float, ...]
    per_scale: list | None = None

    @property
    def scale(self) -> np.ndarray:
        return np.asarray(self.sigmas)[self.scale_index]


def multiscale_response(img: Image2D, params: ObjectnessParams | None = None,
                        keep_per_scale: bool = False) -> MultiscaleResult:
    """Maximum objectness across ``params.sigmas``; ties go to the smaller sigma."""
    params = params or ObjectnessParams()
    gamma = params.gamma
    if gamma is None:
        # first pass for gamma only; eigen-maps are recomputed below rather
        # than held for every scale at once (memory on large slices)
        absmax = None
        for s in params.sigmas:
            a2 = np.abs(hessian_eig_maps(img.data, s, img.spacing)[1])
            absmax = a2 if absmax is None else np.maximum(absmax, a2, out=absmax)
        gamma = params.gamma_fraction * float(np.percentile(absmax, params.gamma_percentile))
        del absmax, a2
        gamma = max(gamma, 1e-300)
    best = None
    per_scale = [] if keep_per_scale else None
    for i, s in enumerate(params.sigmas):
        l1, l2, ang = hessian_eig_maps(img.data, s, img.spacing)
        r = objectness_response(l1, l2, alpha=params.alpha, gamma=gamma)
        if keep_per_scale:
            per_scale.append(r)
        if best is None:
            best = r.copy()
            idx = np.zeros(r.shape, dtype=np.int8)
            bl1, bl2, bang = l1.copy(), l2.copy(), ang.copy()
            continue
        upd = r > best
        best[upd] = r[upd]
        idx[upd] = i
        bl1[upd] = l1[upd]
        bl2[upd] = l2[upd]
        bang[upd] = ang[upd]
    return MultiscaleResult(best, idx, bl1, bl2, bang, gamma, params.sigmas, per_scale)


# ---------------------------------------------------------------------------
# Local maxima and candidate lists
# ---------------------------------------------------------------------------

def local_maxima(resp: np.ndarray) -> np.ndarray:
    """Strict 8-neighborhood maxima; equal neighbors resolve to the smallest (y, x)."""
    h, w = resp.shape
    pad = np.full((h + 2, w + 2), -np.inf)
    pad[1:-1, 1:-1] = resp
    keep = np.ones(resp.shape, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            if dy > 0 or (dy == 0 and dx > 0):
                keep &= resp >= nb
            else:
                keep &= resp > nb
    return keep


def _peaks_to_candidates(ms: MultiscaleResult, spacing, params: ObjectnessParams,
                         slice_index: int = 0, sz: float = 1.0) -> list[Candidate]:
    resp = ms.response
    peaks = local_maxima(resp) & (resp > 0) & (resp >= params.min_response)
    rows, cols = np.nonzero(peaks)
    vals = resp[rows, cols]
    order = np.lexsort((cols, rows, -vals))[:params.max_candidates]
    sx, sy = spacing
    sig = np.asarray(ms.sigmas)
    out = []
    for i in order:
        r, c = int(rows[i]), int(cols[i])
        out.append(Candidate(
            x=c * sx, y=r * sy, z=slice_index * sz, row=r, col=c, slice_index=slice_index,
            lambda1=float(ms.lambda1[r, c]), lambda2=float(ms.lambda2[r, c]),
            angle=float(ms.angle[r, c]), scale=float(sig[ms.scale_index[r, c]]),
            response=float(vals[i])))
    return out


def extract_candidates(maps: FeatureMapSet, params: ObjectnessParams | None = None) -> list[Candidate]:
    """Top-ranked objectness maxima on the top-hat map, sorted (response desc, y, x)."""
    params = params or ObjectnessParams()
    ms = multiscale_response(maps.tophat, params)
    return _peaks_to_candidates(ms, maps.spacing, params)


def sort_candidates(cands: list[Candidate]) -> list[Candidate]:
    return sorted(cands, key=lambda c: (-c.response, c.slice_index, c.row, c.col))


def slice_maps_and_candidates(img: Image2D, map_params: MapParams, params: ObjectnessParams,
                              slice_index: int = 0, sz: float = 1.0):
    maps = compute_feature_maps(img, map_params)
    ms = multiscale_response(maps.tophat, params)
    return maps, _peaks_to_candidates(ms, img.spacing, params, slice_index, sz)


def extract_candidates_3d(vol: Volume3D, params: ObjectnessParams | None = None,
                          map_params: MapParams | None = None, jobs: int = 1) -> list[Candidate]:
    """Slice-by-slice extraction; no merging across slices."""
    params = params or ObjectnessParams()
    map_params = map_params or MapParams()
    sz = vol.spacing[2]

    def work(k):
        return slice_maps_and_candidates(vol.slice_image(k), map_params, params, k, sz)[1]

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            per_slice = list(ex.map(work, range(vol.nz)))
    else:
        per_slice = [work(k) for k in range(vol.nz)]
    allc = sort_candidates([c for cs in per_slice for c in cs])
    return allc[:params.cap_3d(vol.nz)]


def write_candidates_csv(path, cands: Sequence[Candidate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CANDIDATE_CSV_HEADER)
        for c in cands:
            w.writerow([repr(c.x), repr(c.y), repr(c.z), c.slice_index, repr(c.scale),
                        repr(c.lambda1), repr(c.lambda2), repr(c.angle), repr(c.response),
                        repr(c.prob)])
