"""Synthetic mammography-like phantoms with machine-readable truth.

Background is a smooth low-frequency field plus correlated Gaussian noise;
microcalcifications are isotropic Gaussian blobs.  Acquisition changes
(offset, contrast scale, extra blur, a smooth gain on local contrast) are
applied after the anatomy is drawn, from separate random streams, so a
shifted phantom shares its geometry with the unshifted one of the same seed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage as ndi

from .geometry import convex_hull, distance_to_hull
from .image_core import Image2D, Volume3D
from .truth import TruthGroup, TruthMember

MAX_GROUP_DISK_MM = 10.0


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 512
    height: int = 512
    spacing_mm: float = 0.1
    # nz == 1 gives a 2D image
    nz: int = 1
    slice_spacing_mm: float = 1.0
    base: float = 1000.0
    noise_amplitude: float = 8.0
    noise_corr_mm: float = 0.2
    field_amplitude: float = 60.0
    field_corr_mm: float = 4.0
    n_groups: int = 1
    members: tuple[int, int] = (5, 12)
    disk_radius_mm: tuple[float, float] = (3.0, 6.0)
    mc_radius_mm: tuple[float, float] = (0.2, 0.5)
    contrast: tuple[float, float] = (40.0, 90.0)
    min_member_gap_mm: float = 0.6
    n_distractors: int = 4
    distractor_clearance_mm: float = 15.0
    # volumes: members span +-depth_spread slices around the group's slice;
    # each is also drawn in the next slice with this probability and gain
    depth_spread: int = 1
    second_slice_prob: float = 0.5
    second_slice_gain: float = 0.6
    slice_blur_mm: float = 0.0
    # acquisition (distribution shift) knobs
    brightness_offset: float = 0.0
    contrast_scale: float = 1.0
    extra_blur_mm: float = 0.0
    gain_log_std: float = 0.0
    gain_corr_mm: float = 10.0
    quantize: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("members", "disk_radius_mm", "mc_radius_mm", "contrast"):
            v = tuple(getattr(self, name))
            object.__setattr__(self, name, v)
            if len(v) != 2 or v[0] <= 0 or v[1] < v[0]:
                raise ValueError(f"{name} must be a positive (lo, hi) range")
        if self.width < 8 or self.height < 8 or self.nz < 1:
            raise ValueError("image too small")
        if self.spacing_mm <= 0 or self.slice_spacing_mm <= 0:
            raise ValueError("spacing must be positive")
        if self.members[0] < 3 or self.members[1] > 15:
            raise ValueError("groups need 3 to 15 members")
        if self.disk_radius_mm[1] > MAX_GROUP_DISK_MM:
            raise ValueError(f"group disk radius must be <= {MAX_GROUP_DISK_MM} mm")
        if self.n_groups < 0 or self.n_distractors < 0:
            raise ValueError("counts must be non-negative")
        if min(self.noise_amplitude, self.field_amplitude, self.gain_log_std, self.extra_blur_mm,
               self.slice_blur_mm) < 0 or self.contrast_scale <= 0:
            raise ValueError("amplitudes, blurs and scales must be non-negative")
        if self.noise_corr_mm <= 0 or self.field_corr_mm <= 0 or self.gain_corr_mm <= 0:
            raise ValueError("correlation lengths must be positive")

    @property
    def is_volume(self) -> bool:
        return self.nz > 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phantom keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class _Blob:
    x: float
    y: float
    k: int
    sigma: float
    amp: float


def _smooth_noise(rng, shape, corr_mm: float, spacing: float) -> np.ndarray:
    """Zero-mean, unit-std Gaussian random field with correlation length ``corr_mm``."""
    f = ndi.gaussian_filter(rng.standard_normal(shape), corr_mm / spacing, mode="wrap")
    f -= f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def _place_layout(spec: PhantomSpec, rng):
    w_mm = (spec.width - 1) * spec.spacing_mm
    h_mm = (spec.height - 1) * spec.spacing_mm
    edge = 1.5
    groups, blobs = [], []
    for _ in range(spec.n_groups):
        for _try in range(200):
            R = rng.uniform(*spec.disk_radius_mm)
            if 2 * (R + edge) > min(w_mm, h_mm):
                continue
            cx = rng.uniform(R + edge, w_mm - R - edge)
            cy = rng.uniform(R + edge, h_mm - R - edge)
            if all(math.hypot(cx - g[0], cy - g[1]) >= R + g[2] + 5.0 for g in groups):
                break
        else:
            return None
        k0 = int(rng.integers(spec.depth_spread, spec.nz - spec.depth_spread)) \
            if spec.nz > 2 * spec.depth_spread else spec.nz // 2
        n = int(rng.integers(spec.members[0], spec.members[1] + 1))
        pts = []
        for _try in range(400 * n):
            if len(pts) == n:
                break
            rr = R * math.sqrt(rng.uniform())
            th = rng.uniform(0, 2 * math.pi)
            p = (cx + rr * math.cos(th), cy + rr * math.sin(th))
            if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= spec.min_member_gap_mm for q in pts):
                pts.append(p)
        if len(pts) < n:
            return None
        members = []
        for p in pts:
            r = rng.uniform(*spec.mc_radius_mm)
            amp = rng.uniform(*spec.contrast)
            k = k0
            if spec.is_volume:
                k = int(np.clip(k0 + rng.integers(-spec.depth_spread, spec.depth_spread + 1),
                                0, spec.nz - 1))
                second = rng.uniform() < spec.second_slice_prob
                if second and k + 1 < spec.nz:
                    blobs.append(_Blob(p[0], p[1], k + 1, r / 2, amp * spec.second_slice_gain))
            blobs.append(_Blob(p[0], p[1], k, r / 2, amp))
            members.append(TruthMember(p[0], p[1], k * spec.slice_spacing_mm if spec.is_volume
                                       else 0.0, r))
        groups.append((cx, cy, R, members))
    hulls = [convex_hull([(m.x, m.y) for m in g[3]]) for g in groups]
    placed = []
    for _ in range(spec.n_distractors):
        for _try in range(500):
            p = (rng.uniform(edge, w_mm - edge), rng.uniform(edge, h_mm - edge))
            if all(distance_to_hull(p, h) >= spec.distractor_clearance_mm for h in hulls) and \
                    all(math.hypot(p[0] - q[0], p[1] - q[1]) >= 3.0 for q in placed):
                break
        else:
            return None
        placed.append(p)
        k = int(rng.integers(0, spec.nz))
        blobs.append(_Blob(p[0], p[1], k, rng.uniform(*spec.mc_radius_mm) / 2,
                           rng.uniform(*spec.contrast)))
    return [TruthGroup(g[3]) for g in groups], blobs


def _draw_blobs(img: np.ndarray, blobs, spacing: float) -> None:
    h, w = img.shape
    for b in blobs:
        rad = 4.0 * b.sigma
        c0 = max(0, int(math.floor((b.x - rad) / spacing)))
        c1 = min(w - 1, int(math.ceil((b.x + rad) / spacing)))
        r0 = max(0, int(math.floor((b.y - rad) / spacing)))
        r1 = min(h - 1, int(math.ceil((b.y + rad) / spacing)))
        if c0 > c1 or r0 > r1:
            continue
        xs = np.arange(c0, c1 + 1) * spacing - b.x
        ys = np.arange(r0, r1 + 1) * spacing - b.y
        g = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * b.sigma ** 2))
        img[r0:r1 + 1, c0:c1 + 1] += b.amp * g


def synth_phantom(spec: PhantomSpec):
    """Returns ``(Image2D or Volume3D, list[TruthGroup])``; deterministic per ``spec.seed``."""
    ss = np.random.SeedSequence(spec.seed)
    geo_ss, field_ss, noise_ss, gain_ss = ss.spawn(4)
    geo = np.random.default_rng(geo_ss)
    layout = None
    for _ in range(50):
        layout = _place_layout(spec, geo)
        if layout is not None:
            break
    if layout is None:
        raise ValueError("infeasible phantom placement after bounded retries")
    truths, blobs = layout
    shape = (spec.height, spec.width)
    s = spec.spacing_mm
    field = spec.field_amplitude * _smooth_noise(np.random.default_rng(field_ss), shape,
                                                 spec.field_corr_mm, s)
    gain = None
    if spec.gain_log_std > 0:
        gain = np.exp(spec.gain_log_std * _smooth_noise(np.random.default_rng(gain_ss), shape,
                                                         spec.gain_corr_mm, s))
    noise_rng = np.random.default_rng(noise_ss)
    blur = math.hypot(spec.slice_blur_mm if spec.is_volume else 0.0, spec.extra_blur_mm)
    out = np.empty((spec.nz,) + shape)
    for k in range(spec.nz):
        sl = field + spec.noise_amplitude * _smooth_noise(noise_rng, shape, spec.noise_corr_mm, s)
        _draw_blobs(sl, [b for b in blobs if b.k == k], s)
        if blur > 0:
            sl = ndi.gaussian_filter(sl, blur / s, mode="reflect")
        if gain is not None:
            sl = sl * gain
        out[k] = spec.brightness_offset + spec.contrast_scale * (spec.base + sl)
    if spec.is_volume:
        vol = Volume3D(out.astype(np.float32), (s, s, spec.slice_spacing_mm))
        return vol, truths
    img = out[0]
    if spec.quantize:
        img = np.clip(np.rint(img), 0, 65535)
    return Image2D(img, (s, s)), truths


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def dataset_specs(base: PhantomSpec, n: int, seed: int, positive_every: int = 2) -> list[PhantomSpec]:
    """``n`` case specs; every ``positive_every``-th case (from 0) carries the groups."""
    out = []
    for i in range(n):
        groups = base.n_groups if positive_every > 0 and i % positive_every == 0 else 0
        out.append(replace(base, n_groups=groups, seed=case_seed(seed, i)))
    return out
