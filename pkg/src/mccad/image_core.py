"""Image/volume containers, file formats, preprocessing and feature maps.

Images are stored row-major as ``(height, width)`` arrays with spacing given
as ``(sx, sy)`` in mm (x runs along columns).  Volumes are ``(nz, ny, nx)``
arrays with spacing ``(sx, sy, sz)``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage as ndi

MAP_NAMES = ("original", "tophat", "gradient", "log_small", "log_large")

GAUSS_TRUNCATE = 4.0


class FormatError(ValueError):
    """Raised for malformed or unsupported image/volume files."""


@dataclass
class Image2D:
    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"image data must be a non-empty 2D array, got shape {self.data.shape}")
        sx, sy = (float(s) for s in self.spacing)
        if not (sx > 0 and sy > 0):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.spacing = (sx, sy)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def with_data(self, data) -> "Image2D":
        return Image2D(data, self.spacing)


@dataclass
class Volume3D:
    """Stack of slices; stored as float32 to keep large volumes in memory."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        sx, sy, sz = (float(s) for s in self.spacing)
        if not (sx > 0 and sy > 0 and sz > 0):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.spacing = (sx, sy, sz)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    def slice_image(self, k: int) -> Image2D:
        return Image2D(self.data[k], self.spacing[:2])


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    # magic, width, height, maxval separated by whitespace, '#' comments allowed
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise FormatError("malformed PGM header: unexpected end of file")
        if raw[pos:pos + 1] == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise FormatError("malformed PGM header: unterminated comment")
            pos = nl + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if pos >= len(raw):
        raise FormatError("malformed PGM header: missing separator before payload")
    pos += 1  # single whitespace byte ends the header
    if tokens[0] != b"P5":
        raise FormatError(f"unsupported PGM magic {tokens[0]!r}; only binary P5 is accepted")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed PGM header: non-integer field") from None
    if width < 1 or height < 1:
        raise FormatError(f"malformed PGM header: bad dimensions {width}x{height}")
    if maxval != 65535:
        raise FormatError(f"unsupported maxval {maxval}; expected 65535 (16-bit)")
    need = width * height * 2
    payload = raw[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"truncated PGM payload: expected {need} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=">u2").reshape(height, width)


def write_pgm(path, img) -> None:
    """Write a 16-bit P5 PGM.  Values are rounded and clipped to [0, 65535]."""
    data = img.data if isinstance(img, Image2D) else np.asarray(img)
    arr = np.clip(np.rint(data), 0, 65535).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_spacing_sidecar(path) -> tuple[float, float] | None:
    """Look for ``<stem>.spacing`` (or ``<file>.spacing``) next to an image."""
    base, _ = os.path.splitext(os.fspath(path))
    for cand in (base + ".spacing", os.fspath(path) + ".spacing"):
        if os.path.exists(cand):
            with open(cand) as fh:
                parts = fh.read().split()
            if len(parts) != 2:
                raise FormatError(f"spacing sidecar {cand} must contain 'sx sy'")
            return float(parts[0]), float(parts[1])
    return None


def write_spacing_sidecar(path, spacing) -> None:
    base, _ = os.path.splitext(os.fspath(path))
    with open(base + ".spacing", "w") as fh:
        fh.write(f"{spacing[0]!r} {spacing[1]!r}\n")


def _read_mcvol(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("malformed MCVOL1 header: no newline")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if not parts or parts[0] != "MCVOL1":
        raise FormatError(f"bad magic {parts[0] if parts else ''!r}; expected MCVOL1")
    if len(parts) != 7:
        raise FormatError("malformed MCVOL1 header: expected 'MCVOL1 nx ny nz sx sy sz'")
    try:
        nx, ny, nz = (int(p) for p in parts[1:4])
        spacing = tuple(float(p) for p in parts[4:7])
    except ValueError:
        raise FormatError("malformed MCVOL1 header: non-numeric field") from None
    if min(nx, ny, nz) < 1:
        raise FormatError(f"malformed MCVOL1 header: bad dimensions {nx}x{ny}x{nz}")
    if not all(s > 0 and math.isfinite(s) for s in spacing):
        raise FormatError(f"non-positive spacing {spacing}")
    payload = raw[nl + 1:]
    need = nx * ny * nz * 4
    if len(payload) != need:
        raise FormatError(
            f"payload length mismatch: expected {nx * ny * nz} floats, got {len(payload) / 4:g}")
    data = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
    return data, spacing


def write_volume(path, vol) -> None:
    """Write an MCVOL1 file; accepts Volume3D or Image2D (stored with nz = 1)."""
    if isinstance(vol, Image2D):
        data = vol.data[None]
        spacing = (*vol.spacing, 1.0)
    else:
        data, spacing = vol.data, vol.spacing
    nz, ny, nx = data.shape
    header = f"MCVOL1 {nx} {ny} {nz} {spacing[0]!r} {spacing[1]!r} {spacing[2]!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _is_mcvol(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(6) == b"MCVOL1"


def load_image(path, spacing: Sequence[float] | None = None) -> Image2D:
    """Load a 2D image from a 16-bit P5 PGM or an MCVOL1 file with nz = 1.

    For PGM the spacing comes from ``spacing`` or a ``.spacing`` sidecar.
    """
    if _is_mcvol(path):
        data, vsp = _read_mcvol(path)
        if data.shape[0] != 1:
            raise FormatError(f"expected a single-slice MCVOL1 file, got nz={data.shape[0]}")
        sp = tuple(spacing) if spacing is not None else vsp[:2]
        return Image2D(data[0].astype(np.float64), sp)
    data = _read_pgm(path)
    if spacing is None:
        spacing = read_spacing_sidecar(path)
        if spacing is None:
            raise FormatError(f"no spacing given for {path} and no .spacing sidecar found")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 2 or not all(s > 0 for s in spacing):
        raise FormatError(f"non-positive spacing {spacing}")
    return Image2D(data.astype(np.float64), spacing)


def load_volume(path) -> Volume3D:
    data, spacing = _read_mcvol(path)
    return Volume3D(data.copy(), spacing)


def load_any(path, spacing=None):
    """Image2D for PGM / single-slice MCVOL1, Volume3D for nz > 1."""
    if _is_mcvol(path):
        data, vsp = _read_mcvol(path)
        if data.shape[0] > 1:
            return Volume3D(data.copy(), vsp)
        return Image2D(data[0].astype(np.float64), tuple(spacing) if spacing else vsp[:2])
    return load_image(path, spacing)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def log_negate(img: Image2D) -> Image2D:
    """Pixel-wise ``-ln(I + 1)``; the +1 offset admits zero-valued counts."""
    data = img.data
    if not np.all(np.isfinite(data)):
        raise ValueError("log_negate: non-finite input")
    shifted = data + 1.0
    if np.any(shifted <= 0):
        raise ValueError("log_negate: input must be > -1 everywhere")
    return img.with_data(-np.log(shifted))


def subtract_local_mean(img: Image2D, radius: float) -> Image2D:
    """Remove a box-filtered local mean (edge-clamped windows)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    sx, sy = img.spacing
    hx = int(math.floor(radius / sx + 1e-9))
    hy = int(math.floor(radius / sy + 1e-9))
    if hx < 1 or hy < 1:
        raise ValueError(f"radius {radius} mm is smaller than one pixel")
    mean = ndi.uniform_filter(img.data, size=(2 * hy + 1, 2 * hx + 1), mode="nearest")
    return img.with_data(img.data - mean)


# ---------------------------------------------------------------------------
# Morphology
# ---------------------------------------------------------------------------

def disk_rows(radius: float, spacing: Sequence[float]) -> list[tuple[int, int]]:
    """Row decomposition of the flat disk: ``(dy, half_width)`` pairs.

    A pixel offset (dx, dy) belongs to the disk when its physical distance
    from the origin is <= radius.
    """
    sx, sy = spacing
    ry = int(math.floor(radius / sy + 1e-9))
    rows = []
    for dy in range(-ry, ry + 1):
        rem = radius * radius - (dy * sy) ** 2
        if rem < -1e-12:
            continue
        hw = int(math.floor(math.sqrt(max(rem, 0.0)) / sx + 1e-9))
        rows.append((dy, hw))
    return rows


def disk_footprint(radius: float, spacing: Sequence[float]) -> np.ndarray:
    rows = disk_rows(radius, spacing)
    ry = max(abs(dy) for dy, _ in rows)
    rx = max(hw for _, hw in rows)
    fp = np.zeros((2 * ry + 1, 2 * rx + 1), dtype=bool)
    for dy, hw in rows:
        fp[dy + ry, rx - hw:rx + hw + 1] = True
    return fp


def _flat_disk_filter(data: np.ndarray, rows, op) -> np.ndarray:
    # min/max over the disk = reduction over per-row 1D windows shifted by dy.
    # Out-of-image pixels are ignored; 'nearest' mode is equivalent for min/max
    # along x, and rows shifted off the image are already dominated by wider rows.
    if op == "min":
        filt1d, reduce_ = ndi.minimum_filter1d, np.minimum
        out = np.full(data.shape, np.inf)
    else:
        filt1d, reduce_ = ndi.maximum_filter1d, np.maximum
        out = np.full(data.shape, -np.inf)
    by_width: dict[int, list[int]] = {}
    for dy, hw in rows:
        by_width.setdefault(hw, []).append(dy)
    h = data.shape[0]
    for hw, dys in by_width.items():
        line = filt1d(data, 2 * hw + 1, axis=1, mode="nearest") if hw > 0 else data
        for dy in dys:
            if abs(dy) >= h:
                continue
            if dy == 0:
                reduce_(out, line, out=out)
            elif dy > 0:
                reduce_(out[:-dy], line[dy:], out=out[:-dy])
            else:
                reduce_(out[-dy:], line[:dy], out=out[-dy:])
    return out


def grey_erosion_disk(data: np.ndarray, radius: float, spacing) -> np.ndarray:
    return _flat_disk_filter(np.asarray(data, dtype=np.float64), disk_rows(radius, spacing), "min")


def grey_dilation_disk(data: np.ndarray, radius: float, spacing) -> np.ndarray:
    return _flat_disk_filter(np.asarray(data, dtype=np.float64), disk_rows(radius, spacing), "max")


def white_tophat(img: Image2D, radius: float) -> Image2D:
    """``I - opening(I, disk)`` with a flat disk of the given radius in mm."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    rows = disk_rows(radius, img.spacing)
    if not rows:
        raise ValueError(f"structuring element of radius {radius} mm is empty")
    eroded = _flat_disk_filter(img.data, rows, "min")
    opened = _flat_disk_filter(eroded, rows, "max")
    out = img.data - opened
    # opening <= input holds exactly for min/max; clamp guards -0.0
    np.maximum(out, 0.0, out=out)
    return img.with_data(out)


# ---------------------------------------------------------------------------
# Gaussian derivative maps
# ---------------------------------------------------------------------------

def sigma_pixels(sigma: float, spacing: Sequence[float]) -> tuple[float, float]:
    """Gaussian sigma in (row, col) pixel units for a 2D spacing (sx, sy)."""
    sx, sy = spacing
    return sigma / sy, sigma / sx


def gaussian_smooth(data: np.ndarray, sigma: float, spacing) -> np.ndarray:
    return ndi.gaussian_filter(np.asarray(data, dtype=np.float64), sigma_pixels(sigma, spacing),
                               mode="reflect", truncate=GAUSS_TRUNCATE)


def gradient_magnitude(img: Image2D, sigma: float) -> Image2D:
    """Gaussian-smoothed gradient magnitude (central differences, per mm)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = img.data - img.data.min() if img.data.size else img.data
    sm = gaussian_smooth(d, sigma, img.spacing)
    sx, sy = img.spacing
    if sm.shape[0] > 1:
        gy = np.gradient(sm, sy, axis=0)
    else:
        gy = np.zeros_like(sm)
    if sm.shape[1] > 1:
        gx = np.gradient(sm, sx, axis=1)
    else:
        gx = np.zeros_like(sm)
    return img.with_data(np.hypot(gx, gy))


def _gauss_kernel(sigma_px: float, order: int) -> np.ndarray:
    """Sampled Gaussian derivative kernel for ``correlate1d``.

    Moments are fixed exactly: order 0 sums to 1; order 1 and 2 sum to 0 and
    return 1 on ``x`` and ``x^2 / 2``, so constants give exactly zero.
    """
    r = max(1, int(GAUSS_TRUNCATE * sigma_px + 0.5))
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma_px) ** 2)
    g /= g.sum()
    if order == 0:
        return g
    if order == 1:
        k = x * g
        return k / np.dot(k, x)
    k = (x * x - sigma_px * sigma_px) * g
    k -= g * k.sum()
    return 2.0 * k / np.dot(k, x * x)


def second_derivatives(data: np.ndarray, sigma: float, spacing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian second derivatives (Ixx, Ixy, Iyy) in mm^-2, not scale-normalized.

    The separable passes share the x-direction intermediates.
    """
    sx, sy = spacing
    sr, sc = sigma_pixels(sigma, spacing)
    data = np.asarray(data, dtype=np.float64)
    # derivatives ignore offsets; removing one makes constant input exactly 0
    data = data - data.min() if data.size else data

    def f(a, s, axis, order):
        return ndi.correlate1d(a, _gauss_kernel(s, order), axis=axis, mode="reflect")

    x0, x1, x2 = (f(data, sc, 1, o) for o in (0, 1, 2))
    ixx = f(x2, sr, 0, 0) / (sx * sx)
    ixy = f(x1, sr, 0, 1) / (sx * sy)
    iyy = f(x0, sr, 0, 2) / (sy * sy)
    return ixx, ixy, iyy


def laplacian_of_gaussian(img: Image2D, sigma: float) -> Image2D:
    """Scale-normalized LoG, ``sigma^2 (Ixx + Iyy)``; bright blobs go negative."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ixx, _, iyy = second_derivatives(img.data, sigma, img.spacing)
    return img.with_data(sigma * sigma * (ixx + iyy))


@dataclass(frozen=True)
class MapParams:
    tophat_radius_mm: float = 1.0
    log_sigmas_mm: tuple[float, float] = (0.15, 0.35)
    # unvalidated against the original system
    gradient_sigma_mm: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "log_sigmas_mm", tuple(float(s) for s in self.log_sigmas_mm))
        if self.tophat_radius_mm <= 0 or self.gradient_sigma_mm <= 0:
            raise ValueError("map radii/sigmas must be positive")
        if len(self.log_sigmas_mm) != 2 or min(self.log_sigmas_mm) <= 0:
            raise ValueError("log_sigmas_mm must be two positive values")


@dataclass
class FeatureMapSet:
    original: Image2D
    tophat: Image2D
    gradient: Image2D
    log_small: Image2D
    log_large: Image2D
    params: MapParams = field(default_factory=MapParams)

    def maps(self) -> list[Image2D]:
        return [getattr(self, n) for n in MAP_NAMES]

    @property
    def spacing(self):
        return self.original.spacing


def compute_feature_maps(img: Image2D, cfg: MapParams | None = None) -> FeatureMapSet:
    cfg = cfg or MapParams()
    return FeatureMapSet(
        original=img,
        tophat=white_tophat(img, cfg.tophat_radius_mm),
        gradient=gradient_magnitude(img, cfg.gradient_sigma_mm),
        log_small=laplacian_of_gaussian(img, cfg.log_sigmas_mm[0]),
        log_large=laplacian_of_gaussian(img, cfg.log_sigmas_mm[1]),
        params=cfg,
    )


@dataclass
class MapStack:
    """Feature maps for a whole case as ``(nz, ny, nx)`` arrays.

    A 2D image is a stack with ``nz == 1``; ``spacing`` is ``(sx, sy, sz)``.
    """

    arrays: dict[str, np.ndarray]
    spacing: tuple[float, float, float]
    is_volume: bool = False

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.arrays["original"].shape

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @classmethod
    def from_maps(cls, maps: FeatureMapSet) -> "MapStack":
        sx, sy = maps.spacing
        return cls({n: getattr(maps, n).data[None] for n in MAP_NAMES}, (sx, sy, 1.0), False)

    @classmethod
    def from_slices(cls, slices: Sequence[FeatureMapSet], sz: float, dtype=np.float32) -> "MapStack":
        sx, sy = slices[0].spacing
        arrays = {}
        for n in MAP_NAMES:
            arr = np.empty((len(slices),) + slices[0].original.data.shape, dtype=dtype)
            for k, m in enumerate(slices):
                arr[k] = getattr(m, n).data
            arrays[n] = arr
        return cls(arrays, (sx, sy, float(sz)), True)

    @classmethod
    def empty(cls, shape, spacing, dtype=np.float32) -> "MapStack":
        """Uninitialized volume stack, to be filled with ``set_slice``."""
        return cls({n: np.empty(tuple(shape), dtype=dtype) for n in MAP_NAMES},
                   tuple(float(s) for s in spacing), True)

    def set_slice(self, k: int, maps: FeatureMapSet) -> None:
        for n in MAP_NAMES:
            self.arrays[n][k] = getattr(maps, n).data
