import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from mccad.image_core import Image2D, Volume3D
from mccad.scope_norm import (
    Scope, block_moments, box_bounds, default_epsilon, ellipse_halfwidths, masked_moments,
    normalize_in_scope, scope_pixels, scope_statistics,
)

SP = (0.1, 0.1)


def _brute_pixels(scope, shape, spacing, is_volume):
    """Exhaustive point-in-scope test over every pixel center."""
    nz, ny, nx = shape
    sx, sy, sz = spacing
    out = []
    for k, r, c in itertools.product(range(nz), range(ny), range(nx)):
        x, y, z = c * sx, r * sy, k * sz
        if scope.kind == "ellipse2d":
            kz = round(scope.center[2] / sz) if (is_volume and len(scope.center) > 2) else 0
            if k != kz:
                continue
            dx, dy = x - scope.center[0], y - scope.center[1]
            u = dx * math.cos(scope.angle) + dy * math.sin(scope.angle)
            v = -dx * math.sin(scope.angle) + dy * math.cos(scope.angle)
            inside = (u / scope.half[0]) ** 2 + (v / scope.half[1]) ** 2 <= 1 + 1e-9
        else:
            inside = abs(x - scope.center[0]) <= scope.half[0] + 1e-9 * sx and \
                abs(y - scope.center[1]) <= scope.half[1] + 1e-9 * sy
            if scope.kind == "box3d" and is_volume:
                inside &= abs(z - scope.center[2]) <= scope.half[2] + 1e-9 * sz
            else:
                kz = round(scope.center[2] / sz) if (is_volume and len(scope.center) > 2) else 0
                inside &= k == kz
        if inside:
            out.append((k, r, c))
    return sorted(out)


def _as_triples(idx, is_volume):
    if is_volume:
        return sorted(zip(*(i.tolist() for i in idx)))
    return sorted((0, r, c) for r, c in zip(*(i.tolist() for i in idx)))


def test_box2d_49_pixels():
    img = Image2D(np.zeros((20, 20)), SP)
    idx = scope_pixels(Scope.box2d((1.0, 1.0), (0.3, 0.3)), img)
    assert len(idx[0]) == 49
    assert _as_triples(idx, False) == _brute_pixels(Scope.box2d((1.0, 1.0), (0.3, 0.3)),
                                                    (1, 20, 20), (0.1, 0.1, 1.0), False)


def test_circle_covering_grid_selects_all():
    img = Image2D(np.zeros((6, 7)), SP)
    rr, cc = scope_pixels(Scope.ellipse2d((0.3, 0.25), (5.0, 5.0)), img)
    assert rr.size == 42


def test_box3d_outside_volume():
    vol = Volume3D(np.zeros((3, 5, 5)), (0.1, 0.1, 1.0))
    with pytest.raises(ValueError, match="scope outside image"):
        scope_pixels(Scope.box3d((10.0, 10.0, 10.0), (0.2, 0.2, 0.5)), vol)
    with pytest.raises(ValueError, match="scope outside image"):
        scope_pixels(Scope.box2d((-5.0, 0.2), (0.3, 0.3)), Image2D(np.zeros((5, 5)), SP))


@settings(max_examples=60, deadline=None)
@given(cx=st.floats(-0.5, 2.5), cy=st.floats(-0.5, 2.0), a=st.floats(0.05, 1.2),
       b=st.floats(0.05, 1.2), ang=st.floats(-1.6, 1.6), kind=st.sampled_from(["ellipse2d", "box2d"]),
       sx=st.sampled_from([0.1, 0.07]), sy=st.sampled_from([0.1, 0.13]))
def test_scope_pixels_match_exhaustive_2d(cx, cy, a, b, ang, kind, sx, sy):
    shape = (1, 16, 22)
    scope = Scope.ellipse2d((cx, cy), (a, b), ang) if kind == "ellipse2d" else Scope.box2d((cx, cy), (a, b))
    ref = _brute_pixels(scope, shape, (sx, sy, 1.0), False)
    img = Image2D(np.zeros(shape[1:]), (sx, sy))
    if not ref:
        with pytest.raises(ValueError):
            scope_pixels(scope, img)
        return
    assert _as_triples(scope_pixels(scope, img), False) == ref


@settings(max_examples=40, deadline=None)
@given(cx=st.floats(0, 1.5), cy=st.floats(0, 1.5), cz=st.floats(0, 4.0), hx=st.floats(0.05, 0.8),
       hy=st.floats(0.05, 0.8), hz=st.floats(0.1, 2.5), kind=st.sampled_from(["box3d", "box2d", "ellipse2d"]))
def test_scope_pixels_match_exhaustive_3d(cx, cy, cz, hx, hy, hz, kind):
    shape, sp = (5, 12, 14), (0.1, 0.12, 1.0)
    if kind == "box3d":
        scope = Scope.box3d((cx, cy, cz), (hx, hy, hz))
    elif kind == "box2d":
        scope = Scope.box2d((cx, cy, cz), (hx, hy))
    else:
        scope = Scope.ellipse2d((cx, cy, cz), (hx, hy), 0.3)
    ref = _brute_pixels(scope, shape, sp, True)
    vol = Volume3D(np.zeros(shape), sp)
    if not ref:
        with pytest.raises(ValueError):
            scope_pixels(scope, vol)
        return
    assert _as_triples(scope_pixels(scope, vol), True) == ref


def test_scope_validation():
    with pytest.raises(ValueError):
        Scope.box2d((0, 0), (0.0, 1.0))
    with pytest.raises(ValueError):
        Scope("disk", (0, 0), (1, 1))
    with pytest.raises(ValueError):
        Scope.box3d((0, 0, 0), (1, 1))


def test_statistics_examples():
    img = Image2D(np.array([[1.0, 3.0]]), SP)
    scope = Scope.box2d((0.05, 0.0), (0.06, 0.01))
    s = scope_statistics(img, scope)
    assert (s.mean, s.std, s.count) == (2.0, 1.0, 2)
    _, v = normalize_in_scope(img, scope)
    assert v.tolist() == [-1.0, 1.0]
    flat = Image2D(np.full((4, 4), 5.0), SP)
    assert scope_statistics(flat, Scope.box2d((0.1, 0.1), (0.1, 0.1))).std == 0.0
    _, v = normalize_in_scope(flat, Scope.box2d((0.1, 0.1), (0.1, 0.1)), 1e-6)
    assert np.all(v == 0)


def test_statistics_two_pass_oracle():
    rng = np.random.default_rng(42)
    data = rng.normal(50, 7, size=(10, 10))
    s = scope_statistics(Image2D(data, SP), Scope.box2d((0.45, 0.45), (0.5, 0.5)))
    vals = data.ravel().tolist()
    mean = sum(vals) / len(vals)
    std = math.sqrt(sum((x - mean) ** 2 for x in vals) / len(vals))
    assert s.count == 100
    assert s.mean == pytest.approx(mean, abs=1e-9)
    assert s.std == pytest.approx(std, abs=1e-9)


def test_default_epsilon():
    assert default_epsilon(np.array([0.0, 2.0])) == pytest.approx(2e-6)
    assert default_epsilon(np.zeros(3)) == 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 20), a=st.floats(0.01, 100), b=st.floats(-1000, 1000),
       cx=st.floats(0.3, 2.0), cy=st.floats(0.3, 2.0), h=st.floats(0.15, 1.0),
       ellipse=st.booleans())
def test_normalize_affine_invariance_and_moments(seed, a, b, cx, cy, h, ellipse):
    data = np.random.default_rng(seed).normal(100, 10, size=(24, 24))
    scope = Scope.ellipse2d((cx, cy), (h, 0.7 * h), 0.4) if ellipse else Scope.box2d((cx, cy), (h, h))
    eps = default_epsilon(data)
    idx0, v0 = normalize_in_scope(Image2D(data, SP), scope, eps)
    idx1, v1 = normalize_in_scope(Image2D(a * data + b, SP), scope, a * eps)
    assume(v0.size > 1)
    assert all(np.array_equal(i, j) for i, j in zip(idx0, idx1))
    assert np.allclose(v1, v0, rtol=1e-5, atol=1e-5)
    assert abs(v0.mean()) <= 1e-6
    assert abs(v0.std() - 1) <= 1e-6


def test_normalization_order_independent():
    data = np.random.default_rng(3).normal(size=(20, 20))
    img = Image2D(data, SP)
    scopes = [Scope.box2d((0.5, 0.5), (0.3, 0.3)), Scope.ellipse2d((1.4, 1.2), (0.4, 0.2), 1.0)]
    fwd = [normalize_in_scope(img, s)[1] for s in scopes]
    rev = [normalize_in_scope(img, s)[1] for s in reversed(scopes)][::-1]
    assert all(np.array_equal(x, y) for x, y in zip(fwd, rev))
    assert np.array_equal(img.data, data)


def test_box_bounds_half_open():
    b = box_bounds(Scope.box2d((0.5, 0.3), (0.2, 0.1)), (1, 10, 10), (0.1, 0.1, 1.0), False)
    assert b == (0, 1, 2, 5, 3, 8)


def test_ellipse_halfwidths():
    hx, hy = ellipse_halfwidths((2.0, 1.0), 0.0)
    assert (hx, hy) == (2.0, 1.0)
    hx, hy = ellipse_halfwidths((2.0, 1.0), math.pi / 2)
    assert hx == pytest.approx(1.0) and hy == pytest.approx(2.0)


def _moments_ref(v, eps):
    v = np.asarray(v, float)
    m = v.mean()
    sd = math.sqrt(((v - m) ** 2).mean())
    if sd <= eps:
        sk = ku = 0.0
    else:
        sk = ((v - m) ** 3).mean() / sd ** 3
        ku = ((v - m) ** 4).mean() / sd ** 4 - 3.0
    return [v.min(), v.max(), m, sd, sk, ku]


def test_masked_moments_match_reference():
    rng = np.random.default_rng(9)
    vals = rng.normal(size=(6, 30)) * rng.uniform(0.1, 10, size=(6, 1))
    mask = rng.uniform(size=(6, 30)) < 0.6
    mask[:, 0] = True
    out = masked_moments(vals, mask, 1e-9)
    for i in range(6):
        assert np.allclose(out[i], _moments_ref(vals[i][mask[i]], 1e-9), rtol=1e-9, atol=1e-12)
    flat = block_moments(np.full(10, 4.0), 1e-9)
    assert flat.tolist() == [4.0, 4.0, 4.0, 0.0, 0.0, 0.0]
    with pytest.raises(ValueError, match="empty region"):
        masked_moments(vals[:1], np.zeros((1, 30), bool), 1e-9)
