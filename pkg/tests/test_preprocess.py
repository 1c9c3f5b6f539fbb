import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lvvolume.errors import ConfigError
from lvvolume.preprocess import (
    AugmentParams,
    augment,
    crop_patch,
    normalize_intensity,
    physical_shape,
    resample_to_physical,
    resize,
    rotate,
)

seeds = st.integers(0, 2**32 - 1)


def test_resample_identity_at_target():
    img = np.random.default_rng(0).random((37, 53))
    out = resample_to_physical(img, (1.4, 1.4))
    assert out.pixels.shape == img.shape and np.array_equal(out.pixels, img)


def test_resample_doubles():
    assert physical_shape((100, 100), (2.8, 2.8)) == (200, 200)
    assert resample_to_physical(np.zeros((100, 100)), (2.8, 2.8)).pixels.shape == (200, 200)


@given(st.floats(0.3, 4.0), st.floats(-1e3, 1e3))
def test_resample_constant(ps, value):
    out = resample_to_physical(np.full((20, 30), value), (ps, ps)).pixels
    assert np.allclose(out, value, rtol=0, atol=1e-9 * max(1, abs(value)))


def test_resample_rejects_bad_spacing():
    with pytest.raises(ConfigError):
        resample_to_physical(np.zeros((4, 4)), (0, 1))


def test_normalize_two_point():
    out = normalize_intensity(np.array([[0.0, 2.0], [2.0, 0.0]])).pixels
    assert np.array_equal(out, [[-1, 1], [1, -1]])


@given(seeds, st.floats(0.01, 100), st.floats(-1e3, 1e3))
def test_normalize_stats_and_affine(seed, a, b):
    x = np.random.default_rng(seed).standard_normal((16, 12)) * 5 + 3
    y = normalize_intensity(x).pixels
    assert abs(y.mean()) < 1e-6 and abs(y.std() - 1) < 1e-6
    assert np.allclose(normalize_intensity(a * x + b).pixels, y, atol=1e-9)
    assert np.allclose(normalize_intensity(y).pixels, y, atol=1e-9)


def test_normalize_constant_flagged():
    out = normalize_intensity(np.full((5, 5), 7.0))
    assert out.degenerate and not out.pixels.any()


def test_crop_identity_and_corner():
    img = np.arange(64.0).reshape(8, 8)
    assert np.array_equal(crop_patch(img, (4, 4), (8, 8)), img)
    patch = crop_patch(img, (0, 0), (4, 4), fill=-1)
    assert np.array_equal(patch[2:, 2:], img[:2, :2])
    assert (patch[:2] == -1).all() and (patch[:, :2] == -1).all()


@given(seeds)
def test_crop_index_map(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((30, 40))
    h, w = rng.integers(1, 50, 2)
    center = rng.uniform(-10, 50, 2)
    patch = crop_patch(img, center, (h, w), fill=np.nan)
    r0 = int(np.floor(center[0] + 0.5)) - h // 2
    c0 = int(np.floor(center[1] + 0.5)) - w // 2
    for i in range(h):
        for j in range(w):
            r, c = r0 + i, c0 + j
            if 0 <= r < 30 and 0 <= c < 40:
                assert patch[i, j] == img[r, c]
            else:
                assert np.isnan(patch[i, j])


def test_resize_constant_and_identity():
    assert np.allclose(resize(np.full((92, 92), 3.5), (224, 224)), 3.5)
    img = np.random.default_rng(1).random((92, 92))
    assert np.allclose(resize(img, (92, 92)), img, atol=1e-9)


def test_resize_preserves_ramp():
    # value = 2*row + 3*col on pixel centres; bilinear keeps affine fields
    n, m = 40, 90
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    out = resize(2 * rr + 3 * cc + 1.0, (m, m))
    src = (np.arange(m) + 0.5) * n / m - 0.5
    expect = 2 * src[:, None] + 3 * src[None, :] + 1.0
    inner = (src >= 0) & (src <= n - 1)
    assert np.allclose(out[np.ix_(inner, inner)], expect[np.ix_(inner, inner)], atol=1e-6)


def test_augment_identity_and_determinism():
    img = np.random.default_rng(2).random((32, 32))
    assert np.array_equal(augment(img, 5, AugmentParams(0, 0)), img)
    a = augment(img, 11, AugmentParams())
    assert np.array_equal(a, augment(img, 11, AugmentParams()))
    assert not np.array_equal(a, augment(img, 12, AugmentParams()))


def test_rotate_full_turn():
    img = np.random.default_rng(3).random((31, 31))
    assert np.allclose(rotate(img, 360.0), img, atol=1e-6)


def test_augment_params_validated():
    with pytest.raises(ConfigError):
        AugmentParams(-1, 0)
