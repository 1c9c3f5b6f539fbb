import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lvvolume import localize, phantom, preprocess
from lvvolume.errors import ConfigError, GeometryError, ShapeError
from lvvolume.localize import (
    Atlas,
    ProjectionWarning,
    Roi,
    bank_rotations,
    bank_scales,
    build_atlas,
    expand_atlas,
    mad_score,
    match_atlas,
    project_roi,
    refine_roi,
    select_ed_es,
)

seeds = st.integers(0, 2**32 - 1)


def brute_force(search, bank):
    """Exhaustive (score, row, col, variant) minimum."""
    best = None
    for idx, v in enumerate(bank.variants):
        h, w = v.pixels.shape
        for r in range(search.shape[0] - h + 1):
            for c in range(search.shape[1] - w + 1):
                key = (mad_score(search[r : r + h, c : c + w], v.pixels), r, c, idx)
                if best is None or key < best:
                    best = key
    return best


def small_bank(rng, sizes=(5, 7), T=2):
    variants = []
    for s in sizes:
        base = rng.standard_normal((s, s))
        for j in range(T):
            variants.append(localize.AtlasVariant(s, j * 360.0 / T, np.rot90(base, 2 * j).copy()))
    return localize.AtlasBank(tuple(variants), len(sizes), T)


# ---------------------------------------------------------------- atlas

def test_build_atlas_examples():
    p = np.random.default_rng(0).random((64, 64))
    assert np.array_equal(build_atlas([p]).pixels, p)
    assert np.array_equal(build_atlas([np.zeros((64, 64)), np.full((64, 64), 2.0)]).pixels, np.ones((64, 64)))
    with pytest.raises(ConfigError):
        build_atlas([])
    with pytest.raises(ShapeError):
        build_atlas([np.zeros((10, 10))])


def test_build_atlas_matches_two_pass_mean():
    rng = np.random.default_rng(1)
    patches = [rng.standard_normal((64, 64)) * 3 + 1 for _ in range(1000)]
    # two-pass oracle: compensated (math.fsum) per pixel
    import math

    stack = np.stack(patches)
    oracle = np.array([[math.fsum(stack[:, i, j]) / 1000 for j in range(64)] for i in range(64)])
    assert np.max(np.abs(build_atlas(patches).pixels - oracle)) < 1e-9


def test_build_atlas_phantom_patches():
    params = phantom.dataset_params(20, phantom.PhantomParams(seed=9))
    patches = [phantom.atlas_patch(p, 4, 0) for p in params]
    assert np.allclose(build_atlas(patches).pixels, np.mean(patches, axis=0), atol=1e-12)


def test_expand_atlas_counts():
    atlas = Atlas(np.random.default_rng(2).random((64, 64)))
    one = expand_atlas(atlas, 1, 1)
    assert len(one) == 1 and np.array_equal(one.variants[0].pixels, atlas.pixels)
    bank = expand_atlas(atlas, 6, 12)
    assert len(bank) == 72
    assert bank_scales(6) == [52, 56, 60, 64, 68, 72]
    assert bank_rotations(12) == [30.0 * j for j in range(12)]
    assert [v.pixels.shape[0] for v in bank.variants[::12]] == [52, 56, 60, 64, 68, 72]


def test_rotation_180_twice_is_identity():
    atlas = Atlas(np.random.default_rng(3).random((64, 64)))
    bank = expand_atlas(atlas, 1, 2)
    v180 = bank.variants[1].pixels
    twice = localize._rotate_nearest_fill(v180, 180.0)
    assert np.allclose(twice, atlas.pixels, atol=1e-9)


def test_atlas_file_round_trip(tmp_path):
    atlas = Atlas(np.random.default_rng(4).standard_normal((64, 64)))
    localize.save_atlas(atlas, tmp_path / "a.png")
    back = localize.load_atlas(tmp_path / "a.png")
    assert np.max(np.abs(back.pixels - atlas.pixels)) <= 0.5 / localize.ATLAS_CODE_SCALE + 1e-12


def test_default_atlas_loads():
    assert localize.default_atlas().pixels.shape == (64, 64)


# ---------------------------------------------------------------- scoring

def test_mad_examples():
    v = np.random.default_rng(5).random((6, 6))
    assert mad_score(v, v) == 0.0
    assert abs(mad_score(v + 1, v) - 1.0) < 1e-12


@given(seeds)
def test_mad_matches_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(-50, 50, (2, 5, 7)).astype(float)
    total = 0.0
    for i in range(5):
        for j in range(7):
            total += abs(a[i, j] - b[i, j])
    # integer-valued inputs keep every partial sum exact
    assert mad_score(a, b) == total / 35


def test_match_exact_embed():
    rng = np.random.default_rng(6)
    bank = expand_atlas(Atlas(rng.standard_normal((64, 64))), 3, 4)
    idx = 7
    tmpl = bank.variants[idx].pixels
    search = np.full((100, 100), 50.0)
    search[10 : 10 + tmpl.shape[0], 10 : 10 + tmpl.shape[1]] = tmpl
    m = match_atlas(search, bank)
    assert (m.offset, m.variant, m.score) == ((10, 10), idx, 0.0)


def test_match_uniform_tie_break():
    v = localize.AtlasVariant(5, 0.0, np.ones((5, 5)))
    bank = localize.AtlasBank((v, localize.AtlasVariant(5, 90.0, np.ones((5, 5)))), 1, 2)
    m = match_atlas(np.ones((20, 20)), bank)
    assert (m.offset, m.variant, m.score) == ((0, 0), 0, 0.0)


@given(seeds)
def test_match_equals_brute_force_small(seed):
    rng = np.random.default_rng(seed)
    bank = small_bank(rng)
    search = rng.standard_normal((14, 16))
    m = match_atlas(search, bank)
    score, r, c, idx = brute_force(search, bank)
    assert (m.offset, m.variant, m.score) == ((r, c), idx, score)


@given(seeds)
def test_match_with_ties_equals_brute_force(seed):
    # small integer alphabet forces many exact ties
    rng = np.random.default_rng(seed)
    variants = tuple(localize.AtlasVariant(3, 0.0, rng.integers(0, 2, (3, 3)).astype(float)) for _ in range(3))
    bank = localize.AtlasBank(variants, 1, 3)
    search = rng.integers(0, 2, (9, 9)).astype(float)
    m = match_atlas(search, bank)
    score, r, c, idx = brute_force(search, bank)
    assert (m.offset, m.variant, m.score) == ((r, c), idx, score)


@given(seeds, st.floats(-100, 100))
def test_match_shift_invariant(seed, k):
    rng = np.random.default_rng(seed)
    k = float(np.rint(k))  # integer shift keeps the float scores exact
    variants = tuple(localize.AtlasVariant(4, 0.0, rng.integers(-9, 9, (4, 4)).astype(float)) for _ in range(2))
    bank = localize.AtlasBank(variants, 1, 2)
    shifted = localize.AtlasBank(tuple(replace(v, pixels=v.pixels + k) for v in variants), 1, 2)
    search = rng.integers(-9, 9, (12, 12)).astype(float)
    a, b = match_atlas(search, bank), match_atlas(search + k, shifted)
    assert (a.offset, a.variant, a.score) == (b.offset, b.variant, b.score)
    assert match_atlas(search, bank) == a


def test_match_numpy_fallback_agrees():
    rng = np.random.default_rng(7)
    bank = small_bank(rng)
    search = rng.standard_normal((15, 15))
    for v in bank.variants:
        a = localize._scan_variant_numpy(search, v.pixels, np.inf)
        b = localize._scan_variant(search, v.pixels, np.inf)
        assert a[1:] == b[1:] and abs(a[0] - b[0]) < 1e-12


def test_match_rejects_oversized_variant():
    bank = localize.AtlasBank((localize.AtlasVariant(9, 0.0, np.zeros((9, 9))),), 1, 1)
    with pytest.raises(ShapeError):
        match_atlas(np.zeros((5, 5)), bank)


# ---------------------------------------------------------------- ROI

def _top_image(params, position=4):
    study = phantom.generate_study(params).study
    plane = study.sax.planes[position]
    norm = preprocess.resample_to_physical(study.sax.frames[position][0], plane.spacing)
    img = preprocess.normalize_intensity(norm)
    truth = norm.to_resampled(*phantom.true_centers(params)[position])
    return img.pixels, truth, study, norm


@pytest.fixture(scope="module")
def bank():
    return expand_atlas(localize.default_atlas(), 6, 12)


def test_refine_roi_recovers_center(bank):
    params = phantom.PhantomParams(seed=21)
    img, truth, _, _ = _top_image(params)
    for dr, dc in ((15, 0), (0, -15), (-11, 11)):
        roi = refine_roi(img, (truth[0] + dr, truth[1] + dc), bank)
        assert np.hypot(roi.center[0] - truth[0], roi.center[1] - truth[1]) <= 5
        assert roi.pixels.shape == (92, 92)


def test_refine_roi_tiled_variant():
    v = np.random.default_rng(8).standard_normal((5, 5))
    bank = localize.AtlasBank((localize.AtlasVariant(5, 0.0, v),), 1, 1)
    tiled = np.tile(v, (6, 6))
    roi = refine_roi(tiled, (14.5, 14.5), bank, roi_size=(10, 10), search_size=30)
    assert roi.score == 0.0
    r0, c0 = preprocess.patch_origin((14.5, 14.5), (30, 30))
    # first tile position inside the search patch, row-major
    first = ((-r0) % 5, (-c0) % 5)
    assert roi.center == (r0 + first[0] + 2.0, c0 + first[1] + 2.0)


def test_refine_roi_at_corner(bank):
    img = np.random.default_rng(9).standard_normal((80, 80))
    roi = refine_roi(img, (0, 0), bank)
    assert roi.pixels.shape == (92, 92)


def test_project_same_slice():
    plane = phantom.sax_planes(phantom.PhantomParams())[3]
    img = np.random.default_rng(10).random((100, 100))
    roi = Roi((40.0, 50.0), preprocess.crop_patch(img, (40, 50), (92, 92)), image_shape=(100, 100))
    out = project_roi(roi, plane, plane, img)
    assert out.center == roi.center and np.array_equal(out.pixels, roi.pixels)


def test_project_clamps_with_warning():
    plane = phantom.sax_planes(phantom.PhantomParams())[3]
    roi = Roi((140.0, 20.0), np.zeros((92, 92)))
    with pytest.warns(ProjectionWarning):
        out = project_roi(roi, plane, plane, np.zeros((100, 100)))
    assert out.center == (99.0, 20.0)


def test_project_rejects_other_series():
    p = phantom.PhantomParams()
    sax = phantom.sax_planes(p)[3]
    ch2 = phantom.lax_planes(p)[0]
    with pytest.raises(GeometryError):
        project_roi(Roi((10.0, 10.0), np.zeros((92, 92))), sax, ch2, np.zeros((50, 50)))


def test_project_top_to_mid_covers_blood_pool(bank):
    params = phantom.PhantomParams(seed=22, center_offset_px=(6.0, -9.0))
    study = phantom.generate_study(params).study
    top, mid = 1, 6
    tp, mp = study.sax.planes[top], study.sax.planes[mid]
    norm = preprocess.resample_to_physical(study.sax.frames[top][0], tp.spacing)
    img = preprocess.normalize_intensity(norm).pixels
    coarse = norm.to_resampled(*phantom.true_centers(params)[top])
    roi = refine_roi(img, coarse, bank)
    mid_img = preprocess.resample_to_physical(study.sax.frames[mid][0], mp.spacing).pixels
    out = project_roi(roi, tp, mp, mid_img)
    # cavity-only rendering of the mid slice gives the blood-pool mask
    bare = replace(params, myocardium=0.0, rv=0.0, background=0.0, texture=0.0, noise_sigma=0.0)
    pool = phantom._render(bare, mp, np.random.default_rng(0), frames=[0])[0]
    mask = preprocess.resample_to_physical(pool, mp.spacing).pixels > 500
    r0, c0 = preprocess.patch_origin(out.center, out.size)
    inside = np.zeros_like(mask)
    inside[max(r0, 0) : r0 + 92, max(c0, 0) : c0 + 92] = True
    assert mask.sum() > 100
    assert (mask & inside).sum() / mask.sum() >= 0.9


# ---------------------------------------------------------------- ED / ES

def test_select_ed_es_examples():
    frames = [np.full((2, 2), s / 4) for s in (5, 9, 3, 7)]
    assert select_ed_es(frames) == (1, 2)
    assert select_ed_es([np.ones((3, 3))] * 4) == (0, 0)
    with pytest.raises(ConfigError):
        select_ed_es([np.ones((2, 2))])


@given(seeds, st.integers(1, 64))
def test_select_ed_es_scale_invariant(seed, k):
    frames = list(np.random.default_rng(seed).integers(0, 100, (6, 3, 3)).astype(float))
    # power-of-two factors scale every sum exactly
    assert select_ed_es([f * 2.0 ** (k % 7) for f in frames]) == select_ed_es(frames)


def test_select_ed_es_phantom_cycle():
    params = phantom.PhantomParams(seed=23, phase_offset=7)
    ps = phantom.generate_study(params)
    mid = 6
    center = phantom.true_centers(params)[mid]
    frames = [preprocess.crop_patch(f, center, (57, 57)) for f in ps.study.sax.frames[mid]]
    assert select_ed_es(frames) == phantom.analytic_phases(params) == (ps.ed, ps.es)
