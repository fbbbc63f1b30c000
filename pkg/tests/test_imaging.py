import cv2
import numpy as np
import pytest
from hypothesis import given, strategies as st

from mbconvnext import imaging as I
from mbconvnext.dataio import Volume
from mbconvnext.errors import EmptySelection
from oracles import flood_fill_labels, global_hist_eq, resize_reference


def _vol(nz, nx=3, ny=2):
    return Volume(np.arange(nx * ny * nz, dtype=float).reshape(nx, ny, nz), "")


# --- slice selection --------------------------------------------------------

def test_select_slices_examples():
    sl = I.select_slices(_vol(100))
    assert len(sl) == 60
    np.testing.assert_array_equal(sl[0], _vol(100).voxels[:, :, 20])
    np.testing.assert_array_equal(sl[-1], _vol(100).voxels[:, :, 79])
    assert I.slice_window(10) == (2, 8)
    assert len(I.select_slices(_vol(1), 0.0, 1.0)) == 1


def test_select_slices_count_formula_all_nz():
    for nz in range(1, 1001):
        a, b = I.slice_window(nz)
        assert b - a == -(-8 * nz // 10) - (2 * nz // 10)


@given(st.integers(1, 1000), st.integers(0, 99), st.integers(1, 100))
def test_select_slices_count_fuzzed(nz, lo_pct, width):
    hi_pct = min(100, lo_pct + width)
    lo, hi = lo_pct / 100, hi_pct / 100
    a, b = I.slice_window(nz, lo, hi)
    assert b - a == min(nz, -(-hi_pct * nz // 100)) - (lo_pct * nz // 100)


def test_select_slices_errors():
    with pytest.raises(EmptySelection):
        I.select_slices(_vol(0))
    with pytest.raises(ValueError):
        I.select_slices(_vol(10), 0.5, 0.5)


# --- orient / resize / normalise ------------------------------------------

def test_orient():
    img = np.arange(6).reshape(2, 3)
    np.testing.assert_array_equal(I.orient(img, 0), img)
    out = I.orient(img, 1)
    assert out.shape == (3, 2)
    for r in range(2):
        for c in range(3):
            assert out[3 - 1 - c, r] == img[r, c]
    x = img
    for _ in range(4):
        x = I.orient(x, 1)
    np.testing.assert_array_equal(x, img)
    with pytest.raises(ValueError):
        I.orient(img, 4)


def test_resize_examples():
    np.testing.assert_allclose(I.resize_bilinear(np.array([[0.0, 1.0]]), 1, 4), [[0.0, 0.25, 0.75, 1.0]])
    np.testing.assert_array_equal(I.resize_bilinear(np.full((2, 2), 0.7), 4, 4), np.full((4, 4), 0.7))
    x = np.random.default_rng(0).random((5, 6))
    np.testing.assert_array_equal(I.resize_bilinear(x, 5, 6), x)


def test_resize_matches_reference_and_cv2():
    rng = np.random.default_rng(1)
    for (h, w, oh, ow) in [(7, 5, 13, 11), (16, 16, 5, 9), (3, 8, 8, 3), (128, 128, 512, 512)]:
        x = rng.random((h, w))
        got = I.resize_bilinear(x, oh, ow)
        if oh * ow <= 200:
            np.testing.assert_allclose(got, resize_reference(x, oh, ow), atol=1e-12)
        if oh >= h and ow >= w:  # cv2 area-free upsampling uses the same centre convention
            ref = cv2.resize(x.astype(np.float32), (ow, oh), interpolation=cv2.INTER_LINEAR)
            np.testing.assert_allclose(got, ref, atol=1e-5)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31))
def test_resize_within_input_range(h, w, oh, ow, seed):
    x = np.random.default_rng(seed).standard_normal((h, w))
    y = I.resize_bilinear(x, oh, ow)
    assert y.shape == (oh, ow)
    assert y.min() >= x.min() and y.max() <= x.max()


def test_normalize_minmax():
    np.testing.assert_array_equal(I.normalize_minmax(np.array([2.0, 4.0])), [0.0, 1.0])
    np.testing.assert_array_equal(I.normalize_minmax(np.full((3, 3), 5.0)), np.zeros((3, 3)))
    y = I.normalize_minmax(np.random.default_rng(0).standard_normal((4, 4)))
    assert y.min() == 0.0 and y.max() == 1.0


# --- CLAHE ------------------------------------------------------------------

def test_quantize_rule():
    q = I.quantize(np.array([0.0, 0.5, 255.5 / 256, 1.0]))
    np.testing.assert_array_equal(q, [0, 128, 255, 255])


def test_clip_histogram_conserves_mass_and_spreads_remainder():
    h = np.zeros(256, dtype=np.int64)
    h[10] = 1000
    out = I.clip_histogram(h, 100)
    assert out.sum() == 1000
    excess = 900
    assert out[10] == 100 + excess // 256 + (1 if 10 < excess % 256 else 0)
    assert out[0] == excess // 256 + 1 and out[255] == excess // 256


def test_clahe_single_tile_equals_global_hist_eq(backend):
    rng = np.random.default_rng(3)
    for shape in [(33, 47), (64, 64), (10, 250)]:
        img = rng.beta(2, 5, size=shape)
        out = I.clahe(img, I.ClaheParams((1, 1), 300.0))
        np.testing.assert_array_equal(out, global_hist_eq(img).astype(np.float32))


def test_clahe_constant_image(backend):
    out = I.clahe(np.full((40, 40), 0.3))
    assert np.unique(out).size == 1


@given(st.integers(8, 64), st.integers(8, 64), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_clahe_range_and_monotone_maps(h, w, tr, tc, seed):
    img = np.random.default_rng(seed).random((h, w))
    p = I.ClaheParams((tr, tc), 2.0)
    out = I.clahe(img, p)
    assert out.shape == (h, w) and out.min() >= 0.0 and out.max() <= 1.0
    maps, _, _ = I.tile_mappings(I.quantize(img), p)
    assert (np.diff(maps, axis=-1) >= 0).all()


def test_clahe_backends_identical():
    from mbconvnext import kernels
    img = np.random.default_rng(5).random((100, 90))
    outs = []
    for b in kernels.available_backends():
        with kernels.backend(b):
            outs.append(I.clahe(img))
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], atol=1e-7)


# --- mask / components / ROI -------------------------------------------------

def test_lung_mask_rules():
    assert I.lung_mask(np.ones((10, 10))).sum() == 0
    frame = np.ones((10, 10))
    frame[0, :] = frame[-1, :] = frame[:, 0] = frame[:, -1] = 0.0
    assert I.lung_mask(frame).sum() == 0
    img = np.ones((30, 30))
    yy, xx = np.mgrid[0:30, 0:30]
    img[(yy - 15) ** 2 + (xx - 8) ** 2 < 16] = 0.1
    img[(yy - 15) ** 2 + (xx - 22) ** 2 < 16] = 0.1
    m = I.lung_mask(img)
    _, n = flood_fill_labels(m.astype(bool))
    assert n == 2


def test_connected_components_examples(backend):
    assert I.connected_components(np.zeros((4, 4)))[1] == []
    _, regs = I.connected_components(np.ones((3, 5)))
    assert len(regs) == 1 and regs[0].area == 15 and regs[0].bbox == (0, 0, 3, 5)
    m = np.zeros((3, 3)); m[0, 0] = m[1, 1] = m[2, 2] = m[0, 2] = 1
    assert len(I.connected_components(m)[1]) == 1


def test_connected_components_stats_vs_flood_fill(backend):
    rng = np.random.default_rng(11)
    for _ in range(200):
        h, w = rng.integers(1, 65, size=2)
        mask = rng.random((h, w)) < 0.35
        _, regs = I.connected_components(mask)
        ref, n = flood_fill_labels(mask)
        want = []
        for k in range(1, n + 1):
            rr, cc = np.nonzero(ref == k)
            want.append((rr.size, (rr.min(), cc.min(), rr.max() + 1, cc.max() + 1), rr.mean(), cc.mean()))
        want.sort(key=lambda t: (-t[0], t[1][0], t[1][1]))
        assert len(regs) == n
        for g, (a, box, cr, cc) in zip(regs, want):
            assert g.area == a and g.bbox == tuple(int(v) for v in box)
            assert g.centroid[0] == pytest.approx(cr) and g.centroid[1] == pytest.approx(cc)


def _two_ellipses(h=200, w=220):
    img = np.full((h, w), 0.9)
    yy, xx = np.mgrid[0:h, 0:w]
    img[((yy - h / 2) / (0.3 * h)) ** 2 + ((xx - 0.27 * w) / (0.14 * w)) ** 2 <= 1] = 0.1
    img[((yy - h / 2) / (0.25 * h)) ** 2 + ((xx - 0.73 * w) / (0.11 * w)) ** 2 <= 1] = 0.2
    return img


def test_roi_two_components():
    img = _two_ellipses()
    res = I.extract_lung_roi(img, I.lung_mask(img))
    assert res.image.shape == (250, 250) and res.fallback_used == "none" and len(res.boxes) == 2
    assert res.boxes[0][1] < res.boxes[1][1]
    for (r0, c0, r1, c1) in res.boxes:
        assert 0 <= r0 < r1 <= 200 and 0 <= c0 < c1 <= 220


def test_roi_fallbacks():
    img = np.random.default_rng(0).random((90, 70))
    res = I.extract_lung_roi(img, np.zeros_like(img))
    assert res.fallback_used == "whole_image" and res.image.shape == (250, 250)
    mask = np.zeros_like(img); mask[10:40, 20:60] = 1
    res = I.extract_lung_roi(img, mask)
    assert res.fallback_used == "single_component" and res.image.shape == (250, 250)
    assert res.boxes == [(10, 20, 40, 60)]
    thin = np.zeros_like(img); thin[5:9, 30] = 1
    assert I.extract_lung_roi(img, thin).image.shape == (250, 250)


@given(st.integers(2, 60), st.integers(2, 60), st.integers(0, 2**31), st.floats(0.0, 0.9))
def test_roi_always_250(h, w, seed, density):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w))
    mask = rng.random((h, w)) < density
    assert I.extract_lung_roi(img, mask).image.shape == (250, 250)


def test_roi_mirror_symmetry():
    cfg = I.PreprocessConfig(quarter_turns=0)
    img = _two_ellipses(128, 128)
    img = img + 0.02 * np.random.default_rng(2).standard_normal(img.shape)
    a = I.preprocess_slice(img, cfg)
    b = I.preprocess_slice(img[:, ::-1], cfg)
    assert a.fallback_used == b.fallback_used == "none"
    np.testing.assert_allclose(b.image, a.image[:, ::-1], atol=1e-5)


def test_preprocess_deterministic():
    img = _two_ellipses(128, 128)
    cfg = I.PreprocessConfig()
    np.testing.assert_array_equal(I.preprocess_slice(img, cfg).image, I.preprocess_slice(img, cfg).image)
