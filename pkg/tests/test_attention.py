import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadehash import attention as A


def hand_bilinear(m, size):
    """Align-corners bilinear interpolation written out per output pixel."""
    h, w = m.shape
    out = np.zeros(size)
    for i in range(size[0]):
        for j in range(size[1]):
            y = i * (h - 1) / (size[0] - 1)
            x = j * (w - 1) / (size[1] - 1)
            y0, x0 = min(int(y), h - 2), min(int(x), w - 2)
            fy, fx = y - y0, x - x0
            out[i, j] = (
                (1 - fy) * (1 - fx) * m[y0, x0]
                + (1 - fy) * fx * m[y0, x0 + 1]
                + fy * (1 - fx) * m[y0 + 1, x0]
                + fy * fx * m[y0 + 1, x0 + 1]
            )
    return out


# --- attention maps ---------------------------------------------------------------


def test_attention_constant_and_relu_sum():
    np.testing.assert_allclose(A.attention_from_features(np.ones((1, 1, 4, 4)), (8, 8)), 1.0, atol=1e-12)
    x = np.stack([np.full((3, 3), 2.0), np.full((3, 3), -1.0)])[None]
    np.testing.assert_allclose(A.attention_from_features(x, (6, 6)), 2.0, atol=1e-12)


def test_attention_upsample_matches_hand_formula():
    m = np.array([[1.0, 3.0], [-0.0, 5.0]])
    out = A.attention_from_features(m[None, None], (4, 4))[0]
    np.testing.assert_allclose(out, hand_bilinear(m, (4, 4)), atol=1e-12)
    m2 = np.random.default_rng(0).uniform(size=(3, 5))
    np.testing.assert_allclose(
        A.attention_from_features(m2[None, None], (7, 9))[0], hand_bilinear(m2, (7, 9)), atol=1e-12
    )


def test_attention_rejects_tiny_maps():
    with pytest.raises(ValueError):
        A.attention_from_features(np.ones((1, 2, 1, 4)), (8, 8))


def test_normalize_examples():
    np.testing.assert_array_equal(A.normalize_attention(np.array([[2.0, 4], [8, 1]])), [[0.25, 0.5], [1, 0.125]])
    np.testing.assert_array_equal(A.normalize_attention(np.full((3, 3), 7.0)), np.ones((3, 3)))
    np.testing.assert_array_equal(A.normalize_attention(np.zeros((3, 3))), np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_normalized_max_is_one(h, w, seed):
    a = A.normalize_attention(np.random.default_rng(seed).uniform(0, 10, size=(h, w)))
    assert a.max() == 1.0 and a.min() >= 0.0


# --- saliency -------------------------------------------------------------------------


def test_saliency_delta_stays_delta():
    a = np.zeros((9, 9))
    a[3, 6] = 1.0
    s, center, _ = A.build_saliency(a)
    np.testing.assert_array_equal(s, a)
    assert center == (3, 6)


def test_saliency_of_flat_map_is_the_gaussian_at_origin():
    s, center, std = A.build_saliency(np.ones((8, 10)), 0.25)
    assert center == (0, 0) and std == 2.0
    ii, jj = np.mgrid[0:8, 0:10]
    np.testing.assert_allclose(s, np.exp(-(ii**2 + jj**2) / (2 * std**2)), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_saliency_peak_is_one_at_center(seed):
    a = A.normalize_attention(np.random.default_rng(seed).uniform(size=(6, 7)))
    s, (r, c), _ = A.build_saliency(a)
    assert s[r, c] == 1.0 and s.max() == 1.0


def test_saliency_rejects_bad_rho():
    with pytest.raises(ValueError):
        A.build_saliency(np.ones((3, 3)), 0.0)


# --- grids ----------------------------------------------------------------------------


def test_uniform_saliency_gives_identity_grid():
    for shape in [(8, 8), (5, 9), (64, 64)]:
        g = A.grid_from_saliency(np.ones(shape), shape)
        np.testing.assert_allclose(g, A.identity_coords(*shape), atol=1e-9)


def test_left_heavy_saliency_puts_samples_left():
    s = np.zeros((16, 16))
    s[:, :8] = 1.0
    xs = A.grid_from_saliency(s, (16, 16))[0, :, 0]
    # oracle: invert the explicit column CDF by hand
    mass = s.sum(axis=0) + A.DEFAULT_EPS
    mass = mass / mass.sum()
    seg = 0.5 * (mass[:-1] + mass[1:])
    cdf = np.concatenate([[0], np.cumsum(seg)]) / seg.sum()
    expected = np.interp(np.linspace(0, 1, 16), cdf, np.linspace(-1, 1, 16))
    expected[0], expected[-1] = -1, 1
    np.testing.assert_allclose(xs, expected, atol=1e-12)
    assert np.mean(xs <= 0) >= 0.6


def test_grids_monotone_with_pinned_endpoints():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h, w = rng.integers(2, 20, size=2)
        s = rng.uniform(size=(h, w)) ** rng.uniform(1, 8)
        g = A.grid_from_saliency(s, (h, w))
        assert np.all(np.diff(g[..., 0], axis=1) >= 0)
        assert np.all(np.diff(g[..., 1], axis=0) >= 0)
        assert g[0, 0, 0] == -1 and g[0, -1, 0] == 1
        assert g[0, 0, 1] == -1 and g[-1, 0, 1] == 1


def test_peak_is_magnified():
    a = np.zeros((32, 32))
    a[12, 20] = 1.0
    a = A.bilinear_resize(np.pad(a, 0)[None, None], (32, 32))[0, 0] + 0.05
    grid, sal = A.sampling_grid(a, (32, 32))
    xs, ys = grid.coords[0, :, 0], grid.coords[:, 0, 1]
    col = 2 * 20 / 31 - 1
    near = np.argmin(np.abs(xs - col))
    spacing = np.diff(xs)
    assert spacing[min(near, 30)] < spacing.mean()
    assert np.diff(ys)[min(np.argmin(np.abs(ys - (2 * 12 / 31 - 1))), 30)] < np.diff(ys).mean()


def test_zero_attention_short_circuits_to_identity():
    grid, _ = A.sampling_grid(np.zeros((6, 6)), (6, 6))
    np.testing.assert_array_equal(grid.coords, A.identity_coords(6, 6))


def test_grid_deterministic():
    s = np.random.default_rng(3).uniform(size=(10, 10))
    a = A.grid_from_saliency(s, (10, 10))
    b = A.grid_from_saliency(s.copy(), (10, 10))
    assert a.tobytes() == b.tobytes()


# --- zoom ---------------------------------------------------------------------------------


def test_zoom_identity_and_corner():
    img = np.random.default_rng(4).uniform(size=(2, 3, 8, 8))
    np.testing.assert_allclose(A.zoom_image(img, A.identity_grid(8, 8)), img, atol=1e-12)
    corner = np.full((8, 8, 2), -1.0)
    out = A.zoom_image(img, [corner, corner])
    np.testing.assert_allclose(out, np.broadcast_to(img[:, :, :1, :1], img.shape), atol=1e-15)


def test_zoom_of_uniform_saliency_is_identity():
    img = np.random.default_rng(5).uniform(size=(1, 3, 12, 12))
    grid = A.grid_from_saliency(np.ones((12, 12)), (12, 12))
    np.testing.assert_allclose(A.zoom_image(img, [grid]), img, atol=1e-9)


def test_attention_zoom_keeps_size():
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(2, 3, 16, 16))
    feats = rng.normal(size=(2, 4, 4, 4))
    zoomed, grids, sal = A.attention_zoom(img, feats)
    assert zoomed.shape == img.shape and sal.shape == (2, 16, 16) and len(grids) == 2


def test_pgm_round_trip(tmp_path):
    v = np.linspace(0, 1, 12).reshape(3, 4)
    A.write_pgm(tmp_path / "a.pgm", v, 0.0, 1.0)
    px = A.read_pgm(tmp_path / "a.pgm")
    np.testing.assert_array_equal(px, np.rint(v * 255).astype(np.uint8))
