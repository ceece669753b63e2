"""Oracle and property tests for image containers, filters, and quantiles."""

import math

import numpy as np
import pytest
from shapely.geometry import Point, Polygon

from wormscreen.imagecore import (
    EmptyRegionError,
    FilterBankConfig,
    GrayImage,
    Kernel,
    OrientedRect,
    connected_components,
    contrast_adjust,
    convolve,
    filter_bank,
    gaussian_kernel,
    log_kernel,
    nearest_rank_index,
    rect_quantile,
    sobel_x_kernel,
    sobel_y_kernel,
)


def naive_convolve(data, weights):
    """Direct nested-loop convolution with edge replication."""
    h, w = data.shape
    kh, kw = weights.shape
    rh, rw = kh // 2, kw // 2
    out = np.zeros_like(data)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(kh):
                for j in range(kw):
                    yy = min(max(y + rh - i, 0), h - 1)
                    xx = min(max(x + rw - j, 0), w - 1)
                    acc += weights[i, j] * data[yy, xx]
            out[y, x] = acc
    return out


def shapely_rect_quantile(img, rect, q):
    """Point-in-polygon pixel collection + sort, independent of src path."""
    poly = Polygon(rect.corners())
    vals = []
    pad = int(math.ceil(rect.half_length + rect.half_width)) + 2
    x0 = max(0, int(rect.cx) - pad)
    x1 = min(img.width - 1, int(rect.cx) + pad)
    y0 = max(0, int(rect.cy) - pad)
    y1 = min(img.height - 1, int(rect.cy) + pad)
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            if poly.covers(Point(x, y)):
                vals.append(img.data[y, x])
    if not vals:
        raise EmptyRegionError
    vals.sort()
    return vals[nearest_rank_index(q, len(vals))]


def flood_fill_regions(mask):
    """Iterative 8-connected flood fill; returns frozensets of (y, x)."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    regions = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            pixels = []
            while stack:
                y, x = stack.pop()
                pixels.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if (0 <= ny < h and 0 <= nx < w and mask[ny, nx]
                                and not seen[ny, nx]):
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            regions.append(frozenset(pixels))
    return regions


class TestConvolve:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        img = GrayImage(rng.random((9, 13)))
        out = convolve(img, Kernel(np.array([[1.0]])))
        np.testing.assert_array_equal(out.data, img.data)

    def test_zero_sum_kernel_on_constant(self):
        img = GrayImage(np.full((16, 16), 0.37))
        out = convolve(img, log_kernel(1.5))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        img = rng.random((7, 7))
        k = rng.standard_normal((3, 3))
        out = convolve(GrayImage(img), Kernel(k))
        expected = naive_convolve(img, k)
        np.testing.assert_allclose(out.data, expected, rtol=1e-9, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        i1 = rng.random((11, 8))
        i2 = rng.random((11, 8))
        k = Kernel(rng.standard_normal((5, 3)))
        a, b = 1.7, -0.4
        lhs = convolve(GrayImage(a * i1 + b * i2), k).data
        rhs = (a * convolve(GrayImage(i1), k).data
               + b * convolve(GrayImage(i2), k).data)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            Kernel(np.ones((2, 3)))

    def test_rejects_nonfinite_kernel(self):
        with pytest.raises(ValueError):
            Kernel(np.array([[np.inf, 0, 0], [0, 0, 0], [0, 0, 0]]))


class TestContrastAdjust:
    def test_full_span_unchanged(self):
        rng = np.random.default_rng(3)
        data = rng.random((20, 20))
        data.flat[0], data.flat[1] = 0.0, 1.0
        out = contrast_adjust(GrayImage(data), 0.0, 1.0)
        np.testing.assert_allclose(out.data, data, atol=1e-12)

    def test_two_valued_image(self):
        data = np.where(np.arange(64).reshape(8, 8) % 2 == 0, 0.4, 0.6)
        out = contrast_adjust(GrayImage(data), 0.0, 1.0)
        assert set(np.unique(out.data)) == {0.0, 1.0}

    def test_percentile_oracle(self):
        rng = np.random.default_rng(4)
        data = rng.random((30, 30))
        lo_pct, hi_pct = 0.05, 0.9
        out = contrast_adjust(GrayImage(data), lo_pct, hi_pct)
        flat = np.sort(out.data, axis=None)
        n = flat.size
        assert flat[nearest_rank_index(lo_pct, n)] == pytest.approx(0.0)
        assert flat[nearest_rank_index(hi_pct, n)] == pytest.approx(1.0)

    def test_degenerate_image(self):
        out = contrast_adjust(GrayImage(np.full((4, 4), 0.2)), 0.01, 0.99)
        np.testing.assert_array_equal(out.data, np.full((4, 4), 0.5))


class TestFilterBank:
    def test_constant_image_no_gradients(self):
        stack = filter_bank(GrayImage(np.full((24, 24), 0.5)))
        np.testing.assert_allclose(stack.responses["sobel"].data, 0.0,
                                   atol=1e-12)

    def test_ramp_sobel_analytic(self):
        # I(x, y) = 0.01 * x. Under true convolution with the Sobel-x mask
        # the interior response is -8 * 0.01; Sobel-y is identically 0.
        xs = np.arange(20, dtype=float) * 0.01
        img = GrayImage(np.tile(xs, (15, 1)))
        gx = convolve(img, sobel_x_kernel()).data
        gy = convolve(img, sobel_y_kernel()).data
        np.testing.assert_allclose(gx[1:-1, 1:-1], -0.08, atol=1e-12)
        np.testing.assert_allclose(gy, 0.0, atol=1e-12)

    def test_default_stack_contract(self):
        img = GrayImage(np.random.default_rng(5).random((32, 40)))
        stack = filter_bank(img, FilterBankConfig())
        assert len(stack.names) >= 6
        for name in stack.names:
            assert stack.responses[name].shape == img.shape
        for expected in ("raw", "contrast", "sobel", "gauss", "contrast_log"):
            assert expected in stack.names

    def test_gaussian_kernel_normalized(self):
        assert gaussian_kernel(2.0).weights.sum() == pytest.approx(1.0)

    def test_log_kernel_zero_sum(self):
        assert abs(log_kernel(2.5).weights.sum()) < 1e-12


class TestRectQuantile:
    def test_constant_image(self):
        img = GrayImage(np.full((40, 40), 0.77))
        rect = OrientedRect(20, 20, 0.3, 6, 3)
        for q in (0.0, 0.25, 0.5, 1.0):
            assert rect_quantile(img, rect, q) == 0.77

    def test_axis_aligned_median_oracle(self):
        rng = np.random.default_rng(6)
        img = GrayImage(rng.random((30, 30)))
        rect = OrientedRect(14.2, 15.7, 0.0, 5.3, 2.8)
        assert rect_quantile(img, rect, 0.5) == shapely_rect_quantile(
            img, rect, 0.5)

    def test_rotated_quartile_oracle(self):
        rng = np.random.default_rng(7)
        img = GrayImage(rng.random((30, 30)))
        rect = OrientedRect(15.1, 14.4, math.radians(30), 7.1, 3.2)
        assert rect_quantile(img, rect, 0.25) == shapely_rect_quantile(
            img, rect, 0.25)

    def test_random_rect_oracle_sweep(self):
        rng = np.random.default_rng(8)
        img = GrayImage(rng.random((40, 40)))
        for _ in range(60):
            rect = OrientedRect(
                rng.uniform(3, 36), rng.uniform(3, 36),
                rng.uniform(0, math.pi),
                rng.uniform(1.5, 9), rng.uniform(1.0, 4))
            q = rng.random()
            assert rect_quantile(img, rect, q) == shapely_rect_quantile(
                img, rect, q)

    def test_monotone_in_q(self):
        rng = np.random.default_rng(9)
        img = GrayImage(rng.random((25, 25)))
        rect = OrientedRect(12.3, 11.8, 1.1, 6.2, 2.9)
        qs = np.linspace(0, 1, 17)
        vals = [rect_quantile(img, rect, q) for q in qs]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_angle_plus_pi_invariant(self):
        rng = np.random.default_rng(10)
        img = GrayImage(rng.random((25, 25)))
        r1 = OrientedRect(12.5, 12.5, 0.7, 5.5, 2.5)
        r2 = OrientedRect(12.5, 12.5, 0.7 + math.pi, 5.5, 2.5)
        assert rect_quantile(img, r1, 0.3) == rect_quantile(img, r2, 0.3)

    def test_empty_region_raises(self):
        img = GrayImage(np.zeros((20, 20)))
        rect = OrientedRect(-50.0, -50.0, 0.0, 2.0, 1.0)
        with pytest.raises(EmptyRegionError):
            rect_quantile(img, rect, 0.5)

    def test_offgrid_rect_between_pixels(self):
        img = GrayImage(np.zeros((20, 20)))
        rect = OrientedRect(5.5, 5.5, 0.0, 0.4, 0.4)
        with pytest.raises(EmptyRegionError):
            rect_quantile(img, rect, 0.5)


class TestConnectedComponents:
    def test_empty_mask(self):
        assert connected_components(np.zeros((10, 10), bool)) == []

    def test_two_squares(self):
        mask = np.zeros((12, 12), bool)
        mask[1:4, 1:4] = True
        mask[7:10, 7:10] = True
        regions = connected_components(mask)
        assert len(regions) == 2
        assert sorted(r.area for r in regions) == [9, 9]

    def test_diagonal_is_connected(self):
        mask = np.eye(6, dtype=bool)
        assert len(connected_components(mask)) == 1

    def test_flood_fill_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            mask = rng.random((18, 22)) < 0.35
            got = {frozenset(zip(r.ys.tolist(), r.xs.tolist()))
                   for r in connected_components(mask)}
            assert got == set(flood_fill_regions(mask))

    def test_areas_sum_to_foreground(self):
        rng = np.random.default_rng(12)
        mask = rng.random((30, 30)) < 0.5
        regions = connected_components(mask)
        assert sum(r.area for r in regions) == int(mask.sum())

    def test_region_fields(self):
        mask = np.zeros((8, 8), bool)
        mask[2:5, 3:6] = True
        (r,) = connected_components(mask)
        assert r.bbox == (3, 2, 5, 4)
        assert r.centroid == (4.0, 3.0)
        assert r.mask(mask.shape).sum() == 9
