import numpy as np
import pytest

from mycobow.dataset import Scan
from mycobow.errors import DegenerateImage, ImageTooSmall
from mycobow.imaging import (GATE_BG, GATE_FG, GATE_SKIP, ForegroundMask,
                             NormalizedImage, PatchSpec, augment_patch,
                             compute_intensity_limits, downscale,
                             extract_patch_grid, segment_foreground,
                             stretch_contrast)

from oracles import percentile_by_sorting


def make_scan(pixels, species="CA", prep=1, scan_id="s1"):
    return Scan(pixels=np.asarray(pixels), species=species,
                preparation_id=prep, scan_id=scan_id)


class TestIntensityLimits:
    def test_uniform_ramp_percentiles(self):
        values = np.arange(0, 1001, dtype=np.uint16)
        scan = make_scan(values.reshape(11, 91))
        lo, hi = compute_intensity_limits(scan, 1, 99)
        assert lo == pytest.approx(percentile_by_sorting(values, 1))
        assert hi == pytest.approx(percentile_by_sorting(values, 99))
        assert lo == pytest.approx(10.0)
        assert hi == pytest.approx(990.0)

    def test_constant_image_degenerate(self):
        scan = make_scan(np.full((10, 10), 42, dtype=np.uint16))
        with pytest.raises(DegenerateImage):
            compute_intensity_limits(scan, 1, 99)

    def test_full_range_is_min_max(self):
        scan = make_scan(np.array([[0, 100], [200, 300]], dtype=np.uint16))
        lo, hi = compute_intensity_limits(scan, 0, 100)
        assert (lo, hi) == (0.0, 300.0)

    def test_random_images_match_sort_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            pixels = rng.integers(0, 65535, size=(20, 30)).astype(np.uint16)
            scan = make_scan(pixels)
            lo, hi = compute_intensity_limits(scan, 2.5, 97.5)
            assert lo == pytest.approx(percentile_by_sorting(pixels, 2.5))
            assert hi == pytest.approx(percentile_by_sorting(pixels, 97.5))

    def test_bad_percentile_order(self):
        scan = make_scan(np.arange(100, dtype=np.uint16).reshape(10, 10))
        with pytest.raises(ValueError):
            compute_intensity_limits(scan, 99, 1)


class TestStretchContrast:
    def test_limits_map_to_unit_interval(self):
        scan = make_scan(np.array([[100, 900]], dtype=np.uint16))
        img = stretch_contrast(scan, 100, 900)
        assert img.pixels[0, 0] == 0.0
        assert img.pixels[0, 1] == 1.0

    def test_formula_midpoint(self):
        scan = make_scan(np.array([[250]], dtype=np.uint16))
        img = stretch_contrast(scan, 0, 1000)
        assert img.pixels[0, 0] == pytest.approx(0.25)

    def test_clamped_to_unit_interval(self):
        scan = make_scan(np.array([[0, 65535]], dtype=np.uint16))
        img = stretch_contrast(scan, 1000, 2000)
        assert img.pixels.min() >= 0.0
        assert img.pixels.max() <= 1.0

    def test_monotone_in_intensity(self):
        values = np.arange(0, 4096, 16, dtype=np.uint16)
        scan = make_scan(values.reshape(1, -1))
        img = stretch_contrast(scan, 500, 3000)
        diffs = np.diff(img.pixels[0])
        assert (diffs >= 0).all()


class TestDownscale:
    def test_paper_shape(self):
        img = NormalizedImage(np.zeros((3600, 5760), dtype=np.float32))
        out = downscale(img, 0.5)
        assert out.pixels.shape == (1800, 2880)
        assert out.scale_factor == 0.5

    def test_identity_factor(self):
        pixels = np.random.default_rng(0).random((30, 40)).astype(np.float32)
        out = downscale(NormalizedImage(pixels), 1.0)
        assert np.array_equal(out.pixels, pixels)

    def test_constant_image_stays_constant(self):
        img = NormalizedImage(np.full((64, 64), 0.5, dtype=np.float32))
        out = downscale(img, 0.5)
        assert out.pixels.shape == (32, 32)
        assert np.allclose(out.pixels, 0.5, atol=1e-6)

    def test_output_clamped(self):
        rng = np.random.default_rng(3)
        img = NormalizedImage(rng.random((50, 50)).astype(np.float32))
        out = downscale(img, 0.37)
        assert out.pixels.min() >= 0.0
        assert out.pixels.max() <= 1.0


class TestSegmentForeground:
    def test_all_white_empty_mask(self):
        img = NormalizedImage(np.ones((16, 16), dtype=np.float32))
        mask = segment_foreground(img, blur_sigma=2.0, threshold=0.5)
        assert not mask.bits.any()

    def test_all_dark_full_mask(self):
        img = NormalizedImage(np.zeros((16, 16), dtype=np.float32))
        mask = segment_foreground(img, blur_sigma=2.0, threshold=0.5)
        assert mask.bits.all()

    def test_sigma_zero_is_plain_threshold(self):
        pixels = np.zeros((10, 10), dtype=np.float32)
        pixels[:, 5:] = 1.0
        mask = segment_foreground(NormalizedImage(pixels), 0.0, 0.5)
        assert np.array_equal(mask.bits, pixels < 0.5)

    def test_sigma_zero_matches_random_threshold_oracle(self):
        rng = np.random.default_rng(11)
        pixels = rng.random((20, 20)).astype(np.float32)
        mask = segment_foreground(NormalizedImage(pixels), 0.0, 0.3)
        assert np.array_equal(mask.bits, pixels < 0.3)

    def test_color_image_uses_channel_mean(self):
        pixels = np.zeros((4, 4, 3), dtype=np.float32)
        pixels[..., 0] = 1.0  # mean 1/3 < 0.5 -> foreground
        mask = segment_foreground(NormalizedImage(pixels), 0.0, 0.5)
        assert mask.bits.all()


class TestPatchGrid:
    def test_all_foreground(self):
        mask = ForegroundMask(np.ones((100, 100), dtype=bool))
        spec = PatchSpec(patch_size=50, stride=25)
        grid = extract_patch_grid(mask, spec)
        assert all(g == GATE_FG for _, _, g in grid.entries)

    def test_all_background(self):
        mask = ForegroundMask(np.zeros((100, 100), dtype=bool))
        spec = PatchSpec(patch_size=50, stride=25)
        grid = extract_patch_grid(mask, spec)
        assert all(g == GATE_BG for _, _, g in grid.entries)

    def test_gate_thresholds_from_ratios(self):
        spec = PatchSpec(patch_size=500, stride=500)
        assert spec.fg_threshold == pytest.approx(2.0 / 3.0)
        assert spec.bg_threshold == pytest.approx(1.0 / 101.0)

    def test_fraction_oracle_gates(self):
        # 0.8 fraction >= 2/3 -> foreground
        bits = np.zeros((500, 500), dtype=bool)
        bits[:400, :] = True
        assert bits.sum() == 200_000
        grid = extract_patch_grid(ForegroundMask(bits),
                                  PatchSpec(patch_size=500, stride=500))
        assert grid.entries == [(0, 0, GATE_FG)]

    def test_between_gates_is_skipped(self):
        bits = np.zeros((100, 100), dtype=bool)
        bits[:30, :] = True  # fraction 0.3, between 1/101 and 2/3
        grid = extract_patch_grid(ForegroundMask(bits),
                                  PatchSpec(patch_size=100, stride=100))
        assert grid.entries == [(0, 0, GATE_SKIP)]

    def test_cardinality_formula(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            h = int(rng.integers(30, 90))
            w = int(rng.integers(30, 90))
            p = int(rng.integers(10, 30))
            t = int(rng.integers(1, p + 1))
            mask = ForegroundMask(np.ones((h, w), dtype=bool))
            grid = extract_patch_grid(mask, PatchSpec(patch_size=p, stride=t))
            expected = ((h - p) // t + 1) * ((w - p) // t + 1)
            assert len(grid.entries) == expected
            # every placement is fully inside
            assert all(r + p <= h and c + p <= w
                       for r, c, _ in grid.entries)

    def test_too_small_image(self):
        mask = ForegroundMask(np.ones((40, 40), dtype=bool))
        with pytest.raises(ImageTooSmall):
            extract_patch_grid(mask, PatchSpec(patch_size=50, stride=25))

    def test_gates_partition(self):
        rng = np.random.default_rng(9)
        bits = rng.random((120, 120)) < 0.5
        grid = extract_patch_grid(ForegroundMask(bits),
                                  PatchSpec(patch_size=40, stride=20))
        for _, _, gate in grid.entries:
            assert gate in (GATE_FG, GATE_BG, GATE_SKIP)

    def test_single_pixel_flip_changes_only_covering_patches(self):
        rng = np.random.default_rng(13)
        bits = rng.random((80, 80)) < 0.6
        spec = PatchSpec(patch_size=40, stride=20)
        before = extract_patch_grid(ForegroundMask(bits), spec).entries
        flipped = bits.copy()
        flipped[50, 50] = not flipped[50, 50]
        after = extract_patch_grid(ForegroundMask(flipped), spec).entries
        for (r, c, g1), (_, _, g2) in zip(before, after):
            covers = r <= 50 < r + 40 and c <= 50 < c + 40
            if not covers:
                assert g1 == g2

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            PatchSpec(patch_size=10, stride=0)
        with pytest.raises(ValueError):
            PatchSpec(patch_size=10, stride=5, fg_min_ratio=0.005,
                      bg_max_ratio=0.01)


class TestAugmentation:
    def setup_method(self):
        rng = np.random.default_rng(21)
        self.patch = rng.random((32, 32))

    def test_six_variants_same_shape(self):
        variants = augment_patch(self.patch, seed=0)
        assert len(variants) == 6
        assert all(v.shape == self.patch.shape for v in variants)

    def test_rotation_and_mirror_involutions(self):
        rot180 = augment_patch(self.patch, 0)[2]
        assert np.array_equal(np.rot90(rot180, 2), self.patch)
        mirror = augment_patch(self.patch, 0)[4]
        assert np.array_equal(np.fliplr(mirror), self.patch)

    def test_non_noise_variants_preserve_multiset(self):
        variants = augment_patch(self.patch, 0)
        base = np.sort(self.patch.ravel())
        for v in variants[:5]:
            assert np.array_equal(np.sort(v.ravel()), base)

    def test_noise_deterministic_per_seed(self):
        first = augment_patch(self.patch, seed=42)[5]
        second = augment_patch(self.patch, seed=42)[5]
        assert np.array_equal(first, second)
        other = augment_patch(self.patch, seed=43)[5]
        assert not np.array_equal(first, other)

    def test_noise_clamped(self):
        edge = np.ones((8, 8))
        noisy = augment_patch(edge, 1)[5]
        assert noisy.max() <= 1.0
        assert noisy.min() >= 0.0

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            augment_patch(np.zeros((4, 8)), 0)
