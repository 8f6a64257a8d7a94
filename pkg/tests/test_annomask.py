"""Annotation detection and removal, validated against synthetic overlays
with known ground truth."""

import os
import stat

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonomae import annomask as am
from sonomae import imgproc as ip
from sonomae import synthetic
from sonomae.rng import Rng


def gray_rgb(h, w, value=0.5):
    return np.full((h, w, 3), value, dtype=float)


class TestTextDetection:
    def test_glyph_row_covered(self):
        g = np.full((64, 64), 0.15)
        g[20:27, 10:40] = 0.9
        dets = am.detect_text_regions(g, min_confidence=0.5)
        assert dets
        mask = am.detections_to_mask(dets, g.shape)
        glyphs = np.zeros_like(g, dtype=bool)
        glyphs[20:27, 10:40] = True
        coverage = (mask & glyphs).sum() / glyphs.sum()
        assert coverage >= 0.8

    def test_blank_image_no_detections(self):
        assert am.detect_text_regions(np.full((32, 32), 0.5)) == []

    def test_bad_threshold(self):
        with pytest.raises(am.BadThreshold):
            am.detect_text_regions(np.full((8, 8), 0.5), min_confidence=1.1)

    def test_min_confidence_filters(self):
        g = np.full((64, 64), 0.15)
        g[20:27, 10:40] = 0.9

        def half_detector(_):
            return [am.TextDetection(bbox=(1, 1, 4, 4), confidence=0.4)]

        assert am.detect_text_regions(g, half_detector, min_confidence=0.5) == []
        assert len(am.detect_text_regions(g, half_detector, min_confidence=0.3)) == 1

    def test_bbox_clipped_to_bounds(self):
        def wild_detector(_):
            return [am.TextDetection(bbox=(-3, -2, 10, 5), confidence=0.9)]

        (d,) = am.detect_text_regions(np.zeros((8, 8)), wild_detector, 0.5)
        x, y, w, h = d.bbox
        assert x >= 0 and y >= 0 and x + w <= 8 and y + h <= 8


class TestSubprocessDetector:
    def test_external_contract(self, tmp_path):
        script = tmp_path / "fake_detector.sh"
        script.write_text("#!/bin/sh\nprintf '2\\t3\\t10\\t5\\t0.9\\tABC\\n'\n")
        script.chmod(script.stat().st_mode | stat.S_IEXEC)
        det = am.SubprocessTextDetector((str(script),))
        out = det(np.full((32, 32), 0.5))
        assert out == [am.TextDetection(bbox=(2, 3, 10, 5), confidence=0.9, text="ABC")]

    def test_unavailable_engine(self):
        with pytest.raises(am.DetectorUnavailable):
            am.SubprocessTextDetector(("definitely-not-a-real-binary-xyz",))


class TestColorMask:
    def test_grayscale_image_empty(self):
        img = ip.promote_rgb(Rng(0).random((24, 24)))
        assert not am.color_annotation_mask(img).any()

    def test_green_stroke_exact(self):
        img = gray_rgb(32, 32)
        img[10:14, 5:25] = [0.0, 1.0, 0.0]
        mask = am.color_annotation_mask(img, saturation_floor=0.35, k=3, seed=0)
        expected = np.zeros((32, 32), dtype=bool)
        expected[10:14, 5:25] = True
        assert np.array_equal(mask, expected)

    def test_two_hues_both_masked(self):
        img = gray_rgb(32, 32)
        img[4:8, 4:28] = [0.9, 0.05, 0.05]  # red stroke
        img[20:24, 4:28] = [0.9, 0.9, 0.05]  # yellow stroke
        expected = np.zeros((32, 32), dtype=bool)
        expected[4:8, 4:28] = True
        expected[20:24, 4:28] = True
        mask = am.color_annotation_mask(img, saturation_floor=0.35, k=2, seed=1)
        assert np.array_equal(mask, expected)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**20))
    def test_subset_of_candidates(self, seed):
        img = Rng(seed).random((16, 16, 3))
        floor = 0.5
        mask = am.color_annotation_mask(img, saturation_floor=floor, seed=seed)
        sat = ip.rgb_to_hsv(img)[..., 1]
        assert not (mask & (sat < floor)).any()

    def test_determinism(self):
        img = Rng(4).random((20, 20, 3))
        a = am.color_annotation_mask(img, seed=3)
        b = am.color_annotation_mask(img, seed=3)
        assert np.array_equal(a, b)


class TestGrayscaleMask:
    def test_constant_empty(self):
        assert not am.grayscale_annotation_mask(np.full((32, 32), 0.5), 0.05, 0.1).any()

    def test_thin_underline_covered(self):
        g = np.full((64, 64), 0.85)
        g[40, 12:52] = 0.05
        mask = am.grayscale_annotation_mask(g, 0.03, 0.06)
        line = np.zeros_like(g, dtype=bool)
        line[40, 12:52] = True
        assert (mask & line).sum() / line.sum() >= 0.9

    def test_large_contour_excluded(self):
        g = np.full((64, 64), 0.8)
        yy, xx = np.mgrid[0:64, 0:64]
        disk = (yy - 32) ** 2 + (xx - 32) ** 2 <= 20**2  # ~1257 px >> 2% of 4096
        g[disk] = 0.2
        mask = am.grayscale_annotation_mask(g, 0.03, 0.06, area_ceiling=0.02)
        assert (mask & disk).sum() / disk.sum() < 0.1

    def test_threshold_order(self):
        with pytest.raises(ip.BadThresholdOrder):
            am.grayscale_annotation_mask(np.zeros((8, 8)), 0.5, 0.1)


class TestFuseAndRefine:
    def test_three_empty_masks(self):
        z = np.zeros((8, 8), dtype=bool)
        assert not am.fuse_and_refine(z, z, z).any()

    def test_radius_zero_exact_union(self):
        rng = Rng(5)
        a = rng.random((12, 12)) > 0.8
        b = rng.random((12, 12)) > 0.8
        c = rng.random((12, 12)) > 0.8
        fused = am.fuse_and_refine(a, b, c, close_radius=0, open_radius=0, dilation_radius=0)
        assert np.array_equal(fused, a | b | c)

    def test_close_bridges_fragments(self):
        a = np.zeros((9, 9), dtype=bool)
        a[4, 2:4] = True
        a[4, 5:7] = True  # one-pixel gap at column 4
        z = np.zeros_like(a)
        fused = am.fuse_and_refine(a, z, z, close_radius=1, open_radius=0, dilation_radius=0)
        assert fused[4, 4]

    def test_dimension_mismatch(self):
        with pytest.raises(am.DimensionMismatch):
            am.fuse_and_refine(np.zeros((4, 4), bool), np.zeros((5, 4), bool), np.zeros((4, 4), bool))


class TestInpaint:
    def test_constant_fill(self):
        img = np.full((40, 40), 0.6)
        mask = np.zeros((40, 40), dtype=bool)
        mask[15:25, 15:25] = True
        out = am.inpaint_ns(img, mask)
        assert np.abs(out - 0.6).max() < 1e-3

    def test_ramp_fill_matches_analytic_plane(self):
        ramp = np.tile(np.linspace(0.0, 1.0, 40), (40, 1))
        mask = np.zeros((40, 40), dtype=bool)
        mask[16:24, 16:24] = True
        out = am.inpaint_ns(ramp, mask)
        assert np.abs(out - ramp)[mask].max() < 0.05

    def test_empty_mask_identity(self):
        img = Rng(6).random((16, 16))
        out = am.inpaint_ns(img, np.zeros((16, 16), dtype=bool))
        np.testing.assert_array_equal(out, img)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**20))
    def test_unmasked_pixels_bit_identical(self, seed):
        rng = Rng(seed)
        img = rng.random((24, 24, 3))
        mask = rng.random((24, 24)) > 0.8
        if mask.all() or not mask.any():
            return
        out = am.inpaint_ns(img, mask, am.InpaintConfig(iterations=40))
        assert np.array_equal(out[~mask], img[~mask])

    def test_maximum_principle_diffusion_dominant(self):
        rng = Rng(9)
        img = rng.random((32, 32))
        mask = np.zeros((32, 32), dtype=bool)
        mask[10:22, 8:26] = True
        cfg = am.InpaintConfig(iterations=500, dt=0.2, anisotropy_weight=0.0)
        out = am.inpaint_ns(img, mask, cfg)
        ring = ip.morph(mask, "dilate", 1) & ~mask
        lo, hi = img[ring].min(), img[ring].max()
        assert out[mask].min() >= lo - 1e-3
        assert out[mask].max() <= hi + 1e-3

    def test_all_masked_rejected(self):
        with pytest.raises(am.AllMasked):
            am.inpaint_ns(np.zeros((8, 8)), np.ones((8, 8), dtype=bool))

    def test_unstable_dt_rejected(self):
        with pytest.raises(ValueError):
            am.InpaintConfig(dt=0.3)


class TestCleanImage:
    def test_annotation_free_scan_untouched(self):
        scan = synthetic.ultrasound_like(96, Rng(12))
        cleaned, bundle = am.clean_image(scan)
        assert not bundle.fused.any()
        np.testing.assert_array_equal(cleaned, ip.promote_rgb(scan))

    def test_saturated_overlay_masked_and_removed(self):
        rng = Rng(13)
        scan = synthetic.ultrasound_like(96, rng)
        rgb = ip.promote_rgb(scan).copy()
        gt = synthetic.stamp_stroke(rgb, rng, thickness=6.0)
        cfg = am.CleanConfig(dilation_radius=1)
        cleaned, bundle = am.clean_image(rgb, cfg)
        inter = (bundle.fused & gt).sum()
        union = (bundle.fused | gt).sum()
        assert inter / union >= 0.5  # fused includes dilation margin
        # no saturated pixels survive inside the former overlay
        sat = ip.rgb_to_hsv(cleaned)[..., 1]
        assert not (sat[gt] > cfg.saturation_floor).any()

    def test_glyph_contrast_reduced(self):
        rng = Rng(14)
        scan = synthetic.ultrasound_like(96, rng)
        rgb = ip.promote_rgb(scan).copy()
        gt = synthetic.stamp_glyph_row(rgb, rng)
        cleaned, bundle = am.clean_image(rgb, am.CleanConfig(dilation_radius=1))
        lum_before = ip.luminance_lab(rgb)
        lum_after = ip.luminance_lab(cleaned)
        bg = float(np.median(lum_before[~gt]))
        contrast_before = np.abs(lum_before[gt] - bg).mean()
        contrast_after = np.abs(lum_after[gt] - bg).mean()
        assert contrast_after <= 0.5 * contrast_before

    def test_idempotent_on_own_output(self):
        rng = Rng(15)
        rgb, _ = synthetic.annotated_scan(96, rng)
        cleaned, _ = am.clean_image(rgb)
        _, second = am.clean_image(cleaned)
        assert second.fused.mean() <= 0.01

    def test_deterministic(self):
        rgb, _ = synthetic.annotated_scan(96, Rng(16))
        c1, b1 = am.clean_image(rgb)
        c2, b2 = am.clean_image(rgb)
        assert np.array_equal(c1, c2)
        assert np.array_equal(b1.fused, b2.fused)

    def test_stage_error_tagging(self):
        bad = np.full((4, 4, 3), 0.5)  # too small for the 8x8 CLAHE grid
        with pytest.raises(am.PipelineStageError) as err:
            am.clean_image(bad)
        assert err.value.stage == "clahe"

    def test_grayscale_input_promoted(self):
        scan = synthetic.ultrasound_like(96, Rng(17))
        cleaned, _ = am.clean_image(scan)
        assert cleaned.shape == (96, 96, 3)
