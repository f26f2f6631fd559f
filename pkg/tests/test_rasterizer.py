"""Rasterizer: dense-formula oracles, normalization/bounds properties, and
the fixation/bbox/PGM file formats."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinf.errors import FormatError, InputError
from pinf.rasterizer import (
    AnnotationMap,
    BoundingBox,
    FixationRecord,
    RasterConfig,
    load_bbox_file,
    load_fixation_log,
    load_map_pgm,
    rasterize_bboxes,
    rasterize_gaze,
    save_bbox_file,
    save_fixation_log,
    save_map_pgm,
)


def gaze_oracle(fixations, dims, cfg):
    """Direct per-pixel evaluation of the truncated-Gaussian sum."""
    H, W = dims
    acc = np.zeros((H, W))
    ys, xs = np.mgrid[0:H, 0:W]
    for f in fixations:
        sigma = cfg.gaze_sigma_multiplier * f.duration_s
        radius = cfg.gaussian_truncation * sigma
        r2 = (ys - f.y_px) ** 2.0 + (xs - f.x_px) ** 2.0
        g = np.exp(-r2 / (2.0 * sigma * sigma))
        g[r2 > radius * radius] = 0.0
        acc += g
    m = acc.max()
    return acc / m if m > 0 else acc


def bbox_oracle(boxes, dims, cfg):
    """Per-pixel border-renormalized convolution of the union mask."""
    H, W = dims
    if not boxes:
        return np.zeros((H, W))
    mask = np.zeros((H, W))
    for b in boxes:
        mask[b.y0 : b.y1 + 1, b.x0 : b.x1 + 1] = 1.0
    sigma = cfg.bbox_edge_sigma
    radius = cfg.gaussian_truncation * sigma
    r = int(math.floor(radius))
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            num = den = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    if di * di + dj * dj > radius * radius:
                        continue
                    kv = math.exp(-(di * di + dj * dj) / (2.0 * sigma * sigma))
                    ii, jj = i + di, j + dj
                    den += kv if 0 <= ii < H and 0 <= jj < W else 0.0
                    if 0 <= ii < H and 0 <= jj < W:
                        num += kv * mask[ii, jj]
            out[i, j] = num / den
    m = out.max()
    return out / m if m > 0 else out


class TestRasterizeGaze:
    def test_empty_list_all_zero(self):
        amap = rasterize_gaze([], (64, 64))
        assert amap.values.shape == (64, 64)
        assert not amap.values.any()

    def test_single_fixation_formula(self):
        amap = rasterize_gaze([FixationRecord(32, 32, 0.5)], (64, 64))
        # sigma = 10 px/s * 0.5 s = 5 px
        assert amap.values[32, 32] == 1.0
        assert amap.values[32, 37] == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_duplicate_fixations_cancel_under_normalization(self):
        f = FixationRecord(10, 20, 0.4)
        one = rasterize_gaze([f], (48, 48))
        two = rasterize_gaze([f, f], (48, 48))
        assert np.array_equal(one.values, two.values)

    def test_out_of_bounds_names_record(self):
        with pytest.raises(InputError, match="fixation 1"):
            rasterize_gaze([FixationRecord(1, 1, 0.2), FixationRecord(99, 1, 0.2)], (32, 32))

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(5)
        cfg = RasterConfig()
        for _ in range(25):
            H, W = int(rng.integers(16, 49)), int(rng.integers(16, 49))
            fixations = [
                FixationRecord(
                    int(rng.integers(0, W)), int(rng.integers(0, H)), float(rng.uniform(0.05, 0.6))
                )
                for _ in range(int(rng.integers(1, 6)))
            ]
            got = rasterize_gaze(fixations, (H, W), cfg)
            np.testing.assert_allclose(got.values, gaze_oracle(fixations, (H, W), cfg), atol=1e-10)

    def test_permutation_invariance_bitwise(self):
        rng = np.random.default_rng(6)
        fixations = [
            FixationRecord(int(rng.integers(0, 40)), int(rng.integers(0, 40)), float(rng.uniform(0.1, 0.8)))
            for _ in range(6)
        ]
        a = rasterize_gaze(fixations, (40, 40))
        b = rasterize_gaze(list(reversed(fixations)), (40, 40))
        assert np.array_equal(a.values, b.values)

    def test_duration_multiplier_tradeoff_bitwise(self):
        fixations = [FixationRecord(12, 9, 0.3), FixationRecord(30, 25, 0.6)]
        doubled = [FixationRecord(f.x_px, f.y_px, 2 * f.duration_s) for f in fixations]
        a = rasterize_gaze(fixations, (48, 48), RasterConfig(gaze_sigma_multiplier=10.0))
        b = rasterize_gaze(doubled, (48, 48), RasterConfig(gaze_sigma_multiplier=5.0))
        assert np.array_equal(a.values, b.values)


class TestRasterizeBboxes:
    def test_full_frame_box_is_all_ones(self):
        amap = rasterize_bboxes([BoundingBox(0, 0, 63, 63, 0)], (64, 64))
        assert np.array_equal(amap.values, np.ones((64, 64)))

    def test_empty_list_all_zero(self):
        assert not rasterize_bboxes([], (32, 32)).values.any()

    def test_centered_box_profile_and_oracle(self):
        boxes = [BoundingBox(22, 22, 41, 41, 0)]
        amap = rasterize_bboxes(boxes, (64, 64))
        assert amap.values.max() == 1.0
        assert amap.values[32, 32] == pytest.approx(1.0, abs=1e-12)
        assert amap.values[1, 1] < 0.01
        oracle = bbox_oracle(boxes, (64, 64), RasterConfig())
        np.testing.assert_allclose(amap.values, oracle, atol=1e-10)

    def test_matches_dense_oracle_random(self):
        rng = np.random.default_rng(7)
        cfg = RasterConfig(bbox_edge_sigma=1.5, gaussian_truncation=4.0)
        for _ in range(10):
            H = W = int(rng.integers(14, 25))
            boxes = []
            for _ in range(int(rng.integers(1, 4))):
                x0, y0 = int(rng.integers(0, W - 3)), int(rng.integers(0, H - 3))
                boxes.append(
                    BoundingBox(
                        x0, y0,
                        int(rng.integers(x0, W)), int(rng.integers(y0, H)),
                        0,
                    )
                )
            got = rasterize_bboxes(boxes, (H, W), cfg)
            np.testing.assert_allclose(got.values, bbox_oracle(boxes, (H, W), cfg), atol=1e-10)

    def test_deep_interior_is_one(self):
        # interior points more than 4*sigma from every box edge reach 1
        cfg = RasterConfig(bbox_edge_sigma=2.0)
        amap = rasterize_bboxes([BoundingBox(4, 4, 43, 43, 0)], (48, 48), cfg)
        interior = amap.values[13:35, 13:35]
        np.testing.assert_allclose(interior, 1.0, atol=1e-6)

    def test_box_outside_map_rejected(self):
        with pytest.raises(InputError):
            rasterize_bboxes([BoundingBox(0, 0, 40, 40, 0)], (32, 32))

    def test_degenerate_box_rejected(self):
        with pytest.raises(InputError):
            BoundingBox(5, 5, 4, 9, 0)


class TestMapProperties:
    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_gaze_bounds_and_peak(self, seed):
        rng = np.random.default_rng(seed)
        H = W = int(rng.integers(12, 40))
        n = int(rng.integers(0, 5))
        fixations = [
            FixationRecord(int(rng.integers(0, W)), int(rng.integers(0, H)), float(rng.uniform(0.05, 0.9)))
            for _ in range(n)
        ]
        amap = rasterize_gaze(fixations, (H, W))
        assert amap.values.min() >= 0.0 and amap.values.max() <= 1.0
        if n:
            assert amap.values.max() == 1.0
        else:
            assert not amap.values.any()


class TestFixationLogIO:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "fx.csv"
        records = [FixationRecord(32, 40, 0.75), FixationRecord(1, 2, 0.125)]
        save_fixation_log(records, path)
        assert load_fixation_log(path) == records

    def test_direct_field_mapping(self, tmp_path):
        path = tmp_path / "fx.csv"
        path.write_text("x,y,duration_s\n32,40,0.75\n")
        assert load_fixation_log(path) == [FixationRecord(32, 40, 0.75)]

    def test_malformed_line_names_line(self, tmp_path):
        path = tmp_path / "fx.csv"
        path.write_text("x,y,duration_s\n32,,0.75\n")
        with pytest.raises(FormatError, match="line 2"):
            load_fixation_log(path)

    def test_duplicate_header_rejected(self, tmp_path):
        path = tmp_path / "fx.csv"
        path.write_text("x,y,duration_s\n1,2,0.5\nx,y,duration_s\n")
        with pytest.raises(FormatError, match="duplicate header"):
            load_fixation_log(path)

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "fx.csv"
        path.write_text("1,2,0.5\n")
        with pytest.raises(FormatError, match="line 1"):
            load_fixation_log(path)

    def test_nonpositive_duration_rejected(self, tmp_path):
        path = tmp_path / "fx.csv"
        path.write_text("x,y,duration_s\n1,2,0\n")
        with pytest.raises(FormatError, match="line 2"):
            load_fixation_log(path)


class TestBboxIO:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "b.json"
        boxes = [BoundingBox(1, 2, 5, 9, 3), BoundingBox(0, 0, 0, 0, 1)]
        save_bbox_file(boxes, path)
        assert load_bbox_file(path) == boxes

    def test_non_integer_field_rejected(self, tmp_path):
        path = tmp_path / "b.json"
        path.write_text('[{"x0": 1.5, "y0": 0, "x1": 3, "y1": 3, "label": 0}]')
        with pytest.raises(FormatError, match="x0"):
            load_bbox_file(path)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "b.json"
        path.write_text('[{"x0": 1, "y0": 0, "x1": 3, "label": 0}]')
        with pytest.raises(FormatError, match="y1"):
            load_bbox_file(path)

    def test_json_error_carries_line(self, tmp_path):
        path = tmp_path / "b.json"
        path.write_text("[{]")
        with pytest.raises(FormatError, match="line"):
            load_bbox_file(path)


class TestPgm:
    def test_round_trip_within_half_step(self, tmp_path):
        rng = np.random.default_rng(3)
        values = rng.random((17, 23))
        amap = AnnotationMap(23, 17, values)
        path = tmp_path / "m.pgm"
        save_map_pgm(amap, path)
        back = load_map_pgm(path)
        assert back.width == 23 and back.height == 17
        assert np.abs(back.values - values).max() <= 1.0 / 510.0 + 1e-12

    def test_header_layout(self, tmp_path):
        amap = AnnotationMap(3, 2, np.zeros((2, 3)))
        path = tmp_path / "m.pgm"
        save_map_pgm(amap, path)
        blob = path.read_bytes()
        assert blob == b"P5\n3 2\n255\n" + bytes(6)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
        with pytest.raises(FormatError, match="pixels"):
            load_map_pgm(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P6\n1 1\n255\n\x00")
        with pytest.raises(FormatError, match="magic"):
            load_map_pgm(path)
