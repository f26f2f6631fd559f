"""Rasterize gaze fixation logs and bounding boxes into annotation maps.

A fixation contributes an unnormalized isotropic Gaussian whose sigma is
proportional to its dwell time; bounding boxes form a binary union mask whose
edges are Gaussian-smoothed. Both maps are peak-normalized so values span
[0, 1]. The module also owns the on-disk formats: fixation CSV, bbox JSON,
and binary PGM map export.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError

FIXATION_HEADER = "x,y,duration_s"


@dataclass(frozen=True)
class FixationRecord:
    x_px: int
    y_px: int
    duration_s: float

    def __post_init__(self):
        if self.duration_s <= 0:
            raise InputError(f"fixation duration must be > 0, got {self.duration_s}")


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int
    label_index: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise InputError(f"degenerate box ({self.x0},{self.y0})-({self.x1},{self.y1})")
        if min(self.x0, self.y0) < 0:
            raise InputError("box coordinates must be non-negative")


@dataclass
class AnnotationMap:
    width: int
    height: int
    values: np.ndarray  # (height, width) float64 in [0, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width):
            raise InputError(
                f"map values shape {self.values.shape} != ({self.height}, {self.width})"
            )
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise InputError("map values must lie in [0, 1]")


@dataclass(frozen=True)
class RasterConfig:
    gaze_sigma_multiplier: float = 10.0  # px per second of dwell
    bbox_edge_sigma: float = 5.0  # px
    gaussian_truncation: float = 4.0  # radius in sigma units

    def __post_init__(self):
        for name in ("gaze_sigma_multiplier", "bbox_edge_sigma", "gaussian_truncation"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be strictly positive")


def _peak_normalize(acc: np.ndarray) -> np.ndarray:
    m = acc.max() if acc.size else 0.0
    if m > 0.0:
        acc = acc / m
    return acc


def rasterize_gaze(
    fixations: list[FixationRecord], dims: tuple[int, int], cfg: RasterConfig = RasterConfig()
) -> AnnotationMap:
    """Sum per-fixation Gaussians (sigma = multiplier * duration) and peak-normalize.

    Each Gaussian is truncated at `gaussian_truncation * sigma` (circular).
    Fixations are accumulated in a canonical order so the result is invariant
    under permutation of the input list. An empty list yields an all-zero map.
    """
    H, W = dims
    for i, f in enumerate(fixations):
        if not (0 <= f.x_px < W and 0 <= f.y_px < H):
            raise InputError(f"fixation {i} at ({f.x_px},{f.y_px}) outside {W}x{H} map")
    acc = np.zeros((H, W), dtype=np.float64)
    for f in sorted(fixations, key=lambda r: (r.y_px, r.x_px, r.duration_s)):
        sigma = cfg.gaze_sigma_multiplier * f.duration_s
        radius = cfg.gaussian_truncation * sigma
        r = int(math.floor(radius))
        y0, y1 = max(0, f.y_px - r), min(H - 1, f.y_px + r)
        x0, x1 = max(0, f.x_px - r), min(W - 1, f.x_px + r)
        dy = np.arange(y0, y1 + 1, dtype=np.float64) - f.y_px
        dx = np.arange(x0, x1 + 1, dtype=np.float64) - f.x_px
        r2 = dy[:, None] ** 2 + dx[None, :] ** 2
        patch = np.exp(-r2 / (2.0 * sigma * sigma))
        patch[r2 > radius * radius] = 0.0
        acc[y0 : y1 + 1, x0 : x1 + 1] += patch
    return AnnotationMap(W, H, _peak_normalize(acc))


def rasterize_bboxes(
    boxes: list[BoundingBox], dims: tuple[int, int], cfg: RasterConfig = RasterConfig()
) -> AnnotationMap:
    """Union the box interiors, Gaussian-smooth the edges, peak-normalize.

    Smoothing uses a truncated kernel with border renormalization: the mask
    convolution is divided per-pixel by the kernel mass actually inside the
    image, so a box covering the whole frame stays an all-ones map. An empty
    list yields an all-zero map.
    """
    H, W = dims
    for i, b in enumerate(boxes):
        if b.x1 >= W or b.y1 >= H:
            raise InputError(f"box {i} ({b.x0},{b.y0})-({b.x1},{b.y1}) outside {W}x{H} map")
    if not boxes:
        return AnnotationMap(W, H, np.zeros((H, W), dtype=np.float64))
    mask = np.zeros((H, W), dtype=np.float64)
    for b in boxes:
        mask[b.y0 : b.y1 + 1, b.x0 : b.x1 + 1] = 1.0
    sigma = cfg.bbox_edge_sigma
    radius = cfg.gaussian_truncation * sigma
    r = int(math.floor(radius))
    num = np.zeros((H, W), dtype=np.float64)
    den = np.zeros((H, W), dtype=np.float64)
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            d2 = di * di + dj * dj
            if d2 > radius * radius:
                continue
            kv = math.exp(-d2 / (2.0 * sigma * sigma))
            i0, i1 = max(0, -di), min(H, H - di)
            j0, j1 = max(0, -dj), min(W, W - dj)
            if i0 >= i1 or j0 >= j1:
                continue
            num[i0:i1, j0:j1] += kv * mask[i0 + di : i1 + di, j0 + dj : j1 + dj]
            den[i0:i1, j0:j1] += kv
    return AnnotationMap(W, H, _peak_normalize(num / den))


# ---------------------------------------------------------------------------
# file formats


def load_fixation_log(path) -> list[FixationRecord]:
    """Parse a fixation CSV (header "x,y,duration_s", one record per line)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != FIXATION_HEADER:
        raise FormatError(f"{path}: line 1: expected header '{FIXATION_HEADER}'")
    records = []
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if line == FIXATION_HEADER:
            raise FormatError(f"{path}: line {n}: duplicate header")
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"{path}: line {n}: expected 3 fields, got {len(parts)}")
        try:
            x, y, dur = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise FormatError(f"{path}: line {n}: {exc}") from exc
        if dur <= 0:
            raise FormatError(f"{path}: line {n}: duration must be > 0")
        records.append(FixationRecord(x, y, dur))
    return records


def save_fixation_log(records: list[FixationRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(FIXATION_HEADER + "\n")
        for rec in records:
            fh.write(f"{rec.x_px},{rec.y_px},{rec.duration_s!r}\n")


def load_bbox_file(path) -> list[BoundingBox]:
    """Parse a bbox JSON array of {x0, y0, x1, y1, label} integer objects."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, list):
        raise FormatError(f"{path}: expected a JSON array of box objects")
    boxes = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise FormatError(f"{path}: box {i}: expected an object")
        fields = {}
        for key in ("x0", "y0", "x1", "y1", "label"):
            v = item.get(key)
            if not isinstance(v, int) or isinstance(v, bool):
                raise FormatError(f"{path}: box {i}: field '{key}' must be an integer")
            fields[key] = v
        try:
            boxes.append(
                BoundingBox(fields["x0"], fields["y0"], fields["x1"], fields["y1"], fields["label"])
            )
        except InputError as exc:
            raise FormatError(f"{path}: box {i}: {exc}") from exc
    return boxes


def save_bbox_file(boxes: list[BoundingBox], path) -> None:
    payload = [
        {"x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1, "label": b.label_index} for b in boxes
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")


def quantize_to_bytes(values: np.ndarray) -> np.ndarray:
    """[0,1] floats to 0..255 by round(v*255) (ties to even)."""
    return np.rint(np.asarray(values, dtype=np.float64) * 255.0).astype(np.uint8)


def save_map_pgm(amap: AnnotationMap, path) -> None:
    """Write a binary PGM (P5, maxval 255), row-major, top-left origin."""
    data = quantize_to_bytes(amap.values)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{amap.width} {amap.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_map_pgm(path) -> AnnotationMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (missing P5 magic)")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header: {exc}") from exc
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    data = blob[pos:]
    if len(data) != width * height:
        raise FormatError(f"{path}: expected {width * height} pixels, got {len(data)}")
    values = np.frombuffer(data, dtype=np.uint8).reshape(height, width) / 255.0
    return AnnotationMap(width, height, values)
