"""Deterministic planted-pattern benchmark with simulated gaze and boxes.

Each image is noisy gray background plus, per independently-present class, a
small zero-mean oriented texture motif planted at a random location. The
motif extent is the ground-truth ROI: annotated images carry exact bounding
boxes and a simulated fixation log whose dwells cluster on the ROIs (plus a
couple of short distractor glances elsewhere). Everything derives from the
master seed via per-image seed sequences, so output is independent of worker
count and reproducible byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ChecksumError, FormatError, InputError
from .rasterizer import (
    BoundingBox,
    FixationRecord,
    load_bbox_file,
    load_fixation_log,
    load_map_pgm,
    save_bbox_file,
    save_fixation_log,
)
from .trainer import DatasetSplit

_IMAGE_STREAM = 0x696D6167
VAL_FRACTION = 0.10
TEST_FRACTION = 0.10

# stripe orientations (di, dj) for successive classes
_ORIENTATIONS = ((0, 1), (1, 0), (1, 1), (1, -1), (1, 2), (2, 1), (2, -1), (1, -2))


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    classes: int = 4
    motif_size: int = 10
    contrast: float = 0.35
    noise_sigma: float = 0.25
    prevalence: float = 0.3
    base_size: int = 5000
    annotated_size: int = 300
    fixations_per_class: int = 3
    dwell_range: tuple[float, float] = (0.2, 0.8)
    jitter_sigma: float = 3.0
    distractors: int = 2
    glance_range: tuple[float, float] = (0.1, 0.3)
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise InputError("need at least 2 classes")
        if self.motif_size > self.image_size:
            raise InputError(
                f"motif {self.motif_size} larger than image {self.image_size}"
            )
        if self.annotated_size > self.base_size:
            raise InputError("annotated subset cannot exceed the base set")
        if not 0.0 < self.prevalence <= 1.0:
            raise InputError("prevalence must be in (0, 1]")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["dwell_range"] = list(self.dwell_range)
        d["glance_range"] = list(self.glance_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["dwell_range"] = tuple(d["dwell_range"])
        d["glance_range"] = tuple(d["glance_range"])
        return cls(**d)


def class_motifs(spec: SynthSpec) -> list[np.ndarray]:
    """Zero-mean oriented stripe motifs, one per class, pairwise distinct."""
    if spec.classes > len(_ORIENTATIONS):
        raise InputError(f"at most {len(_ORIENTATIONS)} classes supported")
    m = spec.motif_size
    idx = np.arange(m)
    motifs = []
    for k in range(spec.classes):
        a, b = _ORIENTATIONS[k]
        phase = (a * idx[:, None] + b * idx[None, :]) % 4
        raw = np.where(phase < 2, 1.0, -1.0)
        motifs.append(raw - raw.mean())
    return motifs


def _boxes_overlap(a, b) -> bool:
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def _generate_image(spec: SynthSpec, motifs, index: int):
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), _IMAGE_STREAM, index]))
    S, m = spec.image_size, spec.motif_size
    labels = (rng.random(spec.classes) < spec.prevalence).astype(np.float64)
    img = np.full((S, S), 0.5)
    rois: list[tuple[int, int, int, int]] = []  # (row0, col0, row1, col1)
    roi_class: list[int] = []
    for k in np.flatnonzero(labels):
        placed = None
        for _ in range(100):
            r, c = (int(v) for v in rng.integers(0, S - m + 1, size=2))
            cand = (r, c, r + m - 1, c + m - 1)
            if not any(_boxes_overlap(cand, other) for other in rois):
                placed = cand
                break
        if placed is None:
            placed = cand  # give up on separation, allow overlap
        rois.append(placed)
        roi_class.append(int(k))
        img[placed[0] : placed[2] + 1, placed[1] : placed[3] + 1] += spec.contrast * motifs[k]
    img += spec.noise_sigma * rng.standard_normal((S, S))
    img = np.clip(img, 0.0, 1.0)
    img = np.rint(img * 255.0) / 255.0  # live on the 8-bit export grid

    fixations: list[FixationRecord] = []
    boxes: list[BoundingBox] = []
    if index < spec.annotated_size:
        for roi, k in zip(rois, roi_class):
            cy = (roi[0] + roi[2]) / 2.0
            cx = (roi[1] + roi[3]) / 2.0
            for _ in range(spec.fixations_per_class):
                jitter = rng.normal(0.0, spec.jitter_sigma, size=2)
                y = int(np.clip(np.rint(cy + jitter[0]), 0, S - 1))
                x = int(np.clip(np.rint(cx + jitter[1]), 0, S - 1))
                dur = float(rng.uniform(*spec.dwell_range))
                fixations.append(FixationRecord(x, y, dur))
            boxes.append(BoundingBox(roi[1], roi[0], roi[3], roi[2], k))
        for _ in range(spec.distractors):
            x, y = (int(v) for v in rng.integers(0, S, size=2))
            fixations.append(FixationRecord(x, y, float(rng.uniform(*spec.glance_range))))
    return img, labels, fixations, boxes


def generate(spec: SynthSpec, workers: int = 1) -> DatasetSplit:
    """Build the full dataset split; deterministic in the spec alone."""
    motifs = class_motifs(spec)
    N = spec.base_size
    n_val = int(round(VAL_FRACTION * N))
    n_test = int(round(TEST_FRACTION * N))
    n_train = N - n_val - n_test
    if spec.annotated_size > n_train:
        raise InputError(
            f"annotated subset ({spec.annotated_size}) exceeds training carve-out ({n_train})"
        )
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: _generate_image(spec, motifs, i), range(N)))
    else:
        results = [_generate_image(spec, motifs, i) for i in range(N)]
    images = np.stack([r[0] for r in results])[:, None, :, :]
    labels = np.stack([r[1] for r in results])
    fixations = {i: r[2] for i, r in enumerate(results) if i < spec.annotated_size}
    boxes = {i: r[3] for i, r in enumerate(results) if i < spec.annotated_size}
    return DatasetSplit(
        images=images,
        labels=labels,
        train_ids=np.arange(0, n_train),
        val_ids=np.arange(n_train, n_train + n_val),
        test_ids=np.arange(n_train + n_val, N),
        annotated_ids=np.arange(0, spec.annotated_size),
        fixations=fixations,
        boxes=boxes,
    )


# ---------------------------------------------------------------------------
# matched-filter baseline (independent learnability oracle)


def matched_filter_scores(images: np.ndarray, spec: SynthSpec) -> np.ndarray:
    """Max cross-correlation of each class motif over each image."""
    motifs = class_motifs(spec)
    imgs = images[:, 0] if images.ndim == 4 else images
    m = spec.motif_size
    windows_shape = (m, m)
    scores = np.empty((imgs.shape[0], spec.classes))
    flat_motifs = np.stack([mo.reshape(-1) for mo in motifs])  # (K, m*m)
    for i, img in enumerate(imgs):
        win = np.lib.stride_tricks.sliding_window_view(img, windows_shape)
        cols = win.reshape(-1, m * m)
        resp = cols @ flat_motifs.T  # (positions, K)
        scores[i] = resp.max(axis=0)
    return scores


# ---------------------------------------------------------------------------
# dataset archive


def _write_pgm(path, values: np.ndarray) -> None:
    data = np.rint(values * 255.0).astype(np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _archive_checksum(root, rel_paths) -> str:
    h = hashlib.sha256()
    for rel in sorted(rel_paths):
        h.update(rel.encode("utf-8"))
        h.update(bytes.fromhex(_file_sha256(os.path.join(root, rel))))
    return h.hexdigest()


def export(split: DatasetSplit, out_dir, spec: SynthSpec) -> None:
    """Write images as PGM, labels CSV, per-image gaze/bbox files, manifest."""
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "gaze", "bbox"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    rel_paths = []
    N, _, H, W = split.images.shape
    for i in range(N):
        rel = f"images/{i:06d}.pgm"
        _write_pgm(os.path.join(out_dir, rel), split.images[i, 0])
        rel_paths.append(rel)
    K = split.labels.shape[1]
    header = "image_id," + ",".join(f"l{k}" for k in range(K))
    lines = [header]
    for i in range(N):
        bits = ",".join(str(int(v)) for v in split.labels[i])
        lines.append(f"{i:06d},{bits}")
    with open(os.path.join(out_dir, "labels.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    rel_paths.append("labels.csv")
    for i in sorted(split.fixations):
        rel = f"gaze/{i:06d}.csv"
        save_fixation_log(split.fixations[i], os.path.join(out_dir, rel))
        rel_paths.append(rel)
    for i in sorted(split.boxes):
        rel = f"bbox/{i:06d}.json"
        save_bbox_file(split.boxes[i], os.path.join(out_dir, rel))
        rel_paths.append(rel)
    manifest = {
        "format_version": 1,
        "spec": spec.to_dict(),
        "splits": {
            "train": [int(v) for v in split.train_ids],
            "val": [int(v) for v in split.val_ids],
            "test": [int(v) for v in split.test_ids],
            "annotated": [int(v) for v in split.annotated_ids],
        },
        "checksum": _archive_checksum(out_dir, rel_paths),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_archive(in_dir) -> tuple[DatasetSplit, SynthSpec]:
    """Read a dataset archive back, refusing any checksum mismatch."""
    manifest_path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FormatError(f"{in_dir}: missing manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != 1:
        raise FormatError(f"{in_dir}: unsupported archive version")
    spec = SynthSpec.from_dict(manifest["spec"])
    N = spec.base_size
    rel_paths = [f"images/{i:06d}.pgm" for i in range(N)] + ["labels.csv"]
    annotated = manifest["splits"]["annotated"]
    rel_paths += [f"gaze/{i:06d}.csv" for i in annotated]
    rel_paths += [f"bbox/{i:06d}.json" for i in annotated]
    actual = _archive_checksum(in_dir, rel_paths)
    if actual != manifest["checksum"]:
        raise ChecksumError(f"{in_dir}: archive checksum mismatch")
    images = np.empty((N, 1, spec.image_size, spec.image_size))
    for i in range(N):
        amap = load_map_pgm(os.path.join(in_dir, f"images/{i:06d}.pgm"))
        images[i, 0] = amap.values
    labels = np.zeros((N, spec.classes))
    with open(os.path.join(in_dir, "labels.csv"), "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != spec.classes + 1:
            raise FormatError(f"labels.csv: line {n}: expected {spec.classes + 1} fields")
        labels[int(parts[0])] = [float(int(p)) for p in parts[1:]]
    fixations = {
        int(i): load_fixation_log(os.path.join(in_dir, f"gaze/{i:06d}.csv")) for i in annotated
    }
    boxes = {int(i): load_bbox_file(os.path.join(in_dir, f"bbox/{i:06d}.json")) for i in annotated}
    split = DatasetSplit(
        images=images,
        labels=labels,
        train_ids=np.array(manifest["splits"]["train"]),
        val_ids=np.array(manifest["splits"]["val"]),
        test_ids=np.array(manifest["splits"]["test"]),
        annotated_ids=np.array(annotated),
        fixations=fixations,
        boxes=boxes,
    )
    return split, spec
