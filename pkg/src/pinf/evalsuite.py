"""Classification metrics, Grad-CAM extraction, and CAM/annotation deltas.

macro-AUC uses the Mann-Whitney rank statistic with ties counted half; F1 is
macro-averaged at a fixed probability threshold. Grad-CAM weights each
feature-map channel by the spatial mean of the class logit's gradient, and
the similarity report compares CAMs against annotation maps before and after
stage-2 fine-tuning, as percent changes oriented so positive means the CAM
moved toward the annotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import DimensionError, InputError
from .model import VClassifier
from .rasterizer import AnnotationMap, quantize_to_bytes

DELTA_EPS = 1e-12
DICE_THRESHOLD = 0.5


@dataclass
class CamMap:
    width: int
    height: int
    values: np.ndarray  # (height, width) in [0, 1], peak-normalized unless all-zero

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width):
            raise InputError(f"CAM shape {self.values.shape} != ({self.height}, {self.width})")


@dataclass
class CamSimilarityReport:
    mse_base: float
    mse_sub: float
    dice_base: float
    dice_sub: float
    delta_mse_pct: float
    delta_dice_pct: float


# ---------------------------------------------------------------------------
# ranking metrics


def _auc_binary(scores: np.ndarray, labels: np.ndarray) -> float | None:
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    sorted_scores = np.sort(scores)
    lo = np.searchsorted(sorted_scores, scores, side="left")
    hi = np.searchsorted(sorted_scores, scores, side="right")
    ranks = (lo + 1 + hi) / 2.0  # 1-based, ties share the average rank
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def per_class_auc(scores, labels) -> list[float | None]:
    """Per-class ROC-AUC; None where a class lacks positives or negatives."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 2:
        raise DimensionError(f"scores {s.shape} vs labels {y.shape}")
    return [_auc_binary(s[:, k], y[:, k]) for k in range(s.shape[1])]


def macro_auc(scores, labels) -> float:
    """Mean ROC-AUC over classes with at least one positive and one negative."""
    aucs = [a for a in per_class_auc(scores, labels) if a is not None]
    if not aucs:
        raise InputError("macro_auc: no class has both positives and negatives")
    return float(np.mean(aucs))


def _f1_binary(scores: np.ndarray, labels: np.ndarray, threshold: float) -> float:
    pred = scores >= threshold
    pos = labels == 1
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    fn = int((~pred & pos).sum())
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0  # nothing to find and nothing claimed
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def f1_macro(scores, labels, threshold: float = 0.5) -> float:
    """Macro-averaged F1 at a fixed probability threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 2:
        raise DimensionError(f"scores {s.shape} vs labels {y.shape}")
    return float(np.mean([_f1_binary(s[:, k], y[:, k], threshold) for k in range(s.shape[1])]))


# ---------------------------------------------------------------------------
# Grad-CAM


def bilinear_upsample(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation to (out_h, out_w)."""
    h, w = a.shape
    ys = np.linspace(0.0, h - 1.0, out_h) if h > 1 else np.zeros(out_h)
    xs = np.linspace(0.0, w - 1.0, out_w) if w > 1 else np.zeros(out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = a[np.ix_(y0, x0)] * (1 - fx) + a[np.ix_(y0, x1)] * fx
    bot = a[np.ix_(y1, x0)] * (1 - fx) + a[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def cam_channel_weights(model: VClassifier, x, class_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Spatial-mean gradients of the class logit w.r.t. the feature map.

    Returns (alpha[C], feat_map[C,h,w]) for a single image.
    """
    x4 = np.asarray(x, dtype=np.float64)
    if x4.ndim == 2:
        x4 = x4[None, None]
    elif x4.ndim == 3:
        x4 = x4[None]
    if x4.shape[0] != 1:
        raise InputError("grad_cam expects a single image")
    if not 0 <= class_index < model.cfg.label_count:
        raise InputError(f"class index {class_index} out of range")
    with dc.no_grad():
        feat_map, _ = model.encode(x4)
    fm = dc.Tensor(feat_map.data, requires_grad=True)
    logits = model.classify_from_feat_map(fm)
    target = dc.element(logits, (0, class_index))
    table = dc.backward(target, retain=(fm,))
    grad = table.get(fm)
    if grad is None:
        grad = np.zeros_like(fm.data)
    alpha = grad[0].mean(axis=(1, 2))
    return alpha, fm.data[0]


def grad_cam(model: VClassifier, x, class_index: int) -> CamMap:
    """Gradient-weighted class activation map, upsampled and peak-normalized."""
    alpha, fmap = cam_channel_weights(model, x, class_index)
    raw = np.maximum(np.tensordot(alpha, fmap, axes=(0, 0)), 0.0)
    size = model.cfg.image_size
    up = bilinear_upsample(raw, size, size)
    up = np.maximum(up, 0.0)
    peak = up.max()
    if peak > 0:
        up = up / peak
    return CamMap(size, size, up)


# ---------------------------------------------------------------------------
# CAM vs annotation similarity


def map_mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionError(f"mse: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def map_dice(a: np.ndarray, b: np.ndarray, threshold: float = DICE_THRESHOLD) -> float:
    if a.shape != b.shape:
        raise DimensionError(f"dice: {a.shape} vs {b.shape}")
    A = a >= threshold
    B = b >= threshold
    denom = int(A.sum()) + int(B.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((A & B).sum()) / denom


def improvement_pct(better_when_sub_higher: float, reference: float) -> float:
    """(a / max(b, eps) - 1) * 100, with equal values pinned to exactly 0."""
    if better_when_sub_higher == reference:
        return 0.0
    return (better_when_sub_higher / max(reference, DELTA_EPS) - 1.0) * 100.0


def cam_similarity_delta(
    c: AnnotationMap, cam_base: CamMap, cam_sub: CamMap
) -> CamSimilarityReport:
    """Percent changes of CAM/annotation similarity across the two stages.

    Positive delta_mse_pct means the stage-2 CAM has lower MSE against the
    annotation than the stage-1 CAM; positive delta_dice_pct means higher
    Dice. Raw similarity values are always included; identical raw values
    give exactly zero deltas.
    """
    if c.values.shape != cam_base.values.shape or c.values.shape != cam_sub.values.shape:
        raise DimensionError("annotation and CAM maps must share dimensions")
    mse_base = map_mse(c.values, cam_base.values)
    mse_sub = map_mse(c.values, cam_sub.values)
    dice_base = map_dice(c.values, cam_base.values)
    dice_sub = map_dice(c.values, cam_sub.values)
    return CamSimilarityReport(
        mse_base=mse_base,
        mse_sub=mse_sub,
        dice_base=dice_base,
        dice_sub=dice_sub,
        delta_mse_pct=improvement_pct(mse_base, mse_sub),
        delta_dice_pct=improvement_pct(dice_sub, dice_base),
    )


# ---------------------------------------------------------------------------
# batch evaluation


def _as_model(model_or_ckpt) -> VClassifier:
    if isinstance(model_or_ckpt, VClassifier):
        return model_or_ckpt
    return VClassifier(model_or_ckpt.model_cfg, model_or_ckpt.params)


def evaluate(model_or_ckpt, split, report_path=None, which: str = "test", cam_dir=None) -> dict:
    """Per-class and macro AUC/F1 on one split, optionally writing CSV + CAMs.

    CSV rows are "class_index,auc,f1" with a final "macro,<auc>,<f1>" row;
    skipped classes (no positives or no negatives) report auc as nan.
    """
    model = _as_model(model_or_ckpt)
    ids = {"train": split.train_ids, "val": split.val_ids, "test": split.test_ids}[which]
    images = split.images[ids]
    labels = split.labels[ids]
    probs = model.predict_proba(images)
    aucs = per_class_auc(probs, labels)
    f1s = [_f1_binary(probs[:, k], labels[:, k], 0.5) for k in range(labels.shape[1])]
    valid = [a for a in aucs if a is not None]
    if not valid:
        raise InputError("evaluate: no class has both positives and negatives")
    macro = float(np.mean(valid))
    macro_f1 = float(np.mean(f1s))
    if report_path is not None:
        lines = ["class_index,auc,f1"]
        for k, (a, f1) in enumerate(zip(aucs, f1s)):
            a_txt = repr(float(a)) if a is not None else "nan"
            lines.append(f"{k},{a_txt},{f1!r}")
        lines.append(f"macro,{macro!r},{macro_f1!r}")
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    if cam_dir is not None:
        _export_cams(model, images, ids, probs, cam_dir)
    return {"auc": macro, "f1": macro_f1, "per_class_auc": aucs, "per_class_f1": f1s}


def _export_cams(model, images, ids, probs, cam_dir) -> None:
    import os

    os.makedirs(cam_dir, exist_ok=True)
    for row, image_id in enumerate(ids):
        k = int(np.argmax(probs[row]))
        cam = grad_cam(model, images[row], k)
        data = quantize_to_bytes(cam.values)
        path = os.path.join(cam_dir, f"{int(image_id):06d}_class{k}.pgm")
        with open(path, "wb") as fh:
            fh.write(f"P5\n{cam.width} {cam.height}\n255\n".encode("ascii"))
            fh.write(data.tobytes())


def cam_similarity_rows(
    model_base: VClassifier,
    model_sub: VClassifier,
    split,
    annotation_source: str,
    raster_cfg,
) -> list[tuple[int, CamSimilarityReport]]:
    """Per annotated image, CAM similarity of both models to the annotation.

    CAMs are computed for each present label and their similarities averaged
    per image; images with no present label are skipped.
    """
    rows = []
    H = split.image_size
    for image_id in (int(i) for i in split.annotated_ids):
        present = np.flatnonzero(split.labels[image_id] == 1)
        if present.size == 0:
            continue
        cmap = AnnotationMap(H, H, split.annotation_map(image_id, annotation_source, raster_cfg))
        x = split.images[image_id]
        sims = {"mb": [], "ms": [], "db": [], "ds": []}
        for k in present:
            cam_b = grad_cam(model_base, x, int(k))
            cam_s = grad_cam(model_sub, x, int(k))
            sims["mb"].append(map_mse(cmap.values, cam_b.values))
            sims["ms"].append(map_mse(cmap.values, cam_s.values))
            sims["db"].append(map_dice(cmap.values, cam_b.values))
            sims["ds"].append(map_dice(cmap.values, cam_s.values))
        mse_base = float(np.mean(sims["mb"]))
        mse_sub = float(np.mean(sims["ms"]))
        dice_base = float(np.mean(sims["db"]))
        dice_sub = float(np.mean(sims["ds"]))
        rows.append(
            (
                image_id,
                CamSimilarityReport(
                    mse_base=mse_base,
                    mse_sub=mse_sub,
                    dice_base=dice_base,
                    dice_sub=dice_sub,
                    delta_mse_pct=improvement_pct(mse_base, mse_sub),
                    delta_dice_pct=improvement_pct(dice_sub, dice_base),
                ),
            )
        )
    return rows


def write_similarity_csv(rows, path) -> dict:
    """Write the per-image delta CSV; returns mean deltas."""
    header = "image_id,mse_base,mse_sub,dice_base,dice_sub,delta_mse_pct,delta_dice_pct"
    lines = [header]
    for image_id, r in rows:
        vals = (r.mse_base, r.mse_sub, r.dice_base, r.dice_sub, r.delta_mse_pct, r.delta_dice_pct)
        lines.append(f"{image_id:06d}," + ",".join(repr(float(v)) for v in vals))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if rows:
        return {
            "mean_delta_mse_pct": float(np.mean([r.delta_mse_pct for _, r in rows])),
            "mean_delta_dice_pct": float(np.mean([r.delta_dice_pct for _, r in rows])),
        }
    return {"mean_delta_mse_pct": float("nan"), "mean_delta_dice_pct": float("nan")}
