"""Two-stage optimization: Adam, freeze plans, early stopping, checkpoints.

Stage 1 minimizes the standard-prior objective over the base training set;
stage 2 fine-tunes under a freeze plan on the annotated subset with the
annotation-conditioned prior. Both stages evaluate validation macro-AUC each
epoch, stop early on a relative-tolerance rule, and return the checkpoint of
the best validation epoch. Everything is deterministic in the config seed.
"""

from __future__ import annotations

import base64
import copy
import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .errors import (
    ChecksumError,
    ContractError,
    FormatError,
    InputError,
    NonFiniteError,
    TrainingDiverged,
    UsageError,
)
from .evalsuite import f1_macro, macro_auc
from .model import (
    GROUP_NAMES,
    ModelConfig,
    ModelParams,
    ParamGroup,
    VClassifier,
    init_params,
    reinit_annotation_side,
)
from .rasterizer import RasterConfig, rasterize_bboxes, rasterize_gaze

CHECKPOINT_MAGIC = b"PINF"
CHECKPOINT_VERSION = 1

_PARAM_STREAM = 0x70617261
_STAGE1_STREAM = 0x73746731
_STAGE2_STREAM = 0x73746732


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    beta: float = 0.01  # KL weight
    rel_tolerance: float = 0.01  # early stopping, relative to best val macro-AUC
    patience: int = 3
    seed: int = 0
    sample_count: int = 1

    def __post_init__(self):
        if min(self.learning_rate, self.beta1, self.beta2, self.eps) <= 0:
            raise InputError("optimizer rates must be > 0")
        if self.patience < 1:
            raise InputError("patience must be >= 1")
        if self.batch_size < 1 or self.sample_count < 1:
            raise InputError("batch_size and sample_count must be >= 1")
        if self.beta < 0:
            raise InputError("beta must be >= 0")


@dataclass(frozen=True)
class FreezePlan:
    """Per-group frozen flags (True = weights fixed)."""

    encoder: bool = False
    post_mlp1: bool = False
    post_mlp2: bool = False
    annotation_encoder: bool = False
    prior_net: bool = False
    ch1: bool = False
    ch2: bool = False

    @classmethod
    def stage1(cls) -> "FreezePlan":
        # the annotation side exists only in stage 2
        return cls(annotation_encoder=True, prior_net=True)

    @classmethod
    def stage2_default(cls) -> "FreezePlan":
        # release only the second posterior MLP, the final head, and the
        # annotation side; earlier layers stay frozen
        return cls(encoder=True, post_mlp1=True, ch1=True)

    @classmethod
    def all_released(cls) -> "FreezePlan":
        return cls()

    def as_dict(self) -> dict[str, bool]:
        return {name: bool(getattr(self, name)) for name in GROUP_NAMES}

    def released_groups(self) -> list[str]:
        return [name for name, frozen in self.as_dict().items() if not frozen]


@dataclass
class AdamState:
    step: dict[str, int]
    m: dict[str, dict[str, np.ndarray]]
    v: dict[str, dict[str, np.ndarray]]

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamState":
        step = {g: 0 for g in GROUP_NAMES}
        m = {g: {n: np.zeros_like(t.data) for n, t in params[g].tensors.items()} for g in GROUP_NAMES}
        v = {g: {n: np.zeros_like(t.data) for n, t in params[g].tensors.items()} for g in GROUP_NAMES}
        return cls(step, m, v)

    def clone(self) -> "AdamState":
        return AdamState(
            dict(self.step),
            {g: {n: a.copy() for n, a in d.items()} for g, d in self.m.items()},
            {g: {n: a.copy() for n, a in d.items()} for g, d in self.v.items()},
        )

    def reset_group(self, name: str) -> None:
        self.step[name] = 0
        for n in self.m[name]:
            self.m[name][n] = np.zeros_like(self.m[name][n])
            self.v[name][n] = np.zeros_like(self.v[name][n])


def adam_step(params: ModelParams, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update over the unfrozen groups, in place.

    Frozen groups must have empty (or absent) gradient entries and are left
    bit-unchanged, moments included.
    """
    for gname in GROUP_NAMES:
        group = params[gname]
        gg = grads.get(gname)
        if group.frozen:
            if gg:
                raise ContractError(f"gradient supplied for frozen group '{gname}'")
            continue
        if gg is None or set(gg) != set(group.tensors):
            raise ContractError(f"missing gradients for unfrozen group '{gname}'")
        state.step[gname] += 1
        t = state.step[gname]
        lr_hat = cfg.learning_rate / (1.0 - cfg.beta1**t)
        sq_bc2 = np.sqrt(1.0 - cfg.beta2**t)
        for n, tensor in group.tensors.items():
            g = gg[n]
            m = state.m[gname][n]
            v = state.v[gname][n]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            denom = np.sqrt(v)
            denom /= sq_bc2
            denom += cfg.eps
            step_arr = m / denom
            step_arr *= lr_hat
            tensor.data = tensor.data - step_arr


def collect_group_grads(params: ModelParams, table: dict) -> dict:
    """Arrange a backward() table per parameter group.

    Frozen groups get zero-length entries; unfrozen groups get one gradient
    per tensor.
    """
    grads: dict[str, dict[str, np.ndarray]] = {}
    for gname, tname, tensor in params.named_tensors():
        bucket = grads.setdefault(gname, {})
        if tensor in table:
            if params[gname].frozen:
                raise ContractError(f"gradient reached frozen group '{gname}'")
            bucket[tname] = table[tensor]
    return grads


@dataclass
class EarlyStopper:
    """Stop after `patience` consecutive epochs below the relative tolerance.

    An epoch improves only if the metric exceeds the best seen so far by more
    than rel_tolerance relatively; the best itself tracks the running max, so
    sub-tolerance gains still tighten the bar.
    """

    rel_tolerance: float
    patience: int
    best: float | None = None
    stall: int = 0

    def update(self, metric: float) -> bool:
        if self.best is None:
            self.best = float(metric)
            return False
        if self.best > 0:
            improving = metric > self.best * (1.0 + self.rel_tolerance)
        else:
            improving = metric > self.best
        if improving:
            self.stall = 0
        else:
            self.stall += 1
        if metric > self.best:
            self.best = float(metric)
        return self.stall >= self.patience


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class DatasetSplit:
    """Images plus labels with train/val/test index sets and annotations.

    The annotated subset (fixations and boxes keyed by image id) must be a
    subset of the training ids; val and test ids never appear in training.
    """

    images: np.ndarray  # (N, 1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N, K) float64 in {0, 1}
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray
    annotated_ids: np.ndarray
    fixations: dict[int, list] = field(default_factory=dict)
    boxes: dict[int, list] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        for name in ("train_ids", "val_ids", "test_ids", "annotated_ids"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        train, val, test = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if train & val or train & test or val & test:
            raise InputError("train/val/test ids must be disjoint")
        if not set(self.annotated_ids) <= train:
            raise InputError("annotated ids must be a subset of the training ids")

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    @property
    def label_count(self) -> int:
        return self.labels.shape[1]

    def annotation_map(self, image_id: int, source: str, raster_cfg: RasterConfig) -> np.ndarray:
        H = W = self.image_size
        if source == "gaze":
            return rasterize_gaze(self.fixations[image_id], (H, W), raster_cfg).values
        if source == "bbox":
            return rasterize_bboxes(self.boxes[image_id], (H, W), raster_cfg).values
        raise InputError(f"unknown annotation source '{source}'")


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: ModelParams
    adam: AdamState
    rng_state: dict
    epoch: int
    stage: int
    stopper_best: float | None
    stopper_stall: int
    val_metric: float
    version: int = CHECKPOINT_VERSION

    def clone(self) -> "Checkpoint":
        return Checkpoint(
            self.model_cfg,
            self.params.clone(),
            self.adam.clone(),
            copy.deepcopy(self.rng_state),
            self.epoch,
            self.stage,
            self.stopper_best,
            self.stopper_stall,
            self.val_metric,
            self.version,
        )


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(text: str, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(text), dtype="<f8").reshape(shape)
    return arr.copy()


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    record = {
        "format_version": ckpt.version,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "model_config": ckpt.model_cfg.to_dict(),
        "frozen": {g: ckpt.params[g].frozen for g in GROUP_NAMES},
        "val_metric": float(ckpt.val_metric),
        "stopper": {"best": ckpt.stopper_best, "stall": ckpt.stopper_stall},
        "rng_state": ckpt.rng_state,
        "adam": {
            "step": ckpt.adam.step,
            "m": {g: {n: _b64(a) for n, a in d.items()} for g, d in ckpt.adam.m.items()},
            "v": {g: {n: _b64(a) for n, a in d.items()} for g, d in ckpt.adam.v.items()},
        },
        # lossless float64 state; the per-group records below hold the
        # interchange float32 blobs
        "params_f64": {
            g: {n: _b64(t.data) for n, t in ckpt.params[g].tensors.items()} for g in GROUP_NAMES
        },
    }
    record_bytes = json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", ckpt.version)
    out += struct.pack("<Q", len(record_bytes))
    out += record_bytes
    for gname, tname, tensor in ckpt.params.named_tensors():
        name = f"{gname}/{tname}".encode("utf-8")
        out += struct.pack("<H", len(name))
        out += name
        out += struct.pack("<B", tensor.data.ndim)
        for d in tensor.data.shape:
            out += struct.pack("<I", d)
        out += tensor.data.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a PINF checkpoint (bad magic)")
    if len(blob) < 8 or zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise ChecksumError("checkpoint failed CRC32 check")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}")
    (rec_len,) = struct.unpack("<Q", blob[8:16])
    record = json.loads(blob[16 : 16 + rec_len].decode("utf-8"))
    pos = 16 + rec_len
    shapes: dict[str, tuple[int, ...]] = {}
    f32: dict[str, np.ndarray] = {}
    end = len(blob) - 4
    while pos < end:
        (name_len,) = struct.unpack("<H", blob[pos : pos + 2])
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        ndim = blob[pos]
        pos += 1
        shape = struct.unpack(f"<{ndim}I", blob[pos : pos + 4 * ndim])
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        f32[name] = np.frombuffer(blob[pos : pos + 4 * count], dtype="<f4").reshape(shape)
        pos += 4 * count
        shapes[name] = shape
    model_cfg = ModelConfig.from_dict(record["model_config"])
    frozen = record["frozen"]
    params = ModelParams()
    params_f64 = record.get("params_f64", {})
    for gname in GROUP_NAMES:
        tensors: dict[str, dc.Tensor] = {}
        for full, shape in shapes.items():
            g, _, tname = full.partition("/")
            if g != gname:
                continue
            stored = params_f64.get(gname, {}).get(tname)
            data = _unb64(stored, shape) if stored is not None else f32[full].astype(np.float64)
            tensors[tname] = dc.Tensor(data, requires_grad=not frozen[gname])
        group = ParamGroup(gname, tensors, bool(frozen[gname]))
        params.groups[gname] = group
    adam_rec = record["adam"]
    adam = AdamState(
        {g: int(t) for g, t in adam_rec["step"].items()},
        {
            g: {n: _unb64(s, params[g].tensors[n].data.shape) for n, s in d.items()}
            for g, d in adam_rec["m"].items()
        },
        {
            g: {n: _unb64(s, params[g].tensors[n].data.shape) for n, s in d.items()}
            for g, d in adam_rec["v"].items()
        },
    )
    stopper = record["stopper"]
    return Checkpoint(
        model_cfg=model_cfg,
        params=params,
        adam=adam,
        rng_state=record["rng_state"],
        epoch=int(record["epoch"]),
        stage=int(record["stage"]),
        stopper_best=stopper["best"],
        stopper_stall=int(stopper["stall"]),
        val_metric=float(record["val_metric"]),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# training loops


class MetricsLog:
    """Appends "epoch,split,loss,nll,kl,auc,f1" rows; floats use repr."""

    HEADER = "epoch,split,loss,nll,kl,auc,f1"

    def __init__(self, path=None):
        self.path = path
        if path is not None:
            with open(path, "a", encoding="utf-8") as fh:
                if fh.tell() == 0:
                    fh.write(self.HEADER + "\n")

    def row(self, epoch: int, split: str, loss, nll, kl, auc, f1) -> None:
        if self.path is None:
            return
        vals = ",".join(repr(float(v)) for v in (loss, nll, kl, auc, f1))
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{epoch},{split},{vals}\n")


def _rng_from_seed(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def evaluate_classifier(model: VClassifier, images: np.ndarray, labels: np.ndarray, beta: float):
    """Deterministic (z = mu) loss parts and metrics on one split."""
    with dc.no_grad():
        probs = []
        nll_sum = 0.0
        kl_sum = 0.0
        n = images.shape[0]
        for lo in range(0, n, 64):
            x = images[lo : lo + 64]
            y = labels[lo : lo + 64]
            _, feat_vec = model.encode(x)
            q = model.posterior(feat_vec)
            logits = model.classify(q.mu, feat_vec).data
            sp = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
            nll_sum += float((sp - y * logits).mean()) * x.shape[0]
            var = np.exp(q.log_var.data)
            kl_sum += float(
                0.5 * (q.mu.data**2 + var - q.log_var.data - 1.0).sum(axis=1).sum()
            )
            probs.append(1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500))))
    probs = np.concatenate(probs, axis=0)
    nll = nll_sum / n
    kl = kl_sum / n
    auc = macro_auc(probs, labels)
    f1 = f1_macro(probs, labels)
    return {"loss": nll + beta * kl, "nll": nll, "kl": kl, "auc": auc, "f1": f1, "probs": probs}


def _snapshot(model_cfg, params, adam, rng, epoch, stage, stopper, val_metric) -> Checkpoint:
    return Checkpoint(
        model_cfg=model_cfg,
        params=params.clone(),
        adam=adam.clone(),
        rng_state=copy.deepcopy(rng.bit_generator.state),
        epoch=epoch,
        stage=stage,
        stopper_best=stopper.best,
        stopper_stall=stopper.stall,
        val_metric=float(val_metric),
    )


def _training_loop(
    model: VClassifier,
    split: DatasetSplit,
    cfg: TrainConfig,
    adam: AdamState,
    rng: np.random.Generator,
    stopper: EarlyStopper,
    batch_ids: np.ndarray,
    loss_of_batch,
    log: MetricsLog,
    start_epoch: int,
    stage: int,
    select: str,
    fresh_start: bool,
) -> Checkpoint:
    params = model.params
    val_x = split.images[split.val_ids]
    val_y = split.labels[split.val_ids]

    val = evaluate_classifier(model, val_x, val_y, cfg.beta)
    if fresh_start:
        log.row(start_epoch, "val", val["loss"], val["nll"], val["kl"], val["auc"], val["f1"])
        stopper.update(val["auc"])
    best_metric = val["auc"]
    best = _snapshot(model.cfg, params, adam, rng, start_epoch, stage, stopper, val["auc"])
    last = best

    for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
        order = rng.permutation(batch_ids)
        losses, nlls, kls = [], [], []
        for lo in range(0, order.size, cfg.batch_size):
            ids = order[lo : lo + cfg.batch_size]
            loss, parts = loss_of_batch(ids)
            table = dc.backward(loss)
            grads = collect_group_grads(params, table)
            adam_step(params, grads, adam, cfg)
            losses.append(loss.item())
            nlls.append(parts["nll"])
            kls.append(parts["kl"])
        log.row(
            epoch,
            "train",
            float(np.mean(losses)),
            float(np.mean(nlls)),
            float(np.mean(kls)),
            float("nan"),
            float("nan"),
        )
        val = evaluate_classifier(model, val_x, val_y, cfg.beta)
        log.row(epoch, "val", val["loss"], val["nll"], val["kl"], val["auc"], val["f1"])
        stop = stopper.update(val["auc"])
        snap = _snapshot(model.cfg, params, adam, rng, epoch, stage, stopper, val["auc"])
        last = snap
        if val["auc"] > best_metric:
            best_metric = val["auc"]
            best = snap
        if stop:
            break
    return last if select == "last" else best


def train_stage1(
    split: DatasetSplit,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    resume: Checkpoint | None = None,
    metrics_path=None,
    select: str = "best",
) -> Checkpoint:
    """Minimize the standard-prior objective over the base training set."""
    if split.train_ids.size == 0:
        raise InputError("stage 1 requires a non-empty training set")
    if resume is not None:
        if resume.stage != 1:
            raise UsageError(f"resume checkpoint has stage {resume.stage}, expected 1")
        model_cfg = resume.model_cfg
        params = resume.params.clone()
        adam = resume.adam.clone()
        rng = np.random.default_rng()
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        stopper = EarlyStopper(cfg.rel_tolerance, cfg.patience, resume.stopper_best, resume.stopper_stall)
        start_epoch = resume.epoch
    else:
        params = init_params(model_cfg, cfg.seed)
        params.apply_freeze(FreezePlan.stage1().as_dict())
        adam = AdamState.fresh(params)
        rng = _rng_from_seed(cfg.seed, _STAGE1_STREAM)
        stopper = EarlyStopper(cfg.rel_tolerance, cfg.patience)
        start_epoch = 0
    model = VClassifier(model_cfg, params)
    log = MetricsLog(metrics_path)

    def loss_of_batch(ids):
        x = split.images[ids]
        y = split.labels[ids]
        try:
            return model.loss_base(x, y, cfg.beta, rng, cfg.sample_count)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite loss in stage 1: {exc}") from exc

    return _training_loop(
        model, split, cfg, adam, rng, stopper, split.train_ids, loss_of_batch, log,
        start_epoch, 1, select, fresh_start=resume is None,
    )


def train_stage2(
    ckpt: Checkpoint,
    split: DatasetSplit,
    cfg: TrainConfig,
    plan: FreezePlan | None = None,
    annotation_source: str = "gaze",
    raster_cfg: RasterConfig | None = None,
    resume: Checkpoint | None = None,
    metrics_path=None,
    select: str = "best",
) -> Checkpoint:
    """Fine-tune under a freeze plan with the annotation-conditioned prior."""
    plan = plan or FreezePlan.stage2_default()
    raster_cfg = raster_cfg or RasterConfig()
    if split.annotated_ids.size == 0:
        raise InputError("stage 2 requires a non-empty annotated subset")
    if not plan.released_groups():
        raise ContractError("stage-2 freeze plan releases no parameter group")
    if resume is not None:
        if resume.stage != 2:
            raise UsageError(f"resume checkpoint has stage {resume.stage}, expected 2")
        model_cfg = resume.model_cfg
        params = resume.params.clone()
        adam = resume.adam.clone()
        rng = np.random.default_rng()
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        stopper = EarlyStopper(cfg.rel_tolerance, cfg.patience, resume.stopper_best, resume.stopper_stall)
        start_epoch = resume.epoch
    else:
        if ckpt.stage != 1:
            raise UsageError(f"stage-2 entry checkpoint has stage {ckpt.stage}, expected 1")
        model_cfg = ckpt.model_cfg
        params = ckpt.params.clone()
        reinit_annotation_side(params, model_cfg, cfg.seed)
        params.apply_freeze(plan.as_dict())
        adam = AdamState.fresh(params)
        rng = _rng_from_seed(cfg.seed, _STAGE2_STREAM)
        stopper = EarlyStopper(cfg.rel_tolerance, cfg.patience)
        start_epoch = 0
    model = VClassifier(model_cfg, params)
    log = MetricsLog(metrics_path)

    ann_ids = [int(i) for i in split.annotated_ids]
    maps = np.stack([split.annotation_map(i, annotation_source, raster_cfg) for i in ann_ids])
    maps = maps[:, None, :, :]
    row_of = {image_id: row for row, image_id in enumerate(ann_ids)}

    def loss_of_batch(ids):
        x = split.images[ids]
        y = split.labels[ids]
        c = maps[[row_of[int(i)] for i in ids]]
        try:
            return model.loss_sub(x, y, c, cfg.beta, rng, cfg.sample_count)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite loss in stage 2: {exc}") from exc

    return _training_loop(
        model, split, cfg, adam, rng, stopper, split.annotated_ids, loss_of_batch, log,
        start_epoch, 2, select, fresh_start=resume is None,
    )
