"""Command-line entry point wiring generation, training, and reporting.

Subcommands: gen-data, rasterize, train-stage1, train-stage2, eval, gradcam,
report. A flat key=value config file (plus --seed/--out/--threads/
--deterministic flags) fully specifies a run; the effective config with every
default materialized is echoed into the run directory so any run can be
reproduced from its own artifacts. Exit codes: 0 success, 1 usage/config
error, 2 runtime failure; errors carry a machine-parsable error_code line.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import (
    ChecksumError,
    ConfigError,
    FormatError,
    InputError,
    PinfError,
    UsageError,
)

# converters double as validators; None default marks a required key
def _c_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _c_channels(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.split(",") if p.strip() != "")


def _c_choice(*options):
    def conv(v: str) -> str:
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v

    return conv


CONFIG_SCHEMA: dict[str, tuple] = {
    "model.image_size": (int, 64),
    "model.channels": (_c_channels, (16, 32, 64)),
    "model.latent_dim": (int, 128),
    "model.label_count": (int, 4),
    "model.hidden": (int, 512),
    "train.learning_rate": (float, 1e-3),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.batch_size": (int, 32),
    "train.max_epochs": (int, 50),
    "train.beta": (float, 0.01),
    "train.rel_tolerance": (float, 0.01),
    "train.patience": (int, 3),
    "train.seed": (int, None),
    "train.sample_count": (int, 1),
    "freeze.encoder": (_c_bool, True),
    "freeze.post_mlp1": (_c_bool, True),
    "freeze.post_mlp2": (_c_bool, False),
    "freeze.annotation_encoder": (_c_bool, False),
    "freeze.prior_net": (_c_bool, False),
    "freeze.ch1": (_c_bool, True),
    "freeze.ch2": (_c_bool, False),
    "raster.gaze_sigma_multiplier": (float, 10.0),
    "raster.bbox_edge_sigma": (float, 5.0),
    "raster.gaussian_truncation": (float, 4.0),
    "raster.source": (_c_choice("gaze", "bbox"), "gaze"),
    "synth.image_size": (int, 64),
    "synth.classes": (int, 4),
    "synth.motif_size": (int, 10),
    "synth.contrast": (float, 0.35),
    "synth.noise_sigma": (float, 0.25),
    "synth.prevalence": (float, 0.3),
    "synth.base_size": (int, 5000),
    "synth.annotated_size": (int, 300),
    "synth.fixations_per_class": (int, 3),
    "synth.dwell_min": (float, 0.2),
    "synth.dwell_max": (float, 0.8),
    "synth.jitter_sigma": (float, 3.0),
    "synth.distractors": (int, 2),
    "synth.glance_min": (float, 0.1),
    "synth.glance_max": (float, 0.3),
    "synth.seed": (int, None),
}


def load_run_config(path: str | None, seed_override: int | None = None) -> dict:
    """Parse a key=value config, apply defaults and the --seed override."""
    values: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            for n, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}: line {n}: expected key=value")
                key, _, val = line.partition("=")
                key, val = key.strip(), val.strip()
                if key not in CONFIG_SCHEMA:
                    raise ConfigError(f"{path}: line {n}: unknown config key: {key}")
                conv = CONFIG_SCHEMA[key][0]
                try:
                    values[key] = conv(val)
                except ValueError as exc:
                    raise ConfigError(f"{path}: line {n}: bad value for {key}: {exc}") from exc
    for key, (_, default) in CONFIG_SCHEMA.items():
        values.setdefault(key, default)
    if seed_override is not None:
        values["train.seed"] = int(seed_override)
        values["synth.seed"] = int(seed_override)
    for key in ("train.seed", "synth.seed"):
        if values[key] is None:
            raise ConfigError(f"missing required key: {key} (set it in the config or pass --seed)")
    return values


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def echo_effective_config(cfg: dict, out_dir: str) -> None:
    lines = [f"{k}={_format_value(cfg[k])}" for k in sorted(cfg)]
    with open(os.path.join(out_dir, "effective_config.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# config -> domain objects (imported lazily so --deterministic can pin BLAS
# threads before numpy loads)


def _model_config(cfg: dict):
    from .model import ModelConfig

    return ModelConfig(
        image_size=cfg["model.image_size"],
        channels=cfg["model.channels"],
        latent_dim=cfg["model.latent_dim"],
        label_count=cfg["model.label_count"],
        hidden=cfg["model.hidden"],
    )


def _train_config(cfg: dict):
    from .trainer import TrainConfig

    return TrainConfig(
        learning_rate=cfg["train.learning_rate"],
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        eps=cfg["train.eps"],
        batch_size=cfg["train.batch_size"],
        max_epochs=cfg["train.max_epochs"],
        beta=cfg["train.beta"],
        rel_tolerance=cfg["train.rel_tolerance"],
        patience=cfg["train.patience"],
        seed=cfg["train.seed"],
        sample_count=cfg["train.sample_count"],
    )


def _freeze_plan(cfg: dict):
    from .trainer import FreezePlan

    return FreezePlan(
        encoder=cfg["freeze.encoder"],
        post_mlp1=cfg["freeze.post_mlp1"],
        post_mlp2=cfg["freeze.post_mlp2"],
        annotation_encoder=cfg["freeze.annotation_encoder"],
        prior_net=cfg["freeze.prior_net"],
        ch1=cfg["freeze.ch1"],
        ch2=cfg["freeze.ch2"],
    )


def _raster_config(cfg: dict):
    from .rasterizer import RasterConfig

    return RasterConfig(
        gaze_sigma_multiplier=cfg["raster.gaze_sigma_multiplier"],
        bbox_edge_sigma=cfg["raster.bbox_edge_sigma"],
        gaussian_truncation=cfg["raster.gaussian_truncation"],
    )


def _synth_spec(cfg: dict):
    from .synthgen import SynthSpec

    return SynthSpec(
        image_size=cfg["synth.image_size"],
        classes=cfg["synth.classes"],
        motif_size=cfg["synth.motif_size"],
        contrast=cfg["synth.contrast"],
        noise_sigma=cfg["synth.noise_sigma"],
        prevalence=cfg["synth.prevalence"],
        base_size=cfg["synth.base_size"],
        annotated_size=cfg["synth.annotated_size"],
        fixations_per_class=cfg["synth.fixations_per_class"],
        dwell_range=(cfg["synth.dwell_min"], cfg["synth.dwell_max"]),
        jitter_sigma=cfg["synth.jitter_sigma"],
        distractors=cfg["synth.distractors"],
        glance_range=(cfg["synth.glance_min"], cfg["synth.glance_max"]),
        seed=cfg["synth.seed"],
    )


def _load_dataset(data_dir: str, cfg: dict):
    from .synthgen import load_archive

    split, spec = load_archive(data_dir)
    if spec.classes != cfg["model.label_count"]:
        raise ConfigError(
            f"model.label_count={cfg['model.label_count']} but dataset has {spec.classes} classes"
        )
    if spec.image_size != cfg["model.image_size"]:
        raise ConfigError(
            f"model.image_size={cfg['model.image_size']} but dataset images are {spec.image_size}px"
        )
    return split


def _fresh(path: str) -> str:
    if os.path.exists(path):
        os.remove(path)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> None:
    cfg = load_run_config(args.config, args.seed)
    from .synthgen import export, generate

    spec = _synth_spec(cfg)
    os.makedirs(args.out, exist_ok=True)
    split = generate(spec, workers=args.threads)
    export(split, args.out, spec)
    echo_effective_config(cfg, args.out)


def cmd_rasterize(args) -> None:
    cfg = load_run_config(args.config, args.seed)
    from .rasterizer import (
        load_bbox_file,
        load_fixation_log,
        rasterize_bboxes,
        rasterize_gaze,
        save_map_pgm,
    )

    rc = _raster_config(cfg)
    dims = (args.height, args.width)
    if (args.gaze is None) == (args.bbox is None):
        raise UsageError("rasterize needs exactly one of --gaze or --bbox")
    if args.gaze is not None:
        amap = rasterize_gaze(load_fixation_log(args.gaze), dims, rc)
    else:
        amap = rasterize_bboxes(load_bbox_file(args.bbox), dims, rc)
    save_map_pgm(amap, args.out)


def cmd_train_stage1(args) -> None:
    cfg = load_run_config(args.config, args.seed)
    from .trainer import save_checkpoint, train_stage1

    split = _load_dataset(args.data, cfg)
    os.makedirs(args.out, exist_ok=True)
    metrics = _fresh(os.path.join(args.out, "metrics_stage1.csv"))
    ckpt = train_stage1(split, _train_config(cfg), _model_config(cfg), metrics_path=metrics)
    save_checkpoint(ckpt, os.path.join(args.out, "stage1.pinf"))
    echo_effective_config(cfg, args.out)


def cmd_train_stage2(args) -> None:
    cfg = load_run_config(args.config, args.seed)
    from .trainer import load_checkpoint, save_checkpoint, train_stage2

    split = _load_dataset(args.data, cfg)
    base = load_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    metrics = _fresh(os.path.join(args.out, "metrics_stage2.csv"))
    ckpt = train_stage2(
        base,
        split,
        _train_config(cfg),
        plan=_freeze_plan(cfg),
        annotation_source=cfg["raster.source"],
        raster_cfg=_raster_config(cfg),
        metrics_path=metrics,
    )
    save_checkpoint(ckpt, os.path.join(args.out, "stage2.pinf"))
    echo_effective_config(cfg, args.out)


def cmd_eval(args) -> None:
    cfg = load_run_config(args.config, args.seed)
    from .evalsuite import evaluate
    from .trainer import load_checkpoint

    split = _load_dataset(args.data, cfg)
    ckpt = load_checkpoint(args.ckpt)
    evaluate(ckpt, split, report_path=args.out, which=args.split, cam_dir=args.cams)


def cmd_gradcam(args) -> None:
    cfg = load_run_config(args.config, args.seed)
    from .evalsuite import grad_cam
    from .model import VClassifier
    from .rasterizer import AnnotationMap, load_map_pgm, save_map_pgm
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    model = VClassifier(ckpt.model_cfg, ckpt.params)
    if (args.image is None) == (args.image_id is None):
        raise UsageError("gradcam needs exactly one of --image or (--data and --image-id)")
    if args.image is not None:
        image = load_map_pgm(args.image).values
    else:
        if args.data is None:
            raise UsageError("--image-id requires --data")
        split = _load_dataset(args.data, cfg)
        image = split.images[args.image_id, 0]
    cam = grad_cam(model, image, args.class_index)
    save_map_pgm(AnnotationMap(cam.width, cam.height, cam.values), args.out)


def cmd_report(args) -> None:
    cfg = load_run_config(args.config, args.seed)
    from .evalsuite import cam_similarity_rows, evaluate, write_similarity_csv
    from .model import VClassifier
    from .trainer import load_checkpoint

    split = _load_dataset(args.data, cfg)
    base = load_checkpoint(args.base)
    sub = load_checkpoint(args.sub)
    model_base = VClassifier(base.model_cfg, base.params)
    model_sub = VClassifier(sub.model_cfg, sub.params)
    os.makedirs(args.out, exist_ok=True)
    rows = cam_similarity_rows(model_base, model_sub, split, cfg["raster.source"], _raster_config(cfg))
    deltas = write_similarity_csv(rows, os.path.join(args.out, "delta_s.csv"))
    eval_base = evaluate(base, split, which="test")
    eval_sub = evaluate(sub, split, which="test")
    lines = [
        "name,value",
        f"auc_base,{eval_base['auc']!r}",
        f"auc_sub,{eval_sub['auc']!r}",
        f"f1_base,{eval_base['f1']!r}",
        f"f1_sub,{eval_sub['f1']!r}",
        f"mean_delta_mse_pct,{deltas['mean_delta_mse_pct']!r}",
        f"mean_delta_dice_pct,{deltas['mean_delta_dice_pct']!r}",
    ]
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    echo_effective_config(cfg, args.out)


# ---------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse usage errors -> exit code 1
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="pinf", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value run config file")
    common.add_argument("--seed", type=int, default=None, help="override train.seed and synth.seed")
    common.add_argument("--threads", type=int, default=1, help="worker parallelism")
    common.add_argument("--deterministic", action="store_true", help="single-ordering mode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset archive")
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("rasterize", parents=[common], help="rasterize a fixation log or bbox file")
    p.add_argument("--gaze", default=None, help="fixation CSV")
    p.add_argument("--bbox", default=None, help="bounding-box JSON")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(fn=cmd_rasterize)

    p = sub.add_parser("train-stage1", parents=[common], help="train on the base set")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("train-stage2", parents=[common], help="fine-tune on the annotated subset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_stage2)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--cams", default=None, help="optional directory for CAM PGMs")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcam", parents=[common], help="single-image CAM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", default=None, help="input PGM")
    p.add_argument("--data", default=None)
    p.add_argument("--image-id", type=int, default=None)
    p.add_argument("--class-index", type=int, required=True)
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(fn=cmd_gradcam)

    p = sub.add_parser("report", parents=[common], help="delta-S report between two checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True, help="stage-1 checkpoint")
    p.add_argument("--sub", required=True, help="stage-2 checkpoint")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(fn=cmd_report)
    return parser


_ERROR_CODES = {
    ConfigError: ("config_error", 1),
    UsageError: ("usage_error", 1),
    ChecksumError: ("checksum_error", 2),  # must precede its parent FormatError
    FormatError: ("format_error", 2),
    InputError: ("input_error", 2),
}


def _classify_error(exc: Exception) -> tuple[str, int]:
    for cls, info in _ERROR_CODES.items():
        if isinstance(exc, cls):
            return info
    return ("runtime_error", 2)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"pinf: {exc}", file=sys.stderr)
        print("error_code=usage_error", file=sys.stderr)
        return 1
    if args.deterministic:
        # single-threaded kernels remove any reduction-order nondeterminism;
        # must happen before numpy is imported by the lazy command bodies
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
    try:
        args.fn(args)
    except PinfError as exc:
        code_name, code = _classify_error(exc)
        print(f"pinf: {exc}", file=sys.stderr)
        print(f"error_code={code_name}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"pinf: {exc}", file=sys.stderr)
        print("error_code=io_error", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
