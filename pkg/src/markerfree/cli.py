"""Command line interface: synth | train | eval | infer.

One flat key-value configuration (file via --config, every key also a
flag) drives all subcommands. Unknown keys are rejected, validation
errors are reported exhaustively before anything runs, and the effective
configuration is echoed next to each command's outputs.

Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import (
    DatasetError,
    derive_sample_seed,
    load_image,
    save_image,
    scan_dataset,
    write_boxes_jsonl,
)
from .discriminator import DetectorNet, decode_detections
from .losses import LossWeights
from .markers import MarkerError, MarkerPolicy, sample_marker_specs, stamp_markers
from .metrics import evaluate, write_reports
from .tensors import batch_to_tensor, tensor_to_image
from .trainer import (
    TrainConfig,
    TrainerError,
    load_checkpoint,
    reconstruct_fn,
    train,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


@dataclass(frozen=True)
class Opt:
    type: type
    default: object
    help: str
    commands: tuple
    required: tuple = ()
    choices: tuple = None


SCHEMA = {
    # dataset
    "data_root": Opt(str, None, "corpus root directory", ("synth", "train", "eval"),
                     required=("synth", "train", "eval")),
    "split": Opt(str, "train", "dataset split", ("synth", "train", "eval"),
                 choices=("train", "val", "test")),
    "layout": Opt(str, "clean_only", "dataset layout", ("train", "eval"),
                  choices=("clean_only", "paired")),
    "image_h": Opt(int, 64, "training/eval image height", ("train", "eval")),
    "image_w": Opt(int, 64, "training/eval image width", ("train", "eval")),
    # marker policy
    "count_min": Opt(int, 1, "min markers per image", ("synth", "train", "eval")),
    "count_max": Opt(int, 4, "max markers per image", ("synth", "train", "eval")),
    "size_min": Opt(int, 3, "min marker arm length", ("synth", "train", "eval")),
    "size_max": Opt(int, 9, "max marker arm length", ("synth", "train", "eval")),
    "thickness_min": Opt(int, 1, "min stroke thickness", ("synth", "train", "eval")),
    "thickness_max": Opt(int, 2, "max stroke thickness", ("synth", "train", "eval")),
    "intensity_mode": Opt(str, "fixed_white", "marker intensity rule",
                          ("synth", "train", "eval"),
                          choices=("fixed_white", "fixed_black", "sampled")),
    "policy_seed": Opt(int, 0, "marker policy stream seed", ("synth", "train", "eval")),
    # training
    "batch_size": Opt(int, 4, "samples per step", ("train",)),
    "learning_rate": Opt(float, 1e-4, "optimizer step size", ("train",)),
    "max_steps": Opt(int, 1000, "total optimization steps", ("train",)),
    "seed": Opt(int, 0, "global run seed", ("synth", "train", "eval")),
    "disc": Opt(str, "detector", "discriminator kind", ("train",),
                choices=("detector", "patch")),
    "branches": Opt(int, 2, "generator branches (1 = no mask branch)", ("train",)),
    "base_channels": Opt(int, 32, "generator width", ("train",)),
    "perceptual": Opt(str, "auto", "feature extractor for the perceptual loss",
                      ("train",), choices=("auto", "vgg16", "random", "identity")),
    "augment": Opt(bool, True, "stamp pseudo markers onto paired inputs", ("train",)),
    "shuffle": Opt(bool, True, "shuffle the epoch order", ("train",)),
    "snapshot_every": Opt(int, 0, "steps between snapshot grids (0 = off)", ("train",)),
    "checkpoint_every": Opt(int, 0, "steps between checkpoints (0 = off)", ("train",)),
    "lambda_rec": Opt(float, 10.0, "reconstruction loss weight", ("train",)),
    "lambda_per": Opt(float, 1.0, "perceptual loss weight", ("train",)),
    "lambda_adv": Opt(float, 0.1, "adversarial loss weight", ("train",)),
    "run_dir": Opt(str, "runs/run", "training output directory", ("train",)),
    "resume": Opt(str, None, "checkpoint to resume from", ("train",)),
    # eval / infer
    "checkpoint": Opt(str, None, "checkpoint file", ("eval", "infer"),
                      required=("eval", "infer")),
    "out_dir": Opt(str, "eval_out", "evaluation output directory", ("eval",)),
    "input_dir": Opt(str, None, "directory of PNG inputs", ("infer",),
                     required=("infer",)),
    "output_dir": Opt(str, None, "directory for restored outputs", ("infer",),
                      required=("infer",)),
    "emit_mask": Opt(bool, False, "also write predicted masks", ("infer",)),
    "emit_detections": Opt(bool, False, "also write detected boxes", ("infer",)),
    "conf_threshold": Opt(float, 0.5, "detection confidence threshold", ("infer",)),
    "nms_iou": Opt(float, 0.5, "detection NMS IoU threshold", ("infer",)),
}

COMMANDS = ("synth", "train", "eval", "infer")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="markerfree",
        description="Blind removal of doctor-drawn markers from medical images.",
    )
    sub = parser.add_subparsers(dest="command")
    helps = {
        "synth": "stamp synthetic markers onto a clean corpus",
        "train": "train the reconstruction/detection pair",
        "eval": "score a checkpoint with full and mask-only metrics",
        "infer": "restore a directory of images with a checkpoint",
    }
    for command in COMMANDS:
        p = sub.add_parser(command, help=helps[command])
        p.add_argument("--config", help="JSON file of flat configuration keys")
        for key, opt in SCHEMA.items():
            if command not in opt.commands:
                continue
            flag = "--" + key.replace("_", "-")
            if opt.type is bool:
                p.add_argument(flag, dest=key, default=None,
                               action=argparse.BooleanOptionalAction, help=opt.help)
            else:
                p.add_argument(flag, dest=key, type=opt.type, default=None,
                               choices=opt.choices, help=opt.help)
    return parser


def resolve_config(args):
    """defaults <- config file <- explicit flags; returns (dict, errors)."""
    command = args.command
    errors = []
    cfg = {k: o.default for k, o in SCHEMA.items() if command in o.commands}

    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as e:
            return None, [f"cannot read config file: {e}"]
        except ValueError as e:
            return None, [f"config file is not valid JSON: {e}"]
        if not isinstance(loaded, dict):
            return None, ["config file must hold a JSON object of flat keys"]
        for key, value in sorted(loaded.items()):
            opt = SCHEMA.get(key)
            if opt is None:
                errors.append(f"unknown config key {key!r}")
                continue
            if command not in opt.commands:
                continue  # one file may serve several subcommands
            if opt.type is bool:
                if not isinstance(value, bool):
                    errors.append(f"config key {key!r} must be a boolean")
                    continue
            elif opt.type is float:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    errors.append(f"config key {key!r} must be a number")
                    continue
                value = float(value)
            elif opt.type is int:
                if isinstance(value, bool) or not isinstance(value, int):
                    errors.append(f"config key {key!r} must be an integer")
                    continue
            elif not isinstance(value, str):
                errors.append(f"config key {key!r} must be a string")
                continue
            cfg[key] = value

    for key in cfg:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            cfg[key] = flag_value

    errors.extend(validate_config(command, cfg))
    return cfg, errors


def validate_config(command, cfg):
    errors = []

    def need(key):
        if cfg.get(key) in (None, ""):
            errors.append(f"missing required key {key!r} (--{key.replace('_', '-')})")
            return False
        return True

    for key, opt in SCHEMA.items():
        if command in opt.required:
            need(key)
        if command in opt.commands and opt.choices and cfg.get(key) is not None:
            if cfg[key] not in opt.choices:
                errors.append(
                    f"key {key!r} must be one of {opt.choices}, got {cfg[key]!r}"
                )

    def check(cond, msg):
        if not cond:
            errors.append(msg)

    if command in ("synth", "train", "eval"):
        check(cfg["count_min"] >= 0, "count_min must be >= 0")
        check(cfg["count_min"] <= cfg["count_max"],
              "count_min must not exceed count_max")
        check(1 <= cfg["size_min"] <= cfg["size_max"],
              "size range must satisfy 1 <= size_min <= size_max")
        check(1 <= cfg["thickness_min"] <= cfg["thickness_max"],
              "thickness range must satisfy 1 <= thickness_min <= thickness_max")
    if command in ("train", "eval"):
        check(cfg["image_h"] % 16 == 0 and cfg["image_w"] % 16 == 0,
              "image_h and image_w must be divisible by 16")
        check(cfg["image_h"] > 0 and cfg["image_w"] > 0,
              "image_h and image_w must be positive")
    if command == "train":
        check(cfg["batch_size"] >= 1, "batch_size must be >= 1")
        check(cfg["learning_rate"] >= 0, "learning_rate must be >= 0")
        check(cfg["max_steps"] >= 0, "max_steps must be >= 0")
        check(cfg["branches"] in (1, 2), "branches must be 1 or 2")
        check(cfg["base_channels"] >= 1, "base_channels must be >= 1")
        check(cfg["snapshot_every"] >= 0, "snapshot_every must be >= 0")
        check(cfg["checkpoint_every"] >= 0, "checkpoint_every must be >= 0")
        for k in ("lambda_rec", "lambda_per", "lambda_adv"):
            check(cfg[k] >= 0, f"{k} must be >= 0")
    if command == "infer":
        check(0.0 < cfg["conf_threshold"] < 1.0,
              "conf_threshold must lie strictly inside (0, 1)")
        check(0.0 < cfg["nms_iou"] < 1.0, "nms_iou must lie strictly inside (0, 1)")
    return errors


def echo_config(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def policy_from(cfg):
    return MarkerPolicy(
        count_range=(cfg["count_min"], cfg["count_max"]),
        size_range=(cfg["size_min"], cfg["size_max"]),
        thickness_range=(cfg["thickness_min"], cfg["thickness_max"]),
        intensity_mode=cfg["intensity_mode"],
        rng_seed=cfg["policy_seed"],
    )


def cmd_synth(cfg):
    root = Path(cfg["data_root"])
    split = cfg["split"]
    index = scan_dataset(root, "clean_only", split)
    policy = policy_from(cfg)

    corrupted_dir = root / split / "corrupted"
    mask_dir = root / split / "mask"
    corrupted_dir.mkdir(exist_ok=True)
    mask_dir.mkdir(exist_ok=True)
    records = []
    for i, entry in enumerate(index.entries):
        image = load_image(entry.clean_path)
        specs = sample_marker_specs(
            policy, image.shape[:2], derive_sample_seed(cfg["seed"], i)
        )
        corrupted, mask, boxes = stamp_markers(image, specs)
        name = entry.clean_path.name
        save_image(corrupted_dir / name, corrupted)
        save_image(mask_dir / name, mask.astype(np.float64))
        records.append(
            {
                "file": name,
                "boxes": [list(b.bbox) for b in boxes],
                "classes": [b.class_label for b in boxes],
            }
        )
    write_boxes_jsonl(root / split / "boxes.jsonl", records)
    echo_config(cfg, root / split / "synth_config.json")
    print(
        f"{split}: {len(records)} images -> {len(records)} corrupted, "
        f"{len(records)} masks, {len(records)} box records"
    )
    return EXIT_OK


def cmd_train(cfg):
    index = scan_dataset(
        cfg["data_root"], cfg["layout"], cfg["split"],
        image_size=(cfg["image_h"], cfg["image_w"]),
    )
    config = TrainConfig(
        weights=LossWeights(cfg["lambda_rec"], cfg["lambda_per"], cfg["lambda_adv"]),
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        max_steps=cfg["max_steps"],
        seed=cfg["seed"],
        image_size=(cfg["image_h"], cfg["image_w"]),
        policy=policy_from(cfg),
        disc=cfg["disc"],
        branches=cfg["branches"],
        base_channels=cfg["base_channels"],
        perceptual=cfg["perceptual"],
        augment=cfg["augment"],
        shuffle=cfg["shuffle"],
        snapshot_every=cfg["snapshot_every"],
        checkpoint_every=cfg["checkpoint_every"],
    )
    echo_config(cfg, Path(cfg["run_dir"]) / "config.json")
    result = train(config, index, run_dir=cfg["run_dir"], resume_from=cfg["resume"])
    print(f"trained to step {result.state.step}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return EXIT_OK


def _fmt_row(scope, role, agg):
    return (
        f"{scope:<9} {role:<8} "
        f"PSNR {agg['psnr_db']['mean']:.3f}±{agg['psnr_db']['sd']:.3f} dB  "
        f"SSIM {agg['ssim']['mean']:.4f}±{agg['ssim']['sd']:.4f}  "
        f"MSE {agg['mse']['mean']:.3f}±{agg['mse']['sd']:.3f}"
    )


def cmd_eval(cfg):
    state = load_checkpoint(cfg["checkpoint"])
    index = scan_dataset(
        cfg["data_root"], cfg["layout"], cfg["split"],
        image_size=(cfg["image_h"], cfg["image_w"]),
    )
    full, mask_only = evaluate(
        reconstruct_fn(state), index, policy=policy_from(cfg), epoch_seed=cfg["seed"]
    )
    csv_path, summary_path = write_reports([full, mask_only], cfg["out_dir"])
    echo_config(cfg, Path(cfg["out_dir"]) / "config.json")
    for report in (full, mask_only):
        agg = report.aggregates()
        print(_fmt_row(report.scope, "model", agg["model"]))
        print(_fmt_row(report.scope, "baseline", agg["baseline"]))
    print(f"wrote {csv_path} and {summary_path}")
    return EXIT_OK


def _int_box(bbox):
    x, y, w, h = bbox
    return [
        max(int(np.floor(x)), 0),
        max(int(np.floor(y)), 0),
        max(int(np.ceil(w)), 1),
        max(int(np.ceil(h)), 1),
    ]


def _pad_to_multiple(image, multiple):
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return image, (h, w)


def cmd_infer(cfg):
    state = load_checkpoint(cfg["checkpoint"])
    input_dir = Path(cfg["input_dir"])
    output_dir = Path(cfg["output_dir"])
    inputs = sorted(input_dir.glob("*.png"))
    if not inputs:
        print(f"no PNG inputs found in {input_dir}", file=sys.stderr)
        return EXIT_CONFIG
    output_dir.mkdir(parents=True, exist_ok=True)
    if cfg["emit_mask"]:
        (output_dir / "mask").mkdir(exist_ok=True)

    detector = state.discriminator if isinstance(state.discriminator, DetectorNet) else None
    if cfg["emit_detections"] and detector is None:
        print("emit-detections needs a detector-discriminator checkpoint",
              file=sys.stderr)
        return EXIT_CONFIG

    records = []
    failures = 0
    multiple = 16
    for path in inputs:
        try:
            image = load_image(path)
            padded, (h, w) = _pad_to_multiple(image, multiple)
            with torch.no_grad():
                out = state.generator(batch_to_tensor(padded[None]))
                restored = tensor_to_image(out.composed)[:h, :w]
                save_image(output_dir / path.name, restored)
                if cfg["emit_mask"]:
                    mask = tensor_to_image(out.mask)[:h, :w]
                    save_image(output_dir / "mask" / path.name, mask)
                if cfg["emit_detections"]:
                    dets = decode_detections(
                        detector(batch_to_tensor(padded[None])),
                        state.anchor_config,
                        conf_threshold=cfg["conf_threshold"],
                        nms_iou=cfg["nms_iou"],
                    )
                    records.append(
                        {
                            "file": path.name,
                            # snap float boxes to covering ints, dataset schema
                            "boxes": [_int_box(d.bbox) for d in dets],
                            "classes": [d.class_label for d in dets],
                        }
                    )
        except Exception as e:  # noqa: BLE001 - per-file isolation
            failures += 1
            print(f"failed on {path.name}: {e}", file=sys.stderr)
    if cfg["emit_detections"]:
        write_boxes_jsonl(output_dir / "boxes.jsonl", records)
    done = len(inputs) - failures
    print(f"restored {done}/{len(inputs)} images into {output_dir}")
    return EXIT_RUNTIME if failures else EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    cfg, errors = resolve_config(args)
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return HANDLERS[args.command](cfg)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, MarkerError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainerError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
