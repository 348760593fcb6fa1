"""Command-line entry point."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from typing import Dict, List, Optional, Sequence

from .datagen import read_manifest
from .encoders import EncoderConfig, load_image
from .errors import CorruptCheckpoint, InvalidInput, ParseError
from .evaluation import (
    ClassPromptSet,
    eval_manifest,
    export_attention,
    export_embeddings,
    scaling_study,
    unfreeze_study,
)
from .model import RegionTextModel
from .prompts import prompt_from_json
from .training import TrainConfig, fit, load_checkpoint

logger = logging.getLogger("regioncontrast")


class _JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "ts": round(time.time(), 3),
            "level": record.levelname.lower(),
            "name": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry, sort_keys=True)


def _setup_logging(json_logs: bool, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        handler.setFormatter(_JsonLogFormatter())
    else:
        handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
        )
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise InvalidInput(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise InvalidInput(f"config file {path} must contain a JSON object")
    return data


def _resolve(defaults: dict, section: dict, flags: dict) -> dict:
    """Precedence: CLI flag > config-file section > built-in default."""
    out = dict(defaults)
    for key, value in section.items():
        if key not in out:
            raise InvalidInput(f"unknown config key {key!r}")
        out[key] = value
    for key, value in flags.items():
        if value is not None:
            out[key] = value
    return out


def _encoder_cfg(config: dict, args: argparse.Namespace) -> EncoderConfig:
    defaults = dataclasses.asdict(EncoderConfig())
    flags = {
        "image_size": getattr(args, "image_size", None),
        "patch_size": getattr(args, "patch_size", None),
        "trainable_blocks": getattr(args, "trainable_blocks", None),
    }
    resolved = _resolve(defaults, config.get("encoder", {}), flags)
    return EncoderConfig(**resolved)


def _train_cfg(config: dict, args: argparse.Namespace) -> TrainConfig:
    defaults = TrainConfig().to_dict()
    flags = {
        "batch_size": getattr(args, "batch_size", None),
        "epochs": getattr(args, "epochs", None),
        "base_lr": getattr(args, "base_lr", None),
        "weight_decay": getattr(args, "weight_decay", None),
        "warmup_steps": getattr(args, "warmup_steps", None),
        "gamma": getattr(args, "gamma", None),
        "seed": getattr(args, "seed", None),
        "trainable_blocks": getattr(args, "trainable_blocks", None),
        "milestones": _parse_ints(getattr(args, "milestones", None)),
        "augment": (False if getattr(args, "no_augment", False) else None),
    }
    return TrainConfig.from_dict(_resolve(defaults, config.get("train", {}), flags))


def _parse_ints(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InvalidInput(f"expected comma-separated integers, got {text!r}")


def _parse_floats(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InvalidInput(f"expected comma-separated floats, got {text!r}")


def _write_resolved(out_dir: str, command: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w") as fh:
        json.dump({"command": command, **resolved}, fh, indent=2, sort_keys=True)


def _load_records(manifest: str):
    try:
        records = read_manifest(manifest)
    except FileNotFoundError:
        raise InvalidInput(f"manifest not found: {manifest}")
    if not records:
        raise InvalidInput(f"manifest {manifest} is empty")
    return records


def _image_root(args: argparse.Namespace) -> str:
    if args.image_root:
        return args.image_root
    return os.path.dirname(os.path.abspath(args.manifest))


def _prompt_set(args: argparse.Namespace, records) -> ClassPromptSet:
    from .toydata import class_prompt_templates

    if getattr(args, "class_prompts", None):
        with open(args.class_prompts) as fh:
            return ClassPromptSet.from_dict(json.load(fh))
    cats = sorted({r.category for r in records})
    return ClassPromptSet.from_dict(class_prompt_templates(cats))


def _cmd_datagen(args: argparse.Namespace) -> int:
    from .toydata import generate_dataset

    config = _load_config_file(args.config)
    defaults = {"n_images": 50, "image_size": 64, "seed": 2025, "n_captions": 3}
    flags = {
        "n_images": args.n_images,
        "image_size": args.image_size,
        "seed": args.seed,
        "n_captions": args.n_captions,
    }
    resolved = _resolve(defaults, config.get("datagen", {}), flags)
    records = generate_dataset(args.out, **resolved)
    _write_resolved(args.out, "datagen", resolved)
    logger.info("wrote %d records to %s", len(records), args.out)
    print(json.dumps({"records": len(records), "out": args.out}))
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    records = _load_records(args.manifest)
    enc_cfg = _encoder_cfg(config, args)
    train_cfg = _train_cfg(config, args)
    model = RegionTextModel.build(enc_cfg, seed=train_cfg.seed)
    result = fit(model, records, _image_root(args), train_cfg, out_dir=args.out)
    _write_resolved(
        args.out, "train", {"encoder": enc_cfg.to_dict(), "train": train_cfg.to_dict()}
    )
    print(
        json.dumps(
            {
                "steps": result.steps,
                "final_loss": result.final_loss,
                "checkpoint": result.checkpoint_path,
            }
        )
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    records = _load_records(args.manifest)
    model, _ = load_checkpoint(args.checkpoint)
    prompt_set = _prompt_set(args, records)
    report, _ = eval_manifest(
        model, records, _image_root(args), prompt_set, mode=args.mode, out_dir=args.out
    )
    if args.out:
        _write_resolved(
            args.out,
            "eval",
            {"mode": args.mode, "checkpoint": args.checkpoint, "config": config},
        )
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _cmd_scaling_study(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    records = _load_records(args.manifest)
    enc_cfg = _encoder_cfg(config, args)
    train_cfg = _train_cfg(config, args)
    fractions = _parse_floats(args.fractions) or [0.25, 0.5, 1.0]
    prompt_set = _prompt_set(args, records)
    rows = scaling_study(
        records, _image_root(args), fractions, train_cfg, enc_cfg, prompt_set,
        mode=args.mode,
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "scaling_study.json"), "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    _write_csv(os.path.join(args.out, "scaling_study.csv"), rows)
    _write_resolved(
        args.out,
        "scaling-study",
        {
            "fractions": fractions,
            "encoder": enc_cfg.to_dict(),
            "train": train_cfg.to_dict(),
        },
    )
    print(json.dumps(rows))
    return 0


def _cmd_unfreeze_study(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    records = _load_records(args.manifest)
    enc_cfg = _encoder_cfg(config, args)
    train_cfg = _train_cfg(config, args)
    blocks = _parse_ints(args.blocks) or list(range(enc_cfg.depth + 1))
    prompt_set = _prompt_set(args, records)
    rows = unfreeze_study(
        records, _image_root(args), blocks, train_cfg, enc_cfg, prompt_set,
        mode=args.mode,
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "unfreeze_study.json"), "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    _write_csv(os.path.join(args.out, "unfreeze_study.csv"), rows)
    _write_resolved(
        args.out,
        "unfreeze-study",
        {
            "blocks": blocks,
            "encoder": enc_cfg.to_dict(),
            "train": train_cfg.to_dict(),
        },
    )
    print(json.dumps(rows))
    return 0


def _write_csv(path: str, rows: List[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _cmd_serve(args: argparse.Namespace) -> int:
    from .service import create_app, load_class_sets, serve, sha256_file

    checkpoint = args.checkpoint or os.environ.get("CHECKPOINT")
    if not checkpoint:
        raise InvalidInput("serve needs --checkpoint or the CHECKPOINT env var")
    model, _ = load_checkpoint(checkpoint)
    class_sets: Dict[str, ClassPromptSet] = {}
    sets_path = args.class_sets or os.environ.get("CLASS_SETS")
    if sets_path:
        class_sets = load_class_sets(sets_path)
    app = create_app(
        model=model,
        class_sets=class_sets,
        checkpoint_id=sha256_file(checkpoint),
        max_image_bytes=int(
            os.environ.get("MAX_IMAGE_BYTES", 4 * 1024 * 1024)
        ),
        cache_capacity=int(os.environ.get("CACHE_CAPACITY", 256)),
    )
    serve(app, host=args.host, port=args.port)
    return 0


def _cmd_export_attn(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    sample = load_image(args.image).normalize()
    if os.path.exists(args.prompt):
        with open(args.prompt) as fh:
            prompt_json = json.load(fh)
    else:
        try:
            prompt_json = json.loads(args.prompt)
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"--prompt is neither a file nor valid JSON: {exc}")
    prompt = prompt_from_json(prompt_json)
    heat = export_attention(model, sample, prompt, out_path=args.out)
    print(json.dumps({"out": args.out, "shape": list(heat.shape)}))
    return 0


def _cmd_export_embeddings(args: argparse.Namespace) -> int:
    records = _load_records(args.manifest)
    model, _ = load_checkpoint(args.checkpoint)
    info = export_embeddings(
        model, records, _image_root(args), args.out, mode=args.mode
    )
    print(json.dumps(info))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regioncontrast",
        description="Region-promptable contrastive vision-language toolkit",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--json-logs", action="store_true", help="log JSON lines")
    common.add_argument("--verbose", action="store_true")

    trainish = argparse.ArgumentParser(add_help=False)
    trainish.add_argument("--batch-size", type=int)
    trainish.add_argument("--epochs", type=int)
    trainish.add_argument("--base-lr", type=float)
    trainish.add_argument("--weight-decay", type=float)
    trainish.add_argument("--warmup-steps", type=int)
    trainish.add_argument("--gamma", type=float)
    trainish.add_argument("--milestones", help="comma-separated epochs")
    trainish.add_argument("--seed", type=int)
    trainish.add_argument("--trainable-blocks", type=int)
    trainish.add_argument("--no-augment", action="store_true")
    trainish.add_argument("--image-size", type=int)
    trainish.add_argument("--patch-size", type=int)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", parents=[common], help="synthesize an archive")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-captions", type=int)
    p.set_defaults(func=_cmd_datagen)

    p = sub.add_parser("train", parents=[common, trainish], help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default="point", choices=["none", "point", "box", "both", "mask"])
    p.add_argument("--class-prompts", help="JSON file: class -> [prompts]")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser(
        "scaling-study", parents=[common, trainish], help="data-fraction sweep"
    )
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root")
    p.add_argument("--fractions", help="comma-separated fractions in (0,1]")
    p.add_argument("--mode", default="point", choices=["none", "point", "box", "both", "mask"])
    p.add_argument("--class-prompts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_scaling_study)

    p = sub.add_parser(
        "unfreeze-study", parents=[common, trainish], help="trainable-depth sweep"
    )
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root")
    p.add_argument("--blocks", help="comma-separated trainable block counts")
    p.add_argument("--mode", default="point", choices=["none", "point", "box", "both", "mask"])
    p.add_argument("--class-prompts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_unfreeze_study)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--checkpoint")
    p.add_argument("--class-sets")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("export-attn", parents=[common], help="write a heatmap PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True, help="prompt JSON (inline or a file)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_attn)

    p = sub.add_parser(
        "export-embeddings", parents=[common], help="dump region embeddings"
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root")
    p.add_argument("--mode", default="point", choices=["none", "point", "box", "both", "mask"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_embeddings)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.json_logs, args.verbose)
    try:
        return args.func(args)
    except (InvalidInput, ParseError, CorruptCheckpoint) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        logger.exception("unhandled failure")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
