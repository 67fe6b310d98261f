"""Command-line surface: gen-data, train, infer, eval, sweep, report.

Flag precedence is CLI flag > JSON config file > built-in default, and every
command that owns an output directory echoes its resolved configuration
there.  Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import metrics as M
from . import trainer as T
from .caption_head import beam_search
from .detect_head import detect
from .model import build_model
from .scenegen import (SHAPES, SceneConfig, default_vocabulary, generate_dataset,
                       with_image_size)
from .dataset_io import read_ppm, write_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {p} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return cfg


def _resolve(flag_value, cfg: dict, section: str, key: str, default):
    """CLI flag > config file > default.  `key` may list aliases with |."""
    if flag_value is not None:
        return flag_value
    sub = cfg.get(section)
    if isinstance(sub, dict):
        for k in key.split("|"):
            if k in sub:
                return sub[k]
    return default


def _echo_config(out_dir: Path, name: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    out = Path(_resolve(args.out, cfg, "gen", "out", None) or _usage("--out is required"))
    num_train = int(_resolve(args.num_train, cfg, "gen", "num_train", 16))
    num_val = int(_resolve(args.num_val, cfg, "gen", "num_val", 8))
    seed = int(_resolve(args.seed, cfg, "gen", "seed", 0))
    image_size = int(_resolve(args.image_size, cfg, "gen", "image_size", 128))
    if image_size % 32:
        raise UsageError(f"--image-size {image_size} must be divisible by 32")
    if num_train < 1 or num_val < 0:
        raise UsageError("--num-train must be >= 1 and --num-val >= 0")

    scene_cfg = with_image_size(SceneConfig(), image_size)
    train_records = generate_dataset(seed, num_train, scene_cfg)
    val_records = generate_dataset(seed + num_train, num_val, scene_cfg)
    train_manifest = write_dataset(train_records, out / "train")
    val_manifest = write_dataset(val_records, out / "val")
    default_vocabulary().save(out / "vocab.txt")
    _echo_config(out, "gen_config.json", {
        "gen": {"out": str(out), "num_train": num_train, "num_val": num_val,
                "seed": seed, "image_size": image_size}})
    print(f"wrote {len(train_records)} train records -> {train_manifest}")
    print(f"wrote {len(val_records)} val records -> {val_manifest}")
    print(f"vocabulary -> {out / 'vocab.txt'}")
    return 0


def _usage(message: str):
    raise UsageError(message)


def _train_config_from(args, cfg: dict) -> T.TrainConfig:
    lam = _resolve(getattr(args, "lambda_", None), cfg, "train", "lambda|lambda_", 0.1)
    try:
        return T.TrainConfig(
            lambda_=float(lam),
            grad_clip=float(_resolve(None, cfg, "train", "grad_clip", 5.0)),
            learning_rate=float(_resolve(args.lr, cfg, "train", "learning_rate", 1e-4)),
            weight_decay=float(_resolve(args.weight_decay, cfg, "train", "weight_decay", 0.05)),
            batch_size=int(_resolve(args.batch_size, cfg, "train", "batch_size", 2)),
            steps=int(_resolve(args.steps, cfg, "train", "steps", 200)),
            seed=int(_resolve(args.seed, cfg, "train", "seed", 0)),
            freeze_plan=_resolve(args.freeze_plan, cfg, "train", "freeze_plan", "none"),
            checkpoint_every=int(_resolve(args.checkpoint_every, cfg, "train",
                                          "checkpoint_every", 100)),
            caption_select=_resolve(args.caption_select, cfg, "train", "caption_select", "first"),
            preset=_resolve(args.preset, cfg, "train", "preset", "toy"),
            num_classes=int(_resolve(args.num_classes, cfg, "train", "num_classes", len(SHAPES))),
        )
    except ValueError as e:
        raise UsageError(str(e))


def _data_paths(args, cfg: dict) -> tuple[Path, Path]:
    manifest = _resolve(args.manifest, cfg, "data", "train_manifest|manifest", None)
    vocab = _resolve(args.vocab, cfg, "data", "vocab", None)
    if manifest is None:
        raise UsageError("--manifest (or data.train_manifest in the config) is required")
    if vocab is None:
        vocab = Path(manifest).parent.parent / "vocab.txt"
    return Path(manifest), Path(vocab)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train_cfg = _train_config_from(args, cfg)
    manifest, vocab = _data_paths(args, cfg)
    out = Path(args.out or _resolve(None, cfg, "train", "out", None) or _usage("--out is required"))
    result = T.train(train_cfg, manifest, out, vocab, resume_from=args.resume)
    print(f"checkpoint -> {result.checkpoint_path}")
    print(f"metrics log -> {result.metrics_path}")
    if result.final:
        print(f"final step {result.final['step']}: total {result.final['total']:.4f}")
    return 0


def _load_image_tensor(path: Path) -> torch.Tensor:
    if path.suffix.lower() == ".ppm":
        arr = read_ppm(path)
    else:
        from PIL import Image
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    h, w = arr.shape[:2]
    if h % 32 or w % 32:
        raise ValueError(f"image is {w}x{h}; detection and captioning need dims "
                         "divisible by 32 -- resize the image first")
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)


def draw_overlay(image: torch.Tensor, detections, caption: str, class_names) -> "object":
    """Annotated copy of the image: boxes, class/score labels, caption strip."""
    from PIL import Image, ImageDraw
    arr = (image.permute(1, 2, 0).numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    strip = 14
    canvas = Image.new("RGB", (w, h + strip), (255, 255, 255))
    canvas.paste(Image.fromarray(arr), (0, 0))
    draw = ImageDraw.Draw(canvas)
    for det in detections:
        b = det.box
        name = class_names[det.class_id] if det.class_id < len(class_names) else str(det.class_id)
        draw.rectangle([b.x_min, b.y_min, b.x_max, b.y_max], outline=(255, 255, 255))
        draw.text((b.x_min + 1, max(0.0, b.y_min - 10)), f"{name} {det.score:.2f}",
                  fill=(255, 255, 255))
    draw.text((2, h + 1), caption, fill=(0, 0, 0))
    return canvas


def cmd_infer(args) -> int:
    if args.detect not in ("on", "off"):
        raise UsageError("--detect must be 'on' or 'off'")
    checkpoint = Path(args.checkpoint)
    image_path = Path(args.image)
    if not checkpoint.exists():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    if not image_path.exists():
        raise UsageError(f"image not found: {image_path}")
    run_cfg = json.loads((checkpoint.parent / "config.json").read_text())
    from .scenegen import Vocabulary
    vocab = Vocabulary.load(run_cfg["data"]["vocab"])
    model = build_model(run_cfg["model"]["vocab_size"], run_cfg["model"]["num_classes"],
                        preset=run_cfg["model"]["preset"])
    prefixes = ("backbone.", "decoder.") if args.detect == "off" else None
    ckpt.load_checkpoint(checkpoint, model, prefixes=prefixes)
    model.eval()
    model.reset_forward_counters()

    image = _load_image_tensor(image_path)
    with torch.no_grad():
        fmap = model.backbone(image[None]).maps[-1]
    ids, logprob = beam_search(model.decoder, fmap, beam=args.beam)
    from .scenegen import detokenize
    caption = detokenize(ids, vocab)
    out_row = {"id": image_path.stem, "caption": caption, "logprob": logprob}

    out_dir = Path(args.out) if args.out else checkpoint.parent
    if args.detect == "on":
        detections = detect(image, model)
        out_row["detections"] = [d.to_json() for d in detections]
        out_dir.mkdir(parents=True, exist_ok=True)
        overlay = draw_overlay(image, detections, caption, list(SHAPES))
        overlay_path = out_dir / f"{image_path.stem}_overlay.ppm"
        overlay.save(overlay_path)
        print(json.dumps(out_row))
        print(f"overlay -> {overlay_path}", file=sys.stderr)
    else:
        counts = model.detection_forward_counts()
        if any(counts.values()):
            raise RuntimeError(f"detection branch ran with --detect off: {counts}")
        print(json.dumps(out_row))
    return 0


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise UsageError(f"manifest not found: {manifest}")
    out_dir = Path(args.out) if args.out else checkpoint.parent
    row = M.evaluate(checkpoint, manifest, beam=args.beam,
                     match_dump=args.match_dump)
    out_dir.mkdir(parents=True, exist_ok=True)
    M.write_report(row, out_dir / "report.csv")
    (out_dir / "report.json").write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
    _echo_config(out_dir, "eval_config.json",
                 {"eval": {"checkpoint": str(checkpoint), "manifest": str(manifest),
                           "beam": args.beam}})
    print(json.dumps(row, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    raw = _resolve(args.lambdas, cfg, "sweep", "lambdas", None)
    if raw is None:
        lambdas = list(T.LAMBDA_PRESETS)
    else:
        try:
            lambdas = [float(x) for x in str(raw).split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"--lambdas must be comma-separated numbers, got {raw!r}")
        if not lambdas:
            raise UsageError("--lambdas parsed to an empty list")
    train_cfg = _train_config_from(args, cfg)
    manifest, vocab = _data_paths(args, cfg)
    val_manifest = _resolve(args.val_manifest, cfg, "data", "val_manifest", None)
    if val_manifest is None:
        raise UsageError("--val-manifest (or data.val_manifest in the config) is required")
    out = Path(args.out or _resolve(None, cfg, "sweep", "out", None) or _usage("--out is required"))
    _echo_config(out, "sweep_config.json", {
        "sweep": {"lambdas": lambdas, "out": str(out)},
        "train": dataclasses.asdict(train_cfg),
        "data": {"train_manifest": str(manifest), "val_manifest": str(val_manifest),
                 "vocab": str(vocab)}})
    rows = T.lambda_sweep(train_cfg, lambdas, manifest, Path(val_manifest), out, vocab)
    print(f"sweep report -> {out / 'sweep.csv'} ({len(rows)} rows)")
    return 0


def cmd_report(args) -> int:
    runs_dir = Path(args.runs_dir)
    if not runs_dir.is_dir():
        raise UsageError(f"runs dir not found: {runs_dir}")
    rows = []
    for run in sorted(p for p in runs_dir.iterdir() if p.is_dir()):
        report = run / "report.json"
        config = run / "config.json"
        if not report.exists():
            continue
        metrics_row = json.loads(report.read_text())
        train_info = {}
        if config.exists():
            train_info = json.loads(config.read_text()).get("train", {})
        rows.append({"run": run.name,
                     "freeze_plan": train_info.get("freeze_plan", ""),
                     "lambda": train_info.get("lambda_", ""),
                     **{k: metrics_row.get(k) for k in M.REPORT_COLUMNS}})
    if not rows:
        raise RuntimeError(f"no run reports found under {runs_dir}")
    out_dir = Path(args.out) if args.out else runs_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["run", "freeze_plan", "lambda"] + M.REPORT_COLUMNS

    def fmt(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    with open(out_dir / "report.csv", "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(fmt(r[c]) for c in cols) + "\n")
    with open(out_dir / "report.md", "w") as f:
        f.write("| " + " | ".join(cols) + " |\n")
        f.write("|" + "---|" * len(cols) + "\n")
        for r in rows:
            f.write("| " + " | ".join(fmt(r[c]) for c in cols) + " |\n")
    print(f"collated {len(rows)} runs -> {out_dir / 'report.csv'}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="capdet",
                     description="Joint captioning + detection: data, training, "
                                 "inference, evaluation, and reports.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out")
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-val", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    def add_train_flags(p):
        p.add_argument("--config")
        p.add_argument("--lambda", dest="lambda_", type=float)
        p.add_argument("--freeze-plan", choices=T.FREEZE_PLANS)
        p.add_argument("--manifest")
        p.add_argument("--vocab")
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--checkpoint-every", type=int)
        p.add_argument("--caption-select", choices=T.CAPTION_SELECTORS)
        p.add_argument("--preset", choices=["toy", "micro"])
        p.add_argument("--num-classes", type=int)

    p = sub.add_parser("train", help="train a joint model")
    add_train_flags(p)
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="caption (and optionally detect) one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--detect", choices=["on", "off"], default="on")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out")
    p.add_argument("--match-dump", help="write detection matching debug JSONL here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate one run per lambda value")
    add_train_flags(p)
    p.add_argument("--lambdas", help="comma-separated lambda values")
    p.add_argument("--val-manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="collate run reports into CSV + markdown")
    p.add_argument("--runs-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
