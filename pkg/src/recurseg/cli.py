"""Command-line surface: gen, train, eval, render.

Exit codes are a stable contract: 0 success, 1 runtime failure, 2 usage error.
Every command writes a manifest next to its outputs before doing any real
work; --dry-run stops after validation without touching the filesystem.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import DatasetFormatError, GenerationError, SceneSpec, generate_dataset, read_dataset, write_dataset
from .metrics import (
    InstanceSet,
    average_precision,
    coverage,
    evaluate_dataset,
    sbd,
)
from .experiments import predict_instance_sets
from .model import CheckpointError, ModelConfig, Segmenter, load_checkpoint
from .pngio import write_png
from .training import ScheduleConfig, TrainConfig, train

USAGE_ERROR = 2
RUNTIME_ERROR = 1

# emission-order instance palette for overlays
PALETTE = (
    (230, 80, 60), (70, 150, 230), (90, 200, 100), (240, 200, 60),
    (180, 100, 220), (80, 210, 210), (240, 140, 60), (150, 150, 150),
)


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int
    inputs: list
    outputs: list
    timestamp: str
    version: str


class UsageError(ValueError):
    """Bad flag combination discovered after parsing."""


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def write_manifest(path, command, args, inputs, outputs):
    manifest = RunManifest(
        command=command,
        config_path=getattr(args, "config", None),
        seed=getattr(args, "seed", 0),
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        timestamp=_timestamp(),
        version=__version__,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")


def read_config_file(path) -> dict:
    """Flat key=value lines; blank lines and # comments ignored."""
    values = {}
    for lineno, raw in enumerate(open(path, encoding="utf-8"), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def merge_config(args, argv, config_values):
    """Config file fills in flags not given on the command line; explicit flags win."""
    for key, raw in config_values.items():
        attr = key.replace("-", "_")
        if attr in ("command", "config") or not hasattr(args, attr):
            raise UsageError(f"unknown config key {key!r}")
        flag = "--" + attr.replace("_", "-")
        if any(tok == flag or tok.startswith(flag + "=") for tok in argv):
            continue
        current = getattr(args, attr)
        try:
            if isinstance(current, bool):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw
        except ValueError as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
        setattr(args, attr, value)
    return args


def effective_threads(requested: int) -> int:
    cap = os.environ.get("RECURSEG_THREADS")
    if cap is None:
        return requested
    try:
        cap = int(cap)
    except ValueError as exc:
        raise UsageError(f"RECURSEG_THREADS must be an integer: {exc}") from exc
    return max(1, min(requested, cap))


def parse_size(text: str):
    try:
        h, _, w = text.lower().partition("x")
        h, w = int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"--size expects HxW, got {text!r}") from exc
    if h < 1 or w < 1:
        raise UsageError("--size dimensions must be positive")
    return h, w


def parse_epochs(text: str):
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"--epochs expects four comma-separated counts, got {text!r}")
    try:
        values = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"--epochs must be integers: {exc}") from exc
    if any(v < 0 for v in values):
        raise UsageError("--epochs counts must be non-negative")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recurseg",
                                     description="Sequential attention instance segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file; flags win")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--dry-run", action="store_true", help="validate flags, touch nothing")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--size", default="64x64", help="image size HxW")
    g.add_argument("--max-instances", type=int, default=5)
    g.add_argument("--min-instances", type=int, default=1)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--val-data", default=None)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--epochs", default="2,2,2,6", help="per-stage epoch counts a,b,c,d")
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--glimpses", type=int, default=5)
    t.add_argument("--lstm-dim", type=int, default=64)
    t.add_argument("--patch", default="16x16", help="attention patch size HxW")
    t.add_argument("--max-steps", type=int, default=8)
    t.add_argument("--sched-offset", type=int, default=10000)
    t.add_argument("--sched-decay", type=float, default=2885.0)
    t.add_argument("--sched-growth", type=float, default=3.0)
    t.add_argument("--no-box-net", action="store_true")
    t.add_argument("--no-angle", action="store_true")
    t.add_argument("--no-preproc", action="store_true")
    t.add_argument("--no-sched-sample", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(e)
    e.add_argument("--ckpt", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself instead of a model")

    r = sub.add_parser("render", help="render per-step diagnostics for one scene")
    common(r)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--scene", type=int, required=True)
    r.add_argument("--steps", default="all", help="'all' or a step count")
    r.add_argument("--out-dir", required=True)
    return parser


def cmd_gen(args) -> int:
    h, w = parse_size(args.size)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    if not 0 <= args.min_instances <= args.max_instances:
        raise UsageError("--min-instances must be between 0 and --max-instances")
    spec = SceneSpec(img_h=h, img_w=w, n_min=args.min_instances,
                     n_max=args.max_instances, seed=args.seed)
    if args.dry_run:
        print(f"would generate {args.count} {h}x{w} scenes into {args.out}")
        return 0
    out = Path(args.out)
    write_manifest(out.parent / (out.name + ".manifest.json"), "gen", args, [], [out])
    scenes = generate_dataset(spec, args.count)
    write_dataset(out, scenes)
    histogram = Counter(s.count for s in scenes)
    print(f"wrote {len(scenes)} scenes to {out}")
    print("instances histogram:", dict(sorted(histogram.items())))
    return 0


def model_config_from_args(args, img_h, img_w) -> ModelConfig:
    ph, pw = parse_size(args.patch)
    return ModelConfig(
        img_h=img_h, img_w=img_w, patch_h=ph, patch_w=pw,
        glimpse_count=args.glimpses, lstm_dim=args.lstm_dim, max_steps=args.max_steps,
        use_preproc=not args.no_preproc, use_angles=not args.no_angle,
        use_box_net=not args.no_box_net,
    )


def cmd_train(args) -> int:
    train_cfg = TrainConfig(
        lr=args.lr, batch=args.batch, stage_epochs=parse_epochs(args.epochs),
        seed=args.seed, threads=effective_threads(args.threads),
        sched_sample=not args.no_sched_sample,
        schedule=ScheduleConfig(epoch_offset=args.sched_offset,
                                decay_const=args.sched_decay,
                                step_growth=args.sched_growth),
    )
    scenes = read_dataset(args.data)
    if not scenes:
        raise UsageError("training data is empty")
    val_scenes = read_dataset(args.val_data) if args.val_data else ()
    h, w = scenes[0].rgb.shape[:2]

    start_step = start_sched = 0
    if args.resume:
        model_cfg, store = load_checkpoint(args.resume)
        model = Segmenter(model_cfg, store=store)
        state_path = Path(args.resume).parent / "state.json"
        if state_path.exists():
            state = json.loads(state_path.read_text())
            start_step = int(state.get("global_step", 0))
            start_sched = int(state.get("sched_step", 0))
    else:
        model_cfg = model_config_from_args(args, h, w)
        model = Segmenter(model_cfg, seed=args.seed)

    if args.dry_run:
        print(f"would train on {len(scenes)} scenes for stage epochs {train_cfg.stage_epochs}, "
              f"glimpses={model.cfg.glimpse_count}, start step {start_step}")
        return 0

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir / "manifest.json", "train", args,
                   [args.data] + ([args.val_data] if args.val_data else []),
                   [out_dir / "checkpoint.ckpt", out_dir / "train_log.jsonl"])
    with open(out_dir / "train_log.jsonl", "a", encoding="utf-8") as log_fh:
        result = train(model, scenes, train_cfg, val_scenes=val_scenes,
                       out_dir=out_dir, log_stream=log_fh,
                       start_step=start_step, start_sched_step=start_sched)
    if result.aborted:
        print("training diverged; last good checkpoint kept", file=sys.stderr)
        return RUNTIME_ERROR
    print(f"trained {result.global_step} steps; checkpoint at {out_dir / 'checkpoint.ckpt'}")
    return 0


def per_scene_rows(preds, gts):
    for idx, (p, g) in enumerate(zip(preds, gts)):
        ap, _ = average_precision(p, g)
        yield {
            "scene": idx,
            "sbd": sbd(p, g),
            "mwcov": coverage(p, g, weighted=True),
            "mucov": coverage(p, g, weighted=False),
            "ap": ap,
            "dic": abs(p.count - g.count),
        }


def cmd_eval(args) -> int:
    if not args.oracle and not args.ckpt:
        raise UsageError("--ckpt is required unless --oracle is given")
    scenes = read_dataset(args.data)
    gts = [InstanceSet(list(s.masks)) for s in scenes]
    if args.dry_run:
        source = "ground truth" if args.oracle else args.ckpt
        print(f"would evaluate {source} on {len(scenes)} scenes")
        return 0

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir / "manifest.json", "eval", args,
                   [args.data] + ([args.ckpt] if args.ckpt else []),
                   [out_dir / "metrics.json", out_dir / "per_scene.csv"])

    if args.oracle:
        preds = [InstanceSet(list(s.masks), scores=[1.0] * s.count) for s in scenes]
    else:
        model_cfg, store = load_checkpoint(args.ckpt)
        model = Segmenter(model_cfg, store=store)
        preds = predict_instance_sets(model, scenes)

    report = evaluate_dataset(preds, gts)
    (out_dir / "metrics.json").write_text(report.to_json() + "\n")
    with open(out_dir / "per_scene.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["scene", "sbd", "mwcov", "mucov", "ap", "dic"])
        writer.writeheader()
        for row in per_scene_rows(preds, gts):
            writer.writerow(row)
    print(report.to_json())
    return 0


def _upsample_nearest(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape
    rows = np.minimum((np.arange(h) * gh) // h, gh - 1)
    cols = np.minimum((np.arange(w) * gw) // w, gw - 1)
    return grid[rows][:, cols]


def _join_panels(panels, axis: int, pad: int = 2) -> np.ndarray:
    """Concatenate same-sized panels with a thin grey separator between them."""
    sep_shape = list(panels[0].shape)
    sep_shape[axis] = pad
    sep = np.full(sep_shape, 0.25)
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(sep)
        parts.append(p)
    return np.concatenate(parts, axis=axis)


def render_episode_strip(model, scene, max_steps=None):
    """One row per step: final attention map, soft box, step mask, canvas."""
    with ad.no_grad():
        ep = model.run_episode(scene.rgb, mode="infer")
    steps = ep.steps if max_steps is None else ep.steps[:max_steps]
    h, w = model.cfg.img_h, model.cfg.img_w
    rows = []
    for t, st in enumerate(steps):
        if st.alphas:
            grid = st.alphas[-1].value.reshape(model.cfg.feature_h, model.cfg.feature_w)
            alpha = _upsample_nearest(grid / max(float(grid.max()), 1e-12), h, w)
        else:
            alpha = np.zeros((h, w))
        panels = [alpha,
                  st.soft_box.value[:, :, 0],
                  st.mask.value[:, :, 0],
                  ep.canvases[min(t + 1, len(ep.canvases) - 1)].value[:, :, 0]]
        rows.append(_join_panels([np.clip(p, 0.0, 1.0) for p in panels], axis=1))
    strip = _join_panels(rows, axis=0) if rows else np.zeros((1, 1))
    return strip, ep


def emission_overlay(scene, ep) -> np.ndarray:
    """Input image with emitted masks tinted in emission order."""
    img = scene.rgb.copy()
    emitted = [st for st in ep.steps if st.emitted]
    for order, st in enumerate(emitted):
        color = np.array(PALETTE[order % len(PALETTE)]) / 255.0
        mask = st.mask.value[:, :, 0] >= 0.5
        img[mask] = 0.45 * img[mask] + 0.55 * color
    return img


def cmd_render(args) -> int:
    scenes = read_dataset(args.data)
    if not 0 <= args.scene < len(scenes):
        raise UsageError(f"--scene {args.scene} out of range for {len(scenes)} scenes")
    if args.steps != "all":
        try:
            max_steps = int(args.steps)
        except ValueError as exc:
            raise UsageError(f"--steps expects 'all' or an integer: {exc}") from exc
        if max_steps < 1:
            raise UsageError("--steps must be positive")
    else:
        max_steps = None

    model_cfg, store = load_checkpoint(args.ckpt)
    model = Segmenter(model_cfg, store=store)
    scene = scenes[args.scene]
    if scene.rgb.shape[:2] != (model_cfg.img_h, model_cfg.img_w):
        raise UsageError("scene size does not match the checkpoint's image size")

    if args.dry_run:
        print(f"would render scene {args.scene} of {args.data}")
        return 0

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    strip_path = out_dir / f"scene{args.scene:04d}_steps.png"
    overlay_path = out_dir / f"scene{args.scene:04d}_overlay.png"
    write_manifest(out_dir / "manifest.json", "render", args,
                   [args.data, args.ckpt], [strip_path, overlay_path])

    strip, ep = render_episode_strip(model, scene, max_steps)
    write_png(strip_path, strip)
    write_png(overlay_path, emission_overlay(scene, ep))
    print(f"rendered {len(ep.steps)} steps to {strip_path}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "render": cmd_render}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        if args.config:
            merge_config(args, argv, read_config_file(args.config))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, OSError, GenerationError, DatasetFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
