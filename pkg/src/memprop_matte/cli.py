"""Batch command-line entry point: datagen | train | infer | eval.

Every flag has a config-file equivalent (JSON, same key with dashes as
underscores); an explicit flag overrides the config value, and the
MEMPROP_MATTE_SEED environment variable overrides any configured seed.
Exit codes: 0 ok, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import torch

from . import clipio
from .core import VideoClip
from .inference import DEFAULT_MEMORY_INTERVAL, DEFAULT_WARMUP_ITERS, propagate
from .network import CheckpointError
from .report import benchmark_report, render_loss_curves
from .synthdata import CorpusConfig, RenderError, generate_corpus
from .training import default_stage_config, load_model_from_checkpoint, run_stage

SEED_ENV_VAR = "MEMPROP_MATTE_SEED"


class UserError(Exception):
    """Invalid input from the operator (bad paths, malformed config, ...)."""


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UserError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UserError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise UserError(f"config file {path} must hold a JSON object")
    return payload


def _resolve(args: argparse.Namespace, config: dict, key: str, default):
    """Precedence: explicit flag > config entry > default."""
    flag_value = getattr(args, key, None)
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _resolve_seed(args: argparse.Namespace, config: dict, default: int = 0) -> int:
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UserError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from exc
    return int(_resolve(args, config, "seed", default))


def cmd_datagen(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    known = {f.name for f in CorpusConfig.__dataclass_fields__.values()}
    unknown = set(config) - known - {"seed", "jobs", "out"}
    if unknown:
        raise UserError(f"unknown datagen config fields: {sorted(unknown)}")
    kwargs = {
        key: _resolve(args, config, key, getattr(CorpusConfig, key, None))
        for key in ("height", "width", "frames")
    }
    for key in known - {"seed", "height", "width", "frames"}:
        if key in config:
            kwargs[key] = config[key]
    try:
        cfg = CorpusConfig(seed=_resolve_seed(args, config), **{
            k: v for k, v in kwargs.items() if v is not None
        })
    except ValueError as exc:
        raise UserError(f"invalid corpus config: {exc}") from exc
    jobs = int(_resolve(args, config, "jobs", 1))
    manifest = generate_corpus(cfg, Path(args.out), jobs=jobs)
    print(f"wrote corpus manifest: {manifest}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    stage_id = int(_resolve(args, config, "stage", 0))
    if stage_id not in (1, 2, 3):
        raise UserError(f"--stage must be 1, 2 or 3, got {stage_id}")
    seed = _resolve_seed(args, config)
    scale = float(_resolve(args, config, "scale", 0.01))
    stage = default_stage_config(stage_id, scale=scale)
    iterations = _resolve(args, config, "iterations", None)
    if iterations is not None:
        stage.iterations = int(iterations)
    lr = _resolve(args, config, "lr", None)
    if lr is not None:
        stage.learning_rate = float(lr)
    batch_size = _resolve(args, config, "batch_size", None)
    if batch_size is not None:
        stage.batch_size = int(batch_size)

    deterministic = bool(args.deterministic or config.get("deterministic", False))
    if deterministic:
        torch.use_deterministic_algorithms(True)

    manifest = Path(args.manifest)
    if not manifest.exists():
        raise UserError(f"manifest not found: {manifest}")
    init = Path(args.init) if args.init else None
    if init is not None and not init.exists():
        raise UserError(f"initial checkpoint not found: {init}")
    try:
        ckpt, csv_path = run_stage(
            stage, manifest, Path(args.out), seed=seed, init_checkpoint=init
        )
    except (ValueError, CheckpointError) as exc:
        raise UserError(str(exc)) from exc
    render_loss_curves(csv_path, csv_path.with_suffix(".png"))
    print(f"stage {stage_id} done: checkpoint {ckpt}, losses {csv_path}")
    return 0


def _load_clip_for_inference(clip_dir: Path) -> VideoClip:
    if (clip_dir / "frames").is_dir():
        return clipio.load_clip_frames(clip_dir)
    # a bare directory of frame PNGs is accepted too
    paths = sorted(clip_dir.glob("*.png"))
    if not paths:
        raise UserError(f"no frame images found under {clip_dir}")
    return VideoClip(torch.stack([clipio.load_frame(p) for p in paths]))


def cmd_infer(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    warmup = int(_resolve(args, config, "warmup_iters", DEFAULT_WARMUP_ITERS))
    interval = int(_resolve(args, config, "memory_interval", DEFAULT_MEMORY_INTERVAL))
    preview = bool(args.preview or config.get("preview", False))

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UserError(f"checkpoint not found: {ckpt}")
    clip_dir = Path(args.clip)
    if not clip_dir.is_dir():
        raise UserError(f"clip directory not found: {clip_dir}")
    mask_path = Path(args.mask)
    if not mask_path.exists():
        raise UserError(f"mask file not found: {mask_path}")

    try:
        model = load_model_from_checkpoint(ckpt)
    except CheckpointError as exc:
        raise UserError(str(exc)) from exc
    clip = _load_clip_for_inference(clip_dir)
    mask = clipio.load_mask_frame(mask_path)
    try:
        alpha = propagate(
            clip, mask, model, memory_interval=interval, warmup_iters=warmup
        )
    except ValueError as exc:
        raise UserError(str(exc)) from exc

    out_dir = Path(args.out)
    clip_id = clip_dir.name
    clipio.save_clip(out_dir, clip_id, alpha=alpha)
    if preview:
        green = torch.tensor([0.0, 1.0, 0.0]).reshape(3, 1, 1)
        for t in range(len(clip)):
            composite = alpha.alpha[t] * clip.frames[t] + (1 - alpha.alpha[t]) * green
            clipio.save_frame(
                out_dir / clip_id / "preview" / (clipio.FRAME_PATTERN % t), composite
            )
    print(f"wrote {len(clip)} alpha frames to {out_dir / clip_id}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    kernel = int(_resolve(args, config, "core_kernel", 21))
    split = _resolve(args, config, "split", "test")
    jobs = int(_resolve(args, config, "jobs", 1))
    figures = not (args.no_figures or config.get("no_figures", False))

    manifest = Path(args.manifest)
    if not manifest.exists():
        raise UserError(f"manifest not found: {manifest}")
    predictions = Path(args.predictions)
    if not predictions.is_dir():
        raise UserError(f"predictions directory not found: {predictions}")

    reports, all_ok = benchmark_report(
        manifest,
        predictions,
        Path(args.out),
        core_kernel=kernel,
        split=None if split in ("all", None) else split,
        jobs=jobs,
        figures=figures,
    )
    for r in reports:
        if r.error:
            print(f"clip {r.clip_id}: ERROR {r.error}", file=sys.stderr)
    print(f"wrote report for {len(reports)} clips to {args.out}")
    return 0 if all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memprop-matte",
        description="Memory-propagation video matting: data generation, "
        "training, inference and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="render a synthetic corpus and manifest")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--config", help="JSON config with flag equivalents")
    p.add_argument("--seed", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", type=int)
    p.add_argument("--out", required=True, help="checkpoint/loss output directory")
    p.add_argument("--init", help="previous-stage checkpoint (required for stages 2-3)")
    p.add_argument("--config", help="JSON config with flag equivalents")
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", type=float, help="budget scale vs the full schedule")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="propagate a first-frame mask through a clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="clip directory (with frames/)")
    p.add_argument("--mask", required=True, help="first-frame guidance mask PNG")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config with flag equivalents")
    p.add_argument("--warmup-iters", dest="warmup_iters", type=int)
    p.add_argument("--memory-interval", dest="memory_interval", type=int)
    p.add_argument("--preview", action="store_true", help="write composite previews")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config", help="JSON config with flag equivalents")
    p.add_argument("--core-kernel", dest="core_kernel", type=int)
    p.add_argument("--split", choices=("train", "val", "test", "all"))
    p.add_argument("--jobs", type=int)
    p.add_argument("--no-figures", dest="no_figures", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, NotADirectoryError, RenderError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # internal failure
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
