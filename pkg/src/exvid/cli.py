"""Command line front end.

Pipeline order: build -> pretrain -> surgery -> posttune -> sample -> eval,
with inspect and verify-identity as checking tools. Every command that takes
--seed writes byte-identical artifacts when re-run with the same arguments.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckptio
from . import data as dataio
from . import diffusion, trainer
from .model import ModelConfig, build_model
from .surgery import ExtensionPlan, verify_identity
from .tensor import Tensor


def _fmt(prog: str) -> argparse.HelpFormatter:
    return argparse.HelpFormatter(prog, width=96)


def _bool_flag(value: str) -> bool:
    low = value.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {value!r}")


def _channels(value: str) -> tuple[int, ...]:
    try:
        chans = tuple(int(part) for part in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {value!r}")
    if not chans:
        raise argparse.ArgumentTypeError("at least one channel width required")
    return chans


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--steps", type=int, required=True, help="optimizer steps to run")
    p.add_argument("--lr", type=float, default=1e-5, help="Adam learning rate (default: 1e-5)")
    p.add_argument("--batch", type=int, default=1, help="clips per step (default: 1)")
    p.add_argument("--ema-decay", type=float, default=0.999,
                   help="EMA shadow decay (default: 0.999)")
    p.add_argument("--grad-checkpoint", type=_bool_flag, default=True, metavar="BOOL",
                   help="recompute activations segment-wise on backward (default: true)")
    p.add_argument("--mixed-precision", type=_bool_flag, default=False, metavar="BOOL",
                   help="store frozen weights as float16 (default: false)")
    p.add_argument("--checkpoint-every", type=int, default=100,
                   help="save raw+EMA checkpoints every k steps (default: 100)")
    p.add_argument("--max-shapes", type=int, default=3,
                   help="max moving shapes per synthetic clip (default: 3)")


def _train_config(args, freeze_spatial: bool) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        max_steps=args.steps,
        lr=args.lr,
        batch_size=args.batch,
        ema_decay=args.ema_decay,
        gradient_checkpointing=args.grad_checkpoint,
        mixed_precision=args.mixed_precision,
        checkpoint_every=args.checkpoint_every,
        seed=args.seed,
        freeze_spatial=freeze_spatial,
    )


def _dataset_for(model, max_shapes: int) -> dataio.MovingShapesDataset:
    cfg = model.config
    return dataio.MovingShapesDataset(
        frames=model.frame_capacity, height=cfg.height, width=cfg.width,
        channels=cfg.video_channels, max_shapes=max_shapes,
    )


# -- commands ----------------------------------------------------------------


def cmd_build(args) -> int:
    config = ModelConfig(
        base_frames=args.t_base,
        channels=args.channels,
        video_channels=args.video_channels,
        height=args.height,
        width=args.width,
        norm_groups=args.groups,
    )
    config.validate()
    model = build_model(config, seed=args.seed)
    ckptio.save(model, args.out)
    print(f"built {model.frame_capacity}-frame model, {model.element_count()} elements -> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    model = ckptio.load_model(args.model)
    config = _train_config(args, freeze_spatial=False)
    dataset = _dataset_for(model, args.max_shapes)
    state = trainer.train_loop(model, dataset, config, args.out)
    print(f"pretrained {state.step} steps, final loss {state.loss_history[-1]:.6f} -> {args.out}")
    return 0


def cmd_surgery(args) -> int:
    plan = ExtensionPlan(t_base=args.t_base, t_ext=args.t_ext)
    report = ckptio.surgery_on_checkpoint(args.input, plan, args.out)
    print(report.summary())
    print(f"extended {args.t_base} -> {args.t_ext} frames -> {args.out}")
    return 0


def cmd_posttune(args) -> int:
    if not args.model and not args.resume:
        raise ValueError("posttune needs --model or --resume")
    config = _train_config(args, freeze_spatial=True)
    if args.resume:
        model, state = trainer.resume(args.resume, config)
    else:
        model = ckptio.load_model(args.model)
        state = None
    state = trainer.train_loop(model, _dataset_for(model, args.max_shapes), config, args.out,
                               state=state)
    print(f"post-tuned to step {state.step}, final loss {state.loss_history[-1]:.6f} -> {args.out}")
    return 0


def cmd_sample(args) -> int:
    model = ckptio.load_model(args.model)
    frames = args.frames or model.frame_capacity
    cfg = model.config
    scene_rng = np.random.default_rng(np.random.SeedSequence([args.seed, 7]))
    spec = dataio.random_scene(scene_rng, frames=frames, height=cfg.height, width=cfg.width,
                               channels=cfg.video_channels)
    first_frame = dataio.gen_video(spec).data[None, 0]
    video = diffusion.sample(model, first_frame, frames, args.steps,
                             np.random.default_rng(args.seed))
    os.makedirs(args.out, exist_ok=True)
    ckptio.save({"video": video.data}, os.path.join(args.out, "video.exvc"))
    paths = dataio.write_frames(video.data[0], args.out, fmt=args.frames_format)
    print(f"sampled {frames} frames in {args.steps} steps -> {len(paths)} {args.frames_format} files in {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = ckptio.load_model(args.model)
    cfg = model.config
    specs, seeds = [], []
    for i in range(args.clips):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 100 + i]))
        specs.append(dataio.random_scene(rng, frames=model.frame_capacity, height=cfg.height,
                                         width=cfg.width, channels=cfg.video_channels))
        seeds.append(args.seed * 1000 + i)
    report = dataio.eval_report(model, specs, seeds, sample_steps=args.steps)
    text = dataio.report_json(report)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def cmd_inspect(args) -> int:
    tensors = ckptio.load(args.path)
    print(f"{args.path}: format v{ckptio.FORMAT_VERSION}, {len(tensors)} tensors")
    for name in sorted(tensors):
        arr = tensors[name]
        print(f"  {name}  {arr.dtype}  {tuple(arr.shape)}  {arr.size}")
    if args.diff:
        other = ckptio.load(args.diff)
        print(f"diff vs {args.diff}:")
        print(ckptio.diff(tensors, other).summary())
    return 0


def cmd_verify_identity(args) -> int:
    base = ckptio.load_model(args.base)
    extended = ckptio.load_model(args.extended)
    cfg = base.config
    rng = np.random.default_rng(args.seed)
    t0 = base.frame_capacity
    sample_batch = {
        "video": Tensor(rng.standard_normal(
            (1, t0, cfg.video_channels, cfg.height, cfg.width), dtype=np.float32)),
        "first_frame": Tensor(rng.standard_normal(
            (1, cfg.video_channels, cfg.height, cfg.width), dtype=np.float32)),
        "timestep": rng.integers(0, 1000, size=1),
    }
    diff = verify_identity(base, extended, sample_batch)
    print(f"max abs diff: {diff}")
    return 0 if diff == 0.0 else 1


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exvid", formatter_class=_fmt,
        description="Frame-capacity extension lab for a toy video diffusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("build", formatter_class=_fmt,
                       help="initialize a base model checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--seed", type=int, default=0, help="init seed (default: 0)")
    p.add_argument("--t-base", type=int, default=8, help="base frame capacity (default: 8)")
    p.add_argument("--height", type=int, default=32, help="canvas height (default: 32)")
    p.add_argument("--width", type=int, default=32, help="canvas width (default: 32)")
    p.add_argument("--video-channels", type=int, default=3, help="video channels (default: 3)")
    p.add_argument("--channels", type=_channels, default=(32, 64),
                   help="comma-separated UNet widths per level (default: 32,64)")
    p.add_argument("--groups", type=int, default=8, help="group-norm groups (default: 8)")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("pretrain", formatter_class=_fmt,
                       help="train a base model on moving-shapes clips (nothing frozen)")
    p.add_argument("--model", required=True, help="input model checkpoint")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=0, help="run seed (default: 0)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("surgery", formatter_class=_fmt,
                       help="extend a checkpoint's frame capacity on disk")
    p.add_argument("--in", dest="input", required=True, help="input checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--t-base", type=int, default=8, help="expected input capacity (default: 8)")
    p.add_argument("--t-ext", type=int, default=40, help="target capacity (default: 40)")
    p.set_defaults(func=cmd_surgery)

    p = sub.add_parser("posttune", formatter_class=_fmt,
                       help="train only the temporal blocks of an extended model")
    p.add_argument("--model", help="input model checkpoint")
    p.add_argument("--resume", help="raw run checkpoint to continue from")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=0, help="run seed (default: 0)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_posttune)

    p = sub.add_parser("sample", formatter_class=_fmt,
                       help="generate a video conditioned on a synthetic first frame")
    p.add_argument("--model", required=True, help="model checkpoint (raw or EMA)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="noise/scene seed (default: 0)")
    p.add_argument("--frames", type=int, default=0,
                   help="frames to generate (default: model capacity)")
    p.add_argument("--steps", type=int, default=50, help="denoising steps (default: 50)")
    p.add_argument("--frames-format", choices=("pgm", "ppm"), default="ppm",
                   help="per-frame image format (default: ppm)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", formatter_class=_fmt,
                       help="sample held-out scenes and report motion metrics")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--out", required=True, help="output directory for report.json")
    p.add_argument("--seed", type=int, default=0, help="held-out scene seed (default: 0)")
    p.add_argument("--clips", type=int, default=4, help="clips to sample (default: 4)")
    p.add_argument("--steps", type=int, default=20, help="denoising steps per clip (default: 20)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", formatter_class=_fmt,
                       help="list checkpoint contents, optionally diff against another")
    p.add_argument("path", help="checkpoint to inspect")
    p.add_argument("--diff", help="second checkpoint to compare against")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify-identity", formatter_class=_fmt,
                       help="check the extended model matches the base model at base capacity")
    p.add_argument("--base", required=True, help="base model checkpoint")
    p.add_argument("--extended", required=True, help="extended model checkpoint")
    p.add_argument("--seed", type=int, default=0, help="probe input seed (default: 0)")
    p.set_defaults(func=cmd_verify_identity)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # uniform diagnostics; tracebacks help nobody at the CLI
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
