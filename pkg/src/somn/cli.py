"""Command-line entry point: ``somn train|render|eval|info``.

Exit codes: 0 on success, 1 on I/O or data errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import SomnError
from .evaluation import CSV_HEADER, avg_log_likelihood, compare_images, darkness_ratio
from .imaging import MAXVAL, darkness_mass, read_pgm, render, write_pgm
from .serialization import load_model, loads_model, save_model
from .som import anchors_to_mixture, som_train
from .trainer import (
    CHECKPOINT_HEADER,
    ConfigError,
    TrainConfig,
    fit,
    learning_rate,
    load_checkpoint,
    radius,
    save_checkpoint,
)

MANIFEST_VERSION = 1
DEFAULT_EVAL_SAMPLES = 10_000

# Config fields whose flag is not simply the field name with dashes.
FIELD_FLAGS = {"iterations": "iters", "grid_width": "grid", "grid_height": "grid"}


class UsageError(Exception):
    """Bad command-line input; reported with exit code 2."""


def _grid(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like WxH, got {text!r}") from None
    return w, h


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="somn", description="Grayscale images as Gaussian mixtures.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model to a PGM image")
    t.add_argument("image", help="input PGM (P2 or P5)")
    t.add_argument("--out", help="model file (default: <image>.model)")
    t.add_argument("--algo", choices=("somn", "som"), default="somn")
    t.add_argument("--grid", type=_grid, default=(10, 10), metavar="WxH")
    t.add_argument("--iters", type=int, default=100_000, help="iterations T")
    t.add_argument("--learn", type=float, default=0.15,
                   help="learning rate scale, 0.01..1.00 (steps of 0.01 suffice); "
                        "initial rate for --algo som")
    t.add_argument("--weight", type=float, default=0.00005,
                   help="weight damping, 0.00001..0.00100 (steps of 0.00001 suffice)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--cooling-floor", type=float, default=0.01)
    t.add_argument("--initial-radius", type=float, default=None,
                   help="starting lattice radius (default: half the larger grid side); "
                        "starting neighbourhood width for --algo som")
    t.add_argument("--covariance-floor", type=float, default=0.25)
    t.add_argument("--metric", choices=("chebyshev", "manhattan"), default="chebyshev")
    t.add_argument("--sequential", action="store_true",
                   help="covariance update uses the already-moved mean")
    t.add_argument("--undamped-weights", action="store_true",
                   help="update weights at the full learning rate")
    t.add_argument("--checkpoint-every", type=int, default=None, metavar="N")
    t.add_argument("--resume", default=None, metavar="PATH", help="continue from a checkpoint")
    t.add_argument("--eval-samples", type=int, default=DEFAULT_EVAL_SAMPLES,
                   help="samples for the log-likelihood in the manifest")

    r = sub.add_parser("render", help="draw a model as a PGM image")
    r.add_argument("model")
    r.add_argument("--out", required=True, help="output PGM")
    r.add_argument("--width", type=int)
    r.add_argument("--height", type=int)
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--target-mass", type=float, help="total darkness of the output")
    g.add_argument("--from-image", help="take size and total darkness from this PGM")
    r.add_argument("--ascii", action="store_true", help="write P2 instead of P5")

    e = sub.add_parser("eval", help="score a rendering against its original")
    e.add_argument("original")
    e.add_argument("rendered")
    e.add_argument("model")
    e.add_argument("--samples", type=int, default=DEFAULT_EVAL_SAMPLES)
    e.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("info", help="summarize a model or checkpoint file")
    i.add_argument("model")
    return p


# --------------------------------------------------------------------- train


def config_from_args(args) -> TrainConfig:
    try:
        return TrainConfig(
            grid_width=args.grid[0], grid_height=args.grid[1], iterations=args.iters,
            learn=args.learn, weight=args.weight, seed=args.seed,
            cooling_floor=args.cooling_floor, initial_radius=args.initial_radius,
            covariance_floor=args.covariance_floor, metric=args.metric,
            sequential=args.sequential, undamped_weights=args.undamped_weights,
        )
    except ConfigError as exc:
        flag = FIELD_FLAGS.get(exc.field, exc.field.replace("_", "-"))
        raise UsageError(f"--{flag}: {exc}") from None


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _progress_printer(T: int):
    def report(t, snap):
        print(f"t={t}/{T} a={snap.learning_rate:.6g} delta={snap.radius:.4g} "
              f"min_weight={snap.min_weight:.3g} min_eig={snap.min_cov_eigenvalue:.4g}",
              file=sys.stderr, flush=True)
    return report


def _checkpoint_writer(out: Path):
    def write(state):
        out.with_name(f"{out.name}.ckpt-{state.t:09d}").write_bytes(save_checkpoint(state))
    return write


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    if args.checkpoint_every is not None and args.checkpoint_every < 1:
        raise UsageError("--checkpoint-every must be >= 1")
    if args.eval_samples < 1:
        raise UsageError("--eval-samples must be >= 1")
    if args.algo == "som" and (args.checkpoint_every or args.resume):
        raise UsageError("--checkpoint-every and --resume apply to --algo somn only")
    out = Path(args.out) if args.out else Path(args.image).with_suffix(".model")

    started = _now()
    img = read_pgm(args.image)
    dist = darkness_mass(img)

    if args.algo == "som":
        lat = cfg.lattice()
        anchors = som_train(dist, lat, cfg.iterations, eta0=cfg.learn,
                            sigma0=cfg.initial_radius, seed=cfg.seed)
        model = anchors_to_mixture(anchors, dist, cfg.covariance_floor)
    else:
        state = None
        if args.resume:
            state = load_checkpoint(Path(args.resume).read_bytes())
            if state.config is not None and state.config.to_dict() != cfg.to_dict():
                print("note: resuming with the checkpoint's configuration", file=sys.stderr)
                cfg = state.config
        saver = _checkpoint_writer(out) if args.checkpoint_every else None
        state = fit(cfg, dist, progress=_progress_printer(cfg.iterations),
                    progress_every=max(cfg.iterations // 100, 1), state=state,
                    checkpoint=saver, checkpoint_every=args.checkpoint_every)
        model = state.model

    save_model(out, model, (cfg.grid_width, cfg.grid_height))
    rendered = render(model, img.width, img.height, dist.total_mass)
    report = compare_images(img, rendered)
    report.avg_log_likelihood = avg_log_likelihood(model, dist, args.eval_samples, cfg.seed)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "algo": args.algo,
        "image": str(args.image),
        "model": str(out),
        "config": cfg.to_dict(),
        "checkpoint_every": args.checkpoint_every,
        "resumed_from": args.resume,
        "eval_samples": args.eval_samples,
        "started": started,
        "finished": _now(),
        "eval": report.to_dict(),
    }
    out.with_name(out.name + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {out}", file=sys.stderr)
    return 0


# ------------------------------------------------------------ render / eval


def cmd_render(args) -> int:
    if args.target_mass is not None and args.target_mass < 0:
        raise UsageError("--target-mass must be >= 0")
    for name in ("width", "height"):
        v = getattr(args, name)
        if v is not None and v < 1:
            raise UsageError(f"--{name} must be >= 1")
    ref = None
    if args.from_image:
        ref = read_pgm(args.from_image)
        width = args.width or ref.width
        height = args.height or ref.height
        target = float(np.sum(MAXVAL - ref.pixels.astype(np.int64)))
    else:
        if args.width is None or args.height is None:
            raise UsageError("--width and --height are required with --target-mass")
        width, height, target = args.width, args.height, args.target_mass

    model, _ = load_model(args.model)
    img = render(model, width, height, target)
    write_pgm(args.out, img, "ascii" if args.ascii else "binary")
    dark = float(np.sum(MAXVAL - img.pixels.astype(np.int64)))
    if ref is not None and ref.pixels.shape == img.pixels.shape:
        ratio = darkness_ratio(ref, img)
    else:
        ratio = dark / target if target > 0 else None
    print(f"darkness_ratio={'n/a' if ratio is None else format(ratio, '.6f')}")
    return 0


def cmd_eval(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    original = read_pgm(args.original)
    rendered = read_pgm(args.rendered)
    model, _ = load_model(args.model)
    report = compare_images(original, rendered)
    if report.darkness_ratio is not None:
        report.avg_log_likelihood = avg_log_likelihood(model, darkness_mass(original), args.samples,
                                                       args.seed)
    print(CSV_HEADER)
    print(report.to_csv_row())
    return 0


def cmd_info(args) -> int:
    data = Path(args.model).read_bytes()
    text = data.decode("utf-8")
    if text.startswith("SOMN-CHECKPOINT"):
        state = load_checkpoint(data)
        print(f"checkpoint: {CHECKPOINT_HEADER}, iteration {state.t}")
        if state.config is not None:
            cfg = state.config
            print(f"schedule: T={cfg.iterations} a={learning_rate(max(state.t, 1), cfg):.6g} "
                  f"delta={radius(max(state.t, 1), cfg):.4g}")
        model, grid = state.model, (state.lattice.width, state.lattice.height)
    else:
        model, grid = loads_model(text)
    w = model.weights
    eig = np.linalg.eigvalsh(model.covs)
    lo, hi = model.means.min(axis=0), model.means.max(axis=0)
    print(f"grid: {grid[0]}x{grid[1]} ({model.n_components} components, dim {model.dimension})")
    print(f"weights: sum={np.sum(w):.12g} min={w.min():.6g} max={w.max():.6g}")
    print(f"covariance eigenvalues: min={eig.min():.6g} max={eig.max():.6g}")
    print("means bounding box: " + " ".join(f"[{a:.4g}, {b:.4g}]" for a, b in zip(lo, hi)))
    return 0


COMMANDS = {"train": cmd_train, "render": cmd_render, "eval": cmd_eval, "info": cmd_info}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, UnicodeDecodeError, SomnError) as exc:
        print(f"somn: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
