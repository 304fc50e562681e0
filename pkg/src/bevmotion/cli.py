"""Command-line interface.

Subcommands: synth | pseudo | optimize | eval | render | gradcheck.
Stdout carries machine-readable JSON only; diagnostics go to stderr, and
every error path exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import archive, render
from .core import BACKWARD, FORWARD, Config, GridSpec, MotionStack
from .errors import BevMotionError, EvalError
from .evaluate import bucketed_errors
from .gradcheck import run_gradient_checks
from .losses import LossToggles
from .optimizer import optimize_scene
from .preprocess import occupancy_mask
from .synth import SUITE_NAMES, SceneRecipe, generate, recipe_suite
from .transport import label_stack


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _load_config(args) -> Config:
    cfg = archive.load_config_file(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, rng_seed=args.seed)
    return cfg.validated()


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def _synth_one(job):
    recipe, cfg, grid, out_root = job
    sequence = generate(recipe, cfg, grid)
    out = archive.write_scene(Path(out_root) / recipe.name, sequence, recipe,
                              cfg, grid)
    return str(out)


def cmd_synth(args, cfg: Config) -> int:
    if bool(args.suite) == bool(args.recipe):
        raise BevMotionError("pass exactly one of --suite or --recipe")
    if args.suite:
        recipes = recipe_suite(args.suite)
    else:
        text = Path(args.recipe).read_text()
        data = json.loads(text)
        entries = data if isinstance(data, list) else [data]
        recipes = [SceneRecipe.from_dict(e) for e in entries]
    if cfg.rng_seed:
        recipes = [dataclasses.replace(r, rng_seed=r.rng_seed + cfg.rng_seed)
                   for r in recipes]
    grid = GridSpec()
    jobs = [(r, cfg, grid, args.out_dir) for r in recipes]
    if args.threads != 1 and len(jobs) > 1:
        workers = args.threads if args.threads > 0 else None
        with ProcessPoolExecutor(max_workers=workers) as pool:
            written = list(pool.map(_synth_one, jobs))
    else:
        written = [_synth_one(j) for j in jobs]
    _emit({"scenes": written})
    return 0


# --------------------------------------------------------------------------
# pseudo
# --------------------------------------------------------------------------

def _label_statistics(labels: MotionStack, gt, cfg: Config) -> dict:
    rows, cols = np.nonzero(labels.valid)
    mags = np.linalg.norm(labels.steps[:, rows, cols, :], axis=2)
    stats: dict = {"mean_magnitude": float(mags.mean()) if mags.size else 0.0}
    if gt is not None:
        ref = gt if labels.direction == FORWARD else _negated(gt)
        stats["error_vs_gt"] = bucketed_errors(
            _as_direction(labels, FORWARD), _as_direction(ref, FORWARD),
            cfg).to_json_dict()
    return stats


def _negated(stack: MotionStack) -> MotionStack:
    return MotionStack(grid=stack.grid, steps=-stack.steps,
                       direction=stack.direction, valid=stack.valid)


def _as_direction(stack: MotionStack, direction: str) -> MotionStack:
    if stack.direction == direction:
        return stack
    return MotionStack(grid=stack.grid, steps=stack.steps,
                       direction=direction, valid=stack.valid)


def cmd_pseudo(args, cfg: Config) -> int:
    sequence, manifest = archive.read_scene(args.scene_dir)
    grid = GridSpec.from_dict(manifest["grid"])
    out_dir = Path(args.out) if args.out else Path(args.scene_dir) / "pseudo"
    out_dir.mkdir(parents=True, exist_ok=True)
    directions = {"forward": [FORWARD], "backward": [BACKWARD],
                  "both": [FORWARD, BACKWARD]}[args.direction]
    mask = occupancy_mask(sequence.current, grid)
    stats = {}
    for direction in directions:
        zero = MotionStack.zeros(grid, cfg.T_prime, direction, mask)
        labels = label_stack(sequence, zero, direction, cfg)
        archive.write_motion_file(out_dir / f"pseudo_{direction}.mfld", labels)
        stats[direction] = _label_statistics(labels, sequence.ground_truth, cfg)
    (out_dir / "pseudo_stats.json").write_text(
        json.dumps(stats, sort_keys=True, indent=2) + "\n")
    _emit(stats)
    return 0


# --------------------------------------------------------------------------
# optimize
# --------------------------------------------------------------------------

def cmd_optimize(args, cfg: Config) -> int:
    sequence, manifest = archive.read_scene(args.scene_dir)
    grid = GridSpec.from_dict(manifest["grid"])
    toggles = LossToggles.from_names(
        [t.strip() for t in args.losses.split(",") if t.strip()],
        knn_k=args.knn_k)
    state = optimize_scene(sequence, cfg, toggles, grid)
    out_dir = Path(args.out) if args.out else Path(args.scene_dir) / "opt"
    out_dir.mkdir(parents=True, exist_ok=True)
    archive.write_motion_file(out_dir / "forward.mfld", state.forward)
    archive.write_motion_file(out_dir / "backward.mfld", state.backward)
    summary = state.summary_dict()
    summary["losses"] = toggles.names()
    if sequence.ground_truth is not None:
        metrics = bucketed_errors(state.forward, sequence.ground_truth, cfg)
        summary["metrics"] = metrics.to_json_dict()
        (out_dir / "metrics.json").write_text(
            json.dumps(summary["metrics"], sort_keys=True, indent=2) + "\n")
    (out_dir / "state.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _emit(summary)
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def cmd_eval(args, cfg: Config) -> int:
    pred = archive.read_motion_file(args.pred_file)
    sequence, manifest = archive.read_scene(args.scene_dir)
    if sequence.ground_truth is None:
        raise EvalError("no ground truth in scene archive")
    metrics = bucketed_errors(_as_direction(pred, FORWARD),
                              sequence.ground_truth, cfg)
    payload = metrics.to_json_dict()
    out = Path(args.out) if args.out else Path(
        str(Path(args.pred_file).with_suffix("")) + ".metrics.json")
    out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _emit(payload)
    return 0


# --------------------------------------------------------------------------
# render
# --------------------------------------------------------------------------

def cmd_render(args, cfg: Config) -> int:
    stack = archive.read_motion_file(args.field_file)
    steps = None if args.step is None else [args.step]
    paths = render.render_stack(stack, args.out_prefix,
                                max_magnitude=args.max_mag,
                                white_valid=args.white_valid, steps=steps)
    _emit({"images": [str(p) for p in paths]})
    return 0


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------

def cmd_gradcheck(args, cfg: Config) -> int:
    results = run_gradient_checks(cfg, n_points=args.points,
                                  fd_step=args.fd_step, tol=args.tol)
    _emit([r.to_dict() for r in results])
    failed = [r for r in results if not r.passed]
    for r in failed:
        sys.stderr.write(
            f"gradient check failed for {r.term}: rel error "
            f"{r.max_rel_error:.3e} at {r.worst}\n")
    return 1 if failed else 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a config JSON file")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config rng_seed")
    common.add_argument("--threads", type=int, default=0,
                        help="worker processes for per-scene work (0 = auto)")

    parser = argparse.ArgumentParser(prog="bevmotion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate synthetic scene archives")
    p.add_argument("out_dir")
    p.add_argument("--suite", choices=SUITE_NAMES)
    p.add_argument("--recipe", help="recipe JSON file (one recipe or a list)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pseudo", parents=[common],
                       help="generate pseudo motion labels for a scene")
    p.add_argument("scene_dir")
    p.add_argument("--out")
    p.add_argument("--direction", choices=["forward", "backward", "both"],
                   default="forward")
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("optimize", parents=[common],
                       help="optimize motion fields for a scene")
    p.add_argument("scene_dir")
    p.add_argument("--out")
    p.add_argument("--losses", default="sup,c,f,b",
                   help="comma list from {sup, c, f, b, knn}")
    p.add_argument("--knn-k", type=int, default=5)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a motion-field file against scene GT")
    p.add_argument("pred_file")
    p.add_argument("scene_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common],
                       help="render a motion-field file to PPM images")
    p.add_argument("field_file")
    p.add_argument("out_prefix")
    p.add_argument("--max-mag", type=float, default=None)
    p.add_argument("--white-valid", action="store_true",
                   help="occupied cells fade to white at zero motion")
    p.add_argument("--step", type=int, default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of all loss gradients")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except BevMotionError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except OSError as exc:
        sys.stderr.write(f"io error: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
