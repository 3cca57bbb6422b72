"""Command line: ``covslam run | eval | render``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cloud import Intrinsics
from .config import SlamConfig, load_config
from .datasets import write_color, write_depth
from .evaluation import ate_rmse, read_trajectory
from .gaussian_map import GaussianMap
from .pipeline import evaluate_views, open_dataset, run, summarize_views
from .render import render

log = logging.getLogger("covslam")

MODE_ALIASES = {"det": "deterministic", "free": "free_running",
                "deterministic": "deterministic", "free_running": "free_running"}


def _base_config(args) -> SlamConfig:
    cfg = load_config(args.config) if args.config else SlamConfig()
    if getattr(args, "dataset", None):
        cfg.dataset.path = args.dataset
    if getattr(args, "format", None):
        cfg.dataset.format = args.format
    return cfg


def cmd_run(args) -> int:
    cfg = _base_config(args)
    if args.mode:
        cfg.mode = MODE_ALIASES[args.mode]
    if args.fps_cap is not None:
        cfg.fps_cap = args.fps_cap
    if args.out:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.max_frames is not None:
        cfg.max_frames = args.max_frames
    cfg.validate()
    report = run(cfg)
    print(json.dumps(report.summary(), indent=2))
    return 2 if report.aborted else 0


def _frame_positions(stamps, stream_stamps) -> np.ndarray:
    stream_stamps = np.asarray(stream_stamps, dtype=float)
    pos = np.clip(np.searchsorted(stream_stamps, stamps), 1, len(stream_stamps) - 1)
    left = stream_stamps[pos - 1]
    right = stream_stamps[pos]
    pos = np.where(np.abs(stamps - left) <= np.abs(right - stamps), pos - 1, pos)
    if np.any(np.abs(stream_stamps[pos] - stamps) > 1e-6):
        raise ValueError("trajectory stamps do not match the dataset frames")
    return pos


def cmd_eval(args) -> int:
    cfg = _base_config(args)
    stream = open_dataset(cfg)
    traj = read_trajectory(args.trajectory)
    metrics = {"ate_rmse_cm": None}
    if stream.groundtruth is not None:
        metrics["ate_rmse_cm"] = ate_rmse(traj, stream.groundtruth, align=True)
    if args.checkpoint:
        gmap = GaussianMap.load(args.checkpoint)
        kf = []
        kf_path = Path(args.keyframes) if args.keyframes else Path(args.trajectory).with_name("keyframes.csv")
        if kf_path.exists():
            kf = [int(line.split(",")[0]) for line in kf_path.read_text().splitlines()[1:] if line]
        factor = int(round(1 / cfg.render_scale))
        evals = evaluate_views(gmap.gaussians, traj.poses, stream,
                               stream.intrinsics.scaled(cfg.render_scale), factor, kf,
                               cfg.eval_every, _frame_positions(traj.stamps, stream.stamps))
        metrics.update(summarize_views(evals))
    text = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_render(args) -> int:
    gmap = GaussianMap.load(args.checkpoint)
    fx, fy, cx, cy, w, h = args.intrinsics
    K = Intrinsics(fx, fy, cx, cy, int(w), int(h))
    traj = read_trajectory(args.poses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, pose in enumerate(traj.poses):
        frame = render(gmap.gaussians, pose, K)
        write_color(out / f"render{n:06d}.png", frame.rgb)
        if args.depth:
            write_depth(out / f"depth{n:06d}.png", frame.depth, args.depth_scale)
    print(f"wrote {len(traj)} views to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covslam", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="track and map a sequence")
    r.add_argument("--config")
    r.add_argument("--dataset", help="dataset directory (not needed for synth)")
    r.add_argument("--format", choices=["tum", "replica", "synth"])
    r.add_argument("--mode", choices=sorted(MODE_ALIASES))
    r.add_argument("--fps-cap", type=float)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--max-frames", type=int)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="recompute metrics from a saved trajectory and checkpoint")
    e.add_argument("--trajectory", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--keyframes", help="keyframes.csv (default: next to the trajectory)")
    e.add_argument("--config")
    e.add_argument("--dataset")
    e.add_argument("--format", choices=["tum", "replica", "synth"])
    e.add_argument("--out", help="write metrics JSON here")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("render", help="render a checkpoint from the poses in a trajectory file")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--poses", required=True, help="TUM-format trajectory (camera-to-world)")
    v.add_argument("--intrinsics", type=float, nargs=6, required=True,
                   metavar=("FX", "FY", "CX", "CY", "W", "H"))
    v.add_argument("--out", required=True)
    v.add_argument("--depth", action="store_true", help="also write 16-bit depth PNGs")
    v.add_argument("--depth-scale", type=float, default=5000.0)
    v.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
