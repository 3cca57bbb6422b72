"""End-to-end SLAM loop: tracking lane, keyframe queue, mapping lane, evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import Frame, Intrinsics
from .config import SlamConfig
from .datasets import DatasetStream, load_replica, load_tum
from .evaluation import Trajectory, ate_rmse, psnr, write_trajectory
from .gaussian_map import GaussianMap
from .mapping import Mapper, mapping_loop
from .render import render
from .ssim import ssim
from .synth import synth_scene
from .tracking import KeyframeKind, KeyframeRecord, Tracker

log = logging.getLogger(__name__)


@dataclass
class FrameEval:
    index: int
    psnr: float
    ssim: float
    keyframe: bool


@dataclass
class SlamReport:
    trajectory: Trajectory
    ate_rmse_cm: float | None
    psnr_heldout: float | None
    ssim_heldout: float | None
    psnr_keyframes: float | None
    evals: list = field(default_factory=list)
    fps: float = 0.0
    wall_time: float = 0.0
    n_frames: int = 0
    primitive_history: list = field(default_factory=list)
    keyframes: list = field(default_factory=list)  # (index, kind)
    mapping_iterations: int = 0
    lost_frames: int = 0
    aborted: bool = False
    final_primitives: int = 0

    def summary(self) -> dict:
        d = {k: getattr(self, k) for k in ("ate_rmse_cm", "psnr_heldout", "ssim_heldout",
                                           "psnr_keyframes", "fps", "wall_time", "n_frames",
                                           "mapping_iterations", "lost_frames", "aborted",
                                           "final_primitives")}
        d["n_tracking_keyframes"] = sum(k == KeyframeKind.TRACKING.value for _, k in self.keyframes)
        d["n_mapping_only_keyframes"] = sum(k == KeyframeKind.MAPPING_ONLY.value
                                            for _, k in self.keyframes)
        return d


def open_dataset(cfg: SlamConfig) -> DatasetStream:
    d = cfg.dataset
    K = None
    if d.intrinsics:
        fx, fy, cx, cy, w, h = d.intrinsics
        K = Intrinsics(fx, fy, cx, cy, int(w), int(h))
    if d.format == "synth":
        return synth_scene(d.synth)
    if d.path is None:
        raise ValueError(f"dataset.path is required for format {d.format!r}")
    if d.format == "tum":
        kw = {"depth_scale": d.depth_scale} if d.depth_scale else {}
        return load_tum(d.path, intrinsics=K, **kw)
    kw = {"depth_scale": d.depth_scale} if d.depth_scale else {}
    return load_replica(d.path, intrinsics=K, **kw)


def downsample_images(color, depth, factor: int):
    """Block-average color; average valid depth per block (0 where a block has none)."""
    if factor == 1:
        return np.asarray(color, float), np.asarray(depth, float)
    h = (color.shape[0] // factor) * factor
    w = (color.shape[1] // factor) * factor
    c = color[:h, :w].reshape(h // factor, factor, w // factor, factor, 3).mean(axis=(1, 3))
    d = np.asarray(depth[:h, :w], float)
    valid = np.isfinite(d) & (d > 0)
    dv = np.where(valid, d, 0.0).reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    n = valid.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return c, np.where(n > 0, dv / np.maximum(n, 1), 0.0)


def evaluate_views(gaussians, poses, stream: DatasetStream, K_render: Intrinsics, factor: int,
                   keyframe_indices=(), eval_every: int = 5, frame_indices=None) -> list[FrameEval]:
    """Render the map at each estimated pose and score it against the downsampled image.

    Keyframes are always scored; other frames only when ``index % eval_every == 0``.
    ``frame_indices[i]`` maps pose ``i`` to a stream position (default: identity).
    """
    kf = set(int(k) for k in keyframe_indices)
    evals = []
    for i, pose in enumerate(poses):
        j = i if frame_indices is None else int(frame_indices[i])
        is_kf = j in kf
        if not is_kf and (eval_every <= 0 or j % eval_every):
            continue
        frame = stream[j]
        color, _ = downsample_images(frame.color, frame.depth, factor)
        out = render(gaussians, pose, K_render)
        evals.append(FrameEval(j, psnr(out.rgb, color), ssim(out.rgb, color), is_kf))
    return evals


def summarize_views(evals: list[FrameEval]) -> dict:
    held = [e for e in evals if not e.keyframe]
    kfs = [e for e in evals if e.keyframe]

    def mean(vals):
        return float(np.mean(vals)) if vals else None
    return {"psnr_heldout": mean([e.psnr for e in held]), "ssim_heldout": mean([e.ssim for e in held]),
            "psnr_keyframes": mean([e.psnr for e in kfs])}


def scene_extent(points) -> float:
    c = points.mean(axis=0)
    return float(max(1.0, 2.0 * np.max(np.linalg.norm(points - c, axis=1))))


class Slam:
    """Holds the lanes for one run; :func:`run` is the usual entry point."""

    def __init__(self, cfg: SlamConfig, stream: DatasetStream | None = None):
        self.cfg = cfg.validate()
        self.stream = stream if stream is not None else open_dataset(cfg)
        self.factor = int(round(1 / cfg.render_scale))
        self.K_render = self.stream.intrinsics.scaled(cfg.render_scale)
        self.gmap = GaussianMap(dataclasses.replace(cfg.map))
        self.mapper = Mapper(self.gmap, cfg.mapping, seed=cfg.seed)
        self.tracker = Tracker(cfg.frontend, cfg.tracking)
        self.keyframes: list[tuple[int, str]] = []
        self.primitive_history: list[tuple[int, int]] = []
        self.aborted = False

    def process(self, frame: Frame):
        snap = self.gmap.snapshot(target_only=True)
        result, kind, source = self.tracker.step(frame, snap)
        if len(self.tracker.poses) == 1 and self.cfg.auto_extent:
            self.gmap.cfg.scene_extent = scene_extent(source.cloud.points)
        if kind is not KeyframeKind.NONE:
            color, depth = downsample_images(frame.color, frame.depth, self.factor)
            self.mapper.submit(KeyframeRecord(frame.index, result.pose, kind, color, depth,
                                              self.K_render, source))
            self.keyframes.append((frame.index, kind.value))
        return result, kind

    def run(self) -> SlamReport:
        cfg = self.cfg
        n_total = len(self.stream)
        if cfg.max_frames is not None:
            n_total = min(n_total, cfg.max_frames)
        stop = threading.Event()
        worker = None
        if cfg.mode == "free_running" and cfg.mapping_enabled:
            worker = threading.Thread(target=mapping_loop, args=(self.mapper, stop), daemon=True)
            worker.start()
        t0 = time.perf_counter()
        stamps = []
        for i in range(n_total):
            frame = self.stream[i]
            self.process(frame)
            stamps.append(self.stream.stamps[i] if len(self.stream.stamps) else float(i))
            if cfg.mode == "deterministic" or not cfg.mapping_enabled:
                if cfg.mapping_enabled:
                    self.mapper.run_iterations(cfg.mapping.iters_per_frame)
                else:
                    self.mapper.drain()
            self.primitive_history.append((i, len(self.gmap)))
            if self.tracker.lost_frames > cfg.max_lost_frames:
                log.error("tracking lost on %d frames; aborting", self.tracker.lost_frames)
                self.aborted = True
                break
            if cfg.fps_cap:
                wait = t0 + (i + 1) / cfg.fps_cap - time.perf_counter()
                if wait > 0:
                    time.sleep(wait)
        if worker is not None:
            stop.set()
            worker.join()
        self.mapper.drain()
        wall = time.perf_counter() - t0
        n_done = len(self.tracker.poses)
        traj = Trajectory.from_poses(stamps[:n_done], self.tracker.poses)
        return self._report(traj, wall, n_done)

    def _report(self, traj: Trajectory, wall: float, n_done: int) -> SlamReport:
        cfg = self.cfg
        ate = None
        gt = self.stream.groundtruth
        if gt is not None and len(traj) >= 2:
            try:
                ate = ate_rmse(traj, gt, align=True)
            except ValueError as exc:
                log.warning("ATE not computed: %s", exc)
        evals = evaluate_views(self.gmap.gaussians, self.tracker.poses[:n_done], self.stream,
                               self.K_render, self.factor, [i for i, _ in self.keyframes],
                               cfg.eval_every)
        views = summarize_views(evals)
        return SlamReport(
            trajectory=traj, ate_rmse_cm=ate,
            psnr_heldout=views["psnr_heldout"], ssim_heldout=views["ssim_heldout"],
            psnr_keyframes=views["psnr_keyframes"],
            evals=evals, fps=n_done / wall if wall > 0 else 0.0, wall_time=wall, n_frames=n_done,
            primitive_history=self.primitive_history, keyframes=self.keyframes,
            mapping_iterations=self.mapper.iterations, lost_frames=self.tracker.lost_frames,
            aborted=self.aborted, final_primitives=len(self.gmap))

    def save(self, report: SlamReport, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trajectory(report.trajectory, out / "trajectory.txt")
        self.gmap.save(out / "map.npz")
        self.mapper.write_loss_csv(out / "loss.csv")
        (out / "metrics.json").write_text(json.dumps(report.summary(), indent=2))
        with open(out / "frames.csv", "w") as fh:
            fh.write("index,psnr,ssim,keyframe\n")
            for e in report.evals:
                fh.write(f"{e.index},{e.psnr:.6f},{e.ssim:.6f},{int(e.keyframe)}\n")
        with open(out / "keyframes.csv", "w") as fh:
            fh.write("index,kind\n")
            for i, k in report.keyframes:
                fh.write(f"{i},{k}\n")
        with open(out / "primitives.csv", "w") as fh:
            fh.write("frame,primitives\n")
            for i, n in report.primitive_history:
                fh.write(f"{i},{n}\n")


def run(cfg: SlamConfig, stream: DatasetStream | None = None) -> SlamReport:
    slam = Slam(cfg, stream)
    report = slam.run()
    if cfg.out:
        slam.save(report, cfg.out)
    return report
