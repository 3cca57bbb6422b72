"""Map optimization: photometric + depth loss, Adam updates, keyframe sampling, pruning."""

from __future__ import annotations

import csv
import logging
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .gaussian_map import PARAM_NAMES, GaussianMap
from .render import RenderedFrame, render, render_backward
from .ssim import ssim
from .tracking import KeyframeKind, KeyframeRecord

log = logging.getLogger(__name__)

KEYFRAME_CHOICES = ("random", "recent")


@dataclass
class LossWeights:
    lambda_I1: float = 0.8
    lambda_I2: float = 0.2
    lambda_D: float = 0.5

    def __post_init__(self):
        vals = (self.lambda_I1, self.lambda_I2, self.lambda_D)
        if min(vals) < 0 or max(vals) == 0:
            raise ValueError("loss weights must be nonnegative and not all zero")


@dataclass
class LossResult:
    loss: float
    g_rgb: np.ndarray
    g_depth: np.ndarray
    terms: dict
    empty_depth_mask: bool = False


def map_loss(rendered: RenderedFrame, gt, w: LossWeights, depth_mask=None) -> LossResult:
    """Weighted L1 + D-SSIM on color and masked L1 on depth, with gradients on the render.

    ``gt`` is anything with ``color`` and ``depth`` arrays matching the render.
    """
    rgb, gt_rgb = rendered.rgb, np.asarray(gt.color, dtype=float)
    if rgb.shape != gt_rgb.shape or rendered.depth.shape != np.shape(gt.depth):
        raise ValueError("rendered and ground-truth dimensions differ")
    gt_depth = np.asarray(gt.depth, dtype=float)
    if depth_mask is None:
        depth_mask = np.isfinite(gt_depth) & (gt_depth > 0)
    g_rgb = np.zeros_like(rgb)
    g_depth = np.zeros_like(rendered.depth)
    terms = {"l1": 0.0, "dssim": 0.0, "depth": 0.0}

    diff = rgb - gt_rgb
    terms["l1"] = float(np.mean(np.abs(diff)))
    g_rgb += w.lambda_I1 * np.sign(diff) / diff.size
    if w.lambda_I2 > 0:
        s, gs = ssim(rgb, gt_rgb, return_grad=True)
        terms["dssim"] = (1.0 - float(np.clip(s, -1.0, 1.0))) / 2.0
        g_rgb += w.lambda_I2 * (-0.5) * gs
    n_valid = int(np.count_nonzero(depth_mask))
    empty = n_valid == 0
    if not empty and w.lambda_D > 0:
        dd = np.where(depth_mask, rendered.depth - np.where(depth_mask, gt_depth, 0.0), 0.0)
        terms["depth"] = float(np.sum(np.abs(dd)) / n_valid)
        g_depth += w.lambda_D * np.sign(dd) / n_valid
    elif empty:
        log.warning("empty depth mask; depth term set to 0")
    loss = w.lambda_I1 * terms["l1"] + w.lambda_I2 * terms["dssim"] + w.lambda_D * terms["depth"]
    return LossResult(loss, g_rgb, g_depth, terms, empty)


@dataclass
class OptimizerConfig:
    lr_means: float = 3e-6  # multiplied by the scene extent
    lr_rotations: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_colors: float = 2.5e-3
    lr_opacity_logits: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15


class OptimizerState:
    """Adam moments live in the map's per-primitive extras so they follow insert/prune."""

    def __init__(self, gmap: GaussianMap, cfg: OptimizerConfig | None = None):
        self.cfg = cfg or OptimizerConfig()
        self.gmap = gmap
        self.step = 0
        tails = {"means": (3,), "rotations": (4,), "log_scales": (3,), "colors": (3,),
                 "opacity_logits": ()}
        for name in PARAM_NAMES:
            gmap.register_extra("m_" + name, tails[name])
            gmap.register_extra("v_" + name, tails[name])

    def lr(self, name: str) -> float:
        lr = getattr(self.cfg, "lr_" + name)
        if name == "means":
            lr *= self.gmap.cfg.scene_extent
        return lr

    def apply(self, grads: dict):
        c = self.cfg
        g = self.gmap.gaussians
        ex = self.gmap.extras
        self.step += 1
        bc1 = 1.0 - c.beta1**self.step
        bc2 = 1.0 - c.beta2**self.step
        for name in PARAM_NAMES:
            grad = grads[name]
            m = ex["m_" + name]
            v = ex["v_" + name]
            m *= c.beta1
            m += (1.0 - c.beta1) * grad
            v *= c.beta2
            v += (1.0 - c.beta2) * grad * grad
            update = self.lr(name) * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            setattr(g, name, getattr(g, name) - update)
        g.rotations = g.rotations / np.linalg.norm(g.rotations, axis=1, keepdims=True)


def pick_training_keyframe(keyframes: list[KeyframeRecord], rng: np.random.Generator,
                           choice: str = "random") -> KeyframeRecord:
    if not keyframes:
        raise ValueError("no keyframes to train on")
    if choice == "random":
        return keyframes[int(rng.integers(len(keyframes)))]
    if choice == "recent":
        return keyframes[-1]
    raise ValueError(f"unknown keyframe choice {choice!r}")


def optimize_step(gmap: GaussianMap, kf: KeyframeRecord, opt: OptimizerState,
                  w: LossWeights) -> float:
    """One render / loss / backward / Adam step at the keyframe's fixed pose.

    Returns the loss; a non-finite loss or gradient rejects the step and returns ``nan``.
    """
    with gmap.lock:
        frame, state = render(gmap.gaussians, kf.pose, kf.intrinsics, return_state=True)
        res = map_loss(frame, kf, w)
        if not np.isfinite(res.loss):
            log.error("non-finite loss at keyframe %d; step rejected", kf.index)
            return float("nan")
        grads = render_backward(state, kf.intrinsics, kf.pose.inverse(), res.g_rgb, res.g_depth)
        gd = grads.as_dict()
        if not all(np.all(np.isfinite(v)) for v in gd.values()):
            log.error("non-finite gradient at keyframe %d; step rejected", kf.index)
            return float("nan")
        opt.apply(gd)
        gmap.bump()
        return res.loss


@dataclass
class MappingConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    iters_per_frame: int = 10
    keyframe_choice: str = "random"
    prune: bool = True
    prune_every: int = 50
    prune_warmup: int = 100

    def __post_init__(self):
        if self.keyframe_choice not in KEYFRAME_CHOICES:
            raise ValueError(f"keyframe_choice must be one of {KEYFRAME_CHOICES}")


class Mapper:
    """Mapping lane: the map's single writer.

    Keyframe records arrive through ``queue`` in tracking order; each is inserted into the
    map (targets only for tracking keyframes) before it becomes trainable.
    """

    def __init__(self, gmap: GaussianMap, cfg: MappingConfig | None = None, seed: int = 0):
        self.gmap = gmap
        self.cfg = cfg or MappingConfig()
        self.opt = OptimizerState(gmap, self.cfg.optimizer)
        self.rng = np.random.default_rng(seed)
        self.queue: queue.Queue = queue.Queue()
        self.keyframes: list[KeyframeRecord] = []
        self.iterations = 0
        self.loss_log: list[tuple[int, float, int]] = []
        self.inserted: list[tuple[int, int]] = []

    def submit(self, record: KeyframeRecord):
        self.queue.put(record)

    def drain(self) -> int:
        n = 0
        while True:
            try:
                rec = self.queue.get_nowait()
            except queue.Empty:
                return n
            self._insert(rec)
            n += 1

    def _insert(self, rec: KeyframeRecord):
        src = rec.source
        if src is not None:
            added = self.gmap.insert_keyframe(src.cloud.points, src.cloud.colors, src.axes,
                                              src.scales, rec.pose,
                                              target=rec.kind is KeyframeKind.TRACKING)
            self.inserted.append((rec.index, added))
            rec.source = None  # the image is all mapping needs from here on
        self.keyframes.append(rec)

    def iterate(self) -> float | None:
        if not self.keyframes:
            return None
        kf = pick_training_keyframe(self.keyframes, self.rng, self.cfg.keyframe_choice)
        loss = optimize_step(self.gmap, kf, self.opt, self.cfg.weights)
        self.iterations += 1
        c = self.cfg
        if c.prune and self.iterations > c.prune_warmup and self.iterations % c.prune_every == 0:
            removed = self.gmap.prune()
            if removed:
                log.debug("pruned %d primitives", removed)
        self.loss_log.append((self.iterations, loss, len(self.gmap)))
        return loss

    def run_iterations(self, n: int) -> int:
        self.drain()
        done = 0
        for _ in range(n):
            if self.iterate() is None:
                break
            done += 1
        return done

    def write_loss_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "loss", "primitives"])
            wr.writerows(self.loss_log)


def mapping_loop(mapper: Mapper, stop: threading.Event, max_iters: int | None = None) -> int:
    """Free-running lane: drain keyframes and optimize until ``stop`` is set."""
    start = mapper.iterations
    while not stop.is_set():
        mapper.drain()
        if mapper.iterate() is None:
            stop.wait(0.001)
        if max_iters is not None and mapper.iterations - start >= max_iters:
            break
    mapper.drain()
    return mapper.iterations - start
