"""Acceptance criteria, each at its stated tolerance. One PASS/FAIL line per criterion is
printed in the terminal summary. The end-to-end criteria share cached 200-frame runs, so the
module takes tens of minutes on one core."""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import (ACCEPTANCE_LINES, K16, finite_difference_errors, random_splat_scene,
                      registration_problem)
from covslam.config import config_from_dict
from covslam.datasets import load_tum
from covslam.evaluation import read_trajectory, write_trajectory
from covslam.geometry import PoseSE3, pose_error
from covslam.gicp import align
from covslam.pipeline import run
from covslam.render import render

FIXTURES = Path(__file__).parent / "fixtures"
NOISY_DEPTH = 0.0015  # depth noise std at 1 m, growing with z^2


def report_line(number, title, passed, detail):
    tag = "SKIP" if passed is None else "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[{tag}] {number:>2}. {title}: {detail}")
    return passed


class RunCache:
    """End-to-end runs keyed by name, so criteria sharing a configuration reuse one run."""

    def __init__(self):
        self.reports = {}

    def get(self, name, overrides=None, **kw):
        if name not in self.reports:
            t0 = time.perf_counter()
            report = run(config_from_dict(overrides or {}), **kw)
            report.elapsed = time.perf_counter() - t0
            self.reports[name] = report
        return self.reports[name]


@pytest.fixture(scope="module")
def runs():
    return RunCache()


def test_01_gicp_recovery():
    rng = np.random.default_rng(2024)
    ok, times = 0, []
    for _ in range(100):
        src, sc, idx, tc, T_gt = registration_problem(rng)
        t0 = time.perf_counter()
        T, _ = align(src, sc, idx, tc)
        times.append(time.perf_counter() - t0)
        rot, tr = pose_error(T, T_gt)
        ok += rot < math.radians(0.5) and tr < 5e-3
    ms = 1000 * float(np.mean(times))
    passed = ok >= 99 and ms < 50
    report_line(1, "G-ICP recovery", passed, f"{ok}/100 recovered, {ms:.1f} ms/trial")
    assert passed


def test_02_regularization_ordering(runs):
    ate = {}
    for mode in ("ellipse", "plane", "none"):
        r = runs.get(f"noisy-{mode}", {"dataset": {"synth": {"depth_noise": NOISY_DEPTH}},
                                       "tracking": {"gicp": {"mode": mode}}})
        ate[mode] = r.ate_rmse_cm
    passed = ate["ellipse"] < ate["plane"] < ate["none"]
    report_line(2, "regularization ordering ellipse < plane < none", passed,
                ", ".join(f"{k} {v:.3f} cm" for k, v in ate.items()))
    assert passed


def test_03_covariance_sharing_ordering(runs):
    shared = runs.get("default")
    const = runs.get("scale-constant", {"map": {"scale_init": "constant"}})
    naive = runs.get("scale-naive", {"map": {"scale_init": "naive"}})
    psnr_ok = shared.psnr_heldout >= const.psnr_heldout >= naive.psnr_heldout
    ate_ok = naive.ate_rmse_cm > max(shared.ate_rmse_cm, const.ate_rmse_cm)
    passed = psnr_ok and ate_ok
    report_line(3, "covariance sharing / scale alignment", passed,
                f"PSNR {shared.psnr_heldout:.2f} >= {const.psnr_heldout:.2f} >= "
                f"{naive.psnr_heldout:.2f} dB; ATE shared {shared.ate_rmse_cm:.3f}, constant "
                f"{const.ate_rmse_cm:.3f}, no-sharing {naive.ate_rmse_cm:.3f} cm")
    assert passed


def test_04_keyframe_separation(runs):
    sep = runs.get("default")
    promoted = runs.get("kf-promoted", {"tracking": {"promote_mapping_only": True}})
    every30 = runs.get("kf-30-only", {"tracking": {"kf_ratio_threshold": 0.0,
                                                   "mapping_only_every": 0}})
    passed = sep.ate_rmse_cm <= promoted.ate_rmse_cm and sep.psnr_heldout >= every30.psnr_heldout
    report_line(4, "keyframe separation", passed,
                f"ATE {sep.ate_rmse_cm:.3f} <= {promoted.ate_rmse_cm:.3f} cm (promoted); PSNR "
                f"{sep.psnr_heldout:.2f} >= {every30.psnr_heldout:.2f} dB (30-frame only)")
    assert passed


def test_05_random_keyframe_training(runs):
    rand = runs.get("default")
    recent = runs.get("train-recent", {"mapping": {"keyframe_choice": "recent"}})
    passed = rand.psnr_heldout > recent.psnr_heldout
    report_line(5, "random vs recent keyframe training", passed,
                f"PSNR {rand.psnr_heldout:.2f} > {recent.psnr_heldout:.2f} dB")
    assert passed


def test_06_pruning(runs):
    pruned = runs.get("default")
    unpruned = runs.get("no-prune", {"mapping": {"prune": False}})
    passed = (pruned.ate_rmse_cm <= unpruned.ate_rmse_cm
              and pruned.psnr_heldout >= unpruned.psnr_heldout)
    report_line(6, "pruning without densification", passed,
                f"ATE {pruned.ate_rmse_cm:.3f} <= {unpruned.ate_rmse_cm:.3f} cm; PSNR "
                f"{pruned.psnr_heldout:.2f} >= {unpruned.psnr_heldout:.2f} dB")
    assert passed


def test_07_renderer_gradients():
    worst = {}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        errors = finite_difference_errors(random_splat_scene(rng), PoseSE3.identity(), K16, rng)
        for k, v in errors.items():
            worst[k] = max(worst.get(k, 0.0), v)
    passed = max(worst.values()) < 1e-3
    report_line(7, "renderer gradient check", passed,
                "max rel. error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert passed


def test_08_compositing_conservation():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(500 + seed)
        frame, state = render(random_splat_scene(rng, 40), PoseSE3.identity(), K16, return_state=True)
        worst = max(worst, float(np.abs(frame.alpha + state.t_final - 1.0).max()))
    passed = worst <= 1e-6
    report_line(8, "compositing conservation", passed, f"max |sum - 1| = {worst:.1e}")
    assert passed


def test_09_end_to_end(runs):
    r = runs.get("default")
    passed = r.ate_rmse_cm < 1.0 and r.psnr_heldout > 25.0 and r.elapsed < 600
    report_line(9, "end-to-end synthetic SLAM", passed,
                f"ATE {r.ate_rmse_cm:.3f} cm, held-out PSNR {r.psnr_heldout:.2f} dB, "
                f"{r.elapsed:.0f} s for {r.n_frames} frames")
    assert r.n_frames == 200 and r.mapping_iterations == 2000
    assert passed


def test_10_determinism(runs, tmp_path):
    a = runs.get("default")
    b = runs.get("default-repeat")
    write_trajectory(a.trajectory, tmp_path / "a.txt")
    write_trajectory(b.trajectory, tmp_path / "b.txt")
    same = (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    passed = same and a.final_primitives == b.final_primitives
    report_line(10, "determinism", passed,
                f"trajectories identical: {same}; primitives {a.final_primitives} / {b.final_primitives}")
    assert passed


def test_11_format_fidelity(tmp_path):
    stream = load_tum(FIXTURES / "tum_mini")
    assoc = len(stream) == 3 and list(stream.stamps) == [0.0, 1.0, 2.0]
    depth = stream[0].depth[0, 0] == 5000 / 5000.0 and stream[2].depth[0, 0] == 12500 / 5000.0
    write_trajectory(stream.groundtruth, tmp_path / "gt.txt")
    back = read_trajectory(tmp_path / "gt.txt")
    trip = (np.array_equal(back.stamps, stream.groundtruth.stamps)
            and np.array_equal(back.translations, stream.groundtruth.translations)
            and np.array_equal(back.quats, stream.groundtruth.quats))
    passed = assoc and depth and trip
    report_line(11, "TUM format fidelity", passed,
                f"association {assoc}, depth scale {depth}, trajectory round trip {trip}")
    assert passed


TUM_FR2_XYZ = Path(os.environ.get("COVSLAM_TUM_FR2_XYZ", "data/rgbd_dataset_freiburg2_xyz"))


def test_12_tum_fr2_xyz(tmp_path):
    if not (TUM_FR2_XYZ / "rgb.txt").exists():
        report_line(12, "TUM fr2/xyz sanity bound", None, f"no dataset at {TUM_FR2_XYZ}")
        pytest.skip("TUM fr2/xyz not available locally")
    r = run(config_from_dict({"dataset": {"format": "tum", "path": str(TUM_FR2_XYZ)}}))
    passed = r.ate_rmse_cm is not None and r.ate_rmse_cm < 10.0
    report_line(12, "TUM fr2/xyz sanity bound", passed, f"ATE {r.ate_rmse_cm} cm")
    assert passed
