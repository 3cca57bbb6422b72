import shutil
from pathlib import Path

import numpy as np
import pytest

from covslam.datasets import load_replica, load_tum, read_depth, write_depth
from covslam.errors import FormatError
from covslam.evaluation import associate

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def tum_dir():
    return FIXTURES / "tum_mini"


@pytest.fixture
def replica_dir():
    return FIXTURES / "replica_mini"


def test_tum_three_triplets(tum_dir):
    stream = load_tum(tum_dir)
    assert len(stream) == 3
    assert len(stream.groundtruth) == 3
    np.testing.assert_array_equal(stream.stamps, [0.0, 1.0, 2.0])


def test_tum_picks_nearest_depth(tum_dir):
    frame = load_tum(tum_dir)[0]
    # the partner at t=0.010 holds raw 5000; the decoy at 0.5 holds 7500
    assert np.all(frame.depth == 1.0)


def test_tum_depth_scale(tum_dir):
    depths = [f.depth[0, 0] for f in load_tum(tum_dir)]
    assert depths == [5000 / 5000.0, 10000 / 5000.0, 12500 / 5000.0]


def test_tum_deterministic(tum_dir):
    a, b = load_tum(tum_dir), load_tum(tum_dir)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.color, fb.color)
        np.testing.assert_array_equal(fa.depth, fb.depth)


def test_tum_missing_index(tmp_path, tum_dir):
    shutil.copytree(tum_dir, tmp_path / "seq")
    (tmp_path / "seq" / "depth.txt").unlink()
    with pytest.raises(FormatError, match="depth.txt"):
        load_tum(tmp_path / "seq")


def test_tum_no_pairs(tmp_path, tum_dir):
    shutil.copytree(tum_dir, tmp_path / "seq")
    (tmp_path / "seq" / "depth.txt").write_text("100.0 depth/0.010000.png\n")
    with pytest.raises(FormatError):
        load_tum(tmp_path / "seq")


def test_associate_nearest_within_window():
    assert associate([0.0], [0.010, 0.500], 0.02) == [(0, 0)]
    assert associate([0.0], [0.5], 0.02) == []


def test_replica_two_frames(replica_dir):
    stream = load_replica(replica_dir)
    assert len(stream) == 2
    rows = np.loadtxt(replica_dir / "traj.txt").reshape(-1, 4, 4)
    for pose, T in zip(stream.groundtruth.poses, rows):
        np.testing.assert_allclose(pose.matrix(), T, atol=1e-12)


@pytest.mark.parametrize("scale", [6553.5, 1000.0])
def test_replica_depth_scale(replica_dir, scale):
    f = load_replica(replica_dir, depth_scale=scale)[1]
    assert f.depth[0, 0] == pytest.approx(2 * 6553 / scale)


def test_replica_missing_poses(tmp_path, replica_dir):
    shutil.copytree(replica_dir, tmp_path / "scene")
    (tmp_path / "scene" / "traj.txt").unlink()
    with pytest.raises(FormatError):
        load_replica(tmp_path / "scene")


def test_replica_count_mismatch(tmp_path, replica_dir):
    shutil.copytree(replica_dir, tmp_path / "scene")
    (tmp_path / "scene" / "results" / "depth000001.png").unlink()
    with pytest.raises(FormatError):
        load_replica(tmp_path / "scene")


def test_depth_png_round_trip(tmp_path):
    d = np.array([[0.0, 1.0], [2.5, 0.0002]])
    write_depth(tmp_path / "d.png", d, 5000.0)
    np.testing.assert_array_equal(read_depth(tmp_path / "d.png", 5000.0), [[0, 1.0], [2.5, 0.0002]])
