import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import box_surface, random_spd, registration_problem
from covslam.cloud import SpatialIndex, knn_covariances
from covslam.errors import TrackingLostError
from covslam.geometry import PoseSE3, pose_error
from covslam.gicp import (GicpConfig, align, compose_covariances,
                          decompose_covariance, decompose_covariances, mle_cost,
                          regularize_covariance, regularize_covariances)


class TestDecompose:
    def test_identity(self):
        d = decompose_covariance(np.eye(3))
        np.testing.assert_allclose(d.scales, [1, 1, 1])
        np.testing.assert_allclose(np.abs(d.axes @ d.axes.T), np.eye(3), atol=1e-12)

    def test_diagonal(self):
        d = decompose_covariance(np.diag([4.0, 9.0, 1.0]))
        np.testing.assert_allclose(d.scales, [3, 2, 1])
        np.testing.assert_allclose(np.abs(d.axes), [[0, 1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)

    def test_rank_one(self):
        v = np.array([1.0, 1.0, np.sqrt(2.0)])
        d = decompose_covariance(np.outer(v, v))
        np.testing.assert_allclose(d.scales, [2.0, 1e-3, 1e-3], rtol=1e-9)
        np.testing.assert_allclose(np.abs(d.axes[:, 0]), np.abs(v) / 2, atol=1e-12)

    def test_non_symmetric(self):
        with pytest.raises(ValueError):
            decompose_covariance(np.array([[1.0, 0.5, 0], [0, 1, 0], [0, 0, 1]]))

    @pytest.mark.parametrize("seed", range(5))
    def test_round_trip_right_handed(self, seed):
        C = random_spd(np.random.default_rng(seed))
        d = decompose_covariance(C)
        assert np.linalg.det(d.axes) == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(d.scales) <= 0)
        err = np.linalg.norm(d.covariance() - C) / np.linalg.norm(C)
        assert err < 1e-9

    def test_batched_matches_single(self, rng):
        Cs = np.stack([random_spd(rng) for _ in range(6)])
        axes, scales = decompose_covariances(Cs)
        for i, C in enumerate(Cs):
            d = decompose_covariance(C)
            np.testing.assert_allclose(compose_covariances(axes[i], scales[i]), d.covariance())


class TestRegularize:
    def test_none_unchanged(self, rng):
        C = random_spd(rng)
        np.testing.assert_array_equal(regularize_covariance(C, "none"), C)

    def test_identity_ellipse(self):
        np.testing.assert_allclose(regularize_covariance(np.eye(3), "ellipse"), np.eye(3), atol=1e-12)

    def test_ellipse_hand_value(self):
        np.testing.assert_allclose(regularize_covariance(np.diag([9.0, 4.0, 1.0]), "ellipse"),
                                   np.diag([2.25, 1.0, 0.25]), atol=1e-12)

    def test_plane_value(self):
        np.testing.assert_allclose(regularize_covariance(np.diag([9.0, 4.0, 1.0]), "plane", 1e-3),
                                   np.diag([1.0, 1.0, 1e-6]), atol=1e-12)

    def test_degenerate_falls_back_to_plane(self):
        out, deg = regularize_covariances(np.eye(3)[None] * 1e-9, "ellipse")
        assert deg[0]
        assert sorted(np.linalg.eigvalsh(out[0])) == pytest.approx([1e-6, 1.0, 1.0])

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            regularize_covariance(np.eye(3), "sphere")

    @pytest.mark.parametrize("mode", ["plane", "ellipse"])
    def test_axes_preserved(self, rng, mode):
        C = random_spd(rng)
        a0 = decompose_covariance(C).axes
        a1 = decompose_covariance(regularize_covariance(C, mode)).axes
        if mode == "plane":
            np.testing.assert_allclose(abs(a0[:, 2] @ a1[:, 2]), 1.0, atol=1e-9)
        else:
            np.testing.assert_allclose(np.abs(np.sum(a0 * a1, axis=0)), 1.0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_ellipse_middle_scale_unit(self, seed):
        C = random_spd(np.random.default_rng(seed))
        assert decompose_covariance(regularize_covariance(C, "ellipse")).scales[1] == pytest.approx(1.0, abs=1e-9)


class TestMleCost:
    def test_zero(self):
        assert mle_cost(np.zeros((4, 3)), np.tile(np.eye(3), (4, 1, 1))) == 0.0

    def test_unit(self):
        assert mle_cost([[1.0, 0, 0]], [np.eye(3)]) == pytest.approx(1.0)

    def test_scaled(self):
        assert mle_cost([[1.0, 0, 0]], [np.diag([4.0, 1, 1])]) == pytest.approx(0.25)

    def test_singular_names_pair(self):
        covs = np.stack([np.eye(3), np.zeros((3, 3))])
        with pytest.raises(np.linalg.LinAlgError, match="pair 1"):
            mle_cost(np.ones((2, 3)), covs)

    def test_rigid_invariance(self, rng):
        d = rng.normal(size=(20, 3))
        C = np.stack([random_spd(rng) for _ in range(20)])
        R = Rotation.random(random_state=3).as_matrix()
        assert mle_cost(d @ R.T, R @ C @ R.T) == pytest.approx(mle_cost(d, C), rel=1e-10)


class TestAlign:
    def test_identity_fixed_point(self, rng):
        pts = box_surface(rng)
        covs, _ = regularize_covariances(knn_covariances(pts, 20).covariances, "ellipse")
        T, rep = align(pts, covs, SpatialIndex(pts), covs)
        np.testing.assert_allclose(T.matrix(), np.eye(4), atol=1e-9)
        assert rep.cost == pytest.approx(0.0, abs=1e-18)
        assert rep.inlier_count <= len(rep.pairs)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("mode", ["ellipse", "plane", "none"])
    def test_recovers_transform(self, seed, mode):
        src, sc, idx, tc, T_gt = registration_problem(np.random.default_rng(seed), mode)
        T, rep = align(src, sc, idx, tc, cfg=GicpConfig(mode=mode))
        rot, tr = pose_error(T, T_gt)
        assert rot < 1e-4 and tr < 1e-4
        assert rep.status == "converged"

    def test_cost_not_above_init(self, rng):
        src, sc, idx, tc, T_gt = registration_problem(rng)
        init = PoseSE3.identity()
        d, i = idx.nearest(src)
        keep = d <= 0.5
        T, rep = align(src, sc, idx, tc, init)
        c0 = mle_cost(idx.points[i[keep]] - src[keep], tc[i[keep]] + sc[keep])
        assert rep.cost <= c0

    def test_swap_inverse(self, rng):
        src, sc, idx, tc, T_gt = registration_problem(rng)
        T_ab, _ = align(src, sc, idx, tc)
        T_ba, _ = align(idx.points, tc, SpatialIndex(src), sc)
        rot, tr = pose_error(T_ba, T_ab.inverse())
        assert rot < 1e-3 and tr < 1e-3

    def test_disjoint_clouds_lost(self, rng):
        pts = box_surface(rng)
        covs = np.tile(np.eye(3), (len(pts), 1, 1))
        with pytest.raises(TrackingLostError) as exc:
            align(pts + 100.0, covs, SpatialIndex(pts), covs)
        assert exc.value.n_pairs == 0

    def test_max_iters_flag(self, rng):
        src, sc, idx, tc, _ = registration_problem(rng)
        _, rep = align(src, sc, idx, tc, cfg=GicpConfig(max_iters=1))
        assert rep.status == "max-iters" and rep.iterations == 1

    def test_pure_and_deterministic(self, rng):
        src, sc, idx, tc, _ = registration_problem(rng)
        sc0 = sc.copy()
        a, _ = align(src, sc, idx, tc)
        b, _ = align(src, sc, idx, tc)
        np.testing.assert_array_equal(a.matrix(), b.matrix())
        np.testing.assert_array_equal(sc, sc0)


def test_recovery_rate_and_speed():
    rng = np.random.default_rng(2024)
    ok, times = 0, []
    for _ in range(100):
        src, sc, idx, tc, T_gt = registration_problem(rng)
        t0 = time.perf_counter()
        T, _ = align(src, sc, idx, tc)
        times.append(time.perf_counter() - t0)
        rot, tr = pose_error(T, T_gt)
        ok += rot < np.deg2rad(0.5) and tr < 5e-3
    assert ok >= 99
    assert np.mean(times) < 0.05
