import numpy as np
import pytest

from epivo.fivepoint import (
    AmbiguousCheirality,
    DegenerateConfiguration,
    InsufficientCorrespondences,
    NoModelFound,
    companion_roots,
    decompose_essential,
    five_point,
    gauss_jordan,
    pose_candidates,
    ransac_essential,
    real_roots,
    sampson_error,
    triangulate_midpoint,
)
from epivo.geometry import Pose, essential_from_pose, so3_exp, unit_frobenius

from .test_geometry import project, random_points, random_pose


def exact_matches(pose, n, rng):
    X = random_points(rng, n, pose)
    return project(X), project(pose.apply(X))


def sign_distance(E, E_true):
    E, E_true = unit_frobenius(E), unit_frobenius(E_true)
    return min(np.linalg.norm(E - E_true), np.linalg.norm(E + E_true))


def best_distance(cands, E_true):
    return min((sign_distance(E, E_true) for E in cands), default=np.inf)


def direction_error(t, t_true):
    c = t @ t_true / np.linalg.norm(t) / np.linalg.norm(t_true)
    return float(np.arctan2(np.linalg.norm(np.cross(t, t_true)), c * np.linalg.norm(t) * np.linalg.norm(t_true)))


class TestPolynomialTools:
    def test_companion_roots_match_known_roots(self):
        roots = np.array([-2.0, 0.5, 1.0, 3.0])
        coeffs = np.polynomial.polynomial.polyfromroots(roots)
        np.testing.assert_allclose(np.sort(companion_roots(coeffs).real), roots, atol=1e-12)

    def test_real_roots_drop_complex(self):
        # (z^2 + 1)(z - 2)
        coeffs = np.polynomial.polynomial.polymul([1.0, 0.0, 1.0], [-2.0, 1.0])
        np.testing.assert_allclose(real_roots(coeffs), [2.0], atol=1e-14)

    def test_gauss_jordan(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(4, 6))
        R = gauss_jordan(A, 4)
        np.testing.assert_allclose(R[:, :4], np.eye(4), atol=1e-12)
        np.testing.assert_allclose(R[:, 4:], np.linalg.solve(A[:, :4], A[:, 4:]), atol=1e-12)

    def test_gauss_jordan_singular(self):
        with pytest.raises(DegenerateConfiguration):
            gauss_jordan(np.zeros((3, 4)), 3)


class TestFivePoint:
    def test_sideways_translation(self):
        pose = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        qt, qs = exact_matches(pose, 5, np.random.default_rng(1))
        assert best_distance(five_point(qt, qs), essential_from_pose(pose)) < 1e-6

    def test_sideways_with_yaw(self):
        pose = Pose(so3_exp([0.0, np.deg2rad(10.0), 0.0]), np.array([1.0, 0.0, 0.0]))
        qt, qs = exact_matches(pose, 5, np.random.default_rng(2))
        assert best_distance(five_point(qt, qs), essential_from_pose(pose)) < 1e-6

    @pytest.mark.parametrize("seed", range(25))
    def test_random_recovery(self, seed):
        rng = np.random.default_rng(100 + seed)
        pose = random_pose(rng)
        qt, qs = exact_matches(pose, 5, rng)
        cands = five_point(qt, qs)
        assert 1 <= len(cands) <= 10
        assert best_distance(cands, essential_from_pose(pose)) < 1e-6
        for E in cands:
            assert np.abs(np.linalg.svd(E, compute_uv=False)[2]) < 1e-8

    def test_pure_rotation_is_rejected(self):
        pose = Pose(so3_exp([0.05, -0.1, 0.02]), np.zeros(3))
        qt, qs = exact_matches(pose, 5, np.random.default_rng(3))
        try:
            cands = five_point(qt, qs)
        except DegenerateConfiguration:
            return
        # otherwise no candidate may give a cheirality-consistent pose with translation
        for E in cands:
            try:
                hyp = decompose_essential(E, qt, qs)
            except AmbiguousCheirality:
                continue
            assert hyp.cheirality_votes < 5

    def test_repeated_point_is_degenerate(self):
        rng = np.random.default_rng(4)
        qt, qs = exact_matches(random_pose(rng), 5, rng)
        qt[1], qs[1] = qt[0], qs[0]
        with pytest.raises(DegenerateConfiguration):
            five_point(qt, qs)

    def test_wrong_count(self):
        with pytest.raises(ValueError):
            five_point(np.zeros((4, 2)), np.zeros((4, 2)))


class TestSampson:
    def test_exact_is_zero(self):
        rng = np.random.default_rng(5)
        pose = random_pose(rng)
        qt, qs = exact_matches(pose, 20, rng)
        assert sampson_error(essential_from_pose(pose), qt, qs).max() < 1e-18

    def test_symmetric_perpendicular_displacement(self):
        # sideways motion: both epipolar lines are horizontal with equal gradient norms
        pose = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        E = essential_from_pose(pose)
        qt = np.array([[0.1, 0.2]])
        qs = qt + [[0.25, 0.0]]
        for delta in (1e-3, 1e-4):
            err = sampson_error(E, qt, qs + [[0.0, delta]])[0]
            assert err == pytest.approx(delta**2 / 2, rel=1e-9)

    def test_scale_invariant(self):
        rng = np.random.default_rng(6)
        E = essential_from_pose(random_pose(rng))
        qt, qs = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
        np.testing.assert_allclose(sampson_error(unit_frobenius(7.0 * E), qt, qs), sampson_error(E, qt, qs), rtol=1e-14)

    def test_at_epipoles_is_infinite(self):
        E = essential_from_pose(Pose(np.eye(3), np.array([0.0, 0.0, 1.0])))
        assert sampson_error(E, np.zeros((1, 2)), np.zeros((1, 2)))[0] == np.inf


class TestRansac:
    def test_clean_data(self):
        rng = np.random.default_rng(7)
        pose = random_pose(rng)
        qt, qs = exact_matches(pose, 100, rng)
        res = ransac_essential(qt, qs, threshold=1e-8, max_iters=50, seed=1)
        assert res.inlier_count == 100
        assert sign_distance(res.best, essential_from_pose(pose)) < 1e-6
        assert res.iterations_run == 50

    def test_too_few(self):
        with pytest.raises(InsufficientCorrespondences, match="insufficient correspondences"):
            ransac_essential(np.zeros((4, 2)), np.zeros((4, 2)))

    def test_all_degenerate(self):
        q = np.zeros((6, 2))
        with pytest.raises(NoModelFound):
            ransac_essential(q, q, max_iters=10)

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        qt, qs = exact_matches(random_pose(rng), 60, rng)
        qs[:10] = rng.uniform(-1, 1, (10, 2))
        a = ransac_essential(qt, qs, max_iters=100, seed=3)
        b = ransac_essential(qt, qs, max_iters=100, seed=3)
        np.testing.assert_array_equal(a.best, b.best)
        np.testing.assert_array_equal(a.inlier_mask, b.inlier_mask)

    def test_adaptive_stops_early_on_clean_data(self):
        rng = np.random.default_rng(9)
        qt, qs = exact_matches(random_pose(rng), 50, rng)
        res = ransac_essential(qt, qs, max_iters=1000, seed=0, adaptive=True)
        assert res.iterations_run < 10 and res.inlier_count == 50


class TestDecomposition:
    def test_sideways_pose(self):
        pose = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        qt, qs = exact_matches(pose, 10, np.random.default_rng(10))
        hyp = decompose_essential(essential_from_pose(pose), qt, qs)
        np.testing.assert_allclose(hyp.pose.rotation, np.eye(3), atol=1e-6)
        np.testing.assert_allclose(hyp.pose.translation, [1.0, 0.0, 0.0], atol=1e-6)
        assert hyp.cheirality_votes == 10

    def test_sign_invariance(self):
        rng = np.random.default_rng(11)
        pose = random_pose(rng)
        qt, qs = exact_matches(pose, 20, rng)
        E = essential_from_pose(pose)
        a = decompose_essential(E, qt, qs)
        b = decompose_essential(-E, qt, qs)
        np.testing.assert_allclose(a.pose.matrix, b.pose.matrix, atol=1e-12)
        assert a.cheirality_votes == b.cheirality_votes

    def test_single_point_picks_true_factorization(self):
        pose = Pose(so3_exp([0.0, 0.1, 0.0]), np.array([1.0, 0.0, 0.0]) / 1.0)
        X = np.array([[0.3, -0.2, 5.0]])
        qt, qs = project(X), project(pose.apply(X))
        E = essential_from_pose(pose)
        votes = []
        for cand in pose_candidates(E):
            Xt, zs = triangulate_midpoint(cand, qt, qs)
            votes.append(int((Xt[0, 2] > 0) and (zs[0] > 0)))
        # exactly one of the four factorizations sees the point in front of both cameras
        assert sorted(votes) == [0, 0, 0, 1]
        hyp = decompose_essential(E, qt, qs)
        assert hyp.cheirality_votes == 1
        np.testing.assert_allclose(hyp.pose.rotation, pose.rotation, atol=1e-9)
        np.testing.assert_allclose(hyp.pose.translation, pose.translation, atol=1e-9)

    def test_triangulation_recovers_points(self):
        rng = np.random.default_rng(12)
        pose = random_pose(rng)
        X = random_points(rng, 10, pose)
        Xt, zs = triangulate_midpoint(pose, project(X), project(pose.apply(X)))
        np.testing.assert_allclose(Xt, X, atol=1e-9)
        np.testing.assert_allclose(zs, pose.apply(X)[:, 2], atol=1e-9)


def test_noise_monotonicity():
    """Median translation-direction error does not decrease as noise grows."""
    levels = (0.0, 1e-4, 1e-3, 1e-2)
    medians = []
    for sigma in levels:
        errors = []
        for trial in range(100):
            rng = np.random.default_rng(trial)
            pose = random_pose(rng)
            qt, qs = exact_matches(pose, 30, rng)
            qs = qs + rng.normal(0.0, sigma, qs.shape)
            try:
                cands = five_point(qt[:5], qs[:5])
            except DegenerateConfiguration:
                errors.append(np.pi)
                continue
            if not cands:
                errors.append(np.pi)
                continue
            E = min(cands, key=lambda c: float(np.sum(sampson_error(c, qt, qs))))
            try:
                t = decompose_essential(E, qt, qs).pose.translation
            except AmbiguousCheirality:
                errors.append(np.pi)
                continue
            errors.append(direction_error(t, pose.translation))
        medians.append(float(np.median(errors)))
    assert medians[0] < 1e-6
    assert all(a <= b for a, b in zip(medians, medians[1:])), medians
