import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from epivo.geometry import (
    CameraIntrinsics,
    GeometryError,
    Pose,
    ZeroTranslation,
    denormalize,
    epipolar_line,
    epipolar_residual,
    epipole,
    essential_from_pose,
    format_pose,
    is_essential,
    load_poses,
    normalize,
    rotation_angle,
    save_poses,
    skew,
    so3_exp,
    so3_log,
    unit_frobenius,
)

KITTI = CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854)


def random_pose(rng, scale=1.0):
    return Pose.exp(np.concatenate([rng.normal(size=3) * 0.5, rng.normal(size=3) * scale]))


def random_points(rng, n, pose):
    """3-D points in front of both cameras."""
    pts = []
    while len(pts) < n:
        X = np.c_[rng.uniform(-2, 2, (4 * n, 2)), rng.uniform(3, 10, 4 * n)]
        ok = pose.apply(X)[:, 2] > 0.5
        pts.extend(X[ok])
    return np.array(pts[:n])


def project(X):
    return X[:, :2] / X[:, 2:]


class TestIntrinsics:
    def test_rejects_nonpositive_focal(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(0.0, 1.0, 0.0, 0.0)
        with pytest.raises(GeometryError):
            CameraIntrinsics(1.0, -2.0, 0.0, 0.0)

    def test_inverse(self):
        K = KITTI.matrix
        assert K[2, 2] == 1.0 and K[1, 0] == K[2, 0] == K[2, 1] == 0.0
        np.testing.assert_allclose(K @ KITTI.inverse, np.eye(3), atol=1e-12)

    def test_principal_point_and_unit_slope(self):
        k = CameraIntrinsics(500.0, 400.0, 320.0, 240.0)
        np.testing.assert_array_equal(normalize([320.0, 240.0], k), [0.0, 0.0])
        np.testing.assert_array_equal(normalize([820.0, 240.0], k), [1.0, 0.0])

    def test_normalize_matches_general_inverse(self):
        p = np.array([700.0, 200.0, 1.0])
        expected = np.linalg.inv(KITTI.matrix) @ p
        np.testing.assert_allclose(normalize(p[:2], KITTI), expected[:2] / expected[2], rtol=0, atol=1e-15)

    @given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
    def test_normalize_roundtrip(self, x, y):
        p = np.array([x, y])
        np.testing.assert_allclose(denormalize(normalize(p, KITTI), KITTI), p, rtol=0, atol=1e-12 * (1 + abs(p).max()))

    def test_scaled_keeps_pixel_centers(self):
        k = CameraIntrinsics(64.0, 64.0, 31.5, 31.5)
        k1 = k.scaled(1)
        assert (k1.fx, k1.cx) == (32.0, 15.5)
        # the coarse pixel i averages fine pixels 2i and 2i+1
        for i in range(5):
            coarse = normalize([float(i), 0.0], k1)[0]
            fine = normalize([2 * i + 0.5, 0.0], k)[0]
            assert coarse == pytest.approx(fine, abs=1e-15)

    def test_load_save(self, tmp_path):
        KITTI.save(tmp_path / "k.txt")
        assert CameraIntrinsics.load(tmp_path / "k.txt") == KITTI


class TestRotations:
    @given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
    def test_exp_is_rotation(self, w):
        R = so3_exp(w)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)

    @given(st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6))
    def test_pose_log_exp_roundtrip(self, xi):
        pose = Pose.exp(xi)
        back = Pose.exp(pose.log())
        np.testing.assert_allclose(back.matrix, pose.matrix, atol=1e-9)

    def test_log_near_pi(self):
        axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
        for angle in (np.pi - 1e-9, np.pi - 1e-5, np.pi):
            w = so3_log(so3_exp(angle * axis))
            np.testing.assert_allclose(so3_exp(w), so3_exp(angle * axis), atol=1e-9)

    def test_small_angle(self):
        w = np.array([1e-12, -2e-12, 3e-12])
        np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-20)

    def test_rotation_angle(self):
        assert rotation_angle(so3_exp([0.0, 0.3, 0.0])) == pytest.approx(0.3, abs=1e-12)

    def test_bch_composition(self):
        # exp(a) exp(b) = exp(a + b + [a, b]/2 + O(|xi|^3))
        rng = np.random.default_rng(1)
        for eps in (1e-2, 5e-3, 2.5e-3):
            a, b = rng.normal(size=3) * eps, rng.normal(size=3) * eps
            composed = so3_log(so3_exp(a) @ so3_exp(b))
            bch = a + b + 0.5 * np.cross(a, b)
            assert np.linalg.norm(composed - bch) < 10 * eps**3


class TestPose:
    def test_compose_inverse(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        ident = p @ p.inverse()
        np.testing.assert_allclose(ident.matrix, Pose.identity().matrix, atol=1e-12)

    def test_retract_is_left_update(self):
        rng = np.random.default_rng(2)
        p = random_pose(rng)
        d = rng.normal(size=6) * 0.1
        np.testing.assert_allclose(p.retract(d).matrix, (Pose.exp(d) @ p).matrix, atol=1e-15)

    def test_arrays_read_only(self):
        p = Pose.identity()
        with pytest.raises(ValueError):
            p.translation[0] = 1.0

    def test_kitti_io(self, tmp_path):
        rng = np.random.default_rng(3)
        poses = [random_pose(rng) for _ in range(3)]
        save_poses(tmp_path / "p.txt", poses)
        back = load_poses(tmp_path / "p.txt")
        for a, b in zip(poses, back):
            np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-11)
        assert len(format_pose(poses[0]).split()) == 12


class TestEssential:
    def test_x_translation(self):
        E = essential_from_pose(Pose(np.eye(3), np.array([1.0, 0.0, 0.0])))
        expected = unit_frobenius(np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float))
        np.testing.assert_allclose(E, expected, atol=1e-15)

    def test_z_translation(self):
        E = essential_from_pose(Pose(np.eye(3), np.array([0.0, 0.0, 1.0])))
        expected = unit_frobenius(np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], dtype=float))
        np.testing.assert_allclose(E, expected, atol=1e-15)

    def test_zero_translation(self):
        with pytest.raises(ZeroTranslation):
            essential_from_pose(Pose(so3_exp([0.1, 0, 0]), np.zeros(3)))

    @pytest.mark.parametrize("seed", range(20))
    def test_structure_and_exact_matches(self, seed):
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        E = essential_from_pose(pose)
        assert is_essential(E, 1e-9)
        assert abs(np.linalg.det(E)) < 1e-9
        s = np.linalg.svd(E, compute_uv=False)
        assert s[0] - s[1] < 1e-9 and s[2] < 1e-9
        cubic = 2 * E @ E.T @ E - np.trace(E @ E.T) * E
        assert np.abs(cubic).max() < 1e-8
        X = random_points(rng, 50, pose)
        assert epipolar_residual(project(X), project(pose.apply(X)), E).max() < 1e-10

    def test_residual_along_and_across_line(self):
        rng = np.random.default_rng(5)
        pose = random_pose(rng)
        E = essential_from_pose(pose)
        X = random_points(rng, 10, pose)
        qt, qs = project(X), project(pose.apply(X))
        lines = epipolar_line(E, qt)
        direction = np.c_[-lines[:, 1], lines[:, 0]]
        along = qs + 0.3 * direction / np.linalg.norm(direction, axis=1, keepdims=True)
        assert epipolar_residual(qt, along, E).max() < 1e-10
        delta = 1e-4
        normal = lines[:, :2] / np.linalg.norm(lines[:, :2], axis=1, keepdims=True)
        across = qs + delta * normal
        expected = delta * np.linalg.norm(lines[:, :2], axis=1)
        np.testing.assert_allclose(epipolar_residual(qt, across, E), expected, rtol=1e-8)

    def test_line_definition(self):
        E = skew([1.0, 0.0, 0.0])
        np.testing.assert_allclose(epipolar_line(E, np.array([0.0, 0.0])), [0.0, -1.0, 0.0])

    def test_residual_is_dot_with_line_and_scale_free(self):
        rng = np.random.default_rng(6)
        E = essential_from_pose(random_pose(rng))
        qt, qs = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        direct = np.abs(np.sum(np.c_[qs, np.ones(5)] * epipolar_line(E, qt), axis=1))
        np.testing.assert_allclose(epipolar_residual(qt, qs, E), direct, atol=1e-15)
        np.testing.assert_allclose(epipolar_residual(qt, qs, 7.0 * E), direct, atol=1e-15)

    def test_lines_pass_through_epipoles(self):
        rng = np.random.default_rng(7)
        pose = random_pose(rng)
        E = essential_from_pose(pose)
        # oracle: null vectors from an independent SVD
        _, _, Vt = np.linalg.svd(E)
        e_t = Vt[-1] / Vt[-1][2]
        np.testing.assert_allclose(epipole(E), e_t, atol=1e-9)
        # target-view lines E^T q_s meet at the right null vector
        qs = np.c_[rng.normal(size=(10, 2)), np.ones(10)]
        assert np.abs((qs @ E) @ e_t).max() < 1e-9
        # source-view lines E q_t meet at the epipole of E^T, the image of the target center
        e_s = epipole(E.T)
        np.testing.assert_allclose(e_s[:2], project(pose.translation[None])[0], atol=1e-9)
        lines = epipolar_line(E, rng.normal(size=(10, 2)))
        assert np.abs(lines @ e_s).max() < 1e-9
