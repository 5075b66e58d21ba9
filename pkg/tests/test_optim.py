import csv

import numpy as np
import pytest

from epivo import synth
from epivo.gradcheck import check_gradients, random_check_scene
from epivo.geometry import CameraIntrinsics, Pose, essential_from_pose, rotation_angle
from epivo.losses import LossConfig, total_loss
from epivo.optim import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_LR,
    AdamState,
    ShapeMismatch,
    adam_step,
    loss_and_gradients,
    optimize_direct,
    write_trace,
)


def scalar_adam(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Reference Adam on one scalar, written out step by step."""
    x, m, v, xs = 0.0, 0.0, 0.0, []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        xs.append(x)
    return xs


class TestAdam:
    def test_defaults(self):
        s = AdamState()
        assert (s.beta1, s.beta2, s.eps, s.lr) == (0.9, 0.999, 1e-8, 2e-4)
        assert (ADAM_BETA1, ADAM_BETA2, ADAM_LR) == (0.9, 0.999, 2e-4)

    @pytest.mark.parametrize("g", [3.0, -0.02, 1e-4])
    def test_first_step_is_signed_lr(self, g):
        state, out = adam_step(AdamState(lr=1e-3), {"x": np.zeros(1)}, {"x": np.array([g])})
        expected = -1e-3 * g / (abs(g) + 1e-8)
        assert out["x"][0] == pytest.approx(expected, rel=1e-15)
        assert state.step == 1

    def test_constant_gradient_unit_step(self):
        state, p = AdamState(lr=0.01), {"x": np.zeros(3)}
        g = {"x": np.array([0.5, -2.0, 7.0])}
        for _ in range(2000):
            prev = p["x"]
            state, p = adam_step(state, p, g)
        step = p["x"] - prev
        np.testing.assert_allclose(step, -0.01 * np.sign(g["x"]), rtol=1e-6)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=30)
        state, p = AdamState(lr=1e-3), {"x": np.zeros(1)}
        out = []
        for g in grads:
            state, p = adam_step(state, p, {"x": np.array([g])})
            out.append(p["x"][0])
        np.testing.assert_allclose(out, scalar_adam(grads), rtol=1e-13, atol=1e-18)

    def test_zero_gradient(self):
        _, out = adam_step(AdamState(), {"x": np.ones(4)}, {"x": np.zeros(4)})
        np.testing.assert_array_equal(out["x"], np.ones(4))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step(AdamState(), {"x": np.zeros(3)}, {"x": np.zeros(4)})
        with pytest.raises(ShapeMismatch):
            adam_step(AdamState(), {"x": np.zeros(3)}, {"y": np.zeros(3)})

    def test_state_is_not_mutated(self):
        s0 = AdamState()
        s1, _ = adam_step(s0, {"x": np.zeros(2)}, {"x": np.ones(2)})
        assert s0.step == 0 and s0.m == {} and s1.step == 1


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 3, 7])
    def test_random_scene(self, seed):
        pair, inv_depth, pose = random_check_scene(seed)
        res = check_gradients(pair.target, pair.source, inv_depth, pose, pair.intrinsics, LossConfig(), pixels=10,
                              seed=seed)
        assert res.pose_error < 1e-4
        assert res.depth_error < 1e-4

    def test_weighted_with_and_without_stop_grad(self):
        pair, inv_depth, pose = random_check_scene(11)
        for stop in (False, True):
            cfg = LossConfig(use_epipolar_weight=True, epipolar_E=pair.essential, stop_grad_weight=stop)
            res = check_gradients(pair.target, pair.source, inv_depth, pose, pair.intrinsics, cfg, pixels=10)
            assert res.pose_error < 1e-4 and res.depth_error < 1e-4

    def test_loss_agrees_with_total_loss(self):
        pair, inv_depth, pose = random_check_scene(2)
        cfg = LossConfig()
        b = loss_and_gradients(pair.target, pair.source, inv_depth, pose, pair.intrinsics, cfg)
        r = total_loss(pair.target, pair.source, inv_depth, pose, pair.intrinsics, cfg)
        assert b.loss == pytest.approx(r.total, abs=1e-14)
        assert b.d_pose.shape == (6,) and b.d_inv_depth.shape == inv_depth.shape

    def test_depth_gradient_is_scale_free(self):
        # the loss sees only unit-mean inverse depth, so the gradient is orthogonal to the field
        pair, inv_depth, pose = random_check_scene(5)
        b = loss_and_gradients(pair.target, pair.source, inv_depth, pose, pair.intrinsics, LossConfig())
        assert abs(np.sum(b.d_inv_depth * inv_depth)) < 1e-10 * np.abs(b.d_inv_depth).sum() * inv_depth.max()


def ramp_pair():
    """Intensity ramp seen under pure sideways motion: bilinear sampling and box averaging are exact."""
    k = CameraIntrinsics(32.0, 32.0, 15.5, 15.5)
    b, depth = 0.5, 4.0
    jj, ii = np.meshgrid(np.arange(32.0), np.arange(32.0))
    target = 0.2 + 0.005 * jj + 0.003 * ii
    source = 0.2 + 0.005 * (jj - k.fx * b / depth) + 0.003 * ii
    # unit-mean inverse depth puts the plane at depth 1, so the translation shrinks by 1/depth
    return target, source, np.full((32, 32), 1.0 / depth), Pose(np.eye(3), np.array([b / depth, 0.0, 0.0])), k


class TestZeroResidual:
    @pytest.mark.parametrize("epi", [False, True])
    def test_gradient_vanishes(self, epi):
        target, source, inv_depth, pose, k = ramp_pair()
        cfg = LossConfig(use_epipolar_weight=epi, epipolar_E=essential_from_pose(pose) if epi else None)
        b = loss_and_gradients(target, source, inv_depth, pose, k, cfg)
        assert b.loss < 1e-15
        assert np.linalg.norm(b.d_pose) < 1e-6
        assert np.abs(b.d_inv_depth).max() < 1e-6

    def test_ground_truth_init_stays(self):
        target, source, inv_depth, pose, k = ramp_pair()
        res = optimize_direct(target, source, inv_depth, pose, k, LossConfig(), 100)
        assert np.linalg.norm((res.pose @ pose.inverse()).log()) < 1e-4
        totals = [r.total for r in res.trace]
        assert max(totals) - min(totals) < 1e-12


@pytest.fixture(scope="module")
def pair():
    return synth.render_pair(synth.odometry_scene(32, 0))


class TestDirectOptimization:
    @pytest.mark.parametrize("optimize_depth", [False, True])
    def test_descent(self, pair, optimize_depth):
        rng = np.random.default_rng(1)
        init = synth.perturb_pose(pair.loss_pose(), rng, 2.0, 0.1)
        res = optimize_direct(pair.target, pair.source, pair.inv_depth, init, pair.intrinsics, LossConfig(), 50,
                              lr=1e-4, optimize_depth=optimize_depth)
        totals = np.array([r.total for r in res.trace] + [res.final.total])
        assert totals[-1] < totals[0]
        assert np.diff(totals).max() <= 1e-9

    def test_pose_only_recovers_rotation(self, pair):
        rng = np.random.default_rng(2)
        gt = pair.loss_pose()
        init = synth.perturb_pose(gt, rng, 2.0, 0.1)
        res = optimize_direct(pair.target, pair.source, pair.inv_depth, init, pair.intrinsics, LossConfig(), 200,
                              lr=1e-3, optimize_depth=False)
        before = np.rad2deg(rotation_angle(init.rotation @ gt.rotation.T))
        after = np.rad2deg(rotation_angle(res.pose.rotation @ gt.rotation.T))
        assert after < 0.25 * before
        np.testing.assert_array_equal(res.inv_depth, np.clip(pair.inv_depth, 1e-3, 1e3))

    def test_depth_is_clipped(self, pair):
        d = pair.inv_depth.copy()
        d[0, 0] = 1e-6
        res = optimize_direct(pair.target, pair.source, d, pair.loss_pose(), pair.intrinsics, LossConfig(), 2,
                              optimize_pose=False)
        assert res.inv_depth.min() >= 1e-3
        np.testing.assert_array_equal(res.pose.matrix, pair.loss_pose().matrix)

    def test_rejects_zero_iterations(self, pair):
        with pytest.raises(ValueError):
            optimize_direct(pair.target, pair.source, pair.inv_depth, Pose.identity(), pair.intrinsics,
                            LossConfig(), 0)

    def test_trace_csv(self, pair, tmp_path):
        res = optimize_direct(pair.target, pair.source, pair.inv_depth, pair.loss_pose(), pair.intrinsics,
                              LossConfig(num_scales=2), 3)
        write_trace(tmp_path / "t.csv", res.trace)
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["iter", "total", "warp_0", "warp_1", "smooth_0", "smooth_1"]
        assert len(rows) == 4
        assert float(rows[1][1]) == res.trace[0].total
