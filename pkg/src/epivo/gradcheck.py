"""Central finite-difference checks of the analytic loss gradients.

The loss is only piecewise smooth. Bilinear sampling has kinks on integer grid
lines (which include the image border, where pixels enter or leave the valid
set), ``|r|`` has a kink at zero residual, and the epipolar weight has one at
zero epipolar residual. :func:`kink_masks` drops target pixels that sit close
to any of these so the finite differences do not straddle a kink. The same
masks are passed to both evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .losses import LossConfig, depth_from_inverse, epipolar_weight_map, downsample, normalize_inverse_depth, total_loss
from .optim import loss_and_gradients
from .synth import SceneSpec, Plane, make_texture, default_intrinsics, render_pair
from .warp import MIN_SOURCE_DEPTH, bilinear_sample, project_points, rays

GRID_TOL = 1e-3
RESIDUAL_TOL = 1e-3
EPIPOLAR_TOL = 1e-4
FD_STEP = 1e-5
REL_FLOOR = 1e-8


def kink_masks(target, source, inv_depth, pose: Pose, k: CameraIntrinsics, config: LossConfig,
               grid_tol: float = GRID_TOL, residual_tol: float = RESIDUAL_TOL,
               epipolar_tol: float = EPIPOLAR_TOL) -> list[np.ndarray]:
    """Per-scale masks that are false for pixels near a non-differentiable point."""
    masks = []
    for level in range(config.num_scales):
        tgt = downsample(target, level)
        src = downsample(source, level)
        n = normalize_inverse_depth(downsample(inv_depth, level))
        kl = k.scaled(level)
        r = rays(*n.shape, kl)
        Xs = pose.apply(depth_from_inverse(n)[..., None] * r)
        q, z = project_points(Xs, kl)
        frac = np.abs(q - np.round(q))
        ok = (frac[..., 0] > grid_tol) & (frac[..., 1] > grid_tol)
        val, _ = bilinear_sample(src, q)
        resid = np.abs(np.asarray(tgt, dtype=float) - val)
        ok &= resid.min(axis=-1) > residual_tol if resid.ndim == 3 else resid > residual_tol
        if config.use_epipolar_weight:
            lines = r @ config.epipolar_E.T
            zs = np.where(z > MIN_SOURCE_DEPTH, z, 1.0)
            e = lines[..., 0] * Xs[..., 0] / zs + lines[..., 1] * Xs[..., 1] / zs + lines[..., 2]
            ok &= np.abs(e) > epipolar_tol
        masks.append(ok)
    return masks


def epipolar_weights(inv_depth, pose: Pose, k: CameraIntrinsics, config: LossConfig) -> list[np.ndarray]:
    """Per-scale epipolar weight maps at the current inverse depth and pose."""
    return [
        epipolar_weight_map(depth_from_inverse(normalize_inverse_depth(downsample(inv_depth, level))),
                            k.scaled(level), pose, config.epipolar_E)
        for level in range(config.num_scales)
    ]


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    """``|a - f| / max(|a|, |f|, floor)`` elementwise."""
    a = np.asarray(analytic, dtype=float)
    f = np.asarray(numeric, dtype=float)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


@dataclass
class CheckResult:
    pose_analytic: np.ndarray
    pose_numeric: np.ndarray
    pixels: list[tuple[int, int]]
    depth_analytic: np.ndarray
    depth_numeric: np.ndarray

    @property
    def pose_error(self) -> float:
        return float(relative_error(self.pose_analytic, self.pose_numeric).max())

    @property
    def depth_error(self) -> float:
        if not self.pixels:
            return 0.0
        return float(relative_error(self.depth_analytic, self.depth_numeric).max())


def _smooth_kink(inv_depth: np.ndarray, i: int, j: int, margin: float, levels: int) -> bool:
    """True if perturbing pixel (i, j) by ``margin`` can flip the sign of a
    neighbouring inverse-depth difference at any scale."""
    for level in range(levels):
        d = downsample(inv_depth, level)
        a0, b0 = i >> level, j >> level
        h, w = d.shape
        if a0 >= h or b0 >= w:
            continue
        for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            a, b = a0 + di, b0 + dj
            if 0 <= a < h and 0 <= b < w and abs(d[a, b] - d[a0, b0]) < margin:
                return True
    return False


def check_gradients(target, source, inv_depth, pose: Pose, k: CameraIntrinsics, config: LossConfig,
                    pixels: int = 8, step: float = FD_STEP, seed: int = 0, mask_kinks: bool = True) -> CheckResult:
    """Compare analytic gradients with central differences of :func:`total_loss`.

    Pose components are perturbed on the left, ``exp(+-h e_i) @ pose``.
    ``pixels`` random inverse-depth entries are perturbed one at a time;
    entries whose perturbation could cross a smoothness kink are skipped.
    Under ``stop_grad_weight`` the oracle holds the epipolar weights fixed at
    their current values.
    """
    inv_depth = np.asarray(inv_depth, dtype=float)
    masks = kink_masks(target, source, inv_depth, pose, k, config) if mask_kinks else None
    bundle = loss_and_gradients(target, source, inv_depth, pose, k, config, masks)

    frozen = None
    if config.use_epipolar_weight and config.stop_grad_weight:
        frozen = epipolar_weights(inv_depth, pose, k, config)

    def loss(d, p):
        return total_loss(target, source, d, p, k, config, masks, frozen).total

    numeric = np.empty(6)
    for i, e in enumerate(np.eye(6)):
        numeric[i] = (loss(inv_depth, Pose.exp(step * e) @ pose) - loss(inv_depth, Pose.exp(-step * e) @ pose)) / (2 * step)

    rng = np.random.default_rng(seed)
    h, w = inv_depth.shape
    chosen = []
    num_d, an_d = [], []
    for _ in range(50 * pixels):
        if len(chosen) == pixels:
            break
        i, j = int(rng.integers(h)), int(rng.integers(w))
        if (i, j) in chosen or _smooth_kink(inv_depth, i, j, 10 * step, config.num_scales):
            continue
        dp = inv_depth.copy()
        dm = inv_depth.copy()
        dp[i, j] += step
        dm[i, j] -= step
        chosen.append((i, j))
        num_d.append((loss(dp, pose) - loss(dm, pose)) / (2 * step))
        an_d.append(bundle.d_inv_depth[i, j])
    return CheckResult(bundle.d_pose, numeric, chosen, np.array(an_d), np.array(num_d))


def random_check_scene(seed: int, size: int = 32):
    """A random slanted textured plane, a perturbed inverse depth and a perturbed pose.

    The pose perturbation has ``|omega| <= 0.2`` and ``|v| <= 0.2`` in loss units.
    Returns ``(pair, inv_depth, pose)``.
    """
    rng = np.random.default_rng(seed)
    normal = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0])
    normal /= np.linalg.norm(normal)
    texture = make_texture(str(rng.choice(["sines", "edge"])), rng)
    base = Pose.exp(np.concatenate([rng.uniform(-0.03, 0.03, 3), rng.uniform(-0.4, 0.4, 3)]))
    spec = SceneSpec(size, size, default_intrinsics(size, size), base,
                     (Plane(normal, rng.uniform(4.0, 8.0), texture),), None, seed)
    pair = render_pair(spec)
    ys, xs = np.mgrid[0:size, 0:size] / size
    a, b, c = rng.uniform(1.0, 4.0, 3)
    bump = 1.0 + 0.05 * np.sin(a * xs + b * ys + c) * np.cos(b * xs - a * ys)
    inv_depth = pair.inv_depth * bump

    def ball(r):
        v = rng.normal(size=3)
        return v / np.linalg.norm(v) * r * rng.uniform() ** (1 / 3)

    pose = Pose.exp(np.concatenate([ball(0.2), ball(0.2)])) @ pair.loss_pose()
    return pair, inv_depth, pose
