"""Analytic gradients of the multi-scale loss and Adam-based direct optimization.

Pose gradients are taken with respect to a left perturbation
``exp(delta) @ pose`` at ``delta = 0``, ordered ``(omega, v)``. Inverse-depth
gradients are with respect to the raw full-resolution field, before the
pyramid and the unit-mean normalization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .losses import (
    INV_DEPTH_MAX,
    INV_DEPTH_MIN,
    LossConfig,
    LossReport,
    _check_same,
    downsample,
    normalize_inverse_depth,
)
from .warp import MIN_SOURCE_DEPTH, bilinear_sample_grad, project_points, rays

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_LR = 2e-4
# |x| below this counts as an exact zero of |x|, where 0 is the chosen subgradient
SUBGRADIENT_ZERO = 1e-12


class ShapeMismatch(ValueError):
    pass


def _sign(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) > SUBGRADIENT_ZERO, np.sign(x), 0.0)


@dataclass
class GradientBundle:
    d_pose: np.ndarray
    d_inv_depth: np.ndarray
    loss: float
    report: LossReport


def _upsample_adjoint(g: np.ndarray, shapes: list[tuple[int, int]]) -> np.ndarray:
    """Adjoint of :func:`losses.downsample`; ``shapes`` lists the finer sizes, coarsest last."""
    for h, w in reversed(shapes):
        up = np.zeros((h, w))
        hh, ww = g.shape
        q = 0.25 * g
        up[0 : 2 * hh : 2, 0 : 2 * ww : 2] = q
        up[1 : 2 * hh : 2, 0 : 2 * ww : 2] = q
        up[0 : 2 * hh : 2, 1 : 2 * ww : 2] = q
        up[1 : 2 * hh : 2, 1 : 2 * ww : 2] = q
        g = up
    return g


def _scale_terms(tgt, src, n, pose: Pose, k: CameraIntrinsics, config: LossConfig, lam: float, pixel_mask):
    """Loss terms of one scale and their gradients w.r.t. pose and normalized inverse depth."""
    h, w = n.shape
    R, t = pose.rotation, pose.translation
    inside = (n >= INV_DEPTH_MIN) & (n <= INV_DEPTH_MAX)
    D = 1.0 / np.clip(n, INV_DEPTH_MIN, INV_DEPTH_MAX)
    r = rays(h, w, k)
    Rr = r @ R.T
    Xs = D[..., None] * Rr + t
    q, z = project_points(Xs, k)
    val, gx, gy, inb = bilinear_sample_grad(src, q)
    front = z > MIN_SOURCE_DEPTH
    valid = inb & front
    if pixel_mask is not None:
        valid &= pixel_mask
    resid = tgt - val
    absr = np.abs(resid)
    a = absr.mean(axis=-1) if resid.ndim == 3 else absr

    Zs = np.where(front, z, 1.0)
    X, Y = Xs[..., 0], Xs[..., 1]
    if config.use_epipolar_weight:
        lines = r @ config.epipolar_E.T
        e = lines[..., 0] * X / Zs + lines[..., 1] * Y / Zs + lines[..., 2]
        weight = np.where(front, np.exp(np.abs(e)), 1.0)
    else:
        weight = np.ones_like(a)

    count = int(valid.sum())
    warp = float((weight * a)[valid].sum() / count) if count else 0.0

    # edge-aware smoothness on the normalized inverse depth
    gray = tgt.mean(axis=-1) if tgt.ndim == 3 else tgt
    ddx = np.diff(n, axis=1)
    ddy = np.diff(n, axis=0)
    ex = np.exp(-np.abs(np.diff(gray, axis=1)))
    ey = np.exp(-np.abs(np.diff(gray, axis=0)))
    smooth = float((np.abs(ddx) * ex).sum() + (np.abs(ddy) * ey).sum()) / n.size

    # backward: smoothness
    dn = np.zeros_like(n)
    sx = lam * _sign(ddx) * ex / n.size
    sy = lam * _sign(ddy) * ey / n.size
    dn[:, 1:] += sx
    dn[:, :-1] -= sx
    dn[1:, :] += sy
    dn[:-1, :] -= sy

    d_pose = np.zeros(6)
    if count:
        d_a = np.where(valid, weight / count, 0.0)
        sign = _sign(resid)
        if resid.ndim == 3:
            d_val = -sign * d_a[..., None] / resid.shape[-1]
            du = np.sum(d_val * gx, axis=-1)
            dv = np.sum(d_val * gy, axis=-1)
        else:
            d_val = -sign * d_a
            du = d_val * gx
            dv = d_val * gy
        gX = du * k.fx / Zs
        gY = dv * k.fy / Zs
        gZ = -(du * k.fx * X + dv * k.fy * Y) / Zs**2
        if config.use_epipolar_weight and not config.stop_grad_weight:
            de = np.where(valid, a / count, 0.0) * weight * _sign(e)
            gX = gX + de * lines[..., 0] / Zs
            gY = gY + de * lines[..., 1] / Zs
            gZ = gZ - de * (lines[..., 0] * X + lines[..., 1] * Y) / Zs**2
        g = np.stack([gX, gY, gZ], axis=-1)
        g[~valid] = 0.0
        # d X_s / d omega = -[X_s]_x, d X_s / d v = I
        d_pose[:3] = np.cross(Xs, g).reshape(-1, 3).sum(axis=0)
        d_pose[3:] = g.reshape(-1, 3).sum(axis=0)
        dD = np.sum(g * Rr, axis=-1)
        dn += np.where(inside, -dD * D**2, 0.0)
    return warp, smooth, count, d_pose, dn


def loss_and_gradients(target, source, inv_depth, pose: Pose, k: CameraIntrinsics, config: LossConfig,
                       pixel_masks=None) -> GradientBundle:
    """The multi-scale loss of :func:`losses.total_loss` with its analytic gradients.

    With ``config.stop_grad_weight`` the epipolar weights are treated as
    constants in the backward pass.
    """
    target = np.asarray(target, dtype=float)
    source = np.asarray(source, dtype=float)
    inv_depth = np.asarray(inv_depth, dtype=float)
    _check_same(target, source, "target/source")
    _check_same(target, inv_depth, "target/inverse depth")

    report = LossReport()
    d_pose = np.zeros(6)
    d_inv = np.zeros_like(inv_depth)
    shapes = []
    tgt, src, d = target, source, inv_depth
    for level in range(config.num_scales):
        if level:
            shapes.append(d.shape)
            tgt, src, d = downsample(tgt, 1), downsample(src, 1), downsample(d, 1)
        m = d.mean()
        n = normalize_inverse_depth(d)
        lam = config.lambda_smooth(level)
        mask = pixel_masks[level] if pixel_masks is not None else None
        warp, smooth, count, dp, dn = _scale_terms(tgt, src, n, pose, k.scaled(level), config, lam, mask)
        report.warp.append(warp)
        report.smooth.append(smooth)
        report.lambdas.append(lam)
        report.valid_counts.append(count)
        d_pose += dp
        # through n = d / mean(d)
        dd = dn / m - np.sum(dn * d) / (m * m * d.size)
        d_inv += _upsample_adjoint(dd, shapes)
    report.total = float(sum(w + lam * s for w, s, lam in zip(report.warp, report.smooth, report.lambdas)))
    return GradientBundle(d_pose, d_inv, report.total, report)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> tuple[AdamState, dict]:
    """One bias-corrected Adam update over a dict of arrays."""
    if params.keys() != grads.keys():
        raise ShapeMismatch(f"parameter keys {sorted(params)} vs gradient keys {sorted(grads)}")
    step = state.step + 1
    m, v, out = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=float)
        g = np.asarray(grads[name], dtype=float)
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: parameter {p.shape} vs gradient {g.shape}")
        m_prev = state.m.get(name, np.zeros_like(p))
        v_prev = state.v.get(name, np.zeros_like(p))
        if m_prev.shape != p.shape:
            raise ShapeMismatch(f"{name}: moment {m_prev.shape} vs parameter {p.shape}")
        m[name] = state.beta1 * m_prev + (1.0 - state.beta1) * g
        v[name] = state.beta2 * v_prev + (1.0 - state.beta2) * g * g
        m_hat = m[name] / (1.0 - state.beta1**step)
        v_hat = v[name] / (1.0 - state.beta2**step)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=step, m=m, v=v), out


# ---------------------------------------------------------------------------
# direct optimization
# ---------------------------------------------------------------------------


@dataclass
class OptimizationResult:
    inv_depth: np.ndarray
    pose: Pose
    trace: list[LossReport]
    final: LossReport


def optimize_direct(target, source, init_inv_depth, init_pose: Pose, k: CameraIntrinsics, config: LossConfig,
                    iters: int, lr: float = ADAM_LR, optimize_pose: bool = True,
                    optimize_depth: bool = True) -> OptimizationResult:
    """Minimize the multi-scale loss over pose and inverse depth with Adam.

    The pose is updated on the left through the exponential map; the inverse
    depth is projected back onto ``[1e-3, 1e3]`` after every step. The trace
    holds the loss evaluated before each update.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    pose = init_pose
    d = np.clip(np.array(init_inv_depth, dtype=float), INV_DEPTH_MIN, INV_DEPTH_MAX)
    state = AdamState(lr=lr)
    trace = []
    for _ in range(iters):
        bundle = loss_and_gradients(target, source, d, pose, k, config)
        trace.append(bundle.report)
        params, grads = {}, {}
        if optimize_pose:
            params["pose"], grads["pose"] = np.zeros(6), bundle.d_pose
        if optimize_depth:
            params["inv_depth"], grads["inv_depth"] = d, bundle.d_inv_depth
        if not params:
            continue
        state, new = adam_step(state, params, grads)
        if optimize_pose:
            pose = pose.retract(new["pose"])
        if optimize_depth:
            d = np.clip(new["inv_depth"], INV_DEPTH_MIN, INV_DEPTH_MAX)
    final = loss_and_gradients(target, source, d, pose, k, config).report
    return OptimizationResult(d, pose, trace, final)


def write_trace(path: str | Path, trace: list[LossReport]) -> None:
    """CSV with columns ``iter,total,warp_0..warp_L,smooth_0..smooth_L``."""
    levels = len(trace[0].warp) if trace else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iter", "total"] + [f"warp_{i}" for i in range(levels)] + [f"smooth_{i}" for i in range(levels)])
        for i, rep in enumerate(trace):
            writer.writerow([i] + [repr(float(x)) for x in [rep.total, *rep.warp, *rep.smooth]])
