"""Photometric, epipolar-weighted, edge-aware smoothness and multi-scale losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, homogeneous, normalize, unit_frobenius
from .warp import DimensionMismatch, MIN_SOURCE_DEPTH, pixel_grid, project_pixel, warp_image

INV_DEPTH_MIN = 1e-3
INV_DEPTH_MAX = 1e3


class DegenerateDepth(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    num_scales: int = 4
    lambda_smooth_base: float = 0.2
    use_epipolar_weight: bool = False
    epipolar_E: np.ndarray | None = None
    stop_grad_weight: bool = False

    def __post_init__(self):
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        if self.lambda_smooth_base < 0:
            raise ValueError("lambda_smooth_base must be >= 0")
        if self.use_epipolar_weight:
            if self.epipolar_E is None:
                raise ValueError("epipolar weighting needs an essential matrix")
            object.__setattr__(self, "epipolar_E", unit_frobenius(self.epipolar_E))

    def lambda_smooth(self, level: int) -> float:
        return self.lambda_smooth_base / 2**level


@dataclass
class LossReport:
    warp: list[float] = field(default_factory=list)
    smooth: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    valid_counts: list[int] = field(default_factory=list)
    total: float = 0.0

    @property
    def empty_scales(self) -> list[int]:
        """Scales where no pixel was valid (their warp term is 0)."""
        return [i for i, n in enumerate(self.valid_counts) if n == 0]


def _check_same(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape[:2] != b.shape[:2]:
        raise DimensionMismatch(f"{what}: {a.shape} vs {b.shape}")


def _abs_diff(target, warped) -> np.ndarray:
    d = np.abs(np.asarray(target, dtype=float) - np.asarray(warped, dtype=float))
    return d.mean(axis=-1) if d.ndim == 3 else d


def photometric_loss(target, warped, mask) -> float:
    """Mean absolute difference over valid pixels (and channels).

    Returns 0 with a ``RuntimeWarning`` when no pixel is valid.
    """
    return weighted_photometric_loss(target, warped, mask, None)


def weighted_photometric_loss(target, warped, mask, weights) -> float:
    """Mean over valid pixels of ``weights * |target - warped|``."""
    target = np.asarray(target, dtype=float)
    warped = np.asarray(warped, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    _check_same(target, warped, "photometric loss")
    _check_same(target, mask, "photometric mask")
    if target.shape != warped.shape:
        raise DimensionMismatch(f"photometric loss: {target.shape} vs {warped.shape}")
    n = int(mask.sum())
    if n == 0:
        warnings.warn("photometric loss over an empty mask", RuntimeWarning, stacklevel=2)
        return 0.0
    err = _abs_diff(target, warped)
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        _check_same(target, weights, "photometric weights")
        err = err * weights
    return float(err[mask].sum() / n)


def epipolar_weights_from_matches(target_px, source_px, k: CameraIntrinsics, E) -> np.ndarray:
    """``exp(|q_s^T E q_t|)`` for pixel matches given in pixel coordinates."""
    E = unit_frobenius(E)
    qt = homogeneous(normalize(target_px, k))
    qs = homogeneous(normalize(source_px, k))
    return np.exp(np.abs(np.sum(qs * (qt @ E.T), axis=-1)))


def epipolar_weight_map(depth, k: CameraIntrinsics, pose: Pose, E) -> np.ndarray:
    """Per-pixel epipolar weight of the warp induced by ``depth`` and ``pose``.

    Every target pixel is projected into the source view with the current
    depth and pose, and the residual of that match against the fixed ``E``
    is exponentiated. Pixels that land behind the source camera get weight 1.
    """
    depth = np.asarray(depth, dtype=float)
    grid = pixel_grid(*depth.shape)
    q, z = project_pixel(grid, depth, k, pose)
    w = epipolar_weights_from_matches(grid, q, k, E)
    return np.where(z > MIN_SOURCE_DEPTH, w, 1.0)


def _image_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    return image.mean(axis=-1) if image.ndim == 3 else image


def smoothness_loss(inv_depth, image) -> float:
    """Edge-aware first-order smoothness of the inverse depth.

    Forward differences; the last column (row) has no x (y) term. The mean
    runs over all pixels.
    """
    d = np.asarray(inv_depth, dtype=float)
    img = _image_gray(image)
    _check_same(d, img, "smoothness")
    dx = np.abs(np.diff(d, axis=1)) * np.exp(-np.abs(np.diff(img, axis=1)))
    dy = np.abs(np.diff(d, axis=0)) * np.exp(-np.abs(np.diff(img, axis=0)))
    return float((dx.sum() + dy.sum()) / d.size)


def normalize_inverse_depth(inv_depth) -> np.ndarray:
    d = np.asarray(inv_depth, dtype=float)
    m = d.mean()
    if not m > 1e-12:
        raise DegenerateDepth(f"inverse depth mean {m} is not positive")
    return d / m


def downsample(field_, level: int) -> np.ndarray:
    """Apply ``level`` rounds of 2x2 box averaging (odd trailing rows/columns are dropped)."""
    a = np.asarray(field_, dtype=float)
    for _ in range(level):
        h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
        a = a[:h, :w]
        a = 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])
    return a


def depth_from_inverse(inv_depth) -> np.ndarray:
    return 1.0 / np.clip(inv_depth, INV_DEPTH_MIN, INV_DEPTH_MAX)


def total_loss(target, source, inv_depth, pose: Pose, k: CameraIntrinsics, config: LossConfig,
               pixel_masks=None, fixed_weights=None) -> LossReport:
    """Multi-scale loss: sum over scales of warp + lambda_smooth(l) * smoothness.

    At scale ``l`` the images and the inverse depth are box-downsampled ``l``
    times, the inverse depth is rescaled to unit mean and the intrinsics are
    scaled to match. ``pixel_masks`` optionally restricts, per scale, which
    target pixels may enter the warp term. ``fixed_weights`` replaces the
    epipolar weight maps with given per-scale arrays.
    """
    target = np.asarray(target, dtype=float)
    source = np.asarray(source, dtype=float)
    inv_depth = np.asarray(inv_depth, dtype=float)
    _check_same(target, source, "target/source")
    _check_same(target, inv_depth, "target/inverse depth")

    report = LossReport()
    for level in range(config.num_scales):
        tgt = downsample(target, level)
        src = downsample(source, level)
        n = normalize_inverse_depth(downsample(inv_depth, level))
        depth = depth_from_inverse(n)
        kl = k.scaled(level)
        warped, mask = warp_image(src, depth, kl, pose)
        if pixel_masks is not None:
            mask = mask & pixel_masks[level]
        if fixed_weights is not None:
            weights = fixed_weights[level]
        elif config.use_epipolar_weight:
            weights = epipolar_weight_map(depth, kl, pose, config.epipolar_E)
        else:
            weights = None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            lw = weighted_photometric_loss(tgt, warped, mask, weights)
        ls = smoothness_loss(n, tgt)
        lam = config.lambda_smooth(level)
        report.warp.append(lw)
        report.smooth.append(ls)
        report.lambdas.append(lam)
        report.valid_counts.append(int(mask.sum()))
    report.total = float(sum(w + lam * s for w, s, lam in zip(report.warp, report.smooth, report.lambdas)))
    return report
