"""Depth-image-based warping with bilinear resampling.

Images are numpy arrays of shape (H, W) or (H, W, C). Sampling positions are
continuous pixel coordinates ``(x, y)`` with pixel centers on integers.
"""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics, Pose

MIN_SOURCE_DEPTH = 1e-9
# projected coordinates this close to an integer are snapped onto it
SNAP_TOL = 1e-9


class DimensionMismatch(ValueError):
    pass


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of pixel coordinates ``(x, y)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([xs, ys], axis=-1)


def rays(height: int, width: int, k: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) homogeneous normalized coordinates ``K^-1 p`` of every pixel."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([(xs - k.cx) / k.fx, (ys - k.cy) / k.fy, np.ones_like(xs)], axis=-1)


def _snap(q: np.ndarray) -> np.ndarray:
    r = np.round(q)
    return np.where(np.abs(q - r) < SNAP_TOL, r, q)


def project_points(points_source: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Perspective projection of source-frame points; returns pixels and ``z``."""
    z = points_source[..., 2]
    zs = np.where(z > MIN_SOURCE_DEPTH, z, 1.0)
    u = k.fx * points_source[..., 0] / zs + k.cx
    v = k.fy * points_source[..., 1] / zs + k.cy
    return _snap(np.stack([u, v], axis=-1)), z


def project_pixel(p, depth, k: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Warp target pixels with known depth into the source image.

    Computes ``K (R D(p) K^-1 p + t)`` followed by the perspective division.
    Works on a single ``(x, y)`` or any ``(..., 2)`` batch with matching
    ``depth``. The returned source-frame depth is ``<= MIN_SOURCE_DEPTH``
    for points behind the source camera; their pixel coordinates are
    meaningless and callers must treat them as invalid.
    """
    p = np.asarray(p, dtype=float)
    depth = np.asarray(depth, dtype=float)
    ray = np.stack([(p[..., 0] - k.cx) / k.fx, (p[..., 1] - k.cy) / k.fy, np.ones(p.shape[:-1])], axis=-1)
    X = pose.apply(depth[..., None] * ray)
    return project_points(X, k)


def _cells(img: np.ndarray, q: np.ndarray):
    h, w = img.shape[:2]
    x, y = q[..., 0], q[..., 1]
    inb = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    # right-limit cell; the last row/column reuses the cell before it
    x0 = np.clip(np.floor(np.where(inb, x, 0.0)), 0, max(w - 2, 0)).astype(int)
    y0 = np.clip(np.floor(np.where(inb, y, 0.0)), 0, max(h - 2, 0)).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = np.where(inb, x - x0, 0.0)
    ay = np.where(inb, y - y0, 0.0)
    return inb, x0, y0, x1, y1, ax, ay


def bilinear_sample(img, q) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``img`` at continuous positions ``q`` of shape (..., 2).

    Returns the interpolated values (zero outside the image) and the
    in-bounds flags; the support is ``[0, W-1] x [0, H-1]``.
    """
    img = np.asarray(img, dtype=float)
    q = np.asarray(q, dtype=float)
    value, _, _, inb = bilinear_sample_grad(img, q)
    return value, inb


def bilinear_sample_grad(img: np.ndarray, q: np.ndarray):
    """Like :func:`bilinear_sample` but also returns ``d value / dx`` and ``d value / dy``.

    Derivatives are those of the cell the point falls in, so at integer
    coordinates they are right limits.
    """
    inb, x0, y0, x1, y1, ax, ay = _cells(img, q)
    if img.ndim == 3:
        ax, ay, m = ax[..., None], ay[..., None], inb[..., None]
    else:
        m = inb
    i00 = img[y0, x0]
    i01 = img[y0, x1]
    i10 = img[y1, x0]
    i11 = img[y1, x1]
    # product weights keep integer positions exact, including the last column
    top = (1.0 - ax) * i00 + ax * i01
    bottom = (1.0 - ax) * i10 + ax * i11
    value = (1.0 - ay) * top + ay * bottom
    dx = (1.0 - ay) * (i01 - i00) + ay * (i11 - i10)
    dy = bottom - top
    zero = np.zeros_like(value)
    return np.where(m, value, zero), np.where(m, dx, zero), np.where(m, dy, zero), inb


def warp_image(src, target_depth, k: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Synthesize the source view at every target pixel.

    Returns the warped image and a validity mask that is false where the
    projection falls outside the source image or behind its camera.
    """
    src = np.asarray(src, dtype=float)
    depth = np.asarray(target_depth, dtype=float)
    if src.shape[:2] != depth.shape:
        raise DimensionMismatch(f"source image {src.shape[:2]} vs depth {depth.shape}")
    h, w = depth.shape
    X = pose.apply(depth[..., None] * rays(h, w, k))
    q, z = project_points(X, k)
    value, inb = bilinear_sample(src, q)
    mask = inb & (z > MIN_SOURCE_DEPTH)
    value[~mask] = 0.0
    return value, mask
