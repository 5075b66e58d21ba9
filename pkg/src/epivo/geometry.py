"""Camera model, rigid transforms and essential-matrix algebra.

Conventions used throughout the package:

* pixel coordinates are ``(x, y)`` with ``x`` the column and pixel centers at
  integer positions;
* a :class:`Pose` maps target-frame points to the source frame,
  ``X_s = R @ X_t + t``;
* essential matrices map *target* normalized coordinates to epipolar lines in
  the *source* view, so ``q_s^T E q_t = 0`` for a correct match.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


class ZeroTranslation(GeometryError):
    """Raised when an operation needs a translation direction but ``t = 0``."""


# ---------------------------------------------------------------------------
# Camera intrinsics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        # closed form of the upper-triangular inverse
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics for an image box-downsampled ``level`` times by 2.

        Focal lengths are divided by ``2**level``; the principal point is
        shifted so pixel centers stay at integer coordinates.
        """
        s = 2.0**level
        return CameraIntrinsics(
            self.fx / s,
            self.fy / s,
            (self.cx + 0.5) / s - 0.5,
            (self.cy + 0.5) / s - 0.5,
        )

    @classmethod
    def load(cls, path: str | Path) -> "CameraIntrinsics":
        """Read a one-line ``fx fy cx cy`` text file."""
        values = Path(path).read_text().split()
        if len(values) != 4:
            raise GeometryError(f"{path}: expected 4 numbers 'fx fy cx cy', got {len(values)}")
        return cls(*(float(v) for v in values))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r}\n")


def normalize(pixels, k: CameraIntrinsics) -> np.ndarray:
    """Map pixel coordinates ``(..., 2)`` to normalized coordinates ``K^-1 p``."""
    p = np.asarray(pixels, dtype=float)
    return np.stack([(p[..., 0] - k.cx) / k.fx, (p[..., 1] - k.cy) / k.fy], axis=-1)


def denormalize(coords, k: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`normalize`."""
    q = np.asarray(coords, dtype=float)
    return np.stack([q[..., 0] * k.fx + k.cx, q[..., 1] * k.fy + k.cy], axis=-1)


def homogeneous(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


# ---------------------------------------------------------------------------
# SO(3) / SE(3)
# ---------------------------------------------------------------------------


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-8:
        # second-order Taylor expansion
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1.0 - np.cos(theta)) / theta**2 * W @ W


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * vee
    if np.pi - theta < 1e-3:
        return _so3_log_near_pi(R)
    return theta / (2.0 * np.sin(theta)) * vee


def _so3_log_near_pi(R: np.ndarray) -> np.ndarray:
    # quaternion branch; sin(theta) is too small for the direct formula
    q = _rotation_to_quaternion(R)
    w, xyz = q[0], q[1:]
    n = np.linalg.norm(xyz)
    theta = 2.0 * np.arctan2(n, w)
    if theta > np.pi:
        theta -= 2.0 * np.pi
    return theta * xyz / n


def _rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, returns ``(w, x, y, z)`` with ``w >= 0``."""
    tr = np.trace(R)
    diag = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(diag))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return q if q[0] >= 0 else -q


def so3_left_jacobian(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * W @ W
    )


def so3_left_jacobian_inverse(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * W + coef * W @ W


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    return float(np.arccos(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)))


@dataclass(frozen=True)
class Pose:
    """Rigid transform from the target frame to the source frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def exp(cls, xi) -> "Pose":
        """SE(3) exponential of a tangent ``(omega, v)``."""
        xi = np.asarray(xi, dtype=float)
        omega, v = xi[:3], xi[3:]
        return cls(so3_exp(omega), so3_left_jacobian(omega) @ v)

    def log(self) -> np.ndarray:
        omega = so3_log(self.rotation)
        return np.concatenate([omega, so3_left_jacobian_inverse(omega) @ self.translation])

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        """The 3x4 matrix ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def retract(self, delta) -> "Pose":
        """Left-multiplicative update ``exp(delta) @ self``."""
        return Pose.exp(delta) @ self

    def with_translation(self, t) -> "Pose":
        return Pose(self.rotation, t)


def load_poses(path: str | Path) -> list[Pose]:
    """Read KITTI odometry style poses: twelve numbers per line, row-major 3x4."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 12:
            raise GeometryError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        poses.append(Pose.from_matrix(np.array([float(v) for v in vals]).reshape(3, 4)))
    return poses


def format_pose(pose: Pose) -> str:
    return " ".join(f"{v:.12e}" for v in pose.matrix.ravel())


def save_poses(path: str | Path, poses) -> None:
    Path(path).write_text("".join(format_pose(p) + "\n" for p in poses))


# ---------------------------------------------------------------------------
# Essential matrix
# ---------------------------------------------------------------------------


def unit_frobenius(E) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    n = np.linalg.norm(E)
    if n == 0:
        raise GeometryError("essential matrix is zero")
    return E / n


def essential_from_pose(pose: Pose) -> np.ndarray:
    """``E = [t]_x R`` scaled to unit Frobenius norm."""
    if np.linalg.norm(pose.translation) < 1e-12:
        raise ZeroTranslation("essential matrix is undefined for a pure rotation")
    return unit_frobenius(skew(pose.translation) @ pose.rotation)


def epipolar_line(E, target) -> np.ndarray:
    """Line coefficients ``E @ q_t`` in the source view, shape ``(..., 3)``."""
    return homogeneous(target) @ np.asarray(E, dtype=float).T


def epipolar_residual(target, source, E) -> np.ndarray:
    """Absolute algebraic epipolar error ``|q_s^T E q_t|``.

    ``target`` and ``source`` are normalized coordinates of shape ``(..., 2)``.
    ``E`` is renormalized to unit Frobenius norm so the value does not depend
    on the scale it was handed in at.
    """
    E = unit_frobenius(E)
    lines = epipolar_line(E, target)
    return np.abs(np.sum(homogeneous(source) * lines, axis=-1))


def epipole(E) -> np.ndarray:
    """Right null vector of ``E`` (the target-view epipole), dehomogenized when finite."""
    _, _, Vt = np.linalg.svd(np.asarray(E, dtype=float))
    e = Vt[-1]
    return e / e[2] if abs(e[2]) > 1e-12 else e


def is_essential(E, tol: float = 1e-9) -> bool:
    E = unit_frobenius(E)
    s = np.linalg.svd(E, compute_uv=False)
    cubic = 2.0 * E @ E.T @ E - np.trace(E @ E.T) * E
    return bool(abs(np.linalg.det(E)) < tol and abs(s[0] - s[1]) < tol and s[2] < tol and np.abs(cubic).max() < 10 * tol)
