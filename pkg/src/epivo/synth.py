"""Analytic ground truth: textured planar scenes rendered from two views.

Every pixel is rendered by intersecting its ray with the scene planes in
closed form and evaluating a procedural texture at the 3-D hit point, so the
depth maps and correspondences carry no sampling error and both views are
photometrically consistent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, essential_from_pose, normalize, so3_exp
from .warp import rays


class InvalidScene(ValueError):
    pass


class InsufficientStaticArea(ValueError):
    pass


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Texture:
    """Band-limited intensity pattern in plane coordinates (meters).

    ``0.5 + sum(amp * sin(2 pi <freq, (a, b)> + phase))`` plus an optional
    step of height ``step`` across the line
    ``a cos(step_angle) + b sin(step_angle) = step_at``.
    """

    freqs: np.ndarray
    amps: np.ndarray
    phases: np.ndarray
    step: float = 0.0
    step_at: float = 0.0
    step_angle: float = 0.0

    def __call__(self, a, b) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        arg = 2.0 * np.pi * (a[..., None] * self.freqs[:, 0] + b[..., None] * self.freqs[:, 1]) + self.phases
        value = 0.5 + np.sum(self.amps * np.sin(arg), axis=-1)
        if self.step:
            side = a * np.cos(self.step_angle) + b * np.sin(self.step_angle) >= self.step_at
            value = value + np.where(side, 0.5 * self.step, -0.5 * self.step)
        return value


TEXTURE_KINDS = ("sines", "stripes", "edge")


def make_texture(kind: str, rng: np.random.Generator, max_freq: float = 0.8) -> Texture:
    """Procedural texture of the given kind.

    ``sines`` is 6 random sinusoids with frequency magnitudes in
    ``[0.3, 1] * max_freq`` cycles per meter. ``stripes`` is one dominant
    periodic stripe pattern with faint detail (the repeated-texture case).
    ``edge`` is a sharp oblique step over faint low-frequency sines, so
    resampling error is dominated by the discontinuity.
    """
    if kind not in TEXTURE_KINDS:
        raise InvalidScene(f"unknown texture {kind!r}; expected one of {TEXTURE_KINDS}")
    if kind == "stripes":
        period = 1.0 / max_freq
        freqs = np.array([[1.0 / period, 0.0], *_random_freqs(rng, 2, 0.15 * max_freq, 0.3 * max_freq)])
        amps = np.array([0.3, 0.03, 0.03])
        return Texture(freqs, amps, rng.uniform(0, 2 * np.pi, 3))
    freqs = _random_freqs(rng, 6, 0.3 * max_freq, max_freq)
    amps = rng.uniform(0.04, 0.07, 6)
    phases = rng.uniform(0, 2 * np.pi, 6)
    if kind == "edge":
        return Texture(0.5 * freqs, 0.5 * amps, phases, step=0.2,
                       step_at=float(rng.uniform(-0.3, 0.3)), step_angle=float(rng.uniform(0.2, 0.6)))
    return Texture(freqs, amps, phases)


def _random_freqs(rng, n, lo, hi):
    mag = rng.uniform(lo, hi, n)
    ang = rng.uniform(0, np.pi, n)
    return np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=-1)


def _plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    up = np.array([0.0, 1.0, 0.0]) if abs(normal[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(up, normal)
    u /= np.linalg.norm(u)
    return u, np.cross(normal, u)


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    """Points ``X`` (target frame) with ``normal . X = offset``."""

    normal: np.ndarray
    offset: float
    texture: Texture

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))

    def intersect(self, ray_dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the hit for rays through the origin; ``inf`` on a miss."""
        denom = ray_dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = self.offset / denom
        return np.where((np.abs(denom) > 1e-12) & (lam > 0), lam, np.inf)

    def shade(self, points: np.ndarray) -> np.ndarray:
        u, v = _plane_basis(self.normal)
        return self.texture(points @ u, points @ v)


@dataclass(frozen=True)
class Mover:
    """Fronto-parallel square patch moving rigidly between the two frames.

    ``motion`` maps the patch's target-time position to its source-time
    position, both expressed in the target camera frame.
    """

    center: np.ndarray
    half_size: float
    texture: Texture
    motion: Pose = field(default_factory=Pose.identity)

    def plane(self) -> Plane:
        return Plane(np.array([0.0, 0.0, 1.0]), float(self.center[2]), self.texture)

    def local(self, points: np.ndarray) -> np.ndarray:
        return points - np.asarray(self.center, dtype=float)

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = self.local(points)
        return (np.abs(d[..., 0]) <= self.half_size) & (np.abs(d[..., 1]) <= self.half_size)

    def shade(self, points: np.ndarray) -> np.ndarray:
        d = self.local(points)
        return self.texture(d[..., 0], d[..., 1])


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    intrinsics: CameraIntrinsics
    pose: Pose
    planes: tuple[Plane, ...]
    mover: Mover | None = None
    seed: int = 0

    def resized(self, width: int, height: int) -> "SceneSpec":
        """Same scene and field of view rendered at another resolution."""
        sx, sy = width / self.width, height / self.height
        k = self.intrinsics
        k2 = CameraIntrinsics(k.fx * sx, k.fy * sy, (k.cx + 0.5) * sx - 0.5, (k.cy + 0.5) * sy - 0.5)
        return replace(self, width=width, height=height, intrinsics=k2)


@dataclass(frozen=True)
class RenderedPair:
    spec: SceneSpec
    target: np.ndarray
    source: np.ndarray
    depth: np.ndarray
    inv_depth: np.ndarray
    correspondences: np.ndarray  # (H, W, 2) source pixel of every target pixel
    source_depth: np.ndarray
    essential: np.ndarray | None  # None for a pure rotation
    mover_mask: np.ndarray

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.spec.intrinsics

    @property
    def pose(self) -> Pose:
        return self.spec.pose

    def loss_pose(self) -> Pose:
        """Ground-truth pose at the scale of the unit-mean inverse depth.

        The losses normalize inverse depth to unit mean, which multiplies every
        depth by ``mean(inv_depth)``; the translation must follow.
        """
        return self.pose.with_translation(self.pose.translation * float(self.inv_depth.mean()))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _first_hit(spec: SceneSpec, dirs: np.ndarray, planes, mover_plane, mover_contains):
    """Nearest hit among static planes and the (optional) mover patch."""
    lam = np.full(dirs.shape[:-1], np.inf)
    which = np.full(dirs.shape[:-1], -1)
    for i, plane in enumerate(planes):
        li = plane.intersect(dirs)
        closer = li < lam
        lam = np.where(closer, li, lam)
        which = np.where(closer, i, which)
    if mover_plane is not None:
        lm = mover_plane.intersect(dirs)
        hit = np.isfinite(lm)
        pts = np.where(hit[..., None], lm[..., None] * dirs, 0.0)
        ok = hit & mover_contains(pts) & (lm < lam)
        lam = np.where(ok, lm, lam)
        which = np.where(ok, len(planes), which)
    return lam, which


def _static_shade(planes, which, points):
    out = np.zeros(points.shape[:-1])
    for i, plane in enumerate(planes):
        sel = which == i
        if sel.any():
            out[sel] = plane.shade(points[sel])
    return out


def surface_depth(spec: SceneSpec, target_norm: np.ndarray) -> np.ndarray:
    """Depth of the static surface seen through normalized target coordinates."""
    dirs = np.concatenate([target_norm, np.ones(target_norm.shape[:-1] + (1,))], axis=-1)
    lam = np.full(dirs.shape[:-1], np.inf)
    for plane in spec.planes:
        lam = np.minimum(lam, plane.intersect(dirs))
    return lam


def render_pair(spec: SceneSpec) -> RenderedPair:
    """Render target and source views of ``spec`` with exact depth and matches."""
    h, w, k, pose = spec.height, spec.width, spec.intrinsics, spec.pose
    dirs_t = rays(h, w, k)
    mover = spec.mover
    mplane = mover.plane() if mover else None

    lam, which = _first_hit(spec, dirs_t, spec.planes, mplane, mover.contains if mover else None)
    if not np.isfinite(lam).all():
        raise InvalidScene("some target rays miss every plane")
    X = lam[..., None] * dirs_t
    mover_mask = which == len(spec.planes)
    target = _static_shade(spec.planes, which, X)
    if mover is not None and mover_mask.any():
        target[mover_mask] = mover.shade(X[mover_mask])

    # every target point moved into the source frame
    Xs = pose.apply(X)
    if mover is not None:
        Xs[mover_mask] = (pose @ mover.motion).apply(X[mover_mask])
    z = Xs[..., 2]
    zs = np.where(z > 1e-9, z, 1.0)
    corr = np.stack([k.fx * Xs[..., 0] / zs + k.cx, k.fy * Xs[..., 1] / zs + k.cy], axis=-1)

    # source view: planes expressed in the source frame
    dirs_s = rays(h, w, k)
    inv = pose.inverse()
    src_planes = [
        Plane(pose.rotation @ p.normal, p.offset + (pose.rotation @ p.normal) @ pose.translation, p.texture)
        for p in spec.planes
    ]
    if mover is not None:
        mpose = pose @ mover.motion
        mnormal = mpose.rotation @ np.array([0.0, 0.0, 1.0])
        src_mplane = Plane(mnormal, float(mover.center[2]) + mnormal @ mpose.translation, mover.texture)
        minv = mpose.inverse()
        lam_s, which_s = _first_hit(spec, dirs_s, src_planes, src_mplane, lambda P: mover.contains(minv.apply(P)))
    else:
        lam_s, which_s = _first_hit(spec, dirs_s, src_planes, None, None)
    if not np.isfinite(lam_s).all():
        raise InvalidScene("some source rays miss every plane")
    Ps = lam_s[..., None] * dirs_s
    source = np.zeros((h, w))
    for i, plane in enumerate(spec.planes):
        sel = which_s == i
        if sel.any():
            source[sel] = plane.shade(inv.apply(Ps[sel]))
    if mover is not None:
        sel = which_s == len(spec.planes)
        if sel.any():
            source[sel] = mover.shade(minv.apply(Ps[sel]))

    return RenderedPair(
        spec=spec,
        target=target,
        source=source,
        depth=lam,
        inv_depth=1.0 / lam,
        correspondences=corr,
        source_depth=z,
        essential=essential_from_pose(pose) if np.linalg.norm(pose.translation) >= 1e-12 else None,
        mover_mask=mover_mask,
    )


def sample_correspondences(pair: RenderedPair, n: int, noise_sigma: float = 0.0,
                           outlier_frac: float = 0.0, seed: int = 0):
    """Draw normalized matches from the static part of the scene.

    Target positions are uniform over the image (sub-pixel), matched through
    the analytic geometry, and kept only when they land inside the source
    image in front of the camera and off the mover. Source coordinates get
    isotropic Gaussian noise of ``noise_sigma`` (normalized units); then
    ``floor(outlier_frac * n)`` of them are replaced by uniform draws.

    Returns:
        ``(target, source, inlier)`` with shapes (n, 2), (n, 2), (n,).
    """
    if n < 5:
        raise ValueError("need n >= 5")
    if not 0 <= outlier_frac < 1:
        raise ValueError("outlier_frac must be in [0, 1)")
    spec, k = pair.spec, pair.intrinsics
    rng = np.random.default_rng(seed)
    lo = normalize(np.array([0.0, 0.0]), k)
    hi = normalize(np.array([spec.width - 1.0, spec.height - 1.0]), k)

    target = np.zeros((0, 2))
    source = np.zeros((0, 2))
    for _ in range(50):
        cand = rng.uniform(lo, hi, size=(4 * n, 2))
        depth = surface_depth(spec, cand)
        X = depth[:, None] * np.c_[cand, np.ones(len(cand))]
        ok = np.isfinite(depth)
        if spec.mover is not None:
            # drop anything the mover hides in the target view
            lm = spec.mover.plane().intersect(np.c_[cand, np.ones(len(cand))])
            hitm = np.isfinite(lm) & (lm < depth)
            pts = np.where(hitm[:, None], lm[:, None] * np.c_[cand, np.ones(len(cand))], 0.0)
            ok &= ~(hitm & spec.mover.contains(pts))
        Xs = spec.pose.apply(np.where(ok[:, None], X, 0.0))
        ok &= Xs[:, 2] > 1e-6
        with np.errstate(divide="ignore", invalid="ignore"):
            s = Xs[:, :2] / Xs[:, 2:]
        ok &= np.all((s >= lo) & (s <= hi), axis=1)
        target = np.vstack([target, cand[ok]])
        source = np.vstack([source, s[ok]])
        if len(target) >= n:
            break
    if len(target) < n:
        raise InsufficientStaticArea(f"only {len(target)} static matches available, need {n}")
    target, source = target[:n], source[:n].copy()

    if noise_sigma > 0:
        source += rng.normal(0.0, noise_sigma, size=source.shape)
    inlier = np.ones(n, dtype=bool)
    n_out = int(np.floor(outlier_frac * n))
    if n_out:
        idx = rng.choice(n, n_out, replace=False)
        source[idx] = rng.uniform(lo, hi, size=(n_out, 2))
        inlier[idx] = False
    return target, source, inlier


# ---------------------------------------------------------------------------
# ready-made scenes
# ---------------------------------------------------------------------------


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    return CameraIntrinsics(float(width), float(width), (width - 1) / 2.0, (height - 1) / 2.0)


def plane_scene(size: int = 64, seed: int = 0, texture: str = "sines", pose: Pose | None = None,
                normal=(0.0, 0.2, 0.98), depth: float = 6.0, max_freq: float = 0.8) -> SceneSpec:
    """A single slanted textured plane seen by a forward-and-sideways moving camera."""
    rng = np.random.default_rng(seed)
    if pose is None:
        pose = Pose.exp([0.0, 0.03, 0.01, -0.4, 0.05, -0.3])
    plane = Plane(np.asarray(normal, dtype=float), depth, make_texture(texture, rng, max_freq))
    return SceneSpec(size, size, default_intrinsics(size, size), pose, (plane,), None, seed)


ODOMETRY_POSE = (0.0, 0.03, 0.01, -1.2, 0.15, -0.9)


def odometry_scene(size: int = 64, seed: int = 0, texture: str = "sines", max_freq: float = 0.5) -> SceneSpec:
    """Strongly slanted plane and a wide baseline, for pose recovery by direct optimization.

    The slant gives enough parallax to separate rotation from translation and
    the baseline keeps translation-direction errors small relative to the
    residual bias of the coarse pyramid levels.
    """
    return plane_scene(size, seed, texture, Pose.exp(ODOMETRY_POSE), normal=(0.3, 0.4, 0.87), max_freq=max_freq)


def perturb_pose(pose: Pose, rng: np.random.Generator, rotation_deg: float, translation_frac: float) -> Pose:
    """Rotate by exactly ``rotation_deg`` about a random axis and offset the
    translation by ``translation_frac * |t|`` in a random direction."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift /= np.linalg.norm(shift)
    rotation = so3_exp(axis * np.deg2rad(rotation_deg)) @ pose.rotation
    translation = pose.translation + shift * translation_frac * np.linalg.norm(pose.translation)
    return Pose(rotation, translation)


def mover_scene(size: int = 64, seed: int = 0, mover_shift=(0.0, 0.6, 0.0)) -> SceneSpec:
    """Static background plane plus a square patch with its own translation."""
    base = plane_scene(size, seed, normal=(0.0, 0.0, 1.0), depth=8.0)
    rng = np.random.default_rng(seed + 1000)
    center = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), 4.0])
    mover = Mover(center, 0.7, make_texture("sines", rng), Pose(np.eye(3), np.asarray(mover_shift, dtype=float)))
    return replace(base, mover=mover)


# ---------------------------------------------------------------------------
# scene text format
# ---------------------------------------------------------------------------

SCENE_KEYS = {
    "width", "height", "fx", "fy", "cx", "cy", "rotation", "translation", "seed", "plane",
    "mover_center", "mover_half_size", "mover_motion", "mover_texture", "max_freq",
}  # fmt: skip


def parse_scene(text: str) -> SceneSpec:
    """Parse ``key = value`` scene lines (``#`` starts a comment).

    Keys: ``width``, ``height`` (pixels), ``fx fy cx cy`` (default: focal
    length equal to the width, centered principal point), ``rotation``
    (axis-angle, 3 numbers), ``translation`` (3 numbers), ``seed``,
    ``max_freq`` (texture cycles per meter), repeated
    ``plane = nx ny nz offset texture`` and the optional mover keys
    ``mover_center = X Y Z``, ``mover_half_size``, ``mover_motion`` (6-vector
    tangent) and ``mover_texture``.
    """
    values: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidScene(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCENE_KEYS:
            raise InvalidScene(f"line {lineno}: unknown key {key!r}")
        values.setdefault(key, []).append(val)

    def one(key, default=None, cast=float):
        if key not in values:
            if default is None:
                raise InvalidScene(f"missing key {key!r}")
            return default
        return cast(values[key][-1])

    def vec(key, default):
        if key not in values:
            return np.asarray(default, dtype=float)
        return np.array([float(v) for v in values[key][-1].split()])

    width = one("width", cast=int)
    height = one("height", cast=int)
    seed = one("seed", 0, int)
    max_freq = one("max_freq", 0.8)
    k = CameraIntrinsics(one("fx", float(width)), one("fy", float(width)),
                         one("cx", (width - 1) / 2.0), one("cy", (height - 1) / 2.0))
    rot = vec("rotation", [0.0, 0.0, 0.0])
    trans = vec("translation", [0.0, 0.0, 0.0])
    pose = Pose(so3_exp(rot), trans)
    rng = np.random.default_rng(seed)
    planes = []
    for entry in values.get("plane", []):
        parts = entry.split()
        if len(parts) != 5:
            raise InvalidScene(f"plane needs 'nx ny nz offset texture', got {entry!r}")
        planes.append(Plane(np.array([float(p) for p in parts[:3]]), float(parts[3]),
                            make_texture(parts[4], rng, max_freq)))
    if not planes:
        raise InvalidScene("scene has no planes")
    mover = None
    if "mover_center" in values:
        mover = Mover(
            vec("mover_center", None),
            one("mover_half_size", 0.5),
            make_texture(values.get("mover_texture", ["sines"])[-1], rng, max_freq),
            Pose.exp(vec("mover_motion", [0.0] * 6)),
        )
    return SceneSpec(width, height, k, pose, tuple(planes), mover, seed)


def load_scene(path: str | Path) -> SceneSpec:
    return parse_scene(Path(path).read_text())
