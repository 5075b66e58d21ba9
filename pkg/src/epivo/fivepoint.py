"""Five-point relative pose: minimal solver, RANSAC and pose decomposition.

The minimal solver follows Nister's formulation. The essential matrix is
written as ``E = x*X + y*Y + z*Z + W`` over the null space of the 5x9
epipolar design matrix; the nine trace constraints and the determinant give
ten cubics in ``(x, y, z)`` which are Gauss-Jordan reduced, collapsed to a
degree-10 polynomial in ``z`` and solved with a companion matrix. Each real
root is then polished by Gauss-Newton on the original ten cubics, which
recovers accuracy the elimination loses on ill-conditioned samples.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P

from .geometry import GeometryError, Pose, homogeneous


class FivePointError(GeometryError):
    pass


class DegenerateConfiguration(FivePointError):
    pass


class InsufficientCorrespondences(FivePointError):
    def __init__(self, n: int):
        super().__init__(f"insufficient correspondences: need at least 5, got {n}")


class NoModelFound(FivePointError):
    pass


class AmbiguousCheirality(FivePointError):
    pass


# ---------------------------------------------------------------------------
# monomial bookkeeping
# ---------------------------------------------------------------------------

# exponents of (x, y, z); the linear basis is [x, y, z, 1]
_LINEAR = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_QUADRATIC = [(2, 0, 0), (1, 1, 0), (1, 0, 1), (1, 0, 0), (0, 2, 0), (0, 1, 1), (0, 1, 0), (0, 0, 2), (0, 0, 1), (0, 0, 0)]
# Nister's ordering: the first ten columns are eliminated by Gauss-Jordan
_CUBIC = [
    (3, 0, 0), (0, 3, 0), (2, 1, 0), (1, 2, 0), (2, 0, 1), (2, 0, 0), (0, 2, 1), (0, 2, 0), (1, 1, 1), (1, 1, 0),
    (1, 0, 2), (1, 0, 1), (1, 0, 0), (0, 1, 2), (0, 1, 1), (0, 1, 0), (0, 0, 3), (0, 0, 2), (0, 0, 1), (0, 0, 0),
]  # fmt: skip


# Fixed rotation of the null-space basis. The parameterization pins the
# coefficient of W to 1, so a solution with no W component cannot be
# represented; exact data with special structure (e.g. pure sideways motion)
# hits that case for the raw SVD basis.
_MIX = np.linalg.qr(np.random.default_rng(20240531).normal(size=(4, 4)))[0]
REFINE_STEPS = 3


def _cubic_residuals(E: np.ndarray) -> np.ndarray:
    EEt = E @ E.T
    return np.concatenate([[np.linalg.det(E)], (2.0 * EEt @ E - np.trace(EEt) * E).ravel()])


def _cubic_jacobian(E: np.ndarray, basis: np.ndarray) -> np.ndarray:
    EEt = E @ E.T
    tr = np.trace(EEt)
    # cofactor matrix, d det(E) / dE
    cof = np.array([np.cross(E[1], E[2]), np.cross(E[2], E[0]), np.cross(E[0], E[1])])
    cols = []
    for D in basis[:3]:
        d_det = np.sum(cof * D)
        d_trace = 2.0 * (D @ E.T @ E + E @ D.T @ E + EEt @ D) - 2.0 * np.sum(D * E) * E - tr * D
        cols.append(np.concatenate([[d_det], d_trace.ravel()]))
    return np.array(cols).T


def _refine(basis: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    """Gauss-Newton on the ten cubic constraints, keeping only improving steps."""
    def build(v):
        return v[0] * basis[0] + v[1] * basis[1] + v[2] * basis[2] + basis[3]

    best = np.asarray(xyz, dtype=float)
    best_r = np.linalg.norm(_cubic_residuals(build(best)))
    for _ in range(REFINE_STEPS):
        E = build(best)
        J = _cubic_jacobian(E, basis)
        step = np.linalg.lstsq(J, -_cubic_residuals(E), rcond=None)[0]
        cand = best + step
        r = np.linalg.norm(_cubic_residuals(build(cand)))
        if not r < best_r:
            break
        best, best_r = cand, r
    return best


def _product_table(left, right, out) -> np.ndarray:
    index = {m: i for i, m in enumerate(out)}
    table = np.zeros((len(left) * len(right), len(out)))
    for (i, a), (j, b) in itertools.product(enumerate(left), enumerate(right)):
        table[i * len(right) + j, index[tuple(p + q for p, q in zip(a, b))]] = 1.0
    return table


_LIN_LIN = _product_table(_LINEAR, _LINEAR, _QUADRATIC)  # (16, 10)
_QUAD_LIN = _product_table(_QUADRATIC, _LINEAR, _CUBIC)  # (40, 20)


def _mul_lin_lin(a, b):
    return (a[..., :, None] * b[..., None, :]).reshape(a.shape[:-1] + (16,)) @ _LIN_LIN


def _mul_quad_lin(q, a):
    return (q[..., :, None] * a[..., None, :]).reshape(q.shape[:-1] + (40,)) @ _QUAD_LIN


def _constraint_matrix(basis: np.ndarray) -> np.ndarray:
    """The 10x20 cubic constraint matrix for ``E = x*X + y*Y + z*Z + W``.

    ``basis`` has shape (4, 3, 3) holding X, Y, Z, W.
    """
    E = np.moveaxis(basis, 0, -1)  # (3, 3, 4) linear polynomial per entry
    EEt = np.zeros((3, 3, 10))
    for i in range(3):
        for j in range(3):
            EEt[i, j] = _mul_lin_lin(E[i], E[j]).sum(axis=0)
    trace = EEt[0, 0] + EEt[1, 1] + EEt[2, 2]
    rows = []
    # 2 E E^T E - tr(E E^T) E = 0
    for i in range(3):
        for j in range(3):
            eete = sum(_mul_quad_lin(EEt[i, k], E[k, j]) for k in range(3))
            rows.append(2.0 * eete - _mul_quad_lin(trace, E[i, j]))
    # det(E) via the first row and the cross product of the other two
    cross = [
        _mul_lin_lin(E[1, 1], E[2, 2]) - _mul_lin_lin(E[1, 2], E[2, 1]),
        _mul_lin_lin(E[1, 2], E[2, 0]) - _mul_lin_lin(E[1, 0], E[2, 2]),
        _mul_lin_lin(E[1, 0], E[2, 1]) - _mul_lin_lin(E[1, 1], E[2, 0]),
    ]
    rows.append(sum(_mul_quad_lin(cross[j], E[0, j]) for j in range(3)))
    return np.array(rows)


def gauss_jordan(A: np.ndarray, ncols: int) -> np.ndarray:
    """Reduce the leading ``ncols`` columns of ``A`` to the identity (partial pivoting)."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    scale = np.abs(A).max()
    for c in range(ncols):
        p = c + int(np.argmax(np.abs(A[c:, c])))
        if abs(A[p, c]) <= 1e-13 * scale:
            raise DegenerateConfiguration("constraint matrix is singular")
        if p != c:
            A[[c, p]] = A[[p, c]]
        A[c] /= A[c, c]
        others = np.arange(n) != c
        A[others] -= np.outer(A[others, c], A[c])
    return A


def companion_roots(coeffs) -> np.ndarray:
    """Roots of ``sum(coeffs[i] * z**i)`` as companion-matrix eigenvalues."""
    c = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
    # drop leading coefficients that are negligible against the rest
    while c.size > 1 and abs(c[-1]) <= 1e-14 * np.abs(c).max():
        c = c[:-1]
    n = c.size - 1
    if n < 1:
        return np.zeros(0, dtype=complex)
    C = np.zeros((n, n))
    C[1:, :-1] = np.eye(n - 1)
    C[:, -1] = -c[:-1] / c[-1]
    return np.linalg.eigvals(C)


def real_roots(coeffs, tol: float = 1e-8, polish: int = 2) -> np.ndarray:
    roots = companion_roots(coeffs)
    keep = np.abs(roots.imag) < tol * np.maximum(1.0, np.abs(roots.real))
    z = np.sort(roots[keep].real)
    deriv = P.polyder(coeffs)
    for _ in range(polish):
        d = P.polyval(z, deriv)
        step = np.divide(P.polyval(z, coeffs), d, out=np.zeros_like(z), where=d != 0)
        # only accept Newton steps that stay local to the eigenvalue estimate
        z = np.where(np.abs(step) < 1e-3 * np.maximum(1.0, np.abs(z)), z - step, z)
    return z


# ---------------------------------------------------------------------------
# minimal solver
# ---------------------------------------------------------------------------


def design_matrix(target, source) -> np.ndarray:
    """Rows ``kron(q_s, q_t)`` so that ``A @ E.ravel() = q_s^T E q_t``."""
    t = homogeneous(target)
    s = homogeneous(source)
    return (s[:, :, None] * t[:, None, :]).reshape(len(t), 9)


def five_point(target, source, degeneracy_ratio: float = 1e-6) -> list[np.ndarray]:
    """All essential matrices consistent with five normalized correspondences.

    Args:
        target: (5, 2) normalized coordinates in the target view.
        source: (5, 2) matching normalized coordinates in the source view.
        degeneracy_ratio: smallest accepted ratio between the fifth and fourth
            singular values of the design matrix.

    Returns:
        Up to ten unit-Frobenius essential matrices (possibly none).

    Raises:
        DegenerateConfiguration: the null space of the design matrix is larger
            than four-dimensional, or the polynomial system collapses.
    """
    target = np.asarray(target, dtype=float)
    source = np.asarray(source, dtype=float)
    if target.shape != (5, 2) or source.shape != (5, 2):
        raise ValueError("five_point needs exactly five (x, y) pairs per view")

    A = design_matrix(target, source)
    _, sv, Vt = np.linalg.svd(A)
    if sv[4] < degeneracy_ratio * sv[3]:
        raise DegenerateConfiguration("design matrix has a null space larger than four")
    basis = np.tensordot(_MIX, Vt[5:], axes=1).reshape(4, 3, 3)

    M = gauss_jordan(_constraint_matrix(basis), 10)
    C = M[:, 10:]  # trailing: xz^2 xz x  yz^2 yz y  z^3 z^2 z 1

    def row_polys(r):
        # row r as (x-coef, y-coef, 1-coef), each ascending in z
        c = C[r]
        return [c[2::-1], c[5:2:-1], c[9:5:-1]]

    B = []
    for lead, lower in ((4, 5), (6, 7), (8, 9)):
        # <x^2 z> - z * <x^2> (likewise for y^2 and xy) eliminates the leading term
        B.append([P.polysub(a, P.polymulx(b)) for a, b in zip(row_polys(lead), row_polys(lower))])

    det = P.polyadd(
        P.polyadd(
            P.polymul(B[0][0], P.polysub(P.polymul(B[1][1], B[2][2]), P.polymul(B[1][2], B[2][1]))),
            P.polymul(B[0][1], P.polysub(P.polymul(B[1][2], B[2][0]), P.polymul(B[1][0], B[2][2]))),
        ),
        P.polymul(B[0][2], P.polysub(P.polymul(B[1][0], B[2][1]), P.polymul(B[1][1], B[2][0]))),
    )
    ref = max(np.abs(b).max() for row in B for b in row) ** 3
    if np.abs(det).max() <= 1e-12 * ref:
        raise DegenerateConfiguration("degree-10 polynomial vanishes identically")

    candidates = []
    for z in real_roots(det):
        Bz = np.array([[P.polyval(z, b) for b in row] for row in B])
        _, _, vt = np.linalg.svd(Bz)
        v = vt[-1]
        if abs(v[2]) < 1e-12 * np.abs(v).max():
            continue
        x, y, zz = _refine(basis, np.array([v[0] / v[2], v[1] / v[2], z]))
        E = x * basis[0] + y * basis[1] + zz * basis[2] + basis[3]
        E /= np.linalg.norm(E)
        if np.abs(A @ E.ravel()).max() < 1e-6:
            candidates.append(E)
    return candidates


# ---------------------------------------------------------------------------
# scoring and RANSAC
# ---------------------------------------------------------------------------


def sampson_error(E, target, source) -> np.ndarray:
    """First-order geometric error of each correspondence under ``E``.

    Returns ``inf`` where both points sit at their epipoles.
    """
    E = np.asarray(E, dtype=float)
    E = E / np.linalg.norm(E)
    t = homogeneous(target)
    s = homogeneous(source)
    Et = t @ E.T
    Ets = s @ E
    num = np.sum(s * Et, axis=-1) ** 2
    den = Et[..., 0] ** 2 + Et[..., 1] ** 2 + Ets[..., 0] ** 2 + Ets[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den < 1e-18, np.inf, num / np.where(den < 1e-18, 1.0, den))


@dataclass(frozen=True)
class RansacResult:
    best: np.ndarray
    inlier_mask: np.ndarray
    inlier_count: int
    iterations_run: int


def ransac_essential(
    target,
    source,
    threshold: float = 1e-6,
    max_iters: int = 1000,
    seed: int = 0,
    adaptive: bool = False,
    confidence: float = 0.999,
) -> RansacResult:
    """Robust essential matrix from putative matches.

    Each iteration draws its 5-tuple from a generator seeded by
    ``(seed, iteration)``, so the result does not depend on evaluation
    order. With ``adaptive=False`` exactly ``max_iters`` samples are scored.
    Ties in inlier count go to the lower total inlier Sampson error.
    """
    target = np.asarray(target, dtype=float).reshape(-1, 2)
    source = np.asarray(source, dtype=float).reshape(-1, 2)
    n = len(target)
    if n < 5:
        raise InsufficientCorrespondences(n)
    if threshold <= 0:
        raise ValueError("threshold must be positive")

    best_E, best_mask, best_key = None, None, None
    iters = max_iters
    it = 0
    while it < iters:
        rng = np.random.default_rng((seed, it))
        idx = rng.choice(n, 5, replace=False)
        it += 1
        try:
            models = five_point(target[idx], source[idx])
        except DegenerateConfiguration:
            continue
        for E in models:
            err = sampson_error(E, target, source)
            mask = err < threshold
            count = int(mask.sum())
            key = (count, -float(err[mask].sum()))
            if best_key is None or key > best_key:
                best_E, best_mask, best_key = E, mask, key
        if adaptive and best_key is not None and best_key[0] > 0:
            w = best_key[0] / n
            needed = np.log(1 - confidence) / np.log(max(1e-12, 1 - w**5)) if w < 1 else 0
            iters = min(iters, max(it, int(np.ceil(needed))))

    if best_E is None or best_key[0] < 5:
        raise NoModelFound("no sampled minimal set produced a model with five inliers")
    return RansacResult(best_E, best_mask, best_key[0], it)


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PoseHypothesis:
    pose: Pose
    cheirality_votes: int


def pose_candidates(E) -> list[Pose]:
    """The four ``(R, t)`` factorizations of ``E`` with unit-norm ``t``."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=float))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    return [Pose(R1, t), Pose(R1, -t), Pose(R2, t), Pose(R2, -t)]


def triangulate_midpoint(pose: Pose, target, source) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint triangulation; returns target-frame points and source depths.

    Rays that are (nearly) parallel give NaN.
    """
    a = homogeneous(target)
    R, t = pose.rotation, pose.translation
    c = -R.T @ t
    b = homogeneous(source) @ R  # rows are R^T q_s
    aa = np.sum(a * a, -1)
    bb = np.sum(b * b, -1)
    ab = np.sum(a * b, -1)
    ac = a @ c
    bc = b @ c
    det = aa * bb - ab * ab
    ok = det > 1e-12 * aa * bb
    det = np.where(ok, det, np.nan)
    lam = (ac * bb - ab * bc) / det
    mu = (ab * ac - aa * bc) / det
    X = 0.5 * (lam[:, None] * a + c + mu[:, None] * b)
    z_source = (X @ R.T + t)[:, 2]
    return X, z_source


def decompose_essential(E, target, source) -> PoseHypothesis:
    """Pick the factorization of ``E`` that puts most points in front of both cameras."""
    target = np.asarray(target, dtype=float).reshape(-1, 2)
    source = np.asarray(source, dtype=float).reshape(-1, 2)
    if len(target) < 1:
        raise ValueError("need at least one correspondence")
    scored = []
    for pose in pose_candidates(E):
        X, zs = triangulate_midpoint(pose, target, source)
        with np.errstate(invalid="ignore"):
            votes = int(np.sum((X[:, 2] > 0) & (zs > 0)))
        scored.append((votes, pose))
    ranked = sorted(scored, key=lambda s: -s[0])
    if ranked[0][0] == ranked[1][0]:
        raise AmbiguousCheirality(f"two factorizations tie with {ranked[0][0]} votes")
    return PoseHypothesis(ranked[0][1], ranked[0][0])
