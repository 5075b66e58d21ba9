"""Depth error/accuracy metrics with median scaling, scale-aligned ATE and ATDE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, ZeroTranslation

MIN_DEPTH = 1e-3
CAPS = (50.0, 80.0)


class EmptyMask(ValueError):
    pass


class DegenerateScale(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    FIELDS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)


@dataclass(frozen=True)
class PoseMetrics:
    ate_mean: float
    ate_std: float
    atde_mean: float
    atde_std: float


def depth_metrics(pred, gt, mask=None, cap: float = 80.0) -> DepthMetrics:
    """Standard depth errors over ``mask`` after median scaling.

    The prediction is multiplied by ``median(gt) / median(pred)`` over the
    masked pixels, then both are clamped to ``[1e-3, cap]``.
    """
    if not cap > 0:
        raise ValueError("cap must be positive")
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    mask = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ValueError(f"mask {mask.shape} vs ground truth {gt.shape}")
    if not mask.any():
        raise EmptyMask("no valid ground-truth pixels")
    p = pred[mask]
    g = gt[mask]
    mp = np.median(p)
    if not mp > 0:
        raise ValueError("median prediction must be positive")
    p = np.clip(p * (np.median(g) / mp), MIN_DEPTH, cap)
    g = np.clip(g, MIN_DEPTH, cap)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def _translations(snippet) -> np.ndarray:
    return np.array([p.translation if isinstance(p, Pose) else np.asarray(p, dtype=float) for p in snippet])


def ate(pred, gt) -> float:
    """Mean translation error after least-squares scaling of the prediction.

    Accepts sequences of :class:`Pose` or of translation 3-vectors.
    """
    tp = _translations(pred)
    tg = _translations(gt)
    if tp.shape != tg.shape:
        raise ValueError(f"snippet lengths differ: {len(tp)} vs {len(tg)}")
    denom = float(np.sum(tp * tp))
    if denom < 1e-18:
        raise DegenerateScale("predicted translations are all zero")
    s = float(np.sum(tp * tg)) / denom
    return float(np.mean(np.linalg.norm(s * tp - tg, axis=1)))


def atde(pred_t, gt_t) -> float:
    """Angle in radians between two translation directions (no sign flip)."""
    a = np.asarray(pred_t, dtype=float)
    b = np.asarray(gt_t, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ZeroTranslation("translation direction undefined for a zero vector")
    a, b = a / na, b / nb
    # same angle as arccos(a . b) but without its loss of precision near 0 and pi
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b))


def snippet_metrics(pred_snippets, gt_snippets) -> PoseMetrics:
    """Mean and population standard deviation of ATE per snippet and ATDE per frame pair.

    ATDE is taken for every frame after the first (identity) frame of a snippet.
    """
    if len(pred_snippets) != len(gt_snippets):
        raise ValueError(f"snippet counts differ: {len(pred_snippets)} vs {len(gt_snippets)}")
    if not pred_snippets:
        raise EmptyInput("no snippets")
    ates, atdes = [], []
    for ps, gs in zip(pred_snippets, gt_snippets):
        ates.append(ate(ps, gs))
        tp, tg = _translations(ps), _translations(gs)
        for a, b in zip(tp[1:], tg[1:]):
            atdes.append(atde(a, b))
    ates = np.array(ates)
    atdes = np.array(atdes) if atdes else np.zeros(1)
    return PoseMetrics(float(ates.mean()), float(ates.std()), float(atdes.mean()), float(atdes.std()))
