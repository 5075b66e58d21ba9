"""Minimal readers and writers for PGM/PPM (8-bit) and PFM (float32) files."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

_HEADER = re.compile(rb"^(P[56])\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s", re.M)


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file scaled to [0, 1]."""
    data = Path(path).read_bytes()
    m = _HEADER.match(data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    channels = 1 if magic == b"P5" else 3
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=m.end())
    img = pixels.reshape(h, w, channels).astype(float) / maxval
    return img[..., 0] if channels == 1 else img


def write_pnm(path: str | Path, img: np.ndarray) -> None:
    """Write an image in [0, 1] as PGM (2-D input) or PPM (H x W x 3)."""
    img = np.asarray(img, dtype=float)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.ndim == 2:
        header = f"P5\n{q.shape[1]} {q.shape[0]}\n255\n"
    elif q.ndim == 3 and q.shape[2] == 3:
        header = f"P6\n{q.shape[1]} {q.shape[0]}\n255\n"
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    Path(path).write_bytes(header.encode("ascii") + q.tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline().strip())
        endian = "<" if scale < 0 else ">"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=endian + "f4", count=w * h * channels)
    img = data.reshape(h, w, channels)[::-1].astype(float)
    return img[..., 0] if channels == 1 else img


def write_pfm(path: str | Path, field: np.ndarray) -> None:
    """Write a float field as little-endian PFM (scale -1.0), bottom row first."""
    a = np.asarray(field, dtype="<f4")
    kind = b"Pf" if a.ndim == 2 else b"PF"
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(kind + b"\n" + f"{w} {h}\n".encode("ascii") + b"-1.0\n")
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def heatmap(field: np.ndarray) -> np.ndarray:
    """Linear min-max normalization to [0, 1] (all zeros for a constant field)."""
    f = np.asarray(field, dtype=float)
    lo, hi = f.min(), f.max()
    if hi - lo <= 0:
        return np.zeros_like(f)
    return (f - lo) / (hi - lo)


def read_mask(path: str | Path) -> np.ndarray:
    """Validity mask from a PGM: zero means missing."""
    return read_pnm(path) > 0

