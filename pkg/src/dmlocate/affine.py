"""Five-parameter affine transforms shared by the generator and the aligner.

The 2x3 matrix acts on normalized [-1,1]^2 coordinates. ``affine_warp``
consumes a *sampling* matrix (output coordinate -> source coordinate), so the
matrix that moves image content by params ``p`` is the inverse of
``affine_matrix(p)``; helpers below keep the two directions straight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AffineParams:
    sx: float = 1.0
    sy: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.sx, self.sy, self.tx, self.ty, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"affine params must be finite, got {vals}")
        if abs(self.theta) >= math.pi:
            raise ValueError(f"|theta| must be < pi, got {self.theta}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.sx, self.sy, self.tx, self.ty, self.theta)

    @staticmethod
    def identity() -> "AffineParams":
        return AffineParams()


def affine_matrix(params: AffineParams) -> np.ndarray:
    """Rotation-then-per-axis-scale layout: [[sx*cos, -sy*sin, tx], [sx*sin, sy*cos, ty]]."""
    c = math.cos(params.theta)
    s = math.sin(params.theta)
    return np.array(
        [
            [params.sx * c, -params.sy * s, params.tx],
            [params.sx * s, params.sy * c, params.ty],
        ],
        dtype=np.float32,
    )


def matrix_from_vector(vec: np.ndarray) -> np.ndarray:
    """Batched affine_matrix over raw (N,5) parameter rows (sx, sy, tx, ty, theta)."""
    v = np.asarray(vec, dtype=np.float64)
    sx, sy, tx, ty, th = v[:, 0], v[:, 1], v[:, 2], v[:, 3], v[:, 4]
    c, s = np.cos(th), np.sin(th)
    m = np.empty((v.shape[0], 2, 3), dtype=np.float64)
    m[:, 0, 0] = sx * c
    m[:, 0, 1] = -sy * s
    m[:, 0, 2] = tx
    m[:, 1, 0] = sx * s
    m[:, 1, 1] = sy * c
    m[:, 1, 2] = ty
    return m


def matrix_vjp(vec: np.ndarray, dmat: np.ndarray) -> np.ndarray:
    """Pull a (N,2,3) matrix gradient back onto the (N,5) parameter rows."""
    v = np.asarray(vec, dtype=np.float64)
    g = np.asarray(dmat, dtype=np.float64)
    sx, sy, th = v[:, 0], v[:, 1], v[:, 4]
    c, s = np.cos(th), np.sin(th)
    out = np.empty((v.shape[0], 5), dtype=np.float64)
    out[:, 0] = g[:, 0, 0] * c + g[:, 1, 0] * s
    out[:, 1] = -g[:, 0, 1] * s + g[:, 1, 1] * c
    out[:, 2] = g[:, 0, 2]
    out[:, 3] = g[:, 1, 2]
    out[:, 4] = (
        g[:, 0, 0] * (-sx * s)
        + g[:, 0, 1] * (-sy * c)
        + g[:, 1, 0] * (sx * c)
        + g[:, 1, 1] * (-sy * s)
    )
    return out


def invert_affine(matrix: np.ndarray) -> np.ndarray:
    """Inverse of the augmented [M | t] transform, returned as 2x3."""
    m = np.asarray(matrix, dtype=np.float64)
    a = m[:2, :2]
    t = m[:2, 2]
    ainv = np.linalg.inv(a)
    out = np.empty((2, 3), dtype=np.float64)
    out[:2, :2] = ainv
    out[:2, 2] = -ainv @ t
    return out.astype(np.float32)


def _to_norm(px: np.ndarray, extent: int) -> np.ndarray:
    if extent == 1:
        return np.zeros_like(px, dtype=np.float64)
    return 2.0 * px / (extent - 1) - 1.0


def _to_pix(xn: np.ndarray, extent: int) -> np.ndarray:
    return (xn + 1.0) * (extent - 1) / 2.0


def transform_box(
    box: tuple[float, float, float, float],
    content_matrix: np.ndarray,
    height: int,
    width: int,
) -> tuple[float, float, float, float] | None:
    """Map an axis-aligned (x, y, w, h) pixel box through a content transform.

    Returns the clipped bounding box of the four transformed corners, or None
    when nothing remains inside the canvas.
    """
    x, y, w, h = box
    cx = np.array([x, x + w, x, x + w], dtype=np.float64)
    cy = np.array([y, y, y + h, y + h], dtype=np.float64)
    m = np.asarray(content_matrix, dtype=np.float64)
    un = m[0, 0] * _to_norm(cx, width) + m[0, 1] * _to_norm(cy, height) + m[0, 2]
    vn = m[1, 0] * _to_norm(cx, width) + m[1, 1] * _to_norm(cy, height) + m[1, 2]
    px = _to_pix(un, width)
    py = _to_pix(vn, height)
    x0, x1 = float(px.min()), float(px.max())
    y0, y1 = float(py.min()), float(py.max())
    x0c, x1c = max(x0, 0.0), min(x1, width - 1.0)
    y0c, y1c = max(y0, 0.0), min(y1, height - 1.0)
    if x1c <= x0c or y1c <= y0c:
        return None
    return (x0c, y0c, x1c - x0c, y1c - y0c)


def transform_point(
    point: tuple[float, float], content_matrix: np.ndarray, height: int, width: int
) -> tuple[float, float]:
    """Map one (x, y) pixel coordinate through a content transform."""
    m = np.asarray(content_matrix, dtype=np.float64)
    un = m[0, 0] * _to_norm(np.float64(point[0]), width) + m[0, 1] * _to_norm(
        np.float64(point[1]), height
    ) + m[0, 2]
    vn = m[1, 0] * _to_norm(np.float64(point[0]), width) + m[1, 1] * _to_norm(
        np.float64(point[1]), height
    ) + m[1, 2]
    return (float(_to_pix(un, width)), float(_to_pix(vn, height)))
