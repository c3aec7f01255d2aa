"""Keypoint geometry: heading angles, Gaussian heatmaps, heatmap decoding.

Image frame: u to the right, v downward. Headings are measured from the
image-right axis, counter-clockwise as seen on screen, in [0, 360).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class NoDetectionError(RuntimeError):
    """Raised when a heatmap carries no peak to decode."""


@dataclass(frozen=True)
class KeypointAnnotation:
    nose_uv: tuple[float, float]
    tail_uv: tuple[float, float]

    @property
    def angle(self) -> float:
        return keypoints_to_angle(self.nose_uv, self.tail_uv)

    def as_array(self) -> np.ndarray:
        return np.array([self.nose_uv, self.tail_uv], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "KeypointAnnotation":
        a = np.asarray(a, dtype=np.float64)
        return cls((float(a[0, 0]), float(a[0, 1])), (float(a[1, 0]), float(a[1, 1])))


def keypoints_to_angle(nose, tail) -> float:
    du = float(nose[0]) - float(tail[0])
    dv = float(nose[1]) - float(tail[1])
    if du == 0.0 and dv == 0.0:
        raise ValueError("nose and tail coincide")
    deg = math.degrees(math.atan2(-dv, du)) % 360.0
    return 0.0 if deg == 360.0 else deg


def rotate_points(points, delta_deg: float, center) -> np.ndarray:
    """Rotate (u, v) points counter-clockwise on screen by ``delta_deg`` about ``center``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    a = math.radians(delta_deg)
    c, s = math.cos(a), math.sin(a)
    x = p[:, 0] - center[0]
    y = -(p[:, 1] - center[1])
    xr = c * x - s * y
    yr = s * x + c * y
    return np.stack([center[0] + xr, center[1] - yr], axis=1)


def render_target_heatmap(kp, shape: tuple[int, int], sigma: float, stride: int = 1) -> np.ndarray:
    """Gaussian bump peaked at ``kp / stride`` on an (H', W') grid.

    Grid cell (i, j) sits at image coordinate (j * stride, i * stride). A
    keypoint landing outside the grid is clamped to the nearest cell.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = shape
    u0 = float(kp[0]) / stride
    v0 = float(kp[1]) / stride
    cu = min(max(u0, 0.0), w - 1.0)
    cv = min(max(v0, 0.0), h - 1.0)
    if (cu, cv) != (u0, v0):
        warnings.warn(f"keypoint {tuple(kp)} outside {h}x{w} grid; clamped", RuntimeWarning, stacklevel=2)
    vv, uu = np.mgrid[0:h, 0:w]
    return np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2.0 * sigma ** 2))


def _refine(m: float, l: float, r: float) -> float:
    denom = l - 2.0 * m + r
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (l - r) / denom, -0.5, 0.5))


def heatmap_to_keypoint(h: np.ndarray, stride: int = 1) -> tuple[float, float]:
    """Argmax plus quadratic sub-cell refinement, returned in image coordinates.

    np.argmax on the row-major grid gives the lowest (v, u) on ties.
    """
    h = np.asarray(h, dtype=np.float64)
    if not np.isfinite(h).all() or h.max() <= 0.0:
        raise NoDetectionError("heatmap has no positive response")
    i, j = np.unravel_index(int(np.argmax(h)), h.shape)
    m = h[i, j]
    du = _refine(m, h[i, j - 1], h[i, j + 1]) if 0 < j < h.shape[1] - 1 else 0.0
    dv = _refine(m, h[i - 1, j], h[i + 1, j]) if 0 < i < h.shape[0] - 1 else 0.0
    return ((j + du) * stride, (i + dv) * stride)
