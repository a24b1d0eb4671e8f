"""Intensity similarity: normalized cross-correlation and gradient correlation."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

NORM_FLOOR = 1e-8


def _as_array(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def ncc(a, b) -> float:
    """Pearson correlation of two equally shaped arrays, clamped to [-1, 1].

    Each centred norm is floored at ``NORM_FLOOR``; a constant input therefore
    yields 0 rather than NaN.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"ncc: shape mismatch {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("ncc: need at least two elements")
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    num = float(np.dot(da, db))
    den = max(float(np.sqrt(da @ da)), NORM_FLOOR) * max(float(np.sqrt(db @ db)), NORM_FLOOR)
    return float(np.clip(num / den, -1.0, 1.0))


def sobel(img):
    """(d/dx, d/dy) 3x3 Sobel responses with zero padding; x runs along columns."""
    a = _as_array(img)
    gx = ndimage.sobel(a, axis=1, mode="constant", cval=0.0)
    gy = ndimage.sobel(a, axis=0, mode="constant", cval=0.0)
    return gx, gy


def gradient_correlation(a, b) -> float:
    """Mean NCC of the x and y Sobel responses over the interior pixels.

    The one-pixel border is excluded: there the zero padding turns an
    intensity offset into a spurious edge, which would break offset invariance.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"gradient_correlation: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < 3:
        raise ValueError("gradient_correlation: images must be 2-D and at least 3x3")
    ax, ay = sobel(a)
    bx, by = sobel(b)
    core = (slice(1, -1), slice(1, -1)) if min(a.shape) > 3 else (slice(None), slice(None))
    return 0.5 * (ncc(ax[core], bx[core]) + ncc(ay[core], by[core]))


METRICS = {"ncc": ncc, "gc": gradient_correlation}
