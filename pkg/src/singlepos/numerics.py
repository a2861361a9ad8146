"""Small numeric kernels shared by the model, augmentation and heatmap code.

Arrays are channels-last: a spatial map has shape ``(h, w, c)`` and may carry
extra leading batch dimensions where noted.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def sigmoid(x):
    """Elementwise logistic function, stable for large ``|x|``."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def spatial_mean(t: np.ndarray) -> np.ndarray:
    """Per-channel mean over the two spatial axes ``(..., h, w, c) -> (..., c)``."""
    t = np.asarray(t)
    if t.ndim < 3:
        raise ValueError(f"expected a (..., h, w, c) map, got shape {t.shape}")
    h, w = t.shape[-3], t.shape[-2]
    if h == 0 or w == 0:
        raise ValueError("spatial_mean of a map with zero spatial extent")
    return t.mean(axis=(-3, -2))


def interpolation_matrix(in_size: int, out_size: int, start: float = 0.0,
                         length: float | None = None, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights of shape ``(out_size, in_size)``.

    Output sample ``i`` reads the source at continuous pixel coordinate
    ``start + (i + 0.5) * length / out_size - 0.5`` (half-pixel centres).
    ``start``/``length`` select a window of the source in pixel units; the
    default is the whole axis. Positions are clamped to the pixel centres
    inside the window (and the axis), so an integer window behaves exactly
    like cropping first and resizing the crop.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError("sizes must be >= 1")
    if length is None:
        length = float(in_size)
    pos = start + (np.arange(out_size, dtype=np.float64) + 0.5) * (length / out_size) - 0.5
    lo_c = min(max(start, 0.0), in_size - 1)
    hi_c = max(min(start + length - 1.0, in_size - 1.0), lo_c)
    pos = np.clip(pos, lo_c, hi_c)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = pos - lo
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype, copy=False)


def resample(t: np.ndarray, out_h: int, out_w: int,
             window: tuple[float, float, float, float] | None = None) -> np.ndarray:
    """Bilinearly resample a ``(h, w, c)`` map, optionally from a sub-window.

    ``window`` is ``(y0, x0, y1, x1)`` in source pixel-edge coordinates, so the
    full map is ``(0, 0, h, w)``.
    """
    t = np.asarray(t)
    h, w = t.shape[0], t.shape[1]
    if window is None:
        window = (0.0, 0.0, float(h), float(w))
    y0, x0, y1, x1 = window
    if window == (0.0, 0.0, float(h), float(w)) and (out_h, out_w) == (h, w):
        return t.copy()
    dtype = t.dtype if np.issubdtype(t.dtype, np.floating) else np.float64
    ry = interpolation_matrix(h, out_h, y0, y1 - y0, dtype)
    rx = interpolation_matrix(w, out_w, x0, x1 - x0, dtype)
    tmp = np.tensordot(ry, t, axes=(1, 0))            # (out_h, w, c)
    out = np.tensordot(rx, tmp, axes=(1, 1))          # (out_w, out_h, c)
    return np.ascontiguousarray(np.swapaxes(out, 0, 1))


def bilinear_resize(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a ``(h, w, c)`` map with half-pixel-centre bilinear sampling.

    Sizes equal to the input return an exact copy. Edge samples are clamped,
    so the output never leaves ``[t.min(), t.max()]``.
    """
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"expected (h, w, c), got shape {t.shape}")
    if min(t.shape[0], t.shape[1], out_h, out_w) < 1:
        raise ValueError("all sizes must be >= 1")
    return resample(t, out_h, out_w)


def finite_difference_gradient(f: Callable[[np.ndarray], float], t: np.ndarray,
                               eps: float = 1e-6, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``t``.

    If ``indices`` (an iterable of flat indices) is given, only those
    coordinates are evaluated and the rest of the result is left at zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    t = np.array(t, dtype=np.float64)
    grad = np.zeros_like(t)
    flat = t.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(t))
        flat[i] = orig - eps
        fm = float(f(t))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``, elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
