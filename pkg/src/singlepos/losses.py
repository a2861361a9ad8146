"""Supervision terms for single-positive multi-label training.

Every loss takes predictions with classes on the last axis and returns
``(loss, grad)`` where ``loss`` has the leading (batch) shape and ``grad``
matches the prediction shape. Annotations use :data:`POS`, :data:`NEG` and
:data:`UNKNOWN`; expected-positive masks are 0/1 arrays.
"""

from __future__ import annotations

import numpy as np

from .augment import AugmentationTransform, crop_resize, region_on_heatmap

POS, NEG, UNKNOWN = 1, 0, -1
EPS = 1e-7

PRIMARY_LOSSES = ("bce", "an", "en", "ep", "epr")
CONSISTENCY_LOSSES = ("none", "cl", "scl")


def _log_terms(f, pos_w, neg_w):
    f = np.asarray(f)
    L = f.shape[-1]
    fc = np.clip(f, EPS, 1 - EPS)
    pos_w = np.asarray(pos_w, dtype=f.dtype)
    neg_w = np.asarray(neg_w, dtype=f.dtype)
    loss = -(pos_w * np.log(fc) + neg_w * np.log1p(-fc)).sum(axis=-1) / L
    inside = (f > EPS) & (f < 1 - EPS)
    grad = -(pos_w / fc - neg_w / (1 - fc)) / L * inside
    return loss, grad


def bce_loss(f, z):
    """Cross entropy on annotated entries only; unknown labels are ignored."""
    z = np.asarray(z)
    return _log_terms(f, z == POS, z == NEG)


def an_loss(f, z):
    """Cross entropy with every non-positive label treated as negative."""
    z = np.asarray(z)
    return _log_terms(f, z == POS, z != POS)


def en_loss(f, z, zhat):
    """Like :func:`an_loss` but labels mined as expected positives get no negative term."""
    z = np.asarray(z)
    zhat = np.asarray(zhat)
    return _log_terms(f, z == POS, zhat == 0)


def ep_loss(f, z, zhat):
    """Mined expected positives are supervised as positives."""
    z = np.asarray(z)
    zhat = np.asarray(zhat)
    return _log_terms(f, (z == POS) | (zhat == 1), zhat == 0)


def epr_loss(f, z, k):
    """Positive cross entropy plus a penalty pulling ``sum(f)`` towards ``k``.

    The penalty is ``((sum_i f_i - k) / L) ** 2``.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    f = np.asarray(f)
    z = np.asarray(z)
    L = f.shape[-1]
    loss, grad = _log_terms(f, z == POS, np.zeros_like(f))
    excess = (f.sum(axis=-1) - k) / L
    loss = loss + excess ** 2
    grad = grad + (2 * excess / L)[..., None]
    return loss, grad


def _l2(diff, axes, normalized):
    norm = np.sqrt((diff ** 2).sum(axis=axes))
    n = np.prod([diff.shape[a] for a in axes])
    safe = np.where(norm > 0, norm, 1)
    expand = norm.reshape(norm.shape + (1,) * len(axes))
    grad = np.where(expand > 0, diff / safe.reshape(expand.shape), 0)
    if normalized:
        scale = 1 / np.sqrt(n)
        return norm * scale, grad * scale
    return norm, grad


def cl_loss(f, s_prev, normalized: bool = False):
    """Euclidean distance between predictions and running-average scores.

    The gradient at coincidence is defined as zero. ``normalized`` divides by
    ``sqrt(L)``.
    """
    f = np.asarray(f)
    s_prev = np.asarray(s_prev, dtype=f.dtype)
    if f.shape != s_prev.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {s_prev.shape}")
    return _l2(f - s_prev, (-1,), normalized)


def spatial_l2(F, target, normalized: bool = False):
    """Euclidean norm of ``F - target`` over the last three axes ``(G, G, L)``."""
    F = np.asarray(F)
    target = np.asarray(target, dtype=F.dtype)
    if F.shape != target.shape:
        raise ValueError(f"shape mismatch {F.shape} vs {target.shape}")
    return _l2(F - target, (-3, -2, -1), normalized)


def heatmap_target(H: np.ndarray, t: AugmentationTransform, G: int) -> np.ndarray:
    """Crop a ``(W, W, L)`` heatmap by the transform, flip, resize to ``G x G``."""
    W = H.shape[0]
    if W % G != 0:
        raise ValueError(f"heatmap size {W} is not a multiple of the score map size {G}")
    region = region_on_heatmap(t, W)
    if region.width < 1 or region.height < 1:
        raise ValueError("degenerate heatmap region")
    return crop_resize(H, region.window, t.hflip, G, G)


def scl_loss(F, H, t: AugmentationTransform, normalized: bool = False):
    """Spatial consistency between a score map ``(G, G, L)`` and a stored heatmap.

    The target is treated as a constant, so only ``dloss/dF`` is returned.
    """
    F = np.asarray(F)
    target = heatmap_target(np.asarray(H, dtype=F.dtype), t, F.shape[-3])
    return spatial_l2(F, target, normalized)


def primary_loss(name: str, f, z, zhat=None, k=None):
    if name == "bce":
        return bce_loss(f, z)
    if name == "an":
        return an_loss(f, z)
    if name == "en":
        return en_loss(f, z, zhat)
    if name == "ep":
        return ep_loss(f, z, zhat)
    if name == "epr":
        return epr_loss(f, z, k)
    raise ValueError(f"unknown primary loss {name!r}; expected one of {PRIMARY_LOSSES}")


def combined_loss(primary: str, consistency: str, gamma: float, f, z, *, zhat=None, k=None,
                  s_prev=None, F=None, target=None, normalized: bool = False):
    """Primary loss plus ``gamma`` times a consistency term.

    Returns ``(loss, dloss/df, dloss/dF)``; the last is ``None`` unless the
    spatial term is active. For ``"scl"`` pass the score map ``F`` and the
    already cropped ``target``.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    loss, df = primary_loss(primary, f, z, zhat, k)
    dF = None
    if consistency == "cl":
        c, g = cl_loss(f, s_prev, normalized)
        loss = loss + gamma * c
        df = df + gamma * g
    elif consistency == "scl":
        c, g = spatial_l2(F, target, normalized)
        loss = loss + gamma * c
        dF = gamma * g
    elif consistency != "none":
        raise ValueError(f"unknown consistency loss {consistency!r}")
    return loss, df, dF


def gamma_schedule(epoch: int, warmup_epochs: int) -> float:
    """Linear ramp of the consistency weight from 0 at epoch 0 to 1 at ``warmup_epochs``."""
    if warmup_epochs < 1:
        raise ValueError("warmup_epochs must be >= 1")
    return min(epoch / warmup_epochs, 1.0)
