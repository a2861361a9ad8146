"""Tiny convolutional classifier with the classification head applied per location.

The backbone is a stack of ``3x3 conv -> ReLU -> 2x2 average pool`` stages.
The linear head is evaluated as a 1x1 convolution on every cell of the final
feature map, which gives spatial score maps; the global prediction pools
those logits. Because the head is affine, pooling before or after it gives
the same global logits.

Forward and backward passes are written out by hand on channels-last numpy
arrays ``(batch, height, width, channels)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import logit, sigmoid

POOLING_MODES = ("logit", "prob")


@dataclass
class ModelConfig:
    input_size: int = 32
    channels: list[int] = field(default_factory=lambda: [16, 32, 48])
    num_classes: int = 8
    global_pool: str = "logit"
    in_channels: int = 3
    input_shift: float = 0.5
    input_scale: float = 4.0

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if not self.channels:
            raise ValueError("need at least one conv stage")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_size % self.stride != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by total stride {self.stride}")
        if self.global_pool not in POOLING_MODES:
            raise ValueError(f"global_pool must be one of {POOLING_MODES}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def grid_size(self) -> int:
        """Side ``G`` of the spatial score map."""
        return self.input_size // self.stride


@dataclass
class Output:
    """Result of a forward pass.

    ``U``/``F`` are per-location logits/probabilities ``(B, G, G, L)``;
    ``u``/``f`` are the pooled logits and global probabilities ``(B, L)``.
    """
    U: np.ndarray
    F: np.ndarray
    u: np.ndarray
    f: np.ndarray


def init_params(config: ModelConfig, rng: np.random.Generator, prior: float | None = None,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero conv biases, head bias at ``logit(prior)``."""
    params = {}
    cin = config.in_channels
    for i, cout in enumerate(config.channels):
        limit = np.sqrt(6.0 / (9 * cin + 9 * cout))
        params[f"conv{i}.weight"] = rng.uniform(-limit, limit, size=(3, 3, cin, cout))
        params[f"conv{i}.bias"] = np.zeros(cout)
        cin = cout
    L = config.num_classes
    limit = np.sqrt(6.0 / (cin + L))
    params["head.weight"] = rng.uniform(-limit, limit, size=(cin, L))
    params["head.bias"] = np.full(L, logit(prior) if prior is not None else 0.0)
    return {k: v.astype(dtype) for k, v in params.items()}


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(B, H, W, C) -> (B, H, W, 9C)`` patches of a zero-padded 3x3 window."""
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate(
        [xp[:, dy:dy + H, dx:dx + W, :] for dy in range(3) for dx in range(3)], axis=-1)


def _col2im(dcols: np.ndarray, C: int) -> np.ndarray:
    B, H, W, _ = dcols.shape
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dcols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + H, dx:dx + W, :] += dcols[..., k * C:(k + 1) * C]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def _avgpool2(x: np.ndarray) -> np.ndarray:
    B, H, W, C = x.shape
    return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def _avgpool2_backward(d: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(d, 2, axis=1), 2, axis=2) * d.dtype.type(0.25)


class ConvClassifier:
    """Stateful wrapper around a parameter dict holding the last forward's cache."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self._cache = None

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, prior: float | None = None,
               dtype=np.float32) -> "ConvClassifier":
        return cls(config, init_params(config, np.random.default_rng(seed), prior, dtype))

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def _check_input(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        c = self.config
        if images.shape[1:] != (c.input_size, c.input_size, c.in_channels):
            raise ValueError(
                f"expected images of shape (B, {c.input_size}, {c.input_size}, "
                f"{c.in_channels}), got {images.shape}")
        return images

    def features(self, images: np.ndarray, cache: list | None = None) -> np.ndarray:
        x = (self._check_input(images) - self.dtype.type(self.config.input_shift)) \
            * self.dtype.type(self.config.input_scale)
        for i in range(len(self.config.channels)):
            cols = _im2col(x)
            w = self.params[f"conv{i}.weight"]
            z = cols @ w.reshape(-1, w.shape[-1]) + self.params[f"conv{i}.bias"]
            a = np.maximum(z, 0)
            if cache is not None:
                cache.append((cols, z > 0, x.shape[-1]))
            x = _avgpool2(a)
        return x

    def forward(self, images: np.ndarray) -> Output:
        cache: list = []
        feat = self.features(images, cache)
        U = feat @ self.params["head.weight"] + self.params["head.bias"]
        F = sigmoid(U)
        u = U.mean(axis=(1, 2))
        if self.config.global_pool == "logit":
            f = sigmoid(u)
        else:
            f = F.mean(axis=(1, 2))
        self._cache = (cache, feat)
        return Output(U=U, F=F, u=u, f=f)

    def pooled_logits(self, images: np.ndarray) -> np.ndarray:
        """Global logits with pooling applied before the head (inference order)."""
        feat = self.features(images)
        return feat.mean(axis=(1, 2)) @ self.params["head.weight"] + self.params["head.bias"]

    def logit_gradients(self, out: Output, dF: np.ndarray | None,
                        df: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
        """Convert gradients wrt probabilities ``F``/``f`` into gradients wrt ``U``/``u``."""
        dU = np.zeros_like(out.U)
        du = np.zeros_like(out.u)
        if dF is not None:
            dU += dF * out.F * (1 - out.F)
        if df is not None:
            if self.config.global_pool == "logit":
                du += df * out.f * (1 - out.f)
            else:
                G2 = out.U.shape[1] * out.U.shape[2]
                dU += (df / G2)[:, None, None, :] * out.F * (1 - out.F)
        return dU, du

    def backward(self, dU: np.ndarray | None, du: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients wrt ``U`` and pooled ``u``."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cache, feat = self._cache
        B, G, _, _ = feat.shape
        L = self.config.num_classes
        total = np.zeros(feat.shape[:3] + (L,), dtype=self.dtype)
        if dU is not None:
            total += dU
        if du is not None:
            total += (np.asarray(du, dtype=self.dtype) / (G * G))[:, None, None, :]

        grads = {}
        wh = self.params["head.weight"]
        grads["head.weight"] = feat.reshape(-1, feat.shape[-1]).T @ total.reshape(-1, L)
        grads["head.bias"] = total.sum(axis=(0, 1, 2))
        d = total @ wh.T
        for i in reversed(range(len(cache))):
            cols, active, cin = cache[i]
            d = _avgpool2_backward(d) * active
            w = self.params[f"conv{i}.weight"]
            cout = w.shape[-1]
            d2 = d.reshape(-1, cout)
            grads[f"conv{i}.weight"] = (cols.reshape(-1, cols.shape[-1]).T @ d2).reshape(w.shape)
            grads[f"conv{i}.bias"] = d2.sum(axis=0)
            if i > 0:
                d = _col2im(d @ w.reshape(-1, cout).T, cin)
        return grads

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Global probabilities for a stack of images, in batches."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = [self.forward(images[i:i + batch_size]).f for i in range(0, len(images), batch_size)]
        self._cache = None
        return np.concatenate(out, axis=0)
