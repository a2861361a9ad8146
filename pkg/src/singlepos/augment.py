"""Recorded crop/flip augmentation and its geometry on the heatmap grid.

A transform is stored as a crop rectangle in normalized coordinates of the
canonical square frame plus a horizontal-flip flag. The same rectangle is
used to cut the training input out of the canonical image and to address
the per-image heatmap, so every crop goes through :func:`crop_resize`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import resample

CANONICAL_SCALE = 1.5


@dataclass(frozen=True)
class AugmentationTransform:
    cx: float
    cy: float
    cw: float
    ch: float
    hflip: bool = False

    def __post_init__(self):
        tol = 1e-12
        if self.cw <= 0 or self.ch <= 0:
            raise ValueError("crop width and height must be positive")
        if self.cx < -tol or self.cy < -tol or self.cx + self.cw > 1 + tol or self.cy + self.ch > 1 + tol:
            raise ValueError(f"crop {self} leaves the unit frame")

    @classmethod
    def identity(cls) -> "AugmentationTransform":
        return cls(0.0, 0.0, 1.0, 1.0, False)

    @property
    def area(self) -> float:
        return self.cw * self.ch

    def contains(self, x: float, y: float) -> bool:
        """Whether a normalized point of the canonical frame is inside the crop."""
        return self.cx <= x < self.cx + self.cw and self.cy <= y < self.cy + self.ch


@dataclass(frozen=True)
class HeatmapRegion:
    x0: int
    y0: int
    x1: int
    y1: int
    hflip: bool = False

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def window(self) -> tuple[float, float, float, float]:
        return (float(self.y0), float(self.x0), float(self.y1), float(self.x1))


def canonical_size(input_size: int) -> int:
    """Side of the canonical frame crops are taken from."""
    return int(round(CANONICAL_SCALE * input_size))


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent generator for one sample in one epoch."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def sample_transform(rng: np.random.Generator, area_min: float = 0.25, area_max: float = 1.0,
                     square: bool = True, hflip_prob: float = 0.5,
                     ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> AugmentationTransform:
    """Random crop with area fraction uniform in ``[area_min, area_max]``.

    Square crops have side ``sqrt(area)``. Otherwise the aspect ratio is
    log-uniform in ``ratio`` and sides are shrunk to fit the frame.
    The crop position is uniform over all placements inside the frame.
    """
    if not 0 < area_min <= area_max <= 1:
        raise ValueError(f"need 0 < area_min <= area_max <= 1, got {area_min}, {area_max}")
    area = rng.uniform(area_min, area_max)
    if square:
        cw = ch = math.sqrt(area)
    else:
        r = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw, ch = math.sqrt(area * r), math.sqrt(area / r)
        cw, ch = min(cw, 1.0), min(ch, 1.0)
    cx = min(rng.uniform(0.0, 1.0 - cw), 1.0 - cw)
    cy = min(rng.uniform(0.0, 1.0 - ch), 1.0 - ch)
    hflip = bool(rng.random() < hflip_prob)
    return AugmentationTransform(cx, cy, cw, ch, hflip)


def crop_resize(t: np.ndarray, window: tuple[float, float, float, float], hflip: bool,
                out_h: int, out_w: int) -> np.ndarray:
    """Cut ``window`` (pixel edges ``y0, x0, y1, x1``) from ``t``, flip, resize."""
    out = resample(t, out_h, out_w, window)
    if hflip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def uncrop_resize(t: np.ndarray, region: HeatmapRegion) -> np.ndarray:
    """Inverse direction of :func:`crop_resize`: unflip ``t`` and fit it to ``region``."""
    if region.hflip:
        t = t[:, ::-1]
    return resample(np.ascontiguousarray(t), region.height, region.width)


def pixel_window(t: AugmentationTransform, size: int) -> tuple[float, float, float, float]:
    return (t.cy * size, t.cx * size, (t.cy + t.ch) * size, (t.cx + t.cw) * size)


def apply_to_image(image: np.ndarray, t: AugmentationTransform, out_size: int) -> np.ndarray:
    """Crop ``image`` (canonical square frame, ``(S, S, C)``) and resize to ``out_size``."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square (S, S, C) image, got {image.shape}")
    return crop_resize(image, pixel_window(t, image.shape[0]), t.hflip, out_size, out_size)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def region_on_heatmap(t: AugmentationTransform, W: int) -> HeatmapRegion:
    """Snap the crop rectangle to whole pixels of a ``W x W`` grid.

    Corners round half-up; the result always covers at least one pixel.
    """
    if W < 1:
        raise ValueError("W must be >= 1")

    def snap(lo: float, extent: float) -> tuple[int, int]:
        a = min(max(_round_half_up(lo * W), 0), W - 1)
        b = min(max(_round_half_up((lo + extent) * W), a + 1), W)
        return a, b

    x0, x1 = snap(t.cx, t.cw)
    y0, y1 = snap(t.cy, t.ch)
    return HeatmapRegion(x0, y0, x1, y1, t.hflip)
