"""Per-sample running averages: global class scores and spatial heatmaps.

Both stores are indexed by the position of a sample in the training set.
Heatmaps live in the canonical frame on a ``W x W`` grid; each training
iteration blends the visible crop into the stored map and reads the same
crop back as a target.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .augment import AugmentationTransform, region_on_heatmap, uncrop_resize
from .losses import POS, heatmap_target

log = logging.getLogger(__name__)


class StoreError(RuntimeError):
    pass


def memory_bytes(N: int, L: int, W: int, bytes_per_value: int) -> int:
    """Storage needed for dense heatmaps: ``N * L * W**2 * bytes_per_value``."""
    return int(N) * int(L) * int(W) * int(W) * int(bytes_per_value)


class ScoreStore:
    """EMA of the global predictions of every training sample.

    Scores start at 1 on annotated positives and 0 elsewhere. Each sample may
    be updated at most once per epoch.
    """

    def __init__(self, z: np.ndarray, momentum: float = 0.8, dtype=np.float32):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        z = np.asarray(z)
        self.momentum = momentum
        self.s = (z == POS).astype(dtype)
        self.last_epoch = np.full(len(z), -1, dtype=np.int64)

    def __len__(self):
        return len(self.s)

    def update_scores(self, n: int, f: np.ndarray, epoch: int) -> np.ndarray:
        if self.last_epoch[n] == epoch:
            raise StoreError(f"sample {n} already updated in epoch {epoch}")
        mu = self.s.dtype.type(self.momentum)
        self.s[n] = mu * self.s[n] + (1 - mu) * np.asarray(f, dtype=self.s.dtype)
        self.last_epoch[n] = epoch
        return self.s[n]

    def state(self) -> dict[str, np.ndarray]:
        return {"scores.s": self.s, "scores.last_epoch": self.last_epoch,
                "scores.momentum": np.array([self.momentum])}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.s = arrays["scores.s"].copy()
        self.last_epoch = arrays["scores.last_epoch"].copy()
        self.momentum = float(arrays["scores.momentum"][0])


class HeatmapStore:
    """Per-image ``W x W x L`` running-average score heatmaps.

    After :meth:`retain_topk` an image keeps maps for a subset of its classes
    only; the others read back as zeros.
    """

    def __init__(self, z: np.ndarray, W: int, momentum: float = 0.8, dtype=np.float32):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        z = np.asarray(z)
        self.W = int(W)
        self.num_classes = z.shape[1]
        self.momentum = momentum
        self.dtype = np.dtype(dtype)
        self.maps = [np.broadcast_to((row == POS).astype(self.dtype), (W, W, len(row))).copy()
                     for row in z]
        self.channels: list[np.ndarray | None] = [None] * len(z)
        self._z = z

    def __len__(self):
        return len(self.maps)

    @property
    def nbytes(self) -> int:
        return sum(m.nbytes for m in self.maps)

    def dense(self, n: int) -> np.ndarray:
        """Full ``(W, W, L)`` map of image ``n``; pruned channels are zero."""
        ch = self.channels[n]
        if ch is None:
            return self.maps[n]
        out = np.zeros((self.W, self.W, self.num_classes), dtype=self.dtype)
        out[..., ch] = self.maps[n]
        return out

    def update_heatmap(self, n: int, F: np.ndarray, t: AugmentationTransform) -> np.ndarray:
        """Blend a score map ``(G, G, L)`` into the region of image ``n`` seen through ``t``."""
        F = np.asarray(F)
        if F.ndim != 3 or F.shape[0] != F.shape[1] or F.shape[2] != self.num_classes:
            raise ValueError(f"expected a (G, G, {self.num_classes}) score map, got {F.shape}")
        if self.W % F.shape[0] != 0:
            raise ValueError(f"heatmap size {self.W} is not a multiple of {F.shape[0]}")
        region = region_on_heatmap(t, self.W)
        ch = self.channels[n]
        if ch is not None:
            F = F[..., ch]
        patch = uncrop_resize(F, region)
        view = self.maps[n][region.y0:region.y1, region.x0:region.x1]
        mu = self.momentum
        view[...] = (mu * view.astype(np.float64) + (1 - mu) * patch).astype(self.dtype)
        return self.maps[n]

    def read_target(self, n: int, t: AugmentationTransform, G: int) -> np.ndarray:
        return heatmap_target(self.dense(n).astype(np.float32), t, G)

    def retain_topk(self, n: int, k: int, scores: np.ndarray) -> np.ndarray:
        """Keep maps only for the ``k`` best-scoring classes of image ``n``.

        Annotated positives are kept first; remaining slots go to the highest
        scores, ties to the lower class index. Returns the kept class indices.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        k = min(k, self.num_classes)
        scores = np.asarray(scores)
        annotated = np.flatnonzero(self._z[n] == POS)
        order = np.argsort(-scores, kind="stable")
        taken = set(annotated.tolist())
        rest = [c for c in order if c not in taken]
        keep = np.sort(np.concatenate([annotated, rest[:max(k - len(annotated), 0)]]).astype(np.int64))
        dense = self.dense(n)
        self.maps[n] = np.ascontiguousarray(dense[..., keep])
        self.channels[n] = keep
        return keep

    def state(self) -> dict[str, np.ndarray]:
        counts = np.array([m.shape[-1] for m in self.maps], dtype=np.int64)
        pruned = np.array([c is not None for c in self.channels], dtype=bool)
        chans = [c if c is not None else np.arange(self.num_classes) for c in self.channels]
        return {
            "heatmaps.values": np.concatenate([m.reshape(-1) for m in self.maps]),
            "heatmaps.counts": counts,
            "heatmaps.pruned": pruned,
            "heatmaps.channels": np.concatenate(chans).astype(np.int64),
            "heatmaps.shape": np.array([len(self.maps), self.W, self.num_classes], dtype=np.int64),
            "heatmaps.momentum": np.array([self.momentum]),
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        N, W, L = (int(v) for v in arrays["heatmaps.shape"])
        if (N, W, L) != (len(self.maps), self.W, self.num_classes):
            raise StoreError(f"stored heatmaps {N}x{W}x{L} do not match this store")
        values = arrays["heatmaps.values"]
        self.dtype = values.dtype
        self.momentum = float(arrays["heatmaps.momentum"][0])
        maps, channels = [], []
        voff = coff = 0
        for c, p in zip(arrays["heatmaps.counts"], arrays["heatmaps.pruned"]):
            c = int(c)
            maps.append(values[voff:voff + W * W * c].reshape(W, W, c).copy())
            channels.append(arrays["heatmaps.channels"][coff:coff + c].copy() if p else None)
            voff += W * W * c
            coff += c
        self.maps, self.channels = maps, channels


def export_heatmaps(store: HeatmapStore, out_dir, samples, classes, sample_ids=None) -> list[Path]:
    """Write one 8-bit grayscale PNG per ``(sample, class)`` plus ``manifest.csv``.

    Pixel values are ``round(255 * H)``. Classes pruned by top-k retention are
    written as all-zero images and logged as a warning.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    rows = []
    for n in samples:
        sid = sample_ids[n] if sample_ids is not None else str(n)
        H = store.dense(n).astype(np.float64)
        for c in classes:
            ch = store.channels[n]
            if ch is not None and c not in ch:
                log.warning("class %d of sample %s was pruned; exporting zeros", c, sid)
            plane = H[..., c]
            pixels = np.clip(np.round(255 * plane), 0, 255).astype(np.uint8)
            path = out_dir / f"{sid}_c{c}.png"
            Image.fromarray(pixels).save(path)
            written.append(path)
            rows.append((sid, c, repr(float(plane.min())), repr(float(plane.max()))))
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class_id", "min", "max"])
        w.writerows(rows)
    return written
