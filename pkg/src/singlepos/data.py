"""Synthetic multi-object images, single-positive annotation and dataset I/O.

Each class is a shape archetype drawn in a random colour at a random place.
Objects never overlap, so the full label vector ``y`` is exactly the set of
drawn archetypes.

Directory layout::

    dataset.json      {"num_classes": L, "image_size": S, "format_version": 1}
    manifest.csv      id, image, primary
    images/<id>.png   8-bit RGB
    labels.csv        id, class, value   (full labels, one row per class)
    annotations.csv   id, class, value   (training labels; absent = unknown)
    objects.csv       id, class, x0, y0, x1, y1   (pixel boxes)
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage, optimize, stats

from .losses import NEG, POS, UNKNOWN

FORMAT_VERSION = 1
PLACEMENTS = ("uniform", "corners")
# object side range, as fractions of the image side
DEFAULT_SIZES = {"uniform": (0.22, 0.34), "corners": (0.14, 0.22)}


class DataError(ValueError):
    pass


@dataclass
class DatasetRecord:
    id: str
    image: np.ndarray          # (S, S, 3) uint8
    y: np.ndarray              # (L,) 0/1
    z: np.ndarray              # (L,) POS/NEG/UNKNOWN
    primary: int = -1          # class of the largest object
    boxes: list[tuple[int, int, int, int, int]] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (self.id == other.id and self.primary == other.primary
                and np.array_equal(self.image, other.image) and np.array_equal(self.y, other.y)
                and np.array_equal(self.z, other.z) and list(self.boxes) == list(other.boxes))


# -- shapes -------------------------------------------------------------------

NUM_ARCHETYPES = 12


def _shape_mask(kind: int, n: int) -> np.ndarray:
    c = (np.arange(n) + 0.5) / n * 2 - 1
    y, x = np.meshgrid(c, c, indexing="ij")
    r = np.hypot(x, y)
    m = np.maximum(np.abs(x), np.abs(y))
    if kind >= NUM_ARCHETYPES:
        base = _shape_mask(kind - NUM_ARCHETYPES, n)
        return base & ~ndimage.binary_erosion(base, iterations=max(1, n // 6))
    if kind == 0:
        return r < 0.9
    if kind == 1:
        return m < 0.75
    if kind == 2:
        return (y > -0.8) & (y < 0.85) & (np.abs(x) < (y + 0.8) / 1.65 * 0.95)
    if kind == 3:
        return ((np.abs(x) < 0.3) | (np.abs(y) < 0.3)) & (m < 0.9)
    if kind == 4:
        return (r < 0.92) & (r > 0.5)
    if kind == 5:
        return np.abs(x) + np.abs(y) < 0.95
    if kind == 6:
        return (np.abs(np.abs(x) - np.abs(y)) < 0.3) & (m < 0.9)
    if kind == 7:
        return (m < 0.85) & (np.floor((y + 1) * 2.5) % 2 == 0)
    if kind == 8:
        return (m < 0.88) & (m > 0.5)
    if kind == 9:
        return (r < 0.92) & (y > -0.1)
    if kind == 10:
        return (m < 0.88) & ((x < -0.3) | (y > 0.3))
    return (m < 0.88) & ((y < -0.4) | (np.abs(x) < 0.3))


def object_count_pmf(mean: float = 2.5, max_objects: int = 5) -> np.ndarray:
    """``1 + Poisson(lam)`` conditioned on ``<= max_objects``, with ``lam`` set so the mean matches.

    Returns ``pmf`` with ``pmf[k] = P(count = k)``.
    """
    if not 1 <= mean < max_objects:
        raise ValueError("mean must lie in [1, max_objects)")
    ks = np.arange(max_objects)

    def pmf_for(lam):
        p = stats.poisson.pmf(ks, lam)
        return p / p.sum()

    if mean == 1:
        lam = 0.0
        p = np.zeros(max_objects)
        p[0] = 1
    else:
        lam = optimize.brentq(lambda l: (pmf_for(l) * (ks + 1)).sum() - mean, 1e-9, 50.0)
        p = pmf_for(lam)
    return np.concatenate([[0.0], p])


def _sample_count(rng: np.random.Generator, pmf: np.ndarray) -> int:
    return int(rng.choice(len(pmf), p=pmf))


def _place_boxes(rng, sizes, S, placement):
    if placement == "corners":
        if len(sizes) > 4:
            raise DataError("corner placement supports at most 4 objects per image")
        corners = rng.permutation(4)[:len(sizes)]
        boxes = []
        for size, c in zip(sizes, corners):
            jitter = rng.integers(0, max(1, S // 64) + 1, size=2)
            x0 = jitter[0] if c % 2 == 0 else S - size - jitter[0]
            y0 = jitter[1] if c < 2 else S - size - jitter[1]
            boxes.append((int(x0), int(y0), int(x0 + size), int(y0 + size)))
        return boxes
    for _ in range(50):
        boxes = []
        for size in sizes:
            for _ in range(100):
                x0 = int(rng.integers(0, S - size + 1))
                y0 = int(rng.integers(0, S - size + 1))
                b = (x0, y0, x0 + size, y0 + size)
                if all(b[2] <= o[0] or o[2] <= b[0] or b[3] <= o[1] or o[3] <= b[1] for o in boxes):
                    boxes.append(b)
                    break
            else:
                break
        if len(boxes) == len(sizes):
            return boxes
    raise DataError(f"image of size {S} too small to place {len(sizes)} objects")


def _render(rng, S, classes, placement, size_range):
    img = rng.normal(0.25, 0.08, size=(S, S, 3))
    img += rng.uniform(-0.1, 0.1, size=3)
    lo, hi = (max(3, int(round(f * S))) for f in size_range)
    sizes = sorted((int(rng.integers(lo, hi + 1)) for _ in classes), reverse=True)
    boxes = _place_boxes(rng, sizes, S, placement)
    out_boxes = []
    for cls, (x0, y0, x1, y1) in zip(classes, boxes):
        mask = _shape_mask(int(cls), x1 - x0)
        hue = rng.uniform(0, 1)
        color = 0.55 + 0.4 * np.cos(2 * np.pi * (hue + np.array([0, 1 / 3, 2 / 3])))
        patch = img[y0:y1, x0:x1]
        patch[mask] = color + rng.normal(0, 0.04, size=(int(mask.sum()), 3))
        out_boxes.append((int(cls), x0, y0, x1, y1))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8), out_boxes


def generate_synthetic(num_images: int, num_classes: int = 8, image_size: int = 64,
                       objects_per_image=None, seed: int = 0, placement: str = "uniform",
                       size_range: tuple[float, float] | None = None,
                       class_weights=None) -> list[DatasetRecord]:
    """Draw ``num_images`` images with distinct-class, non-overlapping objects.

    ``objects_per_image`` is a pmf over object counts (index = count); the
    default is :func:`object_count_pmf` with mean 2.5, capped at 4 objects for
    corner placement (one per corner). ``size_range`` bounds object sides as
    fractions of the image; corner placement defaults to smaller objects so
    that the object centres sit close enough to the corners for random crops
    to miss them most of the time. Records come fully
    annotated (``z`` is ``y`` as POS/NEG); ``primary`` is the class of the
    largest object. ``class_weights`` skews which classes appear (uniform
    when omitted). Generation is deterministic in ``seed``.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if num_classes > 2 * NUM_ARCHETYPES:
        raise ValueError(f"at most {2 * NUM_ARCHETYPES} classes are available")
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}")
    if size_range is None:
        size_range = DEFAULT_SIZES[placement]
    if objects_per_image is None:
        pmf = object_count_pmf(max_objects=4 if placement == "corners" else 5)
    else:
        pmf = np.asarray(objects_per_image, float)
    if pmf[0] > 0 or not np.isclose(pmf.sum(), 1.0):
        raise ValueError("object count pmf must sum to 1 with no mass at 0")
    pmf = pmf / pmf.sum()
    weights = None
    if class_weights is not None:
        weights = np.asarray(class_weights, dtype=np.float64)
        if weights.shape != (num_classes,) or (weights < 0).any() or weights.sum() <= 0:
            raise ValueError("class_weights must be non-negative with one entry per class")
        if np.count_nonzero(weights) < len(pmf) - 1:
            raise ValueError("class_weights leave too few classes for the largest object count")
        weights = weights / weights.sum()
    records = []
    for n in range(num_images):
        rng = np.random.default_rng([int(seed), n])
        count = min(_sample_count(rng, pmf), num_classes)
        classes = rng.choice(num_classes, size=count, replace=False, p=weights)
        image, boxes = _render(rng, image_size, classes, placement, size_range)
        y = np.zeros(num_classes, dtype=np.int8)
        y[classes] = 1
        records.append(DatasetRecord(
            id=f"{n:06d}", image=image, y=y, z=np.where(y == 1, POS, NEG).astype(np.int8),
            primary=int(classes[0]), boxes=boxes))
    return records


def to_single_positive(records: list[DatasetRecord], seed: int = 0) -> list[DatasetRecord]:
    """Keep one uniformly chosen positive per record; everything else becomes unknown."""
    rng = np.random.default_rng(seed)
    out = []
    for r in records:
        pos = np.flatnonzero(r.y == 1)
        if len(pos) == 0:
            raise DataError(f"record {r.id} has no positive label")
        z = np.full_like(r.z, UNKNOWN)
        z[rng.choice(pos)] = POS
        out.append(replace(r, z=z))
    return out


def split(records: list[DatasetRecord], fractions=(0.8, 0.2), seed: int = 0):
    """Deterministic disjoint split into train/val by the given fractions."""
    f_train, f_val = fractions
    if f_train <= 0 or f_val <= 0 or f_train + f_val > 1 + 1e-12:
        raise ValueError("fractions must be positive and sum to at most 1")
    ordered = sorted(records, key=lambda r: r.id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train = int(math.floor(f_train * len(ordered) + 0.5))
    n_val = int(math.floor(f_val * len(ordered) + 0.5))
    n_val = min(n_val, len(ordered) - n_train)
    if n_train == 0 or n_val == 0:
        raise DataError("split produced an empty partition")
    train = [ordered[i] for i in sorted(perm[:n_train])]
    val = [ordered[i] for i in sorted(perm[n_train:n_train + n_val])]
    return train, val


def stack(records: list[DatasetRecord]):
    """``(images uint8 (N,S,S,3), y (N,L), z (N,L))`` arrays of a record list."""
    return (np.stack([r.image for r in records]), np.stack([r.y for r in records]),
            np.stack([r.z for r in records]))


# -- disk format ----------------------------------------------------------------

def save_dataset(records: list[DatasetRecord], out_dir) -> Path:
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    L = len(records[0].y)
    S = records[0].image.shape[0]
    (out_dir / "dataset.json").write_text(json.dumps(
        {"num_classes": L, "image_size": S, "format_version": FORMAT_VERSION}, indent=2) + "\n")
    with open(out_dir / "manifest.csv", "w", newline="") as man, \
            open(out_dir / "labels.csv", "w", newline="") as lab, \
            open(out_dir / "annotations.csv", "w", newline="") as ann, \
            open(out_dir / "objects.csv", "w", newline="") as obj:
        wm, wl, wa, wo = (csv.writer(fh) for fh in (man, lab, ann, obj))
        wm.writerow(["id", "image", "primary"])
        wl.writerow(["id", "class", "value"])
        wa.writerow(["id", "class", "value"])
        wo.writerow(["id", "class", "x0", "y0", "x1", "y1"])
        for r in records:
            name = f"images/{r.id}.png"
            Image.fromarray(r.image).save(out_dir / name)
            wm.writerow([r.id, name, r.primary])
            for i, v in enumerate(r.y):
                wl.writerow([r.id, i, int(v)])
            for i, v in enumerate(r.z):
                if v != UNKNOWN:
                    wa.writerow([r.id, i, int(v)])
            for b in r.boxes:
                wo.writerow([r.id, *b])
    return out_dir


def _read_rows(path: Path, columns: list[str]):
    if not path.exists():
        raise DataError(f"missing file {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in columns):
            raise DataError(f"malformed {path.name}: expected columns {columns}, got {reader.fieldnames}")
        return list(reader)


def load_dataset(path) -> list[DatasetRecord]:
    from PIL import Image

    root = Path(path)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"missing file {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        L, S = int(meta["num_classes"]), int(meta["image_size"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"malformed {meta_path}: {exc}") from None

    def class_id(row, fname):
        try:
            c = int(row["class"])
        except ValueError:
            raise DataError(f"{fname}: bad class id {row['class']!r}") from None
        if not 0 <= c < L:
            raise DataError(f"{fname}: class id {c} out of range for {L} classes")
        return c

    records: dict[str, DatasetRecord] = {}
    for row in _read_rows(root / "manifest.csv", ["id", "image", "primary"]):
        img_path = root / row["image"]
        if not img_path.exists():
            raise DataError(f"manifest references missing image file {img_path}")
        image = np.asarray(Image.open(img_path).convert("RGB"))
        if image.shape != (S, S, 3):
            raise DataError(f"{img_path}: shape {image.shape} does not match image_size {S}")
        records[row["id"]] = DatasetRecord(
            id=row["id"], image=image, y=np.zeros(L, dtype=np.int8),
            z=np.full(L, UNKNOWN, dtype=np.int8), primary=int(row["primary"]))

    def lookup(row, fname):
        if row["id"] not in records:
            raise DataError(f"{fname}: unknown sample id {row['id']!r}")
        return records[row["id"]]

    for row in _read_rows(root / "labels.csv", ["id", "class", "value"]):
        lookup(row, "labels.csv").y[class_id(row, "labels.csv")] = int(row["value"])
    for row in _read_rows(root / "annotations.csv", ["id", "class", "value"]):
        v = int(row["value"])
        if v not in (POS, NEG):
            raise DataError(f"annotations.csv: value {v} must be 1 or 0")
        lookup(row, "annotations.csv").z[class_id(row, "annotations.csv")] = v
    obj_path = root / "objects.csv"
    if obj_path.exists():
        for row in _read_rows(obj_path, ["id", "class", "x0", "y0", "x1", "y1"]):
            r = lookup(row, "objects.csv")
            r.boxes.append((class_id(row, "objects.csv"), int(row["x0"]), int(row["y0"]),
                            int(row["x1"]), int(row["y1"])))
    return list(records.values())
