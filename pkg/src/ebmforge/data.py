"""Procedural desk-scale datasets and IDX image ingestion."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset",
    "IdxFormatError",
    "MIXTURES",
    "make_mixture",
    "make_shapes",
    "load_idx",
    "eight_gaussian_centers",
    "make_dataset",
    "DATASETS",
    "ATTRIBUTE_PREDICATES",
]

MIXTURES = ("eight-gaussians", "rotated-gaussians", "two-rings", "checkerboard", "pinwheel")


DATASETS = MIXTURES + ("shapes8", "shapes16", "idx")

# half-plane attributes of 2-D data, as predicates over a batch
ATTRIBUTE_PREDICATES = {
    "x0_pos": lambda v: np.asarray(v)[:, 0] > 0,
    "x1_pos": lambda v: np.asarray(v)[:, 1] > 0,
}


class IdxFormatError(ValueError):
    """File exists but is not a well-formed IDX image file."""


@dataclass
class Dataset:
    kind: str  # "vector-2d" | "grid"
    samples: np.ndarray
    labels: np.ndarray | None = None
    box: tuple = (None, None)  # per-coordinate (low, high)
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.samples):
            raise ValueError("labels length does not match samples")
        for name, a in self.attributes.items():
            if len(a) != len(self.samples):
                raise ValueError(f"attribute {name!r} length does not match samples")

    def __len__(self):
        return len(self.samples)

    @property
    def sample_shape(self) -> tuple:
        return self.samples.shape[1:]

    def batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self.samples), size=size)
        return self.samples[idx], idx

    def expanded_box(self, margin: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
        """Bounding box grown by ``margin`` of its extent on every side."""
        lo, hi = np.asarray(self.box[0], float), np.asarray(self.box[1], float)
        pad = margin * (hi - lo)
        return lo - pad, hi + pad


def eight_gaussian_centers(radius: float = 2.0, offset_deg: float = 0.0) -> np.ndarray:
    """Centers at angles ``offset_deg + k * 45`` degrees on a circle."""
    angles = np.deg2rad(offset_deg) + np.arange(8) * (np.pi / 4)
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _half_planes(x: np.ndarray) -> dict:
    return {name: pred(x).astype(np.int64) for name, pred in ATTRIBUTE_PREDICATES.items()}


def make_mixture(name: str, n: int, seed: int) -> Dataset:
    """2-D toy density. ``labels`` hold the component (ring, quadrant, arm)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if name in ("eight-gaussians", "rotated-gaussians"):
        # the rotated variant keeps every mode off the coordinate axes
        offset = 22.5 if name == "rotated-gaussians" else 0.0
        labels = rng.integers(0, 8, size=n)
        x = eight_gaussian_centers(offset_deg=offset)[labels] + 0.1 * rng.standard_normal((n, 2))
    elif name == "two-rings":
        labels = rng.integers(0, 2, size=n)
        r = np.where(labels == 0, 1.0, 2.0) + 0.05 * rng.standard_normal(n)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    elif name == "checkerboard":
        x1 = rng.uniform(-2, 2, size=n)
        x2 = rng.uniform(0, 1, size=n) - 2 * rng.integers(0, 2, size=n)
        x2 = x2 + np.floor(x1) % 2
        x = np.stack([x1, x2], axis=1)
        labels = 2 * (x[:, 1] > 0) + (x[:, 0] > 0)
    elif name == "pinwheel":
        arms, rate = 5, 0.25
        labels = rng.integers(0, arms, size=n)
        feats = rng.standard_normal((n, 2)) * np.array([0.3, 0.05]) + np.array([1.0, 0.0])
        angles = labels * (2 * np.pi / arms) + rate * np.exp(feats[:, 0])
        c, s = np.cos(angles), np.sin(angles)
        x = 2.0 * np.stack([c * feats[:, 0] - s * feats[:, 1], s * feats[:, 0] + c * feats[:, 1]], axis=1)
    else:
        raise ValueError(f"unknown mixture {name!r}; choose from {MIXTURES}")
    labels = np.asarray(labels, dtype=np.int64)
    box = (x.min(axis=0), x.max(axis=0))
    return Dataset("vector-2d", x, labels, box, {"component": labels, **_half_planes(x)})


def make_shapes(n: int, size: int, seed: int) -> Dataset:
    """Grids holding exactly one bar or square, placed wholly in the left or right half.

    Intensity is uniform in [0.5, 1] on a zero background, then mapped to [-1, 1].
    Attributes: ``shape`` (0 bar, 1 square) and ``side`` (0 left, 1 right).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if size % 4:
        raise ValueError(f"grid size {size} must be divisible by 4")
    rng = np.random.default_rng(seed)
    half = size // 2
    grids = np.zeros((n, size, size))
    shape = rng.integers(0, 2, size=n)
    side = rng.integers(0, 2, size=n)
    for i in range(n):
        if shape[i] == 0:
            if rng.random() < 0.5:  # vertical bar
                hgt, wid = int(rng.integers(half, size + 1)), 1
            else:
                hgt, wid = 1, int(rng.integers(2, half + 1))
        else:
            hgt = wid = int(rng.integers(2, half + 1))
        r0 = int(rng.integers(0, size - hgt + 1))
        c0 = int(rng.integers(0, half - wid + 1)) + side[i] * half
        grids[i, r0:r0 + hgt, c0:c0 + wid] = rng.uniform(0.5, 1.0)
    grids = grids * 2.0 - 1.0
    lo, hi = np.full((size, size), -1.0), np.full((size, size), 1.0)
    labels = (2 * shape + side).astype(np.int64)
    return Dataset("grid", grids, labels, (lo, hi),
                   {"shape": shape.astype(np.int64), "side": side.astype(np.int64)})


def load_idx(path: str, crop: int | None = None) -> Dataset:
    """Read an IDX3 unsigned-byte image file, scaled to [-1, 1].

    Images are center-cropped to ``crop`` (default: the largest size divisible
    by 4 that fits).
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"IDX file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 0x00000803:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x00000803")
    need = count * rows * cols
    payload = raw[16:]
    if len(payload) < need:
        raise IdxFormatError(f"{path}: truncated payload, {len(payload)} of {need} bytes")
    imgs = np.frombuffer(payload[:need], dtype=np.uint8).reshape(count, rows, cols)
    imgs = imgs.astype(np.float64) / 255.0 * 2.0 - 1.0
    target = crop if crop is not None else min(rows, cols) // 4 * 4
    if target % 4 or target < 4 or target > min(rows, cols):
        raise ValueError(f"crop size {target} must be a positive multiple of 4 within {rows}x{cols}")
    r0, c0 = (rows - target) // 2, (cols - target) // 2
    imgs = imgs[:, r0:r0 + target, c0:c0 + target].copy()
    lo, hi = np.full((target, target), -1.0), np.full((target, target), 1.0)
    return Dataset("grid", imgs, None, (lo, hi))


def make_dataset(name: str, n: int, seed: int, path: str = "") -> Dataset:
    """Resolve a dataset id: a mixture name, ``shapes8``/``shapes16``, or ``idx``."""
    if name in MIXTURES:
        return make_mixture(name, n, seed)
    if name in ("shapes8", "shapes16"):
        return make_shapes(n, int(name[6:]), seed)
    if name == "idx":
        return load_idx(path)
    raise ValueError(f"unknown dataset {name!r}")
