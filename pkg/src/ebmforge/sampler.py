"""Langevin sampling, replay buffer, and data-augmentation transitions.

A Langevin step is ``x' = clamp(x - step_size * grad_x E(x) + noise)`` with
Gaussian noise of standard deviation ``noise_sigma``. The two knobs are
independent; the exact overdamped discretisation uses
``noise_sigma = sqrt(2 * step_size)``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .model import grad_x

log = logging.getLogger(__name__)

__all__ = [
    "LangevinConfig",
    "ReplayBuffer",
    "AugmentationSpec",
    "ChainBatch",
    "langevin_step",
    "clamp",
    "generate_negatives",
    "buffer_update",
    "apply_augmentation",
    "sample_model",
    "write_csv",
    "write_pgm",
    "write_samples",
]


@dataclass
class LangevinConfig:
    steps: int = 20
    step_size: float = 0.01
    noise_sigma: float = 0.005
    clamp_range: tuple | None = None  # (low, high), scalars or per-coordinate arrays

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("Langevin steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @classmethod
    def image_reference(cls) -> "LangevinConfig":
        """Settings used for 32x32 natural images: 40 steps, step 500, noise 0.001."""
        return cls(steps=40, step_size=500.0, noise_sigma=0.001, clamp_range=(-1.0, 1.0))


def clamp(x: Tensor, box) -> Tensor:
    """Clip to ``box``; clipped coordinates get zero derivative."""
    if box is None:
        return x
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, float), x.shape[1:])
    hi = np.broadcast_to(np.asarray(hi, float), x.shape[1:])
    v = x.value
    inside = (v >= lo) & (v <= hi)
    if inside.all():
        return x
    clipped = np.clip(v, lo, hi)
    if not x.tracked:
        return Tensor(clipped)
    mask = inside.astype(np.float64)
    return ad.add(ad.multiply(x, Tensor(mask)), Tensor(clipped * (1.0 - mask)))


def langevin_step(model, x, step_size: float, noise_sigma: float, rng: np.random.Generator | None,
                  track: bool = False, condition=None, box=None, noise: np.ndarray | None = None):
    """One Langevin transition.

    With ``track`` the energy gradient is kept in the graph, so the result
    depends on the model parameters (and on ``x`` if ``x`` is tracked).
    Otherwise the result is detached. Returns ``(x_next, noise)``.
    """
    x = ad.constant(x)
    if noise is None:
        noise = rng.standard_normal(x.shape) * noise_sigma if noise_sigma > 0 else np.zeros(x.shape)
    if track:
        g = grad_x(model, x, condition, retain_graph=True)
        out = ad.add(ad.subtract(x, ad.multiply(g, step_size)), Tensor(noise))
        return clamp(out, box), noise
    g = grad_x(model, ad.stop_grad(x), condition)
    with np.errstate(over="ignore", invalid="ignore"):
        value = x.value - step_size * g.value + noise
    if not np.all(np.isfinite(value)):
        raise ad.NonFiniteError("Langevin step produced non-finite state")
    return clamp(Tensor(value), box), noise


class ReplayBuffer:
    """Bounded store of past negatives used to seed chains.

    Chains start from a stored item with probability ``reuse_probability`` and
    from uniform noise over ``init_box`` otherwise. Once full, new items
    overwrite uniformly random slots.
    """

    def __init__(self, capacity: int = 10000, reuse_probability: float = 0.99,
                 init_box: tuple = (-1.0, 1.0), sample_shape: tuple = (2,)):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if not 0.0 <= reuse_probability <= 1.0:
            raise ValueError("reuse_probability must lie in [0, 1]")
        self.capacity = capacity
        self.reuse_probability = reuse_probability
        self.sample_shape = tuple(sample_shape)
        self.init_box = (np.broadcast_to(np.asarray(init_box[0], float), self.sample_shape).copy(),
                         np.broadcast_to(np.asarray(init_box[1], float), self.sample_shape).copy())
        self.items = np.zeros((0, *self.sample_shape))
        self.labels = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.items)

    def uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = self.init_box
        return lo + (hi - lo) * rng.random((n, *self.sample_shape))

    def draw(self, rng: np.random.Generator, n: int, condition_dim: int | None = None, labels=None):
        """Initial chain states: ``(states, from_buffer mask, labels or None)``.

        With ``labels`` given, reused states come from stored chains carrying
        the same label, so each negative is paired with its positive's label.
        """
        fresh = self.uniform(rng, n)
        use = rng.random(n) < self.reuse_probability
        if len(self.items) == 0:
            use[:] = False
        idx = rng.integers(0, max(len(self.items), 1), size=n)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            for lab in np.unique(labels):
                rows = np.flatnonzero(labels == lab)
                pool = np.flatnonzero(self.labels == lab) if len(self.items) else np.zeros(0, np.int64)
                if len(pool) == 0:
                    use[rows] = False
                else:
                    idx[rows] = pool[idx[rows] % len(pool)]
            states = np.where(use.reshape(-1, *([1] * len(self.sample_shape))),
                              self.items[idx] if len(self.items) else fresh, fresh)
            return states, use, labels
        states = np.where(use.reshape(-1, *([1] * len(self.sample_shape))),
                          self.items[idx] if len(self.items) else fresh, fresh)
        if condition_dim is not None:
            new_labels = rng.integers(0, condition_dim, size=n)
            labels = np.where(use, self.labels[idx] if len(self.items) else new_labels, new_labels)
        return states, use, labels

    def update(self, samples, rng: np.random.Generator, labels=None) -> None:
        samples = np.asarray(samples.value if isinstance(samples, Tensor) else samples, float)
        labels = np.zeros(len(samples), dtype=np.int64) if labels is None else np.asarray(labels, np.int64)
        room = self.capacity - len(self.items)
        if room > 0:
            self.items = np.concatenate([self.items, samples[:room]])
            self.labels = np.concatenate([self.labels, labels[:room]])
        rest, rest_labels = samples[max(room, 0):], labels[max(room, 0):]
        if len(rest):
            slots = rng.integers(0, self.capacity, size=len(rest))
            self.items = self.items.copy()
            self.labels = self.labels.copy()
            for s, item, lab in zip(slots, rest, rest_labels):
                self.items[s] = item
                self.labels[s] = lab


def buffer_update(buffer: ReplayBuffer, samples, rng: np.random.Generator, labels=None) -> None:
    if isinstance(samples, Tensor) and samples.tracked:
        raise ValueError("buffer only stores detached samples")
    buffer.update(samples, rng, labels)


@dataclass
class AugmentationSpec:
    """Random transitions applied between Langevin segments.

    Grid transforms run in the fixed order flip, rescale, blur, brightness.
    Vector transforms are a Gaussian perturbation then a reflection about an
    axis through the origin at one of ``reflect_axes`` (degrees, 2-D only).
    """

    kind: str = "vector"  # "vector" | "grid"
    box: tuple | None = None
    flip_prob: float = 0.0
    rescale_prob: float = 0.0
    rescale_range: tuple = (0.5, 1.0)
    blur_prob: float = 0.0
    blur_sigma: tuple = (0.1, 1.0)
    brightness_prob: float = 0.0
    brightness_range: float = 0.2
    perturb_prob: float = 0.0
    perturb_sigma: float = 0.1
    reflect_prob: float = 0.0
    reflect_axes: tuple = (0.0, 45.0, 90.0, 135.0)

    def __post_init__(self):
        for name in ("flip_prob", "rescale_prob", "blur_prob", "brightness_prob",
                     "perturb_prob", "reflect_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.rescale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("rescale_range must be within (0, 1]")
        if self.kind not in ("vector", "grid"):
            raise ValueError("kind must be 'vector' or 'grid'")

    @property
    def active(self) -> bool:
        return any(getattr(self, n) > 0 for n in (
            "flip_prob", "rescale_prob", "blur_prob", "brightness_prob", "perturb_prob", "reflect_prob"))


def _rescale(img: np.ndarray, factor: float, rng: np.random.Generator) -> np.ndarray:
    """Random crop of relative size ``factor`` resized back bilinearly."""
    h, w = img.shape
    ch, cw = factor * (h - 1), factor * (w - 1)
    r0 = rng.uniform(0, (h - 1) - ch)
    c0 = rng.uniform(0, (w - 1) - cw)
    rows = r0 + np.linspace(0.0, ch, h)
    cols = c0 + np.linspace(0.0, cw, w)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")


def _augment_grids(spec: AugmentationSpec, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = x.copy()
    for i in range(len(out)):
        img = out[i]
        if rng.random() < spec.flip_prob:
            img = img[:, ::-1].copy()
        if rng.random() < spec.rescale_prob:
            img = _rescale(img, rng.uniform(*spec.rescale_range), rng)
        if rng.random() < spec.blur_prob:
            img = ndimage.gaussian_filter(img, rng.uniform(*spec.blur_sigma), mode="nearest")
        if rng.random() < spec.brightness_prob:
            img = img + rng.uniform(-spec.brightness_range, spec.brightness_range)
        out[i] = img
    return out


def _augment_vectors(spec: AugmentationSpec, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = x.copy()
    n = len(out)
    if spec.perturb_prob > 0:
        hit = rng.random(n) < spec.perturb_prob
        noise = rng.standard_normal(out.shape) * spec.perturb_sigma
        out = out + noise * hit[:, None]
    if spec.reflect_prob > 0:
        if out.shape[1] != 2:
            raise ValueError("reflection augmentation is defined for 2-D vectors")
        hit = rng.random(n) < spec.reflect_prob
        axis = np.deg2rad(np.asarray(spec.reflect_axes, float))[rng.integers(0, len(spec.reflect_axes), size=n)]
        c, s = np.cos(2 * axis), np.sin(2 * axis)
        rx = c * out[:, 0] + s * out[:, 1]
        ry = s * out[:, 0] - c * out[:, 1]
        out = np.where(hit[:, None], np.stack([rx, ry], axis=1), out)
    return out


def apply_augmentation(spec: AugmentationSpec | None, x, rng: np.random.Generator) -> Tensor:
    """Randomly augment a batch; the result is detached and clamped to the box."""
    v = np.asarray(x.value if isinstance(x, Tensor) else x, float)
    if spec is None or not spec.active:
        return Tensor(v)
    if spec.kind == "grid":
        if v.ndim != 3:
            raise ad.ShapeError("grid augmentation expects (batch, h, w)")
        v = _augment_grids(spec, v, rng)
    else:
        if v.ndim != 2:
            raise ad.ShapeError("vector augmentation expects (batch, dim)")
        v = _augment_vectors(spec, v, rng)
    if spec.box is not None:
        v = np.clip(v, spec.box[0], spec.box[1])
    return Tensor(v)


@dataclass
class ChainBatch:
    """Negatives from one chain batch in a detached and a tracked variant."""

    detached: Tensor
    tracked: Tensor
    noise_record: np.ndarray
    conditions: np.ndarray | None = None
    from_buffer: np.ndarray | None = field(default=None, repr=False)


def generate_negatives(model, buffer: ReplayBuffer, aug: AugmentationSpec | None, cfg: LangevinConfig,
                       rng: np.random.Generator, batch_size: int, chain_init: str = "buffer",
                       condition_dim: int | None = None, labels=None) -> ChainBatch:
    """Seed chains, augment once, then run ``cfg.steps`` Langevin steps.

    ``labels`` fixes the condition of each chain; otherwise conditional chains
    keep their stored labels or draw fresh ones.

    The state is detached before every step, and only the final step keeps its
    graph, so gradients through ``tracked`` reach the model parameters through
    that single step. The buffer is left untouched.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if chain_init == "buffer":
        x0, used, labels = buffer.draw(rng, batch_size, condition_dim, labels)
    elif chain_init == "noise":
        x0 = buffer.uniform(rng, batch_size)
        used = np.zeros(batch_size, dtype=bool)
        if labels is None and condition_dim is not None:
            labels = rng.integers(0, condition_dim, size=batch_size)
    else:
        raise ValueError(f"unknown chain_init {chain_init!r}")
    x = apply_augmentation(aug, x0, rng)
    for _ in range(cfg.steps - 1):
        x, _ = langevin_step(model, x, cfg.step_size, cfg.noise_sigma, rng,
                             condition=labels, box=cfg.clamp_range)
    tracked, noise = langevin_step(model, ad.stop_grad(x), cfg.step_size, cfg.noise_sigma, rng,
                                   track=True, condition=labels, box=cfg.clamp_range)
    return ChainBatch(ad.stop_grad(tracked), tracked, noise, labels, used)


def sample_model(model, aug: AugmentationSpec | None, cfg: LangevinConfig, rounds: int,
                 rng: np.random.Generator, x0=None, batch_size: int = 64,
                 init_box: tuple = (-1.0, 1.0), sample_shape: tuple | None = None,
                 condition=None) -> Tensor:
    """Generate samples by ``rounds`` of (augment, then ``cfg.steps`` Langevin steps)."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if x0 is None:
        shape = tuple(sample_shape) if sample_shape is not None else tuple(model.input_shape)
        lo = np.broadcast_to(np.asarray(init_box[0], float), shape)
        hi = np.broadcast_to(np.asarray(init_box[1], float), shape)
        x = Tensor(lo + (hi - lo) * rng.random((batch_size, *shape)))
    else:
        x = ad.stop_grad(ad.constant(x0))
    for _ in range(rounds):
        x = apply_augmentation(aug, x, rng)
        for _ in range(cfg.steps):
            x, _ = langevin_step(model, x, cfg.step_size, cfg.noise_sigma, rng,
                                 condition=condition, box=cfg.clamp_range)
    return x


def write_csv(path, samples) -> None:
    v = np.asarray(samples.value if isinstance(samples, Tensor) else samples, float)
    v = v.reshape(len(v), -1)
    header = ",".join(f"dim{i}" for i in range(v.shape[1]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in v:
            fh.write(",".join(repr(float(a)) for a in row) + "\n")


def write_pgm(path, grid, box=(-1.0, 1.0)) -> None:
    """Binary P5 greyscale image, values mapped linearly from ``box`` to 0..255."""
    g = np.asarray(grid.value if isinstance(grid, Tensor) else grid, float)
    if g.ndim != 2:
        raise ad.ShapeError("PGM output needs a single 2-D grid")
    lo, hi = float(np.min(box[0])), float(np.max(box[1]))
    px = np.clip(np.rint((g - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def write_samples(outdir, samples, box=(-1.0, 1.0), stem: str = "samples") -> list[str]:
    """CSV for vector batches, one PGM per grid for grid batches."""
    v = np.asarray(samples.value if isinstance(samples, Tensor) else samples, float)
    os.makedirs(outdir, exist_ok=True)
    if v.ndim == 2:
        path = os.path.join(outdir, f"{stem}.csv")
        write_csv(path, v)
        return [path]
    paths = []
    for i, g in enumerate(v):
        path = os.path.join(outdir, f"{stem}_{i:04d}.pgm")
        write_pgm(path, g, box)
        paths.append(path)
    return paths
