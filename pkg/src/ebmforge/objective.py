"""Training losses for improved contrastive divergence.

``cd_loss``      mean E(x+) - mean E(x-), with negatives treated as constants
``kl_opt_loss``  energy of the tracked final Langevin state under frozen theta;
                 its theta-gradient flows only through the sampler step
``ent_loss``     -log nearest-neighbour distance to recent negatives
``full_loss``    weighted sum, with per-term parameter-gradient norms
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .model import frozen_copy
from .sampler import ChainBatch

log = logging.getLogger(__name__)

NN_FLOOR = 1e-12

__all__ = [
    "NN_FLOOR",
    "LossBreakdown",
    "EntropyContext",
    "cd_loss",
    "kl_opt_loss",
    "knn_entropy",
    "nn_distances",
    "ent_loss",
    "full_loss",
]


@dataclass
class LossBreakdown:
    cd: float
    kl_opt: float
    kl_ent: float
    total: float
    grad_norm_cd: float
    grad_norm_kl: float
    energy_pos: float = 0.0
    energy_neg: float = 0.0
    grads: list = field(default_factory=list, repr=False)


class EntropyContext:
    """FIFO window of the most recent detached negatives (default 100)."""

    def __init__(self, size: int = 100):
        if size < 1:
            raise ValueError("reference window must hold at least one sample")
        self.size = size
        self._items: deque = deque(maxlen=size)

    def __len__(self):
        return len(self._items)

    @property
    def active(self) -> bool:
        return len(self._items) >= 2

    @property
    def reference(self) -> np.ndarray:
        return np.stack(list(self._items)) if self._items else np.zeros((0,))

    def update(self, samples) -> None:
        v = samples.value if isinstance(samples, Tensor) else np.asarray(samples, float)
        for row in v:
            self._items.append(np.array(row, dtype=float))

    def load(self, items: np.ndarray) -> None:
        self._items.clear()
        self.update(items)


def _flat(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, float)
    return x.reshape(len(x), -1) if x.ndim > 1 else x.reshape(-1, 1)


def cd_loss(model, x_pos, x_neg, cond_pos=None, cond_neg=None) -> Tensor:
    """Mean energy of positives minus mean energy of (detached) negatives."""
    x_pos, x_neg = ad.constant(x_pos), ad.constant(x_neg)
    if x_neg.tracked:
        raise ValueError("negatives must be detached for the contrastive term")
    if len(x_pos) == 0 or len(x_neg) == 0:
        raise ValueError("empty batch")
    return ad.subtract(ad.mean(model(x_pos, cond_pos)), ad.mean(model(x_neg, cond_neg)))


def kl_opt_loss(model, chain: ChainBatch) -> Tensor:
    """Mean frozen-parameter energy at the tracked final Langevin state."""
    if not chain.tracked.tracked:
        raise ValueError("chain carries no graph through its final step")
    return ad.mean(frozen_copy(model)(chain.tracked, chain.conditions))


def nn_distances(x: np.ndarray, reference: np.ndarray | None = None) -> np.ndarray:
    """L2 distance from each row of ``x`` to its nearest neighbour.

    Without ``reference`` the search runs within ``x`` and excludes each
    point itself.
    """
    x = _flat(x)
    if reference is None:
        d, _ = cKDTree(x).query(x, k=2)
        return d[:, 1]
    d, _ = cKDTree(_flat(reference)).query(x, k=1)
    return d


def knn_entropy(X) -> float:
    """Nearest-neighbour entropy estimate ``mean(ln(n * NN(x_i, X)))``.

    No bias-correction constants are added. Zero distances from duplicate
    points are floored at ``NN_FLOOR`` with a warning.
    """
    X = _flat(X.value if isinstance(X, Tensor) else X)
    n = len(X)
    if n < 2:
        raise ValueError("entropy estimate needs at least two points")
    d = nn_distances(X)
    if np.any(d < NN_FLOOR):
        log.warning("knn_entropy: %d duplicate points, distance floored", int(np.sum(d < NN_FLOOR)))
        d = np.maximum(d, NN_FLOOR)
    return float(np.mean(np.log(n * d)))


def ent_loss(x_tracked: Tensor, ctx) -> Tensor:
    """Mean of -ln(distance to nearest reference sample), floored at ``NN_FLOOR``.

    ``ctx`` is an :class:`EntropyContext` or an array of reference samples.
    The neighbour is selected by value; the distance to it stays in the graph.
    """
    ref = ctx.reference if isinstance(ctx, EntropyContext) else np.asarray(ctx, float)
    if len(ref) == 0:
        raise ValueError("empty reference set")
    x_tracked = ad.constant(x_tracked)
    n = len(x_tracked)
    flat = ad.reshape(x_tracked, (n, int(np.prod(x_tracked.shape[1:]))))
    ref = _flat(ref)
    _, idx = cKDTree(ref).query(flat.value, k=1)
    diff_val = flat.value - ref[idx]
    dist_val = np.sqrt(np.sum(diff_val * diff_val, axis=1))
    small = dist_val < NN_FLOOR
    diff = ad.subtract(flat, Tensor(ref[idx]))
    if small.any():
        log.debug("ent_loss: %d samples coincide with reference points", int(small.sum()))
        keep = (~small).astype(float)[:, None] * np.ones(diff.shape)
        offset = np.zeros(diff.shape)
        offset[small, 0] = NN_FLOOR
        diff = ad.add(ad.multiply(diff, Tensor(keep)), Tensor(offset))
    dist = ad.l2_norm_rows(diff)
    return ad.negate(ad.mean(ad.log(dist)))


def _norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g.value * g.value)) for g in grads)))


def full_loss(model, x_pos, chain: ChainBatch, ctx: EntropyContext | None,
              weight_opt: float = 1.0, weight_ent: float = 1.0, cond_pos=None) -> LossBreakdown:
    """Contrastive loss plus weighted KL terms, with theta-gradients.

    ``model`` must carry tracked parameter leaves (see ``tracked_copy``).
    The contrastive and KL gradients come from separate backward passes so
    their norms can be reported; ``grads`` holds their sum.
    """
    params = model.parameters()
    x_neg = chain.detached
    e_pos = model(ad.constant(x_pos), cond_pos)
    e_neg = model(x_neg, chain.conditions)
    m_pos, m_neg = ad.mean(e_pos), ad.mean(e_neg)
    cd = ad.subtract(m_pos, m_neg)
    g_cd = ad.grad(cd, params)

    use_ent = ctx is not None and ctx.active
    kl_opt = kl_opt_loss(model, chain) if weight_opt != 0 else None
    kl_ent = ent_loss(chain.tracked, ctx) if (weight_ent != 0 and use_ent) else None

    kl_opt_val = kl_opt.item() if kl_opt is not None else m_neg.item()
    if kl_ent is not None:
        kl_ent_val = kl_ent.item()
    elif use_ent:
        d = np.maximum(nn_distances(x_neg.value, ctx.reference), NN_FLOOR)
        kl_ent_val = float(np.mean(-np.log(d)))
    else:
        kl_ent_val = 0.0

    kl_total = None
    if kl_opt is not None:
        kl_total = ad.multiply(kl_opt, weight_opt)
    if kl_ent is not None:
        term = ad.multiply(kl_ent, weight_ent)
        kl_total = term if kl_total is None else ad.add(kl_total, term)
    if kl_total is not None:
        g_kl = ad.grad(kl_total, params)
    else:
        g_kl = [Tensor(np.zeros(p.shape)) for p in params]

    grads = [Tensor(a.value + b.value) for a, b in zip(g_cd, g_kl)]
    cd_val = cd.item()
    total = cd_val + weight_opt * kl_opt_val + weight_ent * (kl_ent_val if use_ent else 0.0)
    return LossBreakdown(
        cd=cd_val, kl_opt=kl_opt_val, kl_ent=kl_ent_val, total=total,
        grad_norm_cd=_norm(g_cd), grad_norm_kl=_norm(g_kl),
        energy_pos=m_pos.item(), energy_neg=m_neg.item(),
        grads=grads,
    )
