"""Verification oracles and evaluation metrics.

Finite-difference gradients, truncated vs fully unrolled sampler gradients,
Langevin calibration on a Gaussian, AUROC, mode coverage and composition
satisfaction.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor
from .model import FunctionEnergy, frozen_copy, grad_x, tracked_copy
from .sampler import langevin_step

__all__ = [
    "FDOracleConfig",
    "OODReport",
    "fd_gradient",
    "relative_error",
    "kl_opt_fd_gradient",
    "kl_opt_autodiff_gradient",
    "compare_truncation",
    "gaussian_calibration",
    "auroc",
    "ood_report",
    "energies",
    "mode_coverage",
    "composition_satisfaction",
    "write_ood_report",
]


@dataclass
class FDOracleConfig:
    step: float = 1e-5
    scheme: str = "central"
    rtol_first: float = 1e-6
    rtol_second: float = 1e-4

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("finite-difference step must be positive")
        if self.scheme != "central":
            raise ValueError("only central differences are supported")


def fd_gradient(f: Callable, params: Sequence, cfg: FDOracleConfig | None = None) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f(list_of_arrays)``."""
    cfg = cfg or FDOracleConfig()
    h = cfg.step
    base = [np.array(p.value if isinstance(p, Tensor) else p, dtype=float) for p in params]
    out = []
    for i, p in enumerate(base):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(base))
            flat[j] = orig - h
            fm = float(f(base))
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a - b| / max(max|b|, floor) over concatenated arrays."""
    a = np.concatenate([np.ravel(x.value if isinstance(x, Tensor) else x) for x in a]) \
        if isinstance(a, (list, tuple)) else np.ravel(a)
    b = np.concatenate([np.ravel(x.value if isinstance(x, Tensor) else x) for x in b]) \
        if isinstance(b, (list, tuple)) else np.ravel(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def _tensors(arrays):
    return [Tensor(a) for a in arrays]


def kl_opt_fd_gradient(model, x, step_size: float, noise, condition=None, box=None,
                       cfg: FDOracleConfig | None = None) -> list[np.ndarray]:
    """FD oracle for the sampler-energy gradient.

    Only the sampling-side parameters (inside the Langevin step) are perturbed;
    the energy evaluated at the stepped state keeps the unperturbed values.
    """
    frozen = frozen_copy(model)
    x = np.asarray(x.value if isinstance(x, Tensor) else x, float)

    def f(theta):
        m = model.with_parameters(_tensors(theta))
        g = grad_x(m, Tensor(x), condition)
        nxt = x - step_size * g.value + noise
        if box is not None:
            nxt = np.clip(nxt, box[0], box[1])
        return float(np.mean(frozen(Tensor(nxt), condition).value))

    return fd_gradient(f, model.parameters(), cfg)


def kl_opt_autodiff_gradient(model, x, step_size: float, noise, condition=None, box=None) -> list[Tensor]:
    live = tracked_copy(model)
    nxt, _ = langevin_step(live, ad.stop_grad(ad.constant(x)), step_size, 0.0, None, track=True,
                           condition=condition, box=box, noise=np.asarray(noise, float))
    loss = ad.mean(frozen_copy(live)(nxt, condition))
    return ad.grad(loss, live.parameters())


def _unrolled_grad(model, x0, step_size, noises, truncate: bool, condition=None, box=None):
    live = tracked_copy(model)
    x = ad.constant(x0)
    for k, w in enumerate(noises):
        last = k == len(noises) - 1
        if truncate:
            x = ad.stop_grad(x)
        x, _ = langevin_step(live, x, step_size, 0.0, None, track=truncate is False or last,
                             condition=condition, box=box, noise=w)
    loss = ad.mean(frozen_copy(live)(x, condition))
    if not loss.tracked:
        return [np.zeros(p.shape) for p in live.parameters()]
    return [g.value for g in ad.grad(loss, live.parameters())]


def compare_truncation(model, x0, steps: int, step_size: float, noises=None, rng=None,
                       noise_sigma: float = 0.0, condition=None, box=None) -> dict:
    """Compare last-step-only and full backprop through ``steps`` Langevin steps.

    Both variants share the initial states and noise. Returns cosine similarity
    and norm ratio (truncated / full) of the concatenated parameter gradients.
    """
    if not 1 <= steps <= 3:
        raise ValueError("full unrolling is capped at 3 steps")
    x0 = np.asarray(x0.value if isinstance(x0, Tensor) else x0, float)
    if noises is None:
        rng = rng or np.random.default_rng(0)
        noises = [rng.standard_normal(x0.shape) * noise_sigma for _ in range(steps)]
    noises = [np.asarray(w, float) for w in noises]
    if len(noises) != steps:
        raise ValueError("need one noise array per step")
    g_trunc = _unrolled_grad(model, x0, step_size, noises, True, condition, box)
    g_full = _unrolled_grad(model, x0, step_size, noises, False, condition, box)
    a = np.concatenate([g.ravel() for g in g_trunc])
    b = np.concatenate([g.ravel() for g in g_full])
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return {"steps": steps, "cosine": float("nan"), "norm_ratio": float("nan"),
                "degenerate": True, "norm_truncated": na, "norm_full": nb,
                "grad_truncated": g_trunc, "grad_full": g_full}
    if np.array_equal(a, b):
        cosine, ratio = 1.0, 1.0
    else:
        cosine, ratio = float(np.dot(a, b) / (na * nb)), na / nb
    return {"steps": steps, "cosine": cosine, "norm_ratio": ratio, "degenerate": False,
            "norm_truncated": na, "norm_full": nb, "grad_truncated": g_trunc, "grad_full": g_full}


def _half_sq_norm(params, x):
    return ad.multiply(ad.sum(ad.square(x), axis=1), 0.5)


def gaussian_calibration(step_size: float = 1e-3, steps: int = 100_000, dim: int = 2, chains: int = 128,
                         seed: int = 0, burn_in: int | None = None, thin: int = 50) -> np.ndarray:
    """Per-coordinate variance of Langevin samples from E(x) = |x|^2 / 2.

    Uses the exact-discretisation noise ``sqrt(2 * step_size)``; the target is
    the standard normal, so the variances should be close to 1.
    """
    rng = np.random.default_rng(seed)
    model = FunctionEnergy(_half_sq_norm, (), (dim,))
    sigma = np.sqrt(2 * step_size)
    burn_in = int(5 / step_size) if burn_in is None else burn_in
    x = Tensor(rng.uniform(-1, 1, size=(chains, dim)))
    kept = []
    for k in range(steps):
        x, _ = langevin_step(model, x, step_size, sigma, rng)
        if k >= burn_in and (k - burn_in) % thin == 0:
            kept.append(x.value)
    s = np.concatenate(kept)
    return s.var(axis=0)


def auroc(scores_in, scores_out) -> float:
    """P(out-score > in-score) with ties counted half (Mann-Whitney U / n_in n_out)."""
    a = np.asarray(scores_in, float).ravel()
    b = np.asarray(scores_out, float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs non-empty score sets")
    ranks = rankdata(np.concatenate([a, b]))
    u = float(np.sum(ranks[a.size:])) - b.size * (b.size + 1) / 2.0
    return u / (a.size * b.size)


def energies(model, x, condition=None, batch: int = 1024) -> np.ndarray:
    x = np.asarray(x.value if isinstance(x, Tensor) else x, float)
    out = []
    with ad.no_grad():
        for i in range(0, len(x), batch):
            out.append(model(Tensor(x[i:i + batch]), condition).value)
    return np.concatenate(out)


@dataclass
class OODReport:
    auroc: float
    in_mean: float
    in_std: float
    out_mean: float
    out_std: float
    n_in: int
    n_out: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def ood_report(model, x_in, x_out, condition=None) -> OODReport:
    """Score by energy (higher energy means more out-of-distribution)."""
    e_in, e_out = energies(model, x_in, condition), energies(model, x_out, condition)
    return OODReport(auroc(e_in, e_out), float(e_in.mean()), float(e_in.std()),
                     float(e_out.mean()), float(e_out.std()), int(e_in.size), int(e_out.size))


def write_ood_report(outdir, report: OODReport, scores_in=None, scores_out=None) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "ood_report.jsonl"), "a", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(os.path.join(outdir, "ood_summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"AUROC {report.auroc:.4f}\n")
        fh.write(f"in-distribution energy  mean {report.in_mean:.4f} std {report.in_std:.4f} n {report.n_in}\n")
        fh.write(f"out-distribution energy mean {report.out_mean:.4f} std {report.out_std:.4f} n {report.n_out}\n")
    if scores_in is not None and scores_out is not None:
        with open(os.path.join(outdir, "ood_scores.csv"), "w", encoding="utf-8") as fh:
            fh.write("split,energy\n")
            for s in scores_in:
                fh.write(f"in,{float(s)!r}\n")
            for s in scores_out:
                fh.write(f"out,{float(s)!r}\n")


def mode_coverage(samples, centers, radius: float, coverage_fraction: float = 0.02) -> dict:
    """Assign samples to the nearest center within ``radius``; count covered modes.

    A mode is covered when it receives at least ``coverage_fraction`` of all
    samples.
    """
    centers = np.asarray(centers, float)
    if len(centers) == 0:
        raise ValueError("need at least one center")
    s = np.asarray(samples.value if isinstance(samples, Tensor) else samples, float).reshape(-1, centers.shape[1]) \
        if np.size(samples) else np.zeros((0, centers.shape[1]))
    counts = np.zeros(len(centers), dtype=np.int64)
    if len(s):
        d = np.linalg.norm(s[:, None, :] - centers[None, :, :], axis=2)
        nearest = d.argmin(axis=1)
        ok = d[np.arange(len(s)), nearest] <= radius
        counts = np.bincount(nearest[ok], minlength=len(centers))
    covered = int(np.sum(counts >= coverage_fraction * len(s))) if len(s) else 0
    return {"counts": counts, "covered": covered, "unassigned": int(len(s) - counts.sum())}


def composition_satisfaction(samples, predicates: Sequence[Callable]) -> float:
    """Fraction of samples satisfying every predicate (each maps a batch to booleans)."""
    s = np.asarray(samples.value if isinstance(samples, Tensor) else samples, float)
    if len(s) == 0:
        return 0.0
    ok = np.ones(len(s), dtype=bool)
    for p in predicates:
        ok &= np.asarray(p(s), dtype=bool)
    return float(ok.mean())
