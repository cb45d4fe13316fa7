"""Acceptance checks shared by ``ebmforge verify`` and the test suite.

Each check returns a :class:`CheckResult`. Checks that need a trained model
share runs through a :class:`VerifyContext`, so the stability, coverage and
OOD checks train on the mixture only once.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import eight_gaussian_centers, make_mixture
from .evaluation import (
    auroc,
    compare_truncation,
    composition_satisfaction,
    energies,
    fd_gradient,
    gaussian_calibration,
    kl_opt_autodiff_gradient,
    kl_opt_fd_gradient,
    mode_coverage,
    relative_error,
)
from .model import ComposedEnergy, FunctionEnergy, grad_x, init_conditional, init_multiscale, init_params
from .objective import cd_loss, ent_loss, kl_opt_loss, knn_entropy
from .sampler import ChainBatch, langevin_step, sample_model
from .trainer import parse_config, read_metrics, train

__all__ = [
    "CheckResult",
    "VerifyContext",
    "CHECKS",
    "QUICK",
    "STABILITY_CONFIG",
    "BASELINE_OVERRIDES",
    "COMPOSITION_CONFIG",
    "run_checks",
]

# Desk-scale training setup for the mixture checks. The learning rate and EMA
# decay are faster than the library defaults so 5000 iterations suffice.
STABILITY_CONFIG = """\
dataset = eight-gaussians
iterations = 5000
optim.lr = 0.001
ema.decay = 0.999
seed = 0
aug.perturb_prob = 0.5
aug.reflect_prob = 0.3
metrics.wallclock = false
"""

# contrastive-only baseline: no sampler-energy or entropy terms, no augmentation
BASELINE_OVERRIDES = ("loss.weight_opt=0", "loss.weight_ent=0", "aug.perturb_prob=0",
                      "aug.reflect_prob=0", "diverge.halt=false")

# Half-plane conditionals on a rotated mixture, so no mode straddles an axis.
COMPOSITION_CONFIG = """\
dataset = rotated-gaussians
iterations = 3000
optim.lr = 0.001
ema.decay = 0.999
aug.perturb_prob = 0.5
metrics.wallclock = false
"""

SAMPLE_ROUNDS = 10
SAMPLE_STEPS = 20  # augmentation cadence at sampling time
SAMPLE_COUNT = 1000


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


@dataclass
class VerifyContext:
    outdir: str = ""
    cache: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.outdir:
            self.outdir = tempfile.mkdtemp(prefix="ebmforge-verify-")
        os.makedirs(self.outdir, exist_ok=True)

    def run(self, key: str, text: str, overrides=()):
        if key not in self.cache:
            cfg = parse_config(text, overrides)
            self.cache[key] = (cfg, train(cfg, os.path.join(self.outdir, key)))
        return self.cache[key]


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


# 1. gradient oracles

def _primitive_cases(rng):
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    nrm = lambda *s: rng.normal(size=s)  # noqa: E731
    return [
        ("add", [nrm(3, 4), nrm(4)], ad.add),
        ("subtract", [nrm(5), nrm(5)], ad.subtract),
        ("multiply", [nrm(2, 3), nrm(2, 3)], ad.multiply),
        ("matmul", [nrm(3, 4), nrm(4, 2)], ad.matmul),
        ("sum", [nrm(3, 4)], lambda a: ad.sum(a, axis=0)),
        ("mean", [nrm(3, 4)], ad.mean),
        ("square", [nrm(6)], ad.square),
        ("sqrt", [pos(6)], ad.sqrt),
        ("exp", [nrm(6)], ad.exp),
        ("log", [pos(6)], ad.log),
        ("swish", [2 * nrm(3, 5)], ad.swish),
        ("broadcast", [nrm(3, 1)], lambda a: ad.broadcast(a, (3, 4))),
        ("reshape", [nrm(3, 4)], lambda a: ad.reshape(a, (2, 6))),
        ("concat", [nrm(2, 3), nrm(2, 2)], lambda a, b: ad.concat([a, b], axis=1)),
        ("slice", [nrm(4, 5)], lambda a: ad.slice(a, (slice(1, 3), slice(0, 5, 2)))),
        ("avg-pool-2x2", [nrm(2, 4, 6)], ad.avg_pool_2x2),
        ("l2-norm-rows", [nrm(4, 3) + 0.5], ad.l2_norm_rows),
    ]


def check_gradient_oracles() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst_prim = 0.0
    for _, inputs, fn in _primitive_cases(rng):
        with ad.no_grad():
            w = rng.normal(size=fn(*[Tensor(a) for a in inputs]).shape)
        f = lambda *ts: ad.sum(ad.multiply(fn(*ts), Tensor(w)))  # noqa: E731
        leaves = [ad.tensor(a, requires_grad=True) for a in inputs]
        auto = ad.grad(f(*leaves), leaves)
        num = fd_gradient(lambda arrs: f(*[Tensor(a) for a in arrs]).item(), inputs)
        worst_prim = max(worst_prim, relative_error(auto, num))

    worst_gx = 0.0
    models = [(init_params(1, [3, 16, 16, 1]), rng.normal(size=(4, 3)), None),
              (init_multiscale(2, (4, 4), [8], (1, 2)), rng.normal(size=(2, 4, 4)), None),
              (init_conditional(3, 2, [8], 3), rng.normal(size=(4, 2)), np.array([0, 2, 1, 1]))]
    for m, x, c in models:
        auto = grad_x(m, x, c).value
        num = fd_gradient(lambda a: float(np.sum(m(Tensor(a[0]), c).value)), [x])[0]
        worst_gx = max(worst_gx, relative_error(auto, num))

    worst_opt = 0.0
    for seed in range(3):
        r = np.random.default_rng(100 + seed)
        m = init_params(seed, [2, 8, 8, 1])
        x, w = r.normal(size=(4, 2)), 0.01 * r.normal(size=(4, 2))
        worst_opt = max(worst_opt, relative_error(kl_opt_autodiff_gradient(m, x, 0.1, w),
                                                  kl_opt_fd_gradient(m, x, 0.1, w)))

    theta = ad.tensor(1.0, requires_grad=True)
    toy = FunctionEnergy(lambda p, x: ad.multiply(ad.sum(ad.square(x), axis=1), ad.multiply(p[0], 0.5)),
                         (theta,), (1,))
    tr, _ = langevin_step(toy, Tensor([[1.0]]), 0.1, 0.0, None, track=True, noise=np.zeros((1, 1)))
    (g,) = ad.grad(kl_opt_loss(toy, ChainBatch(ad.stop_grad(tr), tr, np.zeros((1, 1)))), [theta])
    toy_err = abs(g.item() + 0.09)

    ok = worst_prim < 1e-6 and worst_gx < 1e-6 and worst_opt < 1e-4 and toy_err < 1e-10
    return ok, (f"primitives {worst_prim:.1e}, grad_x {worst_gx:.1e}, sampler term {worst_opt:.1e}, "
                f"toy {g.item():.12f}")


# 2. gradient decomposition on a two-parameter model

def check_gradient_decomposition() -> tuple[bool, str]:
    """E(x) = a x^2 / 2 + b x; every term assembled independently of autodiff.

    The contrastive terms use their closed forms; the sampler-energy and
    entropy terms use central differences of the one-step map with the
    evaluation-side parameters frozen.
    """
    rng = np.random.default_rng(0)
    a0, b0, lam = 0.8, -0.3, 0.1
    x_pos = rng.normal(1.0, 0.5, size=(8, 1))
    x_prev = rng.normal(0.0, 1.0, size=(8, 1))  # state before the last step
    noise = 0.05 * rng.normal(size=(8, 1))
    ref = rng.normal(size=(12, 1))

    def fn(p, x):
        return ad.add(ad.multiply(ad.sum(ad.square(x), axis=1), ad.multiply(p[0], 0.5)),
                      ad.multiply(ad.sum(x, axis=1), p[1]))

    params = [ad.tensor(a0, requires_grad=True), ad.tensor(b0, requires_grad=True)]
    model = FunctionEnergy(fn, tuple(params), (1,))
    tr, _ = langevin_step(model, Tensor(x_prev), lam, 0.0, None, track=True, noise=noise)
    chain = ChainBatch(ad.stop_grad(tr), tr, noise)
    auto_cd = [g.value for g in ad.grad(cd_loss(model, x_pos, chain.detached), params)]
    auto_opt = [g.value for g in ad.grad(kl_opt_loss(model, chain), params)]
    auto_ent = [g.value for g in ad.grad(ent_loss(chain.tracked, ref), params)]

    xn = x_prev - lam * (a0 * x_prev + b0) + noise
    exact_cd = [np.mean(x_pos ** 2) / 2 - np.mean(xn ** 2) / 2, np.mean(x_pos) - np.mean(xn)]

    def step(th):
        return x_prev - lam * (th[0] * x_prev + th[1]) + noise

    def opt(th):
        x = step(th)
        return float(np.mean(a0 * x ** 2 / 2 + b0 * x))

    def ent(th):
        x = step(th)
        return float(np.mean(-np.log(np.min(np.abs(x - ref.T), axis=1))))

    th0 = [np.array(a0), np.array(b0)]
    fd_opt = fd_gradient(lambda th: opt([float(t) for t in th]), th0)
    fd_ent = fd_gradient(lambda th: ent([float(t) for t in th]), th0)
    errs = {"cd": relative_error(auto_cd, exact_cd), "opt": relative_error(auto_opt, fd_opt),
            "ent": relative_error(auto_ent, fd_ent)}
    total_auto = [c + o + e for c, o, e in zip(auto_cd, auto_opt, auto_ent)]
    total_ref = [c + o + e for c, o, e in zip(exact_cd, fd_opt, fd_ent)]
    errs["total"] = relative_error(total_auto, total_ref)
    return max(errs.values()) < 1e-4, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())


# 3. entropy estimator

def check_entropy() -> tuple[bool, str]:
    v2 = knn_entropy(np.array([[0.0], [1.0]]))
    v3 = knn_entropy(np.array([[0.0], [1.0], [3.0]]))
    ok = abs(v2 - math.log(2)) < 1e-9 and abs(v3 - 1.3296613488547582) < 1e-9
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(20):
        X = rng.normal(size=(int(rng.integers(2, 200)), int(rng.integers(1, 5))))
        c = float(np.exp(rng.uniform(-3, 3)))
        worst = max(worst, abs(knn_entropy(c * X) - knn_entropy(X) - math.log(c)))
    ok = ok and worst < 1e-12
    return ok, f"H{{0,1}} = {v2:.10f}, H{{0,1,3}} = {v3:.10f}, worst scaling residual {worst:.1e}"


# 4. sampler calibration

def check_calibration() -> tuple[bool, str]:
    var = gaussian_calibration(step_size=1e-3, steps=100_000, seed=0)
    ok = bool(np.all((var >= 0.9) & (var <= 1.1)))
    return ok, "variances " + ", ".join(f"{v:.4f}" for v in var)


# 5. truncation

def check_truncation() -> tuple[bool, str]:
    model = init_params(0, [2, 32, 32, 1])
    ds = make_mixture("eight-gaussians", 64, 1)
    parts, ok = [], True
    for k in (1, 2, 3):
        res = compare_truncation(model, ds.samples, k, 0.05, rng=np.random.default_rng(k), noise_sigma=0.005)
        if k == 1:
            ok = res["cosine"] == 1.0 and res["norm_ratio"] == 1.0
        ok = ok and not res["degenerate"]
        parts.append(f"K={k} cosine {res['cosine']:.4f} ratio {res['norm_ratio']:.4f}")
    return ok, "; ".join(parts)


# 6-8. training on the mixture

def _trajectory_complete(result, cfg) -> bool:
    rows = read_metrics(result.metrics_path)
    return len(rows) == cfg.iterations and [int(r["iter"]) for r in rows] == list(range(1, cfg.iterations + 1))


def check_stability(ctx: VerifyContext) -> tuple[bool, str]:
    cfg, full = ctx.run("full", STABILITY_CONFIG)
    bcfg, base = ctx.run("baseline", STABILITY_CONFIG, BASELINE_OVERRIDES)
    rows = read_metrics(full.metrics_path)
    tail = np.array([r["energy_diff"] for r in rows[-2000:]])
    worst = float(np.max(np.abs(tail))) if len(tail) else float("inf")
    base_rows = read_metrics(base.metrics_path)
    base_worst = float(np.max(np.abs([r["energy_diff"] for r in base_rows[-2000:]])))
    ok = (_trajectory_complete(full, cfg) and _trajectory_complete(base, bcfg)
          and not full.diverged and worst < cfg.diverge_threshold)
    return ok, (f"full loss max |energy_diff| over last 2000 = {worst:.3f}; "
                f"baseline {base_worst:.3f} (diverged={base.diverged}); "
                f"rows {len(rows)}/{len(base_rows)}")


def _model_samples(cfg, result, model, seed: int):
    box = result.dataset.expanded_box(0.2)
    lcfg = cfg.langevin(box)
    lcfg.steps = SAMPLE_STEPS
    aug = cfg.augmentation("vector", box)
    return sample_model(model, aug, lcfg, SAMPLE_ROUNDS, np.random.default_rng(seed),
                        batch_size=SAMPLE_COUNT, init_box=box, sample_shape=(2,))


def check_mode_coverage(ctx: VerifyContext) -> tuple[bool, str]:
    cfg, full = ctx.run("full", STABILITY_CONFIG)
    s = _model_samples(cfg, full, full.ema_model, seed=1)
    cov = mode_coverage(s, eight_gaussian_centers(), radius=0.3, coverage_fraction=0.02)
    return cov["covered"] >= 7, f"{cov['covered']}/8 modes, counts {cov['counts'].tolist()}"


def check_ood(ctx: VerifyContext) -> tuple[bool, str]:
    _, full = ctx.run("full", STABILITY_CONFIG)
    x_in = make_mixture("eight-gaussians", 2000, 12345).samples
    x_out = make_mixture("eight-gaussians", 2000, 54321).samples + np.array([3.0, 3.0])
    score = auroc(energies(full.ema_model, x_in), energies(full.ema_model, x_out))
    return score >= 0.9, f"AUROC {score:.4f}"


# 9. composition

def check_composition(ctx: VerifyContext) -> tuple[bool, str]:
    runs = [ctx.run(f"cond_{attr}", COMPOSITION_CONFIG, (f"model.condition={attr}", f"seed={i}"))
            for i, (attr) in enumerate(("x0_pos", "x1_pos"))]
    cfg, first = runs[0]
    comp = ComposedEnergy(tuple((res.ema_model, 1) for _, res in runs))
    box = first.dataset.expanded_box(0.2)
    lcfg = cfg.langevin(box)
    lcfg.steps = SAMPLE_STEPS
    s = sample_model(comp, cfg.augmentation("vector", box), lcfg, SAMPLE_ROUNDS, np.random.default_rng(2),
                     batch_size=SAMPLE_COUNT, init_box=box, sample_shape=(2,))
    frac = composition_satisfaction(s, [lambda v: v[:, 0] > 0, lambda v: v[:, 1] > 0])
    return frac >= 0.85, f"{100 * frac:.1f}% of samples in the quadrant x0 > 0, x1 > 0"


# 10. determinism and resume

_DET = ("dataset.size=1000", "model.hidden=32,32", "batch_size=32", "langevin.steps=10",
        "metrics.wallclock=false", "aug.perturb_prob=0.5", "aug.reflect_prob=0.3")


def check_determinism(ctx: VerifyContext) -> tuple[bool, str]:
    root = os.path.join(ctx.outdir, "determinism")

    def run(name, iters, resume=None):
        cfg = parse_config("", (*_DET, f"iterations={iters}"))
        return train(cfg, os.path.join(root, name), resume=resume)

    a, b = run("a", 20), run("b", 20)
    same = open(a.metrics_path, "rb").read() == open(b.metrics_path, "rb").read()
    run("resumed", 10)
    r = run("resumed", 20, resume=os.path.join(root, "resumed", "checkpoint.ebm"))
    resumed = open(a.metrics_path, "rb").read() == open(r.metrics_path, "rb").read()
    params = all(p.value.tobytes() == q.value.tobytes()
                 for p, q in zip(a.model.parameters(), r.model.parameters()))
    return same and resumed and params, (f"repeat run identical: {same}; resumed metrics identical: "
                                         f"{resumed}; resumed parameters identical: {params}")


CHECKS: dict[str, Callable] = {
    "1 gradient oracles": lambda ctx: check_gradient_oracles(),
    "2 gradient decomposition": lambda ctx: check_gradient_decomposition(),
    "3 entropy estimator": lambda ctx: check_entropy(),
    "4 sampler calibration": lambda ctx: check_calibration(),
    "5 truncation identity": lambda ctx: check_truncation(),
    "6 training stability": check_stability,
    "7 mode coverage": check_mode_coverage,
    "8 OOD detection": check_ood,
    "9 composition": check_composition,
    "10 determinism and resume": check_determinism,
}

# checks that finish in seconds
QUICK = ("1 gradient oracles", "2 gradient decomposition", "3 entropy estimator",
         "5 truncation identity", "10 determinism and resume")


def run_checks(names=None, ctx: VerifyContext | None = None, echo: Callable[[str], None] | None = print):
    """Run the named checks (all by default) and return their results."""
    ctx = ctx or VerifyContext()
    names = list(CHECKS) if names is None else list(names)
    results = []
    for name in names:
        if name not in CHECKS:
            raise KeyError(f"unknown check {name!r}")
        res = _timed(name, lambda: CHECKS[name](ctx))
        results.append(res)
        if echo is not None:
            echo(res.line())
    return results
