"""Training loop: negatives from the replay buffer, full loss, Adam, EMA.

Each iteration ``t`` draws all of its randomness from a generator seeded with
``(seed, t)``. A run resumed from a checkpoint therefore replays exactly the
same random stream as an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .data import DATASETS, Dataset, make_dataset
from .model import init_conditional, init_multiscale, init_params, tracked_copy
from .objective import EntropyContext, full_loss
from .sampler import AugmentationSpec, LangevinConfig, ReplayBuffer, generate_negatives

log = logging.getLogger(__name__)

METRICS_HEADER = ("iter,loss_cd,loss_kl_opt,loss_kl_ent,energy_pos,energy_neg,"
                  "energy_diff,grad_cd,grad_kl,buffer_fill,wall_s")

__all__ = [
    "METRICS_HEADER",
    "ConfigError",
    "TrainConfig",
    "AdamState",
    "MetricsRow",
    "TrainResult",
    "DivergenceError",
    "adam_step",
    "ema_update",
    "detect_divergence",
    "build_model",
    "train",
    "parse_config",
    "load_config",
    "format_config",
    "read_metrics",
]


class ConfigError(ValueError):
    """Malformed config text or an unknown/invalid key."""


class DivergenceError(RuntimeError):
    """Non-finite values during a training step."""


def _key(name: str, **kw):
    return field(metadata={"key": name}, **kw)


@dataclass
class TrainConfig:
    dataset: str = _key("dataset", default="eight-gaussians")
    dataset_size: int = _key("dataset.size", default=20000)
    dataset_path: str = _key("dataset.path", default="")
    hidden: tuple = _key("model.hidden", default=(128, 128))
    scales: tuple = _key("model.scales", default=())
    condition: str = _key("model.condition", default="")
    batch_size: int = _key("batch_size", default=64)
    iterations: int = _key("iterations", default=1000)
    lr: float = _key("optim.lr", default=1e-4)
    beta1: float = _key("optim.beta1", default=0.9)
    beta2: float = _key("optim.beta2", default=0.999)
    eps: float = _key("optim.eps", default=1e-8)
    ema_decay: float = _key("ema.decay", default=0.9999)
    seed: int = _key("seed", default=0)
    langevin_steps: int = _key("langevin.steps", default=20)
    langevin_step_size: float = _key("langevin.step_size", default=0.01)
    langevin_noise: float = _key("langevin.noise", default=0.005)
    langevin_clamp: bool = _key("langevin.clamp", default=True)
    aug_flip: float = _key("aug.flip_prob", default=0.0)
    aug_rescale: float = _key("aug.rescale_prob", default=0.0)
    aug_rescale_range: tuple = _key("aug.rescale_range", default=(0.5, 1.0))
    aug_blur: float = _key("aug.blur_prob", default=0.0)
    aug_blur_sigma: tuple = _key("aug.blur_sigma", default=(0.1, 1.0))
    aug_brightness: float = _key("aug.brightness_prob", default=0.0)
    aug_brightness_range: float = _key("aug.brightness_range", default=0.2)
    aug_perturb: float = _key("aug.perturb_prob", default=0.0)
    aug_perturb_sigma: float = _key("aug.perturb_sigma", default=0.1)
    aug_reflect: float = _key("aug.reflect_prob", default=0.0)
    aug_reflect_axes: tuple = _key("aug.reflect_axes", default=(0.0, 45.0, 90.0, 135.0))
    buffer_capacity: int = _key("buffer.capacity", default=10000)
    buffer_reuse: float = _key("buffer.reuse_prob", default=0.99)
    chain_init: str = _key("chain_init", default="buffer")
    weight_opt: float = _key("loss.weight_opt", default=1.0)
    weight_ent: float = _key("loss.weight_ent", default=1.0)
    entropy_window: int = _key("loss.entropy_window", default=100)
    diverge_threshold: float = _key("diverge.threshold", default=10.0)
    diverge_window: int = _key("diverge.window", default=50)
    diverge_halt: bool = _key("diverge.halt", default=True)
    checkpoint_path: str = _key("checkpoint.path", default="checkpoint.ebm")
    checkpoint_every: int = _key("checkpoint.every", default=0)
    metrics_path: str = _key("metrics.path", default="metrics.csv")
    wallclock: bool = _key("metrics.wallclock", default=True)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {', '.join(DATASETS)}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("optim.lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("Adam betas must lie in [0, 1) and eps > 0")
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError("ema.decay must lie in [0, 1]")
        if not 0 <= self.buffer_reuse <= 1:
            raise ConfigError("buffer.reuse_prob must lie in [0, 1]")
        if self.buffer_capacity < 1:
            raise ConfigError("buffer.capacity must be >= 1")
        if self.chain_init not in ("buffer", "noise"):
            raise ConfigError("chain_init must be 'buffer' or 'noise'")
        if self.diverge_window < 1:
            raise ConfigError("diverge.window must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint.every must be >= 0")
        try:
            self.langevin(None)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def langevin(self, box) -> LangevinConfig:
        return LangevinConfig(self.langevin_steps, self.langevin_step_size, self.langevin_noise,
                              box if self.langevin_clamp else None)

    def augmentation(self, kind: str, box) -> AugmentationSpec:
        return AugmentationSpec(
            kind=kind, box=box,
            flip_prob=self.aug_flip, rescale_prob=self.aug_rescale,
            rescale_range=tuple(self.aug_rescale_range), blur_prob=self.aug_blur,
            blur_sigma=tuple(self.aug_blur_sigma), brightness_prob=self.aug_brightness,
            brightness_range=self.aug_brightness_range, perturb_prob=self.aug_perturb,
            perturb_sigma=self.aug_perturb_sigma, reflect_prob=self.aug_reflect,
            reflect_axes=tuple(self.aug_reflect_axes),
        )


_FIELDS = {f.metadata["key"]: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(f: dataclasses.Field, text: str):
    default = f.default
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if not text:
            return ()
        items = [t.strip() for t in text.split(",")]
        if f.name in ("hidden", "scales"):
            return tuple(int(t) for t in items)
        return tuple(float(t) for t in items)
    return text


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format_value(a) if isinstance(a, float) else str(a) for a in v)
    return str(v)


def parse_config(text: str, overrides=(), source: str = "<config>") -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments), then apply ``key=value`` overrides."""
    values = {}
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        entries.append((f"{source}:{lineno}", k.strip(), v))
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r}: expected key=value")
        k, v = ov.split("=", 1)
        entries.append((f"override {ov!r}", k.strip(), v))
    for where, k, v in entries:
        if k not in _FIELDS:
            raise ConfigError(f"{where}: unknown key {k!r}")
        try:
            values[_FIELDS[k].name] = _parse_value(_FIELDS[k], v)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {k!r}: {exc}") from None
    return TrainConfig(**values)


def load_config(path, overrides=()) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides, source=str(path))


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{k} = {_format_value(getattr(cfg, f.name))}" for k, f in _FIELDS.items()]
    return "\n".join(lines) + "\n"


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros(np.shape(p)) for p in params], [np.zeros(np.shape(p)) for p in params], 0)


def _arrays(xs):
    return [x.value if isinstance(x, Tensor) else np.asarray(x, float) for x in xs]


def adam_step(state: AdamState, params, grads, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> list[np.ndarray]:
    """Bias-corrected Adam. Non-finite gradients raise before anything changes."""
    params, grads = _arrays(params), _arrays(grads)
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes do not align")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError("non-finite gradient")
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        m_hat = state.m[i] / (1 - beta1 ** t)
        v_hat = state.v[i] / (1 - beta2 ** t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


def ema_update(ema_params, params, decay: float) -> list[np.ndarray]:
    """``decay * ema + (1 - decay) * params`` per tensor."""
    ema_params, params = _arrays(ema_params), _arrays(params)
    return [decay * e + (1.0 - decay) * p for e, p in zip(ema_params, params)]


def detect_divergence(history, threshold: float = 10.0, window: int = 50) -> bool:
    """True iff the last ``window`` energy differences all exceed ``threshold`` in magnitude."""
    if window < 1:
        raise ValueError("window must be >= 1")
    h = list(history)
    if len(h) < window:
        return False
    return all(abs(v) > threshold for v in h[-window:])


@dataclass
class MetricsRow:
    iteration: int
    loss_cd: float
    loss_kl_opt: float
    loss_kl_ent: float
    energy_pos_mean: float
    energy_neg_mean: float
    energy_diff: float
    grad_norm_cd: float
    grad_norm_kl: float
    buffer_fill: int
    wallclock_seconds: float

    def to_csv(self) -> str:
        vals = [str(self.iteration)] + [repr(float(v)) for v in (
            self.loss_cd, self.loss_kl_opt, self.loss_kl_ent, self.energy_pos_mean,
            self.energy_neg_mean, self.energy_diff, self.grad_norm_cd, self.grad_norm_kl)]
        vals += [str(self.buffer_fill), repr(float(self.wallclock_seconds))]
        return ",".join(vals)


def read_metrics(path) -> list[dict]:
    """Rows of a metrics CSV as dicts; ``#`` status lines are skipped."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            rows.append({k: float(v) for k, v in zip(header, line.strip().split(","))})
    return rows


@dataclass
class TrainResult:
    model: object
    ema_model: object
    metrics_path: str
    checkpoint_path: str
    iterations_run: int
    diverged: bool
    dataset: Dataset = field(repr=False)
    buffer: ReplayBuffer = field(repr=False)


def _condition_dim(ds: Dataset, attr: str) -> int:
    if attr not in ds.attributes:
        raise ConfigError(f"dataset has no attribute {attr!r}")
    return int(ds.attributes[attr].max()) + 1


def build_model(cfg: TrainConfig, ds: Dataset):
    shape = ds.sample_shape
    if ds.kind == "grid":
        if cfg.condition:
            raise ConfigError("conditioning is only supported for vector data")
        if cfg.scales:
            return init_multiscale(cfg.seed, shape, cfg.hidden, cfg.scales)
        return init_params(cfg.seed, [int(np.prod(shape)), *cfg.hidden, 1], shape)
    if cfg.scales:
        raise ConfigError("model.scales applies to grid data only")
    if cfg.condition:
        return init_conditional(cfg.seed, shape[0], cfg.hidden, _condition_dim(ds, cfg.condition))
    return init_params(cfg.seed, [shape[0], *cfg.hidden, 1])


def data_box(ds: Dataset):
    """Clamp/initialisation box: [-1, 1] for grids, bounding box + 20% for vectors."""
    if ds.kind == "grid":
        return (-1.0, 1.0)
    return ds.expanded_box(0.2)


def _resolve(outdir, path):
    return path if os.path.isabs(path) else os.path.join(outdir, path)


def _state_dict(model, ema, adam: AdamState, buffer: ReplayBuffer, ctx: EntropyContext,
                iteration: int, run: int) -> dict:
    out = {name: p.value for name, p in model.named_parameters()}
    names = [name for name, _ in model.named_parameters()]
    for name, m, v, e in zip(names, adam.m, adam.v, ema):
        out[f"adam.m.{name}"] = m
        out[f"adam.v.{name}"] = v
        out[f"ema.{name}"] = e
    out["adam.step"] = np.array([adam.step], float)
    out["buffer.items"] = buffer.items
    out["buffer.labels"] = buffer.labels.astype(float)
    out["entropy.items"] = ctx.reference if len(ctx) else np.zeros((0, *buffer.sample_shape))
    out["train.iteration"] = np.array([iteration], float)
    out["train.diverge_run"] = np.array([run], float)
    return out


def train(cfg: TrainConfig, outdir: str = ".", resume: str | None = None,
          dataset: Dataset | None = None) -> TrainResult:
    """Run the training loop, writing metrics every iteration and checkpoints.

    With ``resume`` the model, optimiser, EMA, buffer and entropy window are
    restored from a checkpoint and training continues to ``cfg.iterations``,
    appending to the metrics file.
    """
    os.makedirs(outdir, exist_ok=True)
    ds = dataset if dataset is not None else make_dataset(cfg.dataset, cfg.dataset_size, cfg.seed,
                                                          cfg.dataset_path)
    box = data_box(ds)
    model = build_model(cfg, ds)
    cond_dim = _condition_dim(ds, cfg.condition) if cfg.condition else None
    cond_labels = ds.attributes[cfg.condition] if cfg.condition else None
    lcfg = cfg.langevin(box)
    aug = cfg.augmentation("grid" if ds.kind == "grid" else "vector", box)
    buffer = ReplayBuffer(cfg.buffer_capacity, cfg.buffer_reuse, box, ds.sample_shape)
    ctx = EntropyContext(cfg.entropy_window)
    names = [n for n, _ in model.named_parameters()]
    params = [p.value for p in model.parameters()]
    ema = [p.copy() for p in params]
    adam = AdamState.zeros_like(params)
    start, run = 1, 0

    if resume is not None:
        st = load_tensors(resume)
        params = [st[n] for n in names]
        ema = [st[f"ema.{n}"] for n in names]
        adam = AdamState([st[f"adam.m.{n}"] for n in names], [st[f"adam.v.{n}"] for n in names],
                         int(st["adam.step"][0]))
        buffer.items = st["buffer.items"].reshape(-1, *ds.sample_shape)
        buffer.labels = st["buffer.labels"].astype(np.int64)
        ctx.load(st["entropy.items"].reshape(-1, *ds.sample_shape))
        start = int(st["train.iteration"][0]) + 1
        run = int(st["train.diverge_run"][0])

    metrics_path = _resolve(outdir, cfg.metrics_path)
    ckpt_path = _resolve(outdir, cfg.checkpoint_path)
    if resume is not None and os.path.exists(metrics_path):
        mfh = open(metrics_path, "a", encoding="utf-8")
    else:
        mfh = open(metrics_path, "w", encoding="utf-8")
        mfh.write(METRICS_HEADER + "\n")

    def snapshot(t):
        cur = model.with_parameters([Tensor(p) for p in params])
        save_tensors(ckpt_path, _state_dict(cur, ema, adam, buffer, ctx, t, run))

    t0 = time.perf_counter()
    diverged = False
    last = start - 1
    try:
        for t in range(start, cfg.iterations + 1):
            rng = np.random.default_rng([cfg.seed, t])
            x_pos, idx = ds.batch(rng, cfg.batch_size)
            cond_pos = cond_labels[idx] if cond_labels is not None else None
            live = tracked_copy(model.with_parameters([Tensor(p) for p in params]))
            try:
                # overflow surfaces as NonFiniteError from the finiteness checks
                with np.errstate(over="ignore", invalid="ignore"):
                    chain = generate_negatives(live, buffer, aug, lcfg, rng, cfg.batch_size,
                                               cfg.chain_init, cond_dim, cond_pos)
                    losses = full_loss(live, x_pos, chain, ctx, cfg.weight_opt, cfg.weight_ent, cond_pos)
                    params = adam_step(adam, params, losses.grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            except (ad.NonFiniteError, DivergenceError, FloatingPointError) as exc:
                log.warning("iteration %d: %s", t, exc)
                mfh.write(f"# diverged iter={t} reason=non-finite\n")
                diverged = True
                break
            ema = ema_update(ema, params, cfg.ema_decay)
            buffer.update(chain.detached, rng, chain.conditions)
            ctx.update(chain.detached)

            diff = losses.energy_pos - losses.energy_neg
            wall = time.perf_counter() - t0 if cfg.wallclock else 0.0
            row = MetricsRow(t, losses.cd, losses.kl_opt, losses.kl_ent, losses.energy_pos,
                             losses.energy_neg, diff, losses.grad_norm_cd, losses.grad_norm_kl,
                             len(buffer), wall)
            mfh.write(row.to_csv() + "\n")
            last = t
            run = run + 1 if abs(diff) > cfg.diverge_threshold else 0
            if run >= cfg.diverge_window and not diverged:
                diverged = True
                mfh.write(f"# diverged iter={t} reason=energy_diff\n")
                if cfg.diverge_halt:
                    break
            if cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                snapshot(t)
    finally:
        mfh.close()

    snapshot(last)
    final = model.with_parameters([Tensor(p) for p in params])
    ema_model = model.with_parameters([Tensor(e) for e in ema])
    return TrainResult(final, ema_model, metrics_path, ckpt_path, last - start + 1, diverged, ds, buffer)


def load_models(cfg: TrainConfig, checkpoint: str, dataset: Dataset | None = None):
    """Rebuild ``(live_model, ema_model, dataset)`` from a checkpoint."""
    ds = dataset if dataset is not None else make_dataset(cfg.dataset, cfg.dataset_size, cfg.seed,
                                                          cfg.dataset_path)
    model = build_model(cfg, ds)
    st = load_tensors(checkpoint)
    names = [n for n, _ in model.named_parameters()]
    missing = [n for n in names if n not in st]
    if missing:
        raise ConfigError(f"checkpoint lacks tensors {missing[:3]}")
    live = model.with_parameters([Tensor(st[n]) for n in names])
    ema = model.with_parameters([Tensor(st.get(f"ema.{n}", st[n])) for n in names])
    return live, ema, ds
