"""Energy functions: swish MLPs, multi-scale grids, conditioning, composition.

All models share a small protocol:

* ``model(x, condition=None)`` returns a graph-tracked energy of shape (batch,)
* ``parameters()`` lists the parameter tensors in a fixed order
* ``with_parameters(params)`` rebuilds the model around new tensors, which is
  how callers swap in tracked leaves or stop-gradient copies of theta
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "EnergyParams",
    "MultiScaleEnergy",
    "ConditionalEnergy",
    "FunctionEnergy",
    "ComposedEnergy",
    "init_params",
    "init_multiscale",
    "init_conditional",
    "energy",
    "grad_x",
    "compose",
    "tracked_copy",
    "frozen_copy",
]


def _as_batch(x, input_shape: tuple) -> Tensor:
    x = ad.constant(x)
    if x.shape[1:] != tuple(input_shape):
        raise ad.ShapeError(f"expected batch of {input_shape}, got {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class EnergyParams:
    """Dense swish network mapping an input (vector or flattened grid) to a scalar."""

    weights: tuple
    biases: tuple
    input_shape: tuple
    nonlinearity: str = "swish"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("final layer must have a single output")
        if self.weights[0].shape[0] != int(np.prod(self.input_shape)):
            raise ValueError("first layer fan-in does not match input_shape")

    @property
    def input_kind(self) -> str:
        return "vector" if len(self.input_shape) == 1 else "grid"

    @property
    def conditional(self) -> bool:
        return False

    @property
    def arch(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{prefix}layer{i}.weight", w), (f"{prefix}layer{i}.bias", b)]
        return out

    def with_parameters(self, params: Sequence[Tensor]) -> "EnergyParams":
        params = list(params)
        return EnergyParams(tuple(params[0::2]), tuple(params[1::2]), self.input_shape)

    def forward_flat(self, h: Tensor) -> Tensor:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < n - 1:
                h = ad.swish(h)
        return ad.reshape(h, (h.shape[0],))

    def __call__(self, x, condition=None) -> Tensor:
        if condition is not None:
            raise ValueError("unconditional model given a condition")
        x = _as_batch(x, self.input_shape)
        return self.forward_flat(ad.reshape(x, (x.shape[0], int(np.prod(self.input_shape)))))


def init_params(seed: int, arch: Sequence[int], input_shape: Sequence[int] | None = None) -> EnergyParams:
    """Swish MLP with U(-s, s) weights, s = sqrt(2 / fan_in), and zero biases.

    ``arch`` lists layer widths from input to output and must end in 1. A grid
    model passes ``input_shape=(h, w)`` with ``arch[0] == h * w``.
    """
    arch = list(arch)
    if len(arch) < 2:
        raise ValueError("architecture needs at least an input and an output width")
    if arch[-1] != 1:
        raise ValueError("architecture must end with 1 (scalar energy)")
    if any(a < 1 for a in arch):
        raise ValueError("layer widths must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(Tensor(rng.uniform(-scale, scale, size=(fan_in, fan_out))))
        biases.append(Tensor(np.zeros(fan_out)))
    shape = tuple(input_shape) if input_shape is not None else (arch[0],)
    return EnergyParams(tuple(weights), tuple(biases), shape)


def _pool(x: Tensor, factor: int) -> Tensor:
    while factor > 1:
        x = ad.avg_pool_2x2(x)
        factor //= 2
    return x


@dataclass(frozen=True, eq=False)
class MultiScaleEnergy:
    """Sum of per-resolution energies over average-pooled copies of a grid."""

    scales: tuple  # ((factor, EnergyParams), ...)

    def __post_init__(self):
        factors = [f for f, _ in self.scales]
        if not factors or factors[0] != 1:
            raise ValueError("scales must start at factor 1")
        if any(b <= a for a, b in zip(factors, factors[1:])):
            raise ValueError("scale factors must be strictly increasing")
        h, w = self.input_shape
        for f, p in self.scales:
            if f not in (1, 2, 4):
                raise ValueError(f"unsupported downsample factor {f}")
            if h % f or w % f:
                raise ValueError(f"grid {h}x{w} not divisible by factor {f}")
            if tuple(p.input_shape) != (h // f, w // f):
                raise ValueError(f"scale {f} network expects {p.input_shape}")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.scales[0][1].input_shape)

    @property
    def input_kind(self) -> str:
        return "grid"

    @property
    def conditional(self) -> bool:
        return False

    def parameters(self) -> list[Tensor]:
        return [t for _, p in self.scales for t in p.parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [nt for f, p in self.scales for nt in p.named_parameters(f"{prefix}scale{f}.")]

    def with_parameters(self, params: Sequence[Tensor]) -> "MultiScaleEnergy":
        params = list(params)
        out, i = [], 0
        for f, p in self.scales:
            n = len(p.parameters())
            out.append((f, p.with_parameters(params[i:i + n])))
            i += n
        return MultiScaleEnergy(tuple(out))

    def scale_energies(self, x) -> list[Tensor]:
        x = _as_batch(x, self.input_shape)
        return [p(_pool(x, f)) for f, p in self.scales]

    def __call__(self, x, condition=None) -> Tensor:
        if condition is not None:
            raise ValueError("unconditional model given a condition")
        parts = self.scale_energies(x)
        total = parts[0]
        for e in parts[1:]:
            total = ad.add(total, e)
        return total


def init_multiscale(seed: int, grid: Sequence[int], hidden: Sequence[int],
                    factors: Sequence[int] = (1, 2, 4)) -> MultiScaleEnergy:
    """One swish MLP per downsample factor, seeded ``seed + index``."""
    h, w = grid
    scales = []
    for i, f in enumerate(factors):
        shape = (h // f, w // f)
        arch = [shape[0] * shape[1], *hidden, 1]
        scales.append((f, init_params(seed + i, arch, shape)))
    return MultiScaleEnergy(tuple(scales))


@dataclass(frozen=True, eq=False)
class ConditionalEnergy:
    """Energy E(x | c) with the concept index one-hot encoded and appended to x."""

    base: EnergyParams
    condition_dim: int

    def __post_init__(self):
        if self.base.input_kind != "vector":
            raise ValueError("conditioning is supported for vector inputs")
        if not 0 < self.condition_dim < self.base.arch[0]:
            raise ValueError("condition_dim must leave at least one input coordinate")

    @property
    def input_shape(self) -> tuple:
        return (self.base.input_shape[0] - self.condition_dim,)

    @property
    def input_kind(self) -> str:
        return "vector"

    @property
    def conditional(self) -> bool:
        return True

    def parameters(self) -> list[Tensor]:
        return self.base.parameters()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.base.named_parameters(prefix)

    def with_parameters(self, params: Sequence[Tensor]) -> "ConditionalEnergy":
        return ConditionalEnergy(self.base.with_parameters(params), self.condition_dim)

    def one_hot(self, condition, batch: int) -> np.ndarray:
        idx = np.broadcast_to(np.asarray(condition, dtype=np.int64), (batch,))
        if np.any(idx < 0) or np.any(idx >= self.condition_dim):
            raise ValueError(f"condition index out of range [0, {self.condition_dim})")
        out = np.zeros((batch, self.condition_dim))
        out[np.arange(batch), idx] = 1.0
        return out

    def __call__(self, x, condition=None) -> Tensor:
        if condition is None:
            raise ValueError("conditional model requires a condition")
        x = _as_batch(x, self.input_shape)
        h = ad.concat([x, Tensor(self.one_hot(condition, x.shape[0]))], axis=1)
        return self.base.forward_flat(h)


def init_conditional(seed: int, input_dim: int, hidden: Sequence[int], condition_dim: int) -> ConditionalEnergy:
    base = init_params(seed, [input_dim + condition_dim, *hidden, 1])
    return ConditionalEnergy(base, condition_dim)


@dataclass(frozen=True, eq=False)
class FunctionEnergy:
    """Energy from an explicit function ``fn(params, x) -> Tensor[batch]``.

    Handy for closed-form test energies such as ``theta * x**2 / 2``.
    """

    fn: Callable
    params: tuple
    input_shape: tuple

    @property
    def input_kind(self) -> str:
        return "vector" if len(self.input_shape) == 1 else "grid"

    @property
    def conditional(self) -> bool:
        return False

    def parameters(self) -> list[Tensor]:
        return list(self.params)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}param{i}", p) for i, p in enumerate(self.params)]

    def with_parameters(self, params: Sequence[Tensor]) -> "FunctionEnergy":
        return FunctionEnergy(self.fn, tuple(params), self.input_shape)

    def __call__(self, x, condition=None) -> Tensor:
        if condition is not None:
            raise ValueError("unconditional model given a condition")
        x = _as_batch(x, self.input_shape)
        out = self.fn(list(self.params), x)
        if out.shape != (x.shape[0],):
            raise ad.ShapeError(f"energy function returned shape {out.shape}")
        return out


@dataclass(frozen=True, eq=False)
class ComposedEnergy:
    """Sum of member energies, each with its own fixed condition (or None)."""

    members: tuple  # ((model, condition), ...)

    def __post_init__(self):
        if not self.members:
            raise ValueError("composition needs at least one member")
        kinds = {(m.input_kind, tuple(m.input_shape)) for m, _ in self.members}
        if len(kinds) != 1:
            raise ValueError("composed energies must share one input kind and shape")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.members[0][0].input_shape)

    @property
    def input_kind(self) -> str:
        return self.members[0][0].input_kind

    @property
    def conditional(self) -> bool:
        return False

    def parameters(self) -> list[Tensor]:
        return [t for m, _ in self.members for t in m.parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [nt for i, (m, _) in enumerate(self.members)
                for nt in m.named_parameters(f"{prefix}member{i}.")]

    def with_parameters(self, params: Sequence[Tensor]) -> "ComposedEnergy":
        params = list(params)
        out, i = [], 0
        for m, c in self.members:
            n = len(m.parameters())
            out.append((m.with_parameters(params[i:i + n]), c))
            i += n
        return ComposedEnergy(tuple(out))

    def __call__(self, x, condition=None) -> Tensor:
        if condition is not None:
            raise ValueError("a composition carries its own conditions")
        total = None
        for m, c in self.members:
            e = m(x, c)
            total = e if total is None else ad.add(total, e)
        return total


def energy(model, x, condition=None) -> Tensor:
    """Per-sample energy, shape (batch,)."""
    return model(x, condition)


def grad_x(model, x, condition=None, retain_graph: bool = False) -> Tensor:
    """Gradient of the summed batch energy with respect to the inputs.

    With ``retain_graph`` the result stays in the graph, including its
    dependence on any tracked model parameters.
    """
    if not ad.is_tracking():
        raise RuntimeError("grad_x needs graph tracking; it was called inside no_grad()")
    x = ad.constant(x)
    xt = x if x.tracked else ad.tensor(x, requires_grad=True)
    total = ad.sum(model(xt, condition))
    return ad.grad(total, [xt], retain_graph=retain_graph)[0]


def compose(models: Sequence, x, conditions: Sequence | None = None) -> Tensor:
    """Elementwise sum of member energies at ``x``."""
    conditions = [None] * len(models) if conditions is None else list(conditions)
    if len(conditions) != len(models):
        raise ValueError("one condition (or None) per model")
    return ComposedEnergy(tuple(zip(models, conditions)))(x)


def tracked_copy(model):
    """Same model with every parameter replaced by a fresh tracked leaf."""
    return model.with_parameters([ad.tensor(p, requires_grad=True) for p in model.parameters()])


def frozen_copy(model):
    """Same model with stop-gradient parameters (values shared)."""
    return model.with_parameters([ad.stop_grad(p) for p in model.parameters()])
