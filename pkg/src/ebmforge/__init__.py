"""Energy-based model training with improved contrastive divergence.

Modules
-------
autodiff    reverse-mode differentiation with double backward
model       swish MLP energies, multi-scale, conditional and composed energies
sampler     Langevin dynamics, replay buffer, augmentation transitions
objective   contrastive, sampler-energy and nearest-neighbour entropy losses
trainer     training loop, Adam, EMA, divergence monitoring, checkpoints
evaluation  finite-difference oracles, calibration, AUROC, coverage
data        procedural 2-D mixtures, shape grids, IDX ingestion
cli         the ``ebmforge`` command
"""

from .autodiff import Tensor, grad, no_grad, stop_grad, tensor
from .model import compose, energy, grad_x, init_conditional, init_multiscale, init_params
from .trainer import TrainConfig, parse_config, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "TrainConfig",
    "compose",
    "energy",
    "grad",
    "grad_x",
    "init_conditional",
    "init_multiscale",
    "init_params",
    "no_grad",
    "parse_config",
    "stop_grad",
    "tensor",
    "train",
]
