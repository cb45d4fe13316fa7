"""
Composing conditional energies
==============================

Two conditional models are trained on a rotated ring of gaussians, one
conditioned on the sign of x0 and one on the sign of x1. Summing their
energies with both conditions set to 1 asks for samples that satisfy both,
which is the positive quadrant.
"""

import sys
import tempfile

import numpy as np

from ebmforge.evaluation import composition_satisfaction
from ebmforge.model import ComposedEnergy
from ebmforge.sampler import sample_model
from ebmforge.trainer import parse_config, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
base = ["dataset=rotated-gaussians", f"iterations={iterations}", "optim.lr=0.001", "ema.decay=0.999",
        "aug.perturb_prob=0.5"]

runs = {}
for seed, attr in enumerate(("x0_pos", "x1_pos")):
    cfg = parse_config("", base + [f"model.condition={attr}", f"seed={seed}"])
    runs[attr] = (cfg, train(cfg, tempfile.mkdtemp(prefix=f"ebm-{attr}-")))

cfg, first = runs["x0_pos"]
box = first.dataset.expanded_box(0.2)
lcfg = cfg.langevin(box)
lcfg.steps = 20
aug = cfg.augmentation("vector", box)
x0_pos = lambda v: v[:, 0] > 0  # noqa: E731
x1_pos = lambda v: v[:, 1] > 0  # noqa: E731

# each model alone only constrains its own coordinate
for attr, pred in (("x0_pos", x0_pos), ("x1_pos", x1_pos)):
    s = sample_model(runs[attr][1].ema_model, aug, lcfg, 10, np.random.default_rng(2), batch_size=1000,
                     init_box=box, sample_shape=(2,), condition=1)
    print(f"{attr} alone: {100 * composition_satisfaction(s, [pred]):.1f}% satisfy {attr}, "
          f"{100 * composition_satisfaction(s, [x0_pos, x1_pos]):.1f}% in the quadrant")

comp = ComposedEnergy(((runs["x0_pos"][1].ema_model, 1), (runs["x1_pos"][1].ema_model, 1)))
s = sample_model(comp, aug, lcfg, 10, np.random.default_rng(2), batch_size=1000, init_box=box, sample_shape=(2,))
print(f"composed: {100 * composition_satisfaction(s, [x0_pos, x1_pos]):.1f}% in the quadrant x0 > 0, x1 > 0")
