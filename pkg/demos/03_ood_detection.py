"""
Energy scores as an out-of-distribution detector
================================================

Data the model was trained on should receive low energy, data far from it
high energy. The area under the ROC curve measures how well energy separates
the two.
"""

import sys
import tempfile

import numpy as np

from ebmforge.data import make_mixture
from ebmforge.evaluation import auroc, energies
from ebmforge.trainer import parse_config, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
cfg = parse_config("", ["dataset=eight-gaussians", f"iterations={iterations}", "optim.lr=0.001",
                        "ema.decay=0.999", "aug.perturb_prob=0.5"])
result = train(cfg, tempfile.mkdtemp(prefix="ebm-ood-"))
model = result.ema_model

x_in = make_mixture("eight-gaussians", 2000, 12345).samples
for shift in (0.5, 1.0, 3.0):
    x_out = make_mixture("eight-gaussians", 2000, 54321).samples + shift
    e_in, e_out = energies(model, x_in), energies(model, x_out)
    print(f"shift {shift:3.1f}: mean energy in {e_in.mean():+7.2f}, out {e_out.mean():+7.2f}, "
          f"AUROC {auroc(e_in, e_out):.3f}")
