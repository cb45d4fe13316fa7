"""
Training an energy model on eight gaussians
===========================================

Trains the full objective (contrastive term, sampler term and entropy term)
on a ring of eight gaussians, then draws samples from the averaged model and
counts how many modes they reach. Pass an iteration count as the first
argument; the default is short enough for a laptop.
"""

import sys
import tempfile

import numpy as np

from ebmforge.data import eight_gaussian_centers
from ebmforge.evaluation import mode_coverage
from ebmforge.sampler import sample_model
from ebmforge.trainer import parse_config, read_metrics, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1500

cfg = parse_config(f"""
dataset = eight-gaussians
iterations = {iterations}
optim.lr = 0.001
ema.decay = 0.999
aug.perturb_prob = 0.5
aug.reflect_prob = 0.3
""")
outdir = tempfile.mkdtemp(prefix="ebm-8g-")
result = train(cfg, outdir)
print(f"trained {result.iterations_run} iterations into {outdir}")

# energy_diff is the mean data energy minus the mean sample energy; it
# hovers near zero while training is healthy
rows = read_metrics(result.metrics_path)
tail = np.array([r["energy_diff"] for r in rows[-500:]])
print(f"energy_diff over the last 500 iterations: mean {tail.mean():+.3f}, max |.| {np.abs(tail).max():.3f}")

# sample with 10 rounds of augmentation followed by 20 Langevin steps
box = result.dataset.expanded_box(0.2)
lcfg = cfg.langevin(box)
lcfg.steps = 20
x = sample_model(result.ema_model, cfg.augmentation("vector", box), lcfg, 10, np.random.default_rng(1),
                 batch_size=1000, init_box=box, sample_shape=(2,))
cov = mode_coverage(x, eight_gaussian_centers(), radius=0.3)
print(f"modes covered: {cov['covered']}/8; samples per mode {cov['counts'].tolist()}")
