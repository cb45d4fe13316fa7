"""
Multi-scale energies on small shape grids
=========================================

Grid inputs are scored at several resolutions: the grid itself and copies
average-pooled by 2 and 4. Each scale has its own network and the energies
are summed. Samples are written as PGM images.
"""

import sys
import tempfile

import numpy as np

from ebmforge.sampler import sample_model, write_samples
from ebmforge.trainer import data_box, parse_config, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = parse_config("", ["dataset=shapes8", "dataset.size=2000", f"iterations={iterations}", "batch_size=32",
                        "model.hidden=32", "model.scales=1,2,4", "optim.lr=0.001", "ema.decay=0.99",
                        "aug.flip_prob=0.5", "aug.rescale_prob=0.3"])
outdir = tempfile.mkdtemp(prefix="ebm-shapes-")
result = train(cfg, outdir)
model = result.ema_model
print("scales:", cfg.scales)

box = data_box(result.dataset)
x = sample_model(model, cfg.augmentation("grid", box), cfg.langevin(box), 5, np.random.default_rng(0),
                 batch_size=8, init_box=box, sample_shape=result.dataset.sample_shape)
paths = write_samples(outdir, x, box)
print(f"wrote {len(paths)} sample images to {outdir}")
print("first sample, rounded:")
print(np.round(x.value[0], 1))
