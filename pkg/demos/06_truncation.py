"""
How much gradient does truncation lose?
=======================================

The sampler term backpropagates through only the final Langevin step. This
compares that truncated gradient with the gradient through all K steps of a
short chain. For small steps the two point the same way, while the truncated
norm is roughly a 1/K share of the full one: each step contributes a similar
amount and truncation keeps one of them.
"""

import numpy as np

from ebmforge.data import make_mixture
from ebmforge.evaluation import compare_truncation
from ebmforge.model import init_params

model = init_params(0, [2, 32, 32, 1])
x0 = make_mixture("eight-gaussians", 64, 1).samples

print(f"{'step':>6} {'K':>2} {'cosine':>8} {'norm ratio':>11}")
for step in (0.01, 0.05, 0.2):
    for k in (1, 2, 3):
        res = compare_truncation(model, x0, k, step, rng=np.random.default_rng(k), noise_sigma=0.005)
        print(f"{step:>6} {k:>2} {res['cosine']:>8.4f} {res['norm_ratio']:>11.4f}")
