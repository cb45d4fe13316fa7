"""
Double backward through a Langevin step
=======================================

The improved objective differentiates an energy evaluated at a sample that
was itself produced by a gradient step. That needs second derivatives, so
the autodiff engine builds its adjoints out of differentiable primitives.
"""

import numpy as np

from ebmforge import autodiff as ad
from ebmforge.model import FunctionEnergy, energy, grad_x

# a scalar quadratic energy E(x) = theta * x^2 / 2
theta = ad.tensor(np.array(1.0), requires_grad=True)
model = FunctionEnergy(lambda p, x: ad.multiply(ad.sum(ad.square(x), axis=1), ad.multiply(p[0], 0.5)),
                       (theta,), (1,))

# one noiseless Langevin step from x = 1 with step size 0.1
x = ad.tensor(np.array([[1.0]]))
step = 0.1
g = grad_x(model, x, retain_graph=True)
x_new = ad.subtract(x, ad.multiply(g, step))
print("x after one step:", x_new.value.ravel())

# energy at the new point, differentiated with respect to theta through the step.
# Analytically E = theta (1 - step theta)^2 / 2, so dE/dtheta at theta = 1 is
# (1 - s)^2 / 2 - s (1 - s) = 0.405 - 0.09 = 0.315
e = ad.sum(energy(model, x_new))
(d_theta,) = ad.grad(e, [theta])
print("dE/dtheta through the step:", float(d_theta.value), "(closed form 0.315)")

# the sampler term of the objective holds the energy parameters fixed, so
# only the dependence through x_new survives: -s (1 - s) = -0.09
frozen = FunctionEnergy(model.fn, (ad.tensor(np.array(1.0)),), (1,))
g = grad_x(model, x, retain_graph=True)
x_new = ad.subtract(x, ad.multiply(g, step))
(d_opt,) = ad.grad(ad.sum(energy(frozen, x_new)), [theta])
print("sampler-term gradient:", float(d_opt.value), "(closed form -0.09)")
