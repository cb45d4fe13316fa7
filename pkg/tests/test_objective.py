import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebmforge import autodiff as ad
from ebmforge.autodiff import Tensor
from ebmforge.evaluation import kl_opt_autodiff_gradient, kl_opt_fd_gradient, relative_error
from ebmforge.model import FunctionEnergy, init_params, tracked_copy
from ebmforge.objective import (
    NN_FLOOR,
    EntropyContext,
    cd_loss,
    ent_loss,
    full_loss,
    kl_opt_loss,
    knn_entropy,
    nn_distances,
)
from ebmforge.sampler import ChainBatch, LangevinConfig, ReplayBuffer, generate_negatives, langevin_step


def theta_quadratic(theta=1.0, tracked=True):
    th = ad.tensor(theta, requires_grad=tracked)
    return FunctionEnergy(lambda p, x: ad.multiply(ad.sum(ad.square(x), axis=1), ad.multiply(p[0], 0.5)),
                          (th,), (1,))


def identity_energy():
    return FunctionEnergy(lambda p, x: ad.sum(x, axis=1), (), (1,))


def one_step_chain(model, x, step_size, noise=0.0, box=None):
    x = np.asarray(x, float)
    tr, w = langevin_step(model, ad.stop_grad(Tensor(x)), step_size, 0.0, None, track=True,
                          box=box, noise=np.full(x.shape, noise))
    return ChainBatch(ad.stop_grad(tr), tr, w)


# contrastive term

def test_cd_identical_batches_zero():
    m = init_params(0, [2, 4, 1])
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert cd_loss(m, x, x).item() == 0.0


def test_cd_constant_energy_zero():
    m = FunctionEnergy(lambda p, x: ad.add(ad.multiply(ad.sum(x, axis=1), 0.0), 3.0), (), (2,))
    assert cd_loss(m, np.ones((3, 2)), np.zeros((4, 2))).item() == 0.0


def test_cd_arithmetic_example():
    assert cd_loss(identity_energy(), [[1.0]], [[3.0]]).item() == -2.0


def test_cd_errors():
    with pytest.raises(ValueError):
        cd_loss(identity_energy(), [[1.0]], ad.tensor([[3.0]], requires_grad=True))
    with pytest.raises(ValueError):
        cd_loss(identity_energy(), np.zeros((0, 1)), [[3.0]])


def test_cd_gradient_ignores_how_negatives_were_made():
    model = tracked_copy(init_params(3, [2, 8, 1]))
    rng = np.random.default_rng(1)
    chain = generate_negatives(model, ReplayBuffer(sample_shape=(2,)), None,
                               LangevinConfig(steps=3, step_size=0.1, noise_sigma=0.01), rng, 8)
    x_pos = rng.normal(size=(8, 2))
    g_chain = ad.grad(cd_loss(model, x_pos, chain.detached), model.parameters())
    g_const = ad.grad(cd_loss(model, x_pos, Tensor(chain.detached.value.copy())), model.parameters())
    for a, b in zip(g_chain, g_const):
        assert a.value.tobytes() == b.value.tobytes()


# sampler-energy term

def test_kl_opt_toy_closed_form():
    # E = theta x^2 / 2, x = 1, step 0.1, theta = 1: dL/dtheta = -step * theta * x * x+ = -0.09
    model = theta_quadratic(1.0)
    chain = one_step_chain(model, [[1.0]], 0.1)
    assert chain.tracked.item() == pytest.approx(0.9, abs=1e-15)
    loss = kl_opt_loss(model, chain)
    (g,) = ad.grad(loss, model.parameters())
    assert abs(g.item() - (-0.09)) < 1e-10
    assert loss.item() == pytest.approx(0.5 * 0.81, abs=1e-15)


def test_kl_opt_vanishes_with_step_size():
    model = theta_quadratic(1.3)
    for lam in (1e-3, 1e-6, 1e-9):
        (g,) = ad.grad(kl_opt_loss(model, one_step_chain(model, [[0.7]], lam)), model.parameters())
        assert abs(g.item()) < 2 * lam


def test_kl_opt_value_is_frozen_energy_of_final_state():
    model = tracked_copy(init_params(4, [2, 8, 1]))
    chain = one_step_chain(model, np.random.default_rng(0).normal(size=(6, 2)), 0.05, 0.01)
    with ad.no_grad():
        expected = np.mean(model(Tensor(chain.detached.value)).value)
    assert kl_opt_loss(model, chain).item() == pytest.approx(expected, abs=1e-15)


def test_kl_opt_requires_tracked_chain():
    x = Tensor(np.zeros((2, 1)))
    with pytest.raises(ValueError):
        kl_opt_loss(theta_quadratic(), ChainBatch(x, x, np.zeros((2, 1))))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_kl_opt_matches_frozen_fd_oracle(seed):
    rng = np.random.default_rng(seed)
    model = init_params(seed, [2, 6, 6, 1])
    x = rng.normal(size=(4, 2))
    noise = rng.normal(size=(4, 2)) * 0.01
    auto = kl_opt_autodiff_gradient(model, x, 0.1, noise)
    numeric = kl_opt_fd_gradient(model, x, 0.1, noise)
    assert relative_error(auto, numeric) < 1e-4


# entropy estimator

def test_knn_entropy_examples():
    assert knn_entropy(np.array([[0.0], [1.0]])) == pytest.approx(math.log(2), abs=1e-15)
    # frozen value, from a direct evaluation of mean(ln(n * NN)) on {0, 1, 3}
    assert knn_entropy(np.array([[0.0], [1.0], [3.0]])) == pytest.approx(1.3296613488547582, abs=1e-12)
    assert (2 * math.log(3) + math.log(6)) / 3 == pytest.approx(1.3296613488547582, abs=1e-15)


def test_knn_entropy_needs_two_points():
    with pytest.raises(ValueError):
        knn_entropy(np.zeros((1, 2)))


def test_knn_entropy_duplicates_floored(caplog):
    with caplog.at_level("WARNING"):
        v = knn_entropy(np.array([[0.0], [0.0], [1.0]]))
    assert "floored" in caplog.text
    assert np.isfinite(v)
    expected = (2 * math.log(3 * NN_FLOOR) + math.log(3)) / 3
    assert v == pytest.approx(expected, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.integers(1, 4))
def test_knn_entropy_shift_by_log_scale(seed, c, dim):
    X = np.random.default_rng(seed).normal(size=(20, dim))
    assert knn_entropy(c * X) == pytest.approx(knn_entropy(X) + math.log(c), abs=1e-9)


def test_nn_distances_exclude_self():
    d = nn_distances(np.array([[0.0], [1.0], [3.0]]))
    assert d.tolist() == [1.0, 1.0, 2.0]
    d = nn_distances(np.array([[0.5]]), np.array([[0.0], [2.0]]))
    assert d.tolist() == [0.5]


# entropy loss

def test_ent_loss_examples():
    ref = np.array([[0.0, 0.0]])
    assert ent_loss(Tensor([[1.0, 0.0]]), ref).item() == pytest.approx(0.0, abs=1e-15)
    assert ent_loss(Tensor([[math.exp(-1), 0.0]]), ref).item() == pytest.approx(1.0, abs=1e-12)


def test_ent_loss_gradient_points_away():
    rng = np.random.default_rng(0)
    ref = rng.normal(size=(10, 3))
    x = ad.tensor(rng.normal(size=(5, 3)), requires_grad=True)
    (g,) = ad.grad(ent_loss(x, ref), [x])
    nearest = ref[np.argmin(np.linalg.norm(x.value[:, None] - ref[None], axis=2), axis=1)]
    # descending the loss moves each sample away from its neighbour
    assert np.all(np.sum(-g.value * (x.value - nearest), axis=1) > 0)


def test_ent_loss_coincident_point_is_finite():
    ref = np.array([[0.0, 0.0], [1.0, 1.0]])
    x = ad.tensor([[0.0, 0.0], [0.5, 0.0]], requires_grad=True)
    loss = ent_loss(x, ref)
    (g,) = ad.grad(loss, [x])
    assert np.isfinite(loss.item()) and np.all(np.isfinite(g.value))
    assert np.all(g.value[0] == 0)


def test_ent_loss_empty_reference():
    with pytest.raises(ValueError):
        ent_loss(Tensor([[0.0]]), EntropyContext())


def test_entropy_context_fifo():
    ctx = EntropyContext(size=3)
    assert not ctx.active
    ctx.update(np.arange(5.0).reshape(5, 1))
    assert ctx.reference.ravel().tolist() == [2.0, 3.0, 4.0]
    assert ctx.active


# combined

def _setup(seed=0):
    rng = np.random.default_rng(seed)
    model = tracked_copy(init_params(seed, [2, 8, 8, 1]))
    chain = generate_negatives(model, ReplayBuffer(sample_shape=(2,)), None,
                               LangevinConfig(steps=4, step_size=0.1, noise_sigma=0.01), rng, 16)
    ctx = EntropyContext()
    ctx.update(rng.normal(size=(30, 2)))
    return model, rng.normal(size=(16, 2)), chain, ctx


@pytest.mark.parametrize("w", [(0.0, 0.0), (1.0, 1.0), (0.5, 2.0)])
def test_full_loss_total_identity(w):
    model, x_pos, chain, ctx = _setup()
    lb = full_loss(model, x_pos, chain, ctx, *w)
    assert lb.total == pytest.approx(lb.cd + w[0] * lb.kl_opt + w[1] * lb.kl_ent, abs=1e-12)
    assert lb.cd == lb.energy_pos - lb.energy_neg
    assert lb.grad_norm_cd >= 0 and np.isfinite(lb.grad_norm_cd)
    assert lb.grad_norm_kl >= 0 and np.isfinite(lb.grad_norm_kl)


def test_zero_weights_reduce_to_contrastive_gradient():
    model, x_pos, chain, ctx = _setup(1)
    lb = full_loss(model, x_pos, chain, ctx, 0.0, 0.0)
    g_cd = ad.grad(cd_loss(model, x_pos, chain.detached), model.parameters())
    assert lb.grad_norm_kl == 0.0
    for a, b in zip(lb.grads, g_cd):
        assert a.value.tobytes() == b.value.tobytes()


def test_full_grads_are_sum_of_terms():
    model, x_pos, chain, ctx = _setup(2)
    lb = full_loss(model, x_pos, chain, ctx, 1.0, 1.0)
    params = model.parameters()
    g_cd = ad.grad(cd_loss(model, x_pos, chain.detached), params)
    g_opt = ad.grad(kl_opt_loss(model, chain), params)
    g_ent = ad.grad(ent_loss(chain.tracked, ctx), params)
    for total, a, b, c in zip(lb.grads, g_cd, g_opt, g_ent):
        np.testing.assert_allclose(total.value, a.value + b.value + c.value, rtol=1e-10, atol=1e-14)
