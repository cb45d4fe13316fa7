import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebmforge import autodiff as ad
from ebmforge.autodiff import Tensor
from ebmforge.evaluation import compare_truncation
from ebmforge.model import FunctionEnergy, init_params, tracked_copy
from ebmforge.sampler import (
    AugmentationSpec,
    LangevinConfig,
    ReplayBuffer,
    apply_augmentation,
    buffer_update,
    clamp,
    generate_negatives,
    langevin_step,
    sample_model,
    write_csv,
    write_pgm,
    write_samples,
)


def half_square(dim=1):
    return FunctionEnergy(lambda p, x: ad.multiply(ad.sum(ad.square(x), axis=1), 0.5), (), (dim,))


def flat_energy(dim=2):
    return FunctionEnergy(lambda p, x: ad.multiply(ad.sum(x, axis=1), 0.0), (), (dim,))


def test_langevin_config_validation():
    for kw in ({"steps": 0}, {"step_size": 0.0}, {"noise_sigma": -1.0}):
        with pytest.raises(ValueError):
            LangevinConfig(**kw)


def test_image_reference_values():
    ref = LangevinConfig.image_reference()
    assert (ref.steps, ref.step_size, ref.noise_sigma) == (40, 500.0, 0.001)


def test_zero_gradient_fixed_point():
    x = np.random.default_rng(0).normal(size=(4, 2))
    out, _ = langevin_step(flat_energy(), x, 0.3, 0.0, None)
    assert out.value.tobytes() == x.tobytes()


def test_linear_flow_example():
    out, _ = langevin_step(half_square(), np.array([[2.0]]), 0.1, 0.0, None)
    assert out.item() == pytest.approx(1.8, abs=1e-15)


def test_untracked_step_is_detached():
    m = tracked_copy(init_params(0, [2, 4, 1]))
    out, _ = langevin_step(m, np.zeros((3, 2)), 0.1, 0.01, np.random.default_rng(0))
    assert not out.tracked
    tr, _ = langevin_step(m, np.zeros((3, 2)), 0.1, 0.01, np.random.default_rng(0), track=True)
    assert tr.tracked
    assert tr.value.tobytes() == out.value.tobytes()


def test_nonfinite_step_raises():
    explode = FunctionEnergy(lambda p, x: ad.sum(ad.exp(ad.multiply(x, 300.0)), axis=1), (), (1,))
    with pytest.raises(ad.NonFiniteError):
        langevin_step(explode, np.array([[2.0]]), 1e300, 0.0, None)


def test_clamp_zeroes_gradient_outside_box():
    x = ad.tensor([[0.5, 3.0]], requires_grad=True)
    y = clamp(x, (-1.0, 1.0))
    assert y.value.tolist() == [[0.5, 1.0]]
    (g,) = ad.grad(ad.sum(y), [x])
    assert g.value.tolist() == [[1.0, 0.0]]


def test_buffer_bound_and_order():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(capacity=2, sample_shape=(1,))
    buffer_update(buf, np.array([[1.0]]), rng)
    buffer_update(buf, np.array([[2.0]]), rng)
    assert buf.items.ravel().tolist() == [1.0, 2.0]
    buffer_update(buf, np.array([[3.0]]), rng)
    assert len(buf) == 2
    assert 3.0 in buf.items


def test_buffer_rejects_tracked():
    buf = ReplayBuffer(sample_shape=(1,))
    with pytest.raises(ValueError):
        buffer_update(buf, ad.tensor([[1.0]], requires_grad=True), np.random.default_rng(0))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 30), st.lists(st.integers(1, 12), min_size=1, max_size=8))
def test_buffer_never_exceeds_capacity(cap, pushes):
    rng = np.random.default_rng(cap)
    buf = ReplayBuffer(capacity=cap, sample_shape=(2,))
    fill = 0
    for n in pushes:
        buffer_update(buf, rng.normal(size=(n, 2)), rng)
        assert fill <= len(buf) <= cap
        fill = len(buf)


@pytest.mark.parametrize("p", [0.0, 0.3, 0.99, 1.0])
def test_buffer_reuse_fraction_binomial(p):
    rng = np.random.default_rng(1)
    buf = ReplayBuffer(reuse_probability=p, sample_shape=(2,))
    buffer_update(buf, np.zeros((10, 2)), rng)
    n = 200_000
    _, used, _ = buf.draw(rng, n)
    tol = 4 * np.sqrt(p * (1 - p) / n)
    assert abs(used.mean() - p) <= tol + 1e-12


def test_empty_buffer_draws_uniform_in_box():
    buf = ReplayBuffer(reuse_probability=1.0, init_box=(-2.0, 3.0), sample_shape=(2,))
    x, used, _ = buf.draw(np.random.default_rng(0), 500)
    assert not used.any()
    assert x.min() >= -2.0 and x.max() <= 3.0


def test_singleton_buffer_full_reuse():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(reuse_probability=1.0, sample_shape=(2,))
    buffer_update(buf, np.array([[0.25, -0.5]]), rng)
    cfg = LangevinConfig(steps=1, step_size=0.1, noise_sigma=0.0)
    chain = generate_negatives(flat_energy(), buf, None, cfg, rng, batch_size=6)
    assert np.all(chain.detached.value == [0.25, -0.5])
    assert chain.from_buffer.all()


def test_generate_negatives_variants_agree_and_buffer_untouched():
    rng = np.random.default_rng(3)
    model = tracked_copy(init_params(0, [2, 8, 1]))
    buf = ReplayBuffer(sample_shape=(2,))
    cfg = LangevinConfig(steps=5, step_size=0.05, noise_sigma=0.01)
    chain = generate_negatives(model, buf, None, cfg, rng, batch_size=16)
    assert len(buf) == 0
    assert chain.tracked.tracked and not chain.detached.tracked
    assert chain.detached.value.tobytes() == chain.tracked.value.tobytes()
    assert chain.noise_record.shape == (16, 2)
    with pytest.raises(ValueError):
        generate_negatives(model, buf, None, cfg, rng, batch_size=0)


def test_tracked_chain_grad_reaches_only_through_last_step():
    # the gradient of the chain output w.r.t. the pre-chain state is blocked
    model = tracked_copy(init_params(1, [2, 8, 1]))
    x0 = ad.tensor(np.random.default_rng(0).normal(size=(4, 2)), requires_grad=True)
    x1, _ = langevin_step(model, x0, 0.1, 0.0, None)
    x2, _ = langevin_step(model, ad.stop_grad(x1), 0.1, 0.0, None, track=True)
    (g,) = ad.grad(ad.sum(x2), [x0])
    assert np.all(g.value == 0)


def test_truncation_identity_k1():
    model = init_params(2, [2, 8, 8, 1])
    x0 = np.random.default_rng(4).normal(size=(5, 2))
    res = compare_truncation(model, x0, steps=1, step_size=0.05, rng=np.random.default_rng(0), noise_sigma=0.01)
    assert res["cosine"] == 1.0
    for a, b in zip(res["grad_truncated"], res["grad_full"]):
        assert a.tobytes() == b.tobytes()


def test_augmentation_identity_when_disabled():
    x = np.random.default_rng(0).uniform(-1, 1, size=(3, 4, 4))
    spec = AugmentationSpec(kind="grid")
    assert apply_augmentation(spec, x, np.random.default_rng(0)).value.tobytes() == x.tobytes()


def test_flip_is_involution():
    x = np.random.default_rng(0).uniform(-1, 1, size=(5, 4, 6))
    spec = AugmentationSpec(kind="grid", flip_prob=1.0)
    once = apply_augmentation(spec, x, np.random.default_rng(1))
    assert np.array_equal(once.value, x[:, :, ::-1])
    twice = apply_augmentation(spec, once, np.random.default_rng(2))
    assert twice.value.tobytes() == x.tobytes()


def test_rescale_factor_one_is_identity():
    x = np.random.default_rng(0).uniform(-1, 1, size=(3, 8, 8))
    spec = AugmentationSpec(kind="grid", rescale_prob=1.0, rescale_range=(1.0, 1.0))
    assert np.array_equal(apply_augmentation(spec, x, np.random.default_rng(1)).value, x)


def test_augmentation_detaches_and_clamps():
    x = ad.tensor(np.full((2, 4, 4), 0.95), requires_grad=True)
    spec = AugmentationSpec(kind="grid", box=(-1.0, 1.0), brightness_prob=1.0, brightness_range=0.5,
                            blur_prob=1.0, rescale_prob=1.0)
    y = apply_augmentation(spec, x, np.random.default_rng(0))
    assert not y.tracked
    assert y.value.max() <= 1.0 and y.value.min() >= -1.0


def test_reflection_preserves_norm():
    x = np.random.default_rng(0).normal(size=(50, 2))
    spec = AugmentationSpec(kind="vector", reflect_prob=1.0)
    y = apply_augmentation(spec, x, np.random.default_rng(1)).value
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), np.linalg.norm(x, axis=1), rtol=1e-12)


def test_augmentation_spec_validation():
    with pytest.raises(ValueError):
        AugmentationSpec(flip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentationSpec(rescale_range=(0.0, 1.0))
    with pytest.raises(ad.ShapeError):
        apply_augmentation(AugmentationSpec(kind="grid", flip_prob=1.0), np.zeros((2, 3)), np.random.default_rng(0))


def test_sample_model_single_round_equals_bare_chain():
    model = init_params(0, [2, 8, 1])
    cfg = LangevinConfig(steps=7, step_size=0.05, noise_sigma=0.02)
    x0 = np.random.default_rng(0).normal(size=(10, 2))
    a = sample_model(model, None, cfg, 1, np.random.default_rng(5), x0=x0)
    rng = np.random.default_rng(5)
    x = Tensor(x0)
    for _ in range(7):
        x, _ = langevin_step(model, x, 0.05, 0.02, rng)
    assert a.value.tobytes() == x.value.tobytes()


def test_sample_model_is_deterministic():
    model = init_params(0, [2, 8, 1])
    cfg = LangevinConfig(steps=3, step_size=0.05, noise_sigma=0.02, clamp_range=(-1.0, 1.0))
    aug = AugmentationSpec(perturb_prob=0.5, reflect_prob=0.5, box=(-1.0, 1.0))
    a = sample_model(model, aug, cfg, 4, np.random.default_rng(9), batch_size=32)
    b = sample_model(model, aug, cfg, 4, np.random.default_rng(9), batch_size=32)
    assert a.value.tobytes() == b.value.tobytes()
    with pytest.raises(ValueError):
        sample_model(model, aug, cfg, 0, np.random.default_rng(9))


def test_dump_formats(tmp_path):
    write_csv(tmp_path / "s.csv", np.array([[0.5, -1.0], [2.0, 3.0]]))
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "dim0,dim1"
    assert [float(v) for v in lines[1].split(",")] == [0.5, -1.0]
    write_pgm(tmp_path / "g.pgm", np.array([[-1.0, 1.0], [0.0, 1.0]]))
    raw = (tmp_path / "g.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 255, 128, 255]
    paths = write_samples(tmp_path / "grids", np.zeros((3, 4, 4)))
    assert len(paths) == 3 and all(p.endswith(".pgm") for p in paths)


def test_labelled_draw_pairs_stored_labels():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(reuse_probability=1.0, sample_shape=(2,))
    states = np.concatenate([np.full((30, 2), -1.0), np.full((70, 2), 1.0)])
    buffer_update(buf, states, rng, np.r_[np.zeros(30, int), np.ones(70, int)])
    want = np.r_[np.zeros(50, int), np.ones(50, int)]
    x, used, labels = buf.draw(rng, 100, 2, want)
    assert used.all() and np.array_equal(labels, want)
    assert np.all(x[:50] == -1.0) and np.all(x[50:] == 1.0)
    # a label with no stored chains starts from fresh noise
    _, used, _ = buf.draw(rng, 10, 3, np.full(10, 2))
    assert not used.any()
