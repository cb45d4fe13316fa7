import numpy as np
import pytest

from ebmforge.checkpoint import load_tensors
from ebmforge.data import make_mixture
from ebmforge.trainer import (
    METRICS_HEADER,
    AdamState,
    ConfigError,
    DivergenceError,
    TrainConfig,
    adam_step,
    detect_divergence,
    ema_update,
    format_config,
    load_models,
    parse_config,
    read_metrics,
    train,
)

SMALL = ["dataset.size=500", "model.hidden=16,16", "batch_size=16", "langevin.steps=5",
         "metrics.wallclock=false"]


def small(*extra):
    return parse_config("", SMALL + list(extra))


# optimiser and EMA

def test_adam_zero_grad_and_zero_lr_keep_params():
    p = [np.array([1.0, -2.0]), np.ones((2, 2))]
    st = AdamState.zeros_like(p)
    out = adam_step(st, p, [np.zeros(2), np.zeros((2, 2))], 1e-3)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(out, p))
    st = AdamState.zeros_like(p)
    out = adam_step(st, p, [np.ones(2), np.ones((2, 2))], 0.0)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(out, p))


def test_adam_first_step_is_lr():
    # bias-corrected first step: m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    lr = 1e-3
    st = AdamState.zeros_like([np.zeros(())])
    (out,) = adam_step(st, [np.array(0.0)], [np.array(1.0)], lr)
    assert -out == pytest.approx(lr / (1 + 1e-8), rel=1e-12)
    # repeated unit gradients keep a unit-size step
    p = out
    for _ in range(5):
        prev = p
        (p,) = adam_step(st, [p], [np.array(1.0)], lr)
        assert prev - p == pytest.approx(lr, rel=1e-6)


def test_adam_nonfinite_gradient_leaves_state():
    p = [np.array([1.0])]
    st = AdamState.zeros_like(p)
    with pytest.raises(DivergenceError):
        adam_step(st, p, [np.array([np.nan])], 1e-3)
    assert st.step == 0 and st.m[0][0] == 0.0


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros_like([np.zeros(2)]), [np.zeros(2)], [np.zeros(3)], 1e-3)


def test_ema_examples():
    e, p = [np.array([1.0, 2.0])], [np.array([5.0, -1.0])]
    assert ema_update(e, p, 0.0)[0].tolist() == [5.0, -1.0]
    assert ema_update(e, p, 1.0)[0].tolist() == [1.0, 2.0]


def test_ema_converges_monotonically_to_constant_params():
    ema, target = [np.array([0.0])], [np.array([1.0])]
    gaps = []
    for _ in range(50):
        ema = ema_update(ema, target, 0.9)
        gaps.append(abs(1.0 - ema[0][0]))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_detect_divergence_examples():
    assert not detect_divergence([0.0] * 100)
    assert detect_divergence([100.0] * 50, 10, 50)
    assert not detect_divergence([0.0] * 10 + [100.0] + [0.0] * 60)
    assert not detect_divergence([100.0] * 49, 10, 50)
    with pytest.raises(ValueError):
        detect_divergence([], window=0)


# config

def test_config_parse_and_round_trip():
    text = "# comment\nlangevin.steps = 40   # trailing\n\noptim.lr = 0.001\nmodel.hidden = 32,32\n"
    cfg = parse_config(text)
    assert cfg.langevin_steps == 40 and cfg.lr == 1e-3 and cfg.hidden == (32, 32)
    again = parse_config(format_config(cfg))
    assert format_config(again) == format_config(cfg)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) == (1e-4, 0.9, 0.999, 1e-8)
    assert cfg.ema_decay == 0.9999
    assert (cfg.buffer_capacity, cfg.buffer_reuse) == (10000, 0.99)
    assert (cfg.diverge_threshold, cfg.diverge_window) == (10.0, 50)


def test_config_errors_are_line_numbered():
    with pytest.raises(ConfigError, match=":2: unknown key 'bogus'"):
        parse_config("seed = 1\nbogus = 3\n", source="f.cfg")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config("no equals sign")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("seed = abc")
    with pytest.raises(ConfigError):
        parse_config("", ["iterations=0"])
    with pytest.raises(ConfigError):
        parse_config("", ["nope=1"])


def test_override_wins_over_file():
    cfg = parse_config("langevin.steps = 10\n", ["langevin.steps=40"])
    assert cfg.langevin_steps == 40


# training loop

def test_single_iteration_bookkeeping(tmp_path):
    res = train(parse_config("", ["iterations=1", "batch_size=64", "model.hidden=16,16",
                                  "langevin.steps=3", "dataset.size=500"]), str(tmp_path))
    lines = open(res.metrics_path).read().splitlines()
    assert lines[0] == METRICS_HEADER
    rows = read_metrics(res.metrics_path)
    assert len(rows) == 1 and rows[0]["buffer_fill"] == 64


def test_lr_zero_keeps_initialisation(tmp_path):
    cfg = small("iterations=3", "optim.lr=0")
    res = train(cfg, str(tmp_path))
    from ebmforge.trainer import build_model
    init = build_model(cfg, res.dataset)
    for a, b in zip(res.model.parameters(), init.parameters()):
        assert a.value.tobytes() == b.value.tobytes()


def test_metrics_identity_and_buffer_growth(tmp_path):
    res = train(small("iterations=8", "buffer.capacity=100"), str(tmp_path))
    rows = read_metrics(res.metrics_path)
    for r in rows:
        assert r["energy_diff"] == r["energy_pos"] - r["energy_neg"]
        assert r["grad_cd"] >= 0 and r["grad_kl"] >= 0
    fills = [r["buffer_fill"] for r in rows]
    assert fills == sorted(fills) and fills[-1] == 100


def test_training_is_deterministic(tmp_path):
    a = train(small("iterations=5"), str(tmp_path / "a"))
    b = train(small("iterations=5"), str(tmp_path / "b"))
    assert open(a.metrics_path, "rb").read() == open(b.metrics_path, "rb").read()


def test_checkpoint_resume_is_bitwise(tmp_path):
    full = train(small("iterations=6", "loss.entropy_window=20"), str(tmp_path / "full"))
    train(small("iterations=3", "loss.entropy_window=20"), str(tmp_path / "part"))
    resumed = train(small("iterations=6", "loss.entropy_window=20"), str(tmp_path / "part"),
                    resume=str(tmp_path / "part" / "checkpoint.ebm"))
    assert open(full.metrics_path, "rb").read() == open(resumed.metrics_path, "rb").read()
    a, b = load_tensors(full.checkpoint_path), load_tensors(resumed.checkpoint_path)
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_checkpoint_contents(tmp_path):
    cfg = small("iterations=2")
    res = train(cfg, str(tmp_path))
    st = load_tensors(res.checkpoint_path)
    assert "layer0.weight" in st and "adam.m.layer0.weight" in st
    assert "adam.v.layer2.bias" in st and "ema.layer1.weight" in st
    live, ema, _ = load_models(cfg, res.checkpoint_path, res.dataset)
    assert live.parameters()[0].value.tobytes() == res.model.parameters()[0].value.tobytes()
    assert ema.parameters()[0].value.tobytes() == res.ema_model.parameters()[0].value.tobytes()


def test_divergence_is_flagged_not_hidden(tmp_path):
    # a threshold of zero makes every row count towards the divergence run
    res = train(small("iterations=10", "diverge.threshold=0", "diverge.window=3"), str(tmp_path))
    text = open(res.metrics_path).read()
    assert res.diverged and "# diverged iter=3 reason=energy_diff" in text
    assert len(read_metrics(res.metrics_path)) == 3
    res = train(small("iterations=6", "diverge.threshold=0", "diverge.window=3", "diverge.halt=false"),
                str(tmp_path / "go"))
    assert res.diverged and len(read_metrics(res.metrics_path)) == 6


def test_nonfinite_training_stops_with_flag(tmp_path):
    res = train(small("iterations=5", "langevin.step_size=1e308", "langevin.clamp=false"), str(tmp_path))
    assert res.diverged
    assert "reason=non-finite" in open(res.metrics_path).read()


@pytest.mark.parametrize("extra", [["dataset=shapes8", "model.scales=1,2,4", "model.hidden=8", "dataset.size=50",
                                    "aug.flip_prob=0.5", "aug.rescale_prob=0.5"],
                                   ["model.condition=x0_pos"],
                                   ["chain_init=noise"]])
def test_variants_run(tmp_path, extra):
    res = train(small("iterations=2", *extra), str(tmp_path))
    assert len(read_metrics(res.metrics_path)) == 2


def test_supplied_dataset_is_used(tmp_path):
    ds = make_mixture("two-rings", 300, 5)
    res = train(small("iterations=1"), str(tmp_path), dataset=ds)
    assert res.dataset is ds
