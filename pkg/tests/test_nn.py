import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import tiny_models, worst_relative_error
from trainvar.data import synthetic_dataset
from trainvar.mca import Arithmetic, McaConfig, Mode
from trainvar.nn import (
    SCHEMES, ConfigError, Conv2d, Dense, Dropout, Flatten, LossWeights, MaxPool2d, Model, NetworkSpec,
    NumericBlowUp, ReLU, Softmax, TrainConfig, Upsample2d, cross_entropy_loss, dice_loss, forward,
    init_weights, load_checkpoint, mnist_net, read_losses, save_checkpoint, segmentation_net, sgdr_lr, train,
    write_losses,
)
from trainvar.nn.init import SPARSITY, fans
from trainvar.nn.losses import one_hot
from trainvar.nn.train import restart_epochs


@pytest.fixture(scope="module")
def small_data():
    return synthetic_dataset(10, size=8, n_classes=3, seed=1, val_fraction=0.2, test_fraction=0.2)


def small_spec(**kw):
    return segmentation_net(size=8, n_classes=3, width=2, **kw)


@pytest.mark.parametrize("case", range(3))
def test_gradients_match_finite_differences(case):
    model, x, y = tiny_models()[case]
    assert worst_relative_error(model, x, y) < 1e-4


def test_conv_same_padding_matches_direct_sum():
    rng = np.random.default_rng(0)
    layer = Conv2d(2, 3, 3)
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    x = rng.normal(size=(1, 2, 5, 5))
    out, _ = layer.forward(Arithmetic(), x, {"W": w, "b": b}, False, None)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                want = (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
                assert out[0, o, i, j] == pytest.approx(want, abs=1e-12)


def test_pool_and_upsample():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, _ = MaxPool2d(2).forward(Arithmetic(), x, {}, False, None)
    assert out[0, 0].tolist() == [[5, 7], [13, 15]]
    up, _ = Upsample2d(2).forward(Arithmetic(), out, {}, False, None)
    assert up.shape == (1, 1, 4, 4) and up[0, 0, 1, 1] == 5


def test_dropout_scaling_and_eval_identity():
    x = np.ones((1, 1000))
    rng = np.random.default_rng(0)
    out, _ = Dropout(0.25).forward(Arithmetic(), x, {}, True, rng)
    assert set(np.unique(out)) <= {0.0, 1 / 0.75}
    assert abs(out.mean() - 1.0) < 0.1
    ev, _ = Dropout(0.25).forward(Arithmetic(), x, {}, False, None)
    assert np.array_equal(ev, x)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(1).normal(size=(4, 5, 3, 3)) * 50
    p, _ = Softmax().forward(Arithmetic(), x, {}, False, None)
    assert np.allclose(p.sum(axis=1), 1.0)


def test_cross_entropy_values():
    probs = np.array([[0.25, 0.75], [0.5, 0.5]])
    assert cross_entropy_loss(probs, np.array([1, 0])) == pytest.approx((-math.log(0.75) - math.log(0.5)) / 2)
    c = Counter()
    assert cross_entropy_loss(np.array([[1.0, 0.0]]), np.array([1]), counters=c) == pytest.approx(-math.log(1e-12))
    assert c["ce_clamped"] == 1


def test_dice_loss_values():
    labels = np.array([[[0, 1], [1, 1]]])
    probs = one_hot(labels, 3)
    # class 2 is absent from both and counts as a perfect score
    assert dice_loss(probs, labels) == pytest.approx(0.0, abs=1e-15)
    uniform = np.full((1, 2, 2, 2), 0.5)
    lab = np.array([[[0, 0], [1, 1]]])
    assert dice_loss(uniform, lab) == pytest.approx(0.5)


def test_sgdr_schedule():
    cfg = TrainConfig(base_lr=0.1, min_lr=0.001, t0=10, t_mult=3)
    assert restart_epochs(cfg, 50) == [0, 10, 40]
    for e in (0, 10, 40):
        assert sgdr_lr(e, cfg) == 0.1
    assert sgdr_lr(5, cfg) == pytest.approx(0.001 + 0.5 * 0.099)
    assert sgdr_lr(9, cfg) < sgdr_lr(8, cfg) < sgdr_lr(1, cfg)
    assert sgdr_lr(39, cfg) == pytest.approx(0.001 + 0.5 * 0.099 * (1 + math.cos(math.pi * 29 / 30)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 300), st.integers(1, 12), st.integers(1, 3))
def test_sgdr_bounds(epoch, t0, t_mult):
    cfg = TrainConfig(base_lr=0.2, min_lr=0.01, t0=t0, t_mult=t_mult)
    assert 0.01 <= sgdr_lr(epoch, cfg) <= 0.2


@pytest.mark.parametrize("scheme", SCHEMES)
def test_init_schemes(scheme):
    spec = mnist_net(width=4)
    params = init_weights(spec.layers, scheme, seed=3, strict=False)
    for layer, p in zip(spec.layers, params):
        if not p:
            continue
        assert np.all(p["b"] == 0)
        w = p["W"]
        if scheme == "sparse":
            fan_in, _ = fans(layer)
            m = w.reshape(w.shape[0], -1).T if isinstance(layer, Conv2d) else w
            zeros = (m == 0).sum(axis=0)
            assert np.all(zeros >= math.ceil(SPARSITY * fan_in))
        if scheme == "orthogonal" and isinstance(layer, Dense):
            q = w if w.shape[0] >= w.shape[1] else w.T
            assert np.allclose(q.T @ q, np.eye(q.shape[1]), atol=1e-12)
    again = init_weights(spec.layers, scheme, seed=3, strict=False)
    assert all(np.array_equal(a[k], b[k]) for a, b in zip(params, again) for k in a)


def test_dirac_and_identity():
    conv = [Conv2d(2, 2, 3)]
    w = init_weights(conv, "dirac", 0)[0]["W"]
    x = np.random.default_rng(0).normal(size=(1, 2, 5, 5))
    out, _ = conv[0].forward(Arithmetic(), x, {"W": w, "b": np.zeros(2)}, False, None)
    assert np.array_equal(out, x)
    assert np.array_equal(init_weights([Dense(3, 3)], "identity", 0)[0]["W"], np.eye(3))


def test_strict_init_rejects_inapplicable_layers():
    with pytest.raises(ConfigError):
        init_weights([Dense(3, 4)], "identity", 0)
    with pytest.raises(ConfigError):
        init_weights([Dense(3, 4)], "dirac", 0)
    with pytest.raises(ConfigError):
        init_weights([Dense(3, 4)], "lecun", 0)


def test_kaiming_uniform_bound():
    w = init_weights([Dense(50, 400)], "kaiming_uniform", 0)[0]["W"]
    bound = math.sqrt(2) * math.sqrt(3 / 50)
    assert np.abs(w).max() <= bound
    assert w.std() == pytest.approx(bound / math.sqrt(3), rel=0.02)


def test_network_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec((1, 4, 4), (Conv2d(1, 2), Conv2d(3, 2), Softmax()))
    with pytest.raises(ConfigError):
        NetworkSpec((1, 4, 4), (Conv2d(1, 2),))
    spec = small_spec()
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    assert spec.output_shape() == (3, 8, 8)


def test_train_is_deterministic_and_checkpoints_round_trip(small_data, tmp_path):
    cfg = TrainConfig(epochs=3, t0=2, batch_size=2)
    r1 = train(Model.create(small_spec(), 0), small_data, cfg)
    r2 = train(Model.create(small_spec(), 0), small_data, cfg)
    assert np.array_equal(r1.model.flat(), r2.model.flat())
    assert r1.history == r2.history
    save_checkpoint(tmp_path / "a.json", r1.model, cfg.to_dict())
    save_checkpoint(tmp_path / "b.json", r2.model, cfg.to_dict())
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back, saved_cfg = load_checkpoint(tmp_path / "a.json")
    assert back.flat().tobytes() == r1.model.flat().tobytes() and back.epoch == 3
    assert TrainConfig.from_dict(saved_cfg) == cfg
    write_losses(tmp_path / "l.csv", r1.history)
    assert read_losses(tmp_path / "l.csv") == r1.history


def test_zero_noise_mca_training_equals_ieee(small_data):
    cfg = TrainConfig(epochs=2, batch_size=3)
    zero = cfg.replace(arithmetic=McaConfig(Mode.RANDOM_ROUNDING, 54, seed=5, forced_xi=0.0))
    a = train(Model.create(small_spec(), 0), small_data, cfg)
    b = train(Model.create(small_spec(), 0), small_data, zero)
    assert np.array_equal(a.model.flat(), b.model.flat())


def test_mca_training_perturbs_parameters(small_data):
    cfg = TrainConfig(epochs=1, batch_size=3)
    a = train(Model.create(small_spec(), 0), small_data, cfg)
    b = train(Model.create(small_spec(), 0), small_data,
              cfg.replace(arithmetic=McaConfig(Mode.RANDOM_ROUNDING, 24, seed=1)))
    diff = np.abs(a.model.flat() - b.model.flat())
    assert 0 < diff.max() < 1e-3


def test_blow_up_reports_epoch_and_batch(small_data):
    m = Model.create(small_spec(dropout=0.0), 0)
    for p in m.params:
        if p:
            p["W"][:] = 1e308
    with pytest.raises(NumericBlowUp) as exc, np.errstate(all="ignore"):
        train(m, small_data, TrainConfig(epochs=1))
    assert exc.value.epoch == 0 and exc.value.batch == 0


def test_train_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "lr": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        LossWeights(0, 0)


def test_eval_forward_ignores_dropout():
    spec = NetworkSpec((4,), (Dense(4, 4), Dropout(0.5), Dense(4, 2), Softmax()))
    m = Model.create(spec, 0)
    x = np.ones((2, 4))
    assert np.array_equal(forward(m, x), forward(m, x))


def test_flatten_dense_shapes():
    spec = NetworkSpec((2, 3, 3), (Flatten(), Dense(18, 5), ReLU(), Dense(5, 3), Softmax()))
    assert spec.output_shape() == (3,)
    assert forward(Model.create(spec, 0), np.zeros((4, 2, 3, 3))).shape == (4, 3)
