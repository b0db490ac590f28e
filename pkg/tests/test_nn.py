import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copycat import nn
from copycat.nn import Conv2D, Dense, Flatten, MaxPool, ReLU


class Toy:
    def __init__(self, images, labels, n_classes):
        self.images, self.labels, self.n_classes = images, np.asarray(labels), n_classes


# --- independent naive-loop forward, used as the oracle for nn.forward ---

def naive_forward(model, x):
    out = []
    for sample in x:
        a = sample.copy()
        for i, layer in enumerate(model.layers):
            if isinstance(layer, Conv2D):
                w, b = model.params[f"{i}.weight"], model.params[f"{i}.bias"]
                c, h, wd = a.shape
                p, k, s = layer.pad, layer.kernel, layer.stride
                padded = np.zeros((c, h + 2 * p, wd + 2 * p))
                padded[:, p:p + h, p:p + wd] = a
                ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
                res = np.zeros((layer.out_channels, ho, wo))
                for o in range(layer.out_channels):
                    for r in range(ho):
                        for q in range(wo):
                            acc = b[o]
                            for ci in range(c):
                                for u in range(k):
                                    for v in range(k):
                                        acc += w[o, ci, u, v] * padded[ci, r * s + u, q * s + v]
                            res[o, r, q] = acc
                a = res
            elif isinstance(layer, MaxPool):
                c, h, wd = a.shape
                k, s = layer.kernel, layer.stride
                ho, wo = (h - k) // s + 1, (wd - k) // s + 1
                res = np.zeros((c, ho, wo))
                for ci in range(c):
                    for r in range(ho):
                        for q in range(wo):
                            res[ci, r, q] = max(a[ci, r * s + u, q * s + v] for u in range(k) for v in range(k))
                a = res
            elif isinstance(layer, ReLU):
                a = np.array([max(v, 0.0) for v in a.ravel()]).reshape(a.shape)
            elif isinstance(layer, Flatten):
                a = a.ravel()
            elif isinstance(layer, Dense):
                w, b = model.params[f"{i}.weight"], model.params[f"{i}.bias"]
                a = np.array([sum(w[o, j] * a[j] for j in range(len(a))) + b[o] for o in range(len(b))])
        out.append(a)
    return np.array(out)


def small_cnn(n_classes=3, seed=0, input_shape=(1, 6, 6)):
    layers = [Conv2D(2, 3, 1, 1), ReLU(), MaxPool(2, 2), Flatten(), Dense(n_classes)]
    return nn.build_model(layers, input_shape, seed=seed)


# --- glorot ---

@pytest.mark.parametrize("fan_in,fan_out,limit", [(3, 3, 1.0), (100, 50, 0.2)])
def test_glorot_limit(fan_in, fan_out, limit):
    w = nn.glorot_init(fan_in, fan_out, (2000,), seed=7)
    assert math.isclose(math.sqrt(6 / (fan_in + fan_out)), limit)
    assert np.all(np.abs(w) <= limit)


def test_glorot_moments():
    w = nn.glorot_init(500, 500, (1000,), seed=3)
    limit = math.sqrt(6 / 1000)
    assert abs(w.mean()) < 0.02
    assert abs(w.var() - limit ** 2 / 3) < 0.15 * limit ** 2 / 3


def test_glorot_deterministic_and_rejects_bad_fans():
    assert np.array_equal(nn.glorot_init(4, 5, (3, 3), 11), nn.glorot_init(4, 5, (3, 3), 11))
    with pytest.raises(ValueError):
        nn.glorot_init(0, 5, (3,), 1)
    with pytest.raises(ValueError):
        nn.glorot_init(3, -1, (3,), 1)


@given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**64 - 1))
@settings(max_examples=50, deadline=None)
def test_glorot_bounds_property(fan_in, fan_out, seed):
    limit = math.sqrt(6 / (fan_in + fan_out))
    assert np.all(np.abs(nn.glorot_init(fan_in, fan_out, (64,), seed)) <= limit)


# --- forward / predict ---

def test_zero_weight_model_gives_zero_logits():
    m = small_cnn()
    for k in m.params:
        m.params[k][...] = 0.0
    x = np.random.default_rng(0).random((5, 1, 6, 6))
    assert np.all(nn.forward(m, x) == 0.0)


def test_identity_dense():
    m = nn.Model((1, 2, 2), [Flatten(), Dense(4)])
    m.params = {"1.weight": np.eye(4), "1.bias": np.zeros(4)}
    x = np.random.default_rng(1).random((3, 1, 2, 2))
    assert np.array_equal(nn.forward(m, x), x.reshape(3, 4))


def test_forward_matches_naive_loops():
    layers = [Conv2D(3, 3, 1, 1), ReLU(), MaxPool(2, 2), Conv2D(2, 2, 2, 0), Flatten(), Dense(5), ReLU(), Dense(3)]
    m = nn.build_model(layers, (1, 8, 8), seed=4)
    for k in m.params:
        if k.endswith("bias"):
            m.params[k] = np.random.default_rng(hash(k) % 1000).normal(size=m.params[k].shape)
    x = np.random.default_rng(2).random((4, 1, 8, 8))
    np.testing.assert_allclose(nn.forward(m, x), naive_forward(m, x), rtol=1e-12, atol=1e-12)


def test_strided_padded_conv_matches_naive():
    m = nn.build_model([Conv2D(2, 3, 2, 1), MaxPool(3, 1), Flatten(), Dense(2)], (2, 7, 7), seed=5)
    x = np.random.default_rng(3).random((2, 2, 7, 7))
    np.testing.assert_allclose(nn.forward(m, x), naive_forward(m, x), rtol=1e-12, atol=1e-12)


def test_shape_error_names_layer():
    m = small_cnn()
    with pytest.raises(nn.ShapeError, match="layer 0"):
        nn.forward(m, np.zeros((1, 1, 5, 5)))


def test_final_layer_must_be_dense():
    with pytest.raises(ValueError):
        nn.Model((1, 4, 4), [Flatten(), Dense(3), ReLU()])


def test_predict_tie_break_and_rows():
    m = nn.Model((1, 1, 3), [Flatten(), Dense(3)])
    m.params = {"1.weight": np.eye(3), "1.bias": np.zeros(3)}
    assert nn.predict(m, np.array([[[[0.1, 0.9, 0.3]]]])).tolist() == [1]
    m2 = nn.Model((1, 1, 2), [Flatten(), Dense(2)])
    m2.params = {"1.weight": np.eye(2), "1.bias": np.zeros(2)}
    assert nn.predict(m2, np.array([[[[0.5, 0.5]]]])).tolist() == [0]


def test_predict_equals_argmax_oracle():
    m = nn.build_model(nn.default_architecture(5), (1, 16, 16), seed=9)
    x = np.random.default_rng(5).random((40, 1, 16, 16))
    logits = naive_forward(m, x[:3])
    expected = [max(range(5), key=lambda c: (row[c], -c)) for row in logits]
    assert nn.predict(m, x[:3]).tolist() == expected
    assert nn.predict(m, x, chunk=7).tolist() == np.argmax(nn.forward(m, x), axis=1).tolist()


@given(st.floats(-1e3, 1e3, allow_nan=False))
@settings(max_examples=30, deadline=None)
def test_predict_invariant_to_logit_shift(shift):
    m = small_cnn(seed=2)
    x = np.random.default_rng(8).random((6, 1, 6, 6))
    before = nn.predict(m, x)
    head = m.head_index
    m.params[f"{head}.bias"] = m.params[f"{head}.bias"] + shift
    assert np.array_equal(nn.predict(m, x), before)


# --- step-down schedule ---

def test_lr_at():
    cfg = nn.SgdConfig(base_lr=0.01, gamma=0.1, step_size=2, max_epochs=6)
    assert nn.lr_at(cfg, 0) == 0.01
    assert math.isclose(nn.lr_at(cfg, 2), 0.001)
    assert math.isclose(nn.lr_at(cfg, 4), 0.0001)
    half = nn.SgdConfig(base_lr=0.4, gamma=0.5, step_size=1, max_epochs=5)
    assert nn.lr_at(half, 3) == 0.4 / 8
    with pytest.raises(ValueError):
        nn.lr_at(cfg, 6)
    with pytest.raises(ValueError):
        nn.lr_at(cfg, -1)


def test_lr_schedule_defaults_and_monotone():
    cfg = nn.SgdConfig(max_epochs=30)
    assert (cfg.gamma, cfg.effective_step_size, cfg.momentum, cfg.base_lr) == (0.1, 10, 0.9, 0.01)
    rates = [nn.lr_at(cfg, e) for e in range(30)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


# --- training ---

def separable_toy():
    rng = np.random.default_rng(12)
    a = rng.normal([1.5, 1.5], 0.3, size=(10, 2))
    b = rng.normal([-1.5, -1.5], 0.3, size=(10, 2))
    pts = np.vstack([a, b])
    labels = np.array([0] * 10 + [1] * 10)
    return pts, labels


def brute_force_separable(pts, labels):
    for theta in np.linspace(0, 2 * np.pi, 720, endpoint=False):
        normal = np.array([np.cos(theta), np.sin(theta)])
        proj = pts @ normal
        if proj[labels == 0].min() > proj[labels == 1].max():
            return True
    return False


def toy_dataset():
    pts, labels = separable_toy()
    return Toy(pts.reshape(20, 1, 1, 2), labels, 2)


def test_separable_toy_reaches_full_accuracy():
    pts, labels = separable_toy()
    assert brute_force_separable(pts, labels)
    ds = toy_dataset()
    m = nn.build_model([Flatten(), Dense(2)], (1, 1, 2), seed=0)
    cfg = nn.SgdConfig(base_lr=0.1, max_epochs=5, batch_size=4, seed=1)
    log = nn.train(m, ds, cfg)
    assert len(log.losses) == 5 and len(log.accuracies) == 5
    assert np.mean(nn.predict(m, ds.images) == ds.labels) == 1.0


def test_loss_decreases_in_most_seeds():
    ds = toy_dataset()
    wins = 0
    for seed in range(5):
        m = nn.build_model([Flatten(), Dense(2)], (1, 1, 2), seed=seed)
        log = nn.train(m, ds, nn.SgdConfig(base_lr=0.05, max_epochs=5, batch_size=4, seed=seed))
        wins += log.losses[-1] <= log.losses[0]
    assert wins >= 4


def test_zero_lr_leaves_weights_bitwise():
    ds = toy_dataset()
    m = nn.build_model([Flatten(), Dense(2)], (1, 1, 2), seed=3)
    before = {k: v.copy() for k, v in m.params.items()}
    nn.train(m, ds, nn.SgdConfig(base_lr=0.0, max_epochs=3, batch_size=4))
    for k in before:
        assert before[k].tobytes() == m.params[k].tobytes()


def test_training_is_bitwise_deterministic():
    rng = np.random.default_rng(0)
    ds = Toy(rng.random((30, 1, 6, 6)), rng.integers(0, 3, 30), 3)
    runs = []
    for _ in range(2):
        m = small_cnn(seed=5)
        log = nn.train(m, ds, nn.SgdConfig(base_lr=0.05, max_epochs=3, batch_size=8, seed=9))
        runs.append((log, {k: v.tobytes() for k, v in m.params.items()}))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_head_only_training_freezes_backbone():
    rng = np.random.default_rng(1)
    ds = Toy(rng.random((20, 1, 6, 6)), rng.integers(0, 3, 20), 3)
    m = small_cnn(seed=1)
    before = {k: v.copy() for k, v in m.params.items()}
    nn.train(m, ds, nn.SgdConfig(base_lr=0.1, max_epochs=2, batch_size=5), trainable="head")
    for k in m.param_names("backbone"):
        assert np.array_equal(before[k], m.params[k])
    assert any(not np.array_equal(before[k], m.params[k]) for k in m.param_names("head"))


def test_train_rejects_class_mismatch():
    ds = Toy(np.zeros((4, 1, 6, 6)), [0, 1, 0, 1], 2)
    with pytest.raises(ValueError, match="classes"):
        nn.train(small_cnn(3), ds, nn.SgdConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_names_epoch_and_batch():
    ds = Toy(np.full((4, 1, 6, 6), np.inf), [0, 1, 0, 1], 3)
    with pytest.raises(nn.TrainingDiverged, match="epoch 0, batch 0"):
        nn.train(small_cnn(3), ds, nn.SgdConfig(batch_size=2))


# --- gradient checks ---

def test_grad_check_dense_softmax():
    m = nn.build_model([Flatten(), Dense(4)], (1, 2, 3), seed=1)
    x = np.random.default_rng(3).random((5, 1, 2, 3))
    assert nn.grad_check(m, x, [0, 1, 2, 3, 1], eps=1e-5) < 1e-4


def test_grad_check_conv_pool_dense():
    m = nn.build_model([Conv2D(3, 3, 1, 1), ReLU(), MaxPool(2, 2), Flatten(), Dense(3)], (1, 6, 6), seed=2)
    x = np.random.default_rng(4).random((2, 1, 6, 6))
    assert nn.grad_check(m, x, [0, 2], eps=1e-5) < 1e-4


def jitter_biases(model, seed):
    rng = np.random.default_rng(seed)
    for name in model.param_names():
        if name.endswith("bias"):
            model.params[name][...] = rng.normal(scale=0.05, size=model.params[name].shape)


def test_grad_check_even_kernels_padding_multichannel():
    layers = [Conv2D(2, 2), ReLU(), Conv2D(3, 2, pad=1), ReLU(), MaxPool(2, 2), Flatten(), Dense(4)]
    m = nn.build_model(layers, (2, 8, 8), seed=4)
    jitter_biases(m, 0)
    x = np.random.default_rng(3).normal(size=(2, 2, 8, 8))
    assert nn.grad_check(m, x, [1, 3], eps=1e-5) < 1e-4


def test_zero_bias_padded_border_sits_on_relu_kink():
    # a padded window over dead units has pre-activation == bias == 0 exactly;
    # central differences see half the one-sided slope there, whatever eps is
    layers = [Conv2D(2, 2), ReLU(), Conv2D(3, 2, pad=1), ReLU(), MaxPool(2, 2), Flatten(), Dense(4)]
    m = nn.build_model(layers, (2, 8, 8), seed=4)
    x = np.random.default_rng(3).normal(size=(2, 2, 8, 8))
    errs = [nn.grad_check(m, x, [1, 3], eps=e) for e in (1e-4, 1e-6)]
    assert min(errs) > 0.1


def test_bias_gradient_symmetric_case():
    m = nn.build_model([Flatten(), Dense(3)], (1, 2, 2), seed=0)
    for k in m.params:
        m.params[k][...] = 0.0
    x = np.zeros((3, 1, 2, 2))
    labels = [0, 1, 1]
    _, _, grads = nn.loss_and_grads(m, x, labels)
    eps = 1e-5
    b = m.params["1.bias"]
    for j in range(3):
        b[j] = eps
        up = nn.softmax_cross_entropy(nn.forward(m, x), np.array(labels))[0]
        b[j] = -eps
        down = nn.softmax_cross_entropy(nn.forward(m, x), np.array(labels))[0]
        b[j] = 0.0
        assert abs(grads["1.bias"][j] - (up - down) / (2 * eps)) < 1e-8


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        nn.grad_check(small_cnn(), np.zeros((1, 1, 6, 6)), [0], eps=1e-2)


# --- checkpoints ---

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    m = nn.build_model(nn.default_architecture(7), (3, 16, 16), seed=21)
    path = tmp_path / "m.cpyc"
    nn.save_model(m, path)
    raw = path.read_bytes()
    assert raw[:4] == b"CPYC"
    loaded = nn.load_model(path)
    assert loaded.layers == m.layers and loaded.input_shape == m.input_shape
    for k in m.params:
        assert loaded.params[k].tobytes() == m.params[k].tobytes()
    nn.save_model(loaded, tmp_path / "again.cpyc")
    assert (tmp_path / "again.cpyc").read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ValueError, match="magic"):
        nn.load_model(p)
    m = small_cnn()
    nn.save_model(m, p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ValueError, match="truncated"):
        nn.load_model(p)


def test_replace_head_copies_backbone():
    m = nn.build_model(nn.default_architecture(7), (1, 16, 16), seed=1)
    new = nn.replace_head(m, 9, seed=3)
    assert new.n_classes == 9
    for k in m.param_names("backbone"):
        assert new.params[k].tobytes() == m.params[k].tobytes()
    assert np.all(new.params[f"{new.head_index}.bias"] == 0)
    assert nn.forward(new, np.zeros((2, 1, 16, 16))).shape == (2, 9)
