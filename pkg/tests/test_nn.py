import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from advids import nn
from advids.data import EncodedDataset
from advids.errors import NumericalError, ShapeError, UsageError

from conftest import one_hot, random_mlp


def linear_model(w, b):
    return nn.Mlp([nn.DenseLayer(np.asarray(w, float), np.asarray(b, float))], dropout_rate=0.0)


def test_zero_model_is_uniform():
    model = nn.Mlp([nn.DenseLayer(np.zeros((4, 3)), np.zeros(4)),
                    nn.DenseLayer(np.zeros((2, 4)), np.zeros(2))])
    pred, _ = nn.forward(model, np.array([1.0, -2.0, 3.0]))
    assert pred.probabilities.tolist() == [0.5, 0.5]


def test_single_linear_layer_logits():
    w = [[1.0, 2.0], [-3.0, 0.5]]
    b = [0.25, -1.0]
    x = np.array([2.0, -1.0])
    pred, _ = nn.forward(linear_model(w, b), x)
    assert pred.logits.tolist() == [1.0 * 2 + 2.0 * -1 + 0.25, -3.0 * 2 + 0.5 * -1 - 1.0]
    assert pred.predicted_class == 0


def test_dropout_monte_carlo_matches_inference():
    # logits are linear in the dropped hidden vector, so their mean over masks
    # converges to the inference-mode logits
    model = random_mlp((5, 32, 2), seed=3, dropout_rate=0.2)
    x = np.random.default_rng(1).normal(size=(1, 5))
    infer = nn.forward(model, x)[0].logits[0]
    batch = np.repeat(x, 10_000, axis=0)
    train = nn.forward(model, batch, "train", np.random.default_rng(7))[0].logits
    mean = train.mean(axis=0)
    assert np.all(np.abs(mean - infer) <= 0.02 * np.abs(infer))


def test_infer_mode_ignores_rng():
    model = random_mlp((4, 6, 2), seed=1, dropout_rate=0.5)
    x = np.random.default_rng(2).normal(size=(3, 4))
    a = nn.forward(model, x, "infer", np.random.default_rng(0))[0].logits
    b = nn.forward(model, x, "infer", np.random.default_rng(99))[0].logits
    c = nn.forward(model, x)[0].logits
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_train_mode_requires_rng():
    model = random_mlp((4, 6, 2), seed=1, dropout_rate=0.5)
    with pytest.raises(UsageError):
        nn.forward(model, np.zeros(4), "train")


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        nn.forward(random_mlp((4, 2), 0), np.zeros(5))


def test_loss_perfect_prediction():
    assert nn.loss(np.array([800.0, 0.0]), np.array([1.0, 0.0])) == 0.0


@pytest.mark.parametrize("y", [[1.0, 0.0], [0.0, 1.0]])
def test_loss_uniform(y):
    assert nn.loss(np.array([0.3, 0.3]), np.array(y)) == pytest.approx(math.log(2), abs=1e-15)


def test_fused_loss_matches_naive_formula():
    rng = np.random.default_rng(5)
    z = rng.normal(0, 5, size=(500, 2))
    y = one_hot(rng.integers(0, 2, 500))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    naive = -(y * np.log(p)).sum(axis=1)
    assert np.max(np.abs(nn.loss(z, y) - naive)) < 1e-10


def test_loss_accepts_prediction():
    pred, _ = nn.forward(random_mlp((3, 2), 0), np.ones(3))
    assert nn.loss(pred, np.array([1.0, 0.0])) == nn.loss(pred.logits, np.array([1.0, 0.0]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-1e6, 1e6)))
def test_softmax_in_simplex(z):
    p = nn.softmax(z)
    assert np.all((p >= 0) & (p <= 1))
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
    assert np.all(np.isfinite(nn.loss(z, one_hot([0, 1, 0, 1, 0]))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_argmax_invariance(seed):
    model = random_mlp((3, 5, 2), seed)
    x = np.random.default_rng(seed).normal(size=(20, 3))
    pred, _ = nn.forward(model, x)
    assert np.array_equal(np.argmax(pred.logits, 1), np.argmax(pred.probabilities, 1))
    assert np.array_equal(pred.predicted_class, np.argmax(pred.probabilities, 1))


def test_output_layer_gradient_rule():
    # identity weights: dJ/dx equals dJ/dz = softmax(z) - y
    model = linear_model(np.eye(2), np.zeros(2))
    _, cache = nn.forward(model, np.array([0.0, 0.0]))
    g = nn.backward(model, cache, np.array([1.0, 0.0]))
    assert g.inputs[0].tolist() == [-0.5, 0.5]


def test_single_layer_input_gradient_closed_form():
    rng = np.random.default_rng(8)
    w, b = rng.normal(size=(2, 6)), rng.normal(size=2)
    x = rng.normal(size=6)
    y = np.array([0.0, 1.0])
    z = w @ x + b
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    expected = w.T @ (p - y)
    _, grad = nn.input_gradient(linear_model(w, b), x, y)
    np.testing.assert_allclose(grad[0], expected, rtol=1e-13, atol=1e-15)


def _central_difference(f, arr, h=1e-5):
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def relative_error(analytic, numeric, floor=1e-4):
    # floor keeps round-off (~1e-11 at h=1e-5) from dominating near-zero entries
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def away_from_kinks(model, x, margin=1e-3):
    _, cache = nn.forward(model, x)
    return all(np.min(np.abs(z)) > margin for z in cache.pre_activations[:-1])


def gradient_check(sizes, seed, batch=3):
    rng = np.random.default_rng(seed)
    for attempt in range(100):
        model = random_mlp(sizes, seed * 1000 + attempt)
        x = rng.normal(size=(batch, sizes[0]))
        if away_from_kinks(model, x):
            break
    y = one_hot(rng.integers(0, sizes[-1], batch), sizes[-1])
    _, cache = nn.forward(model, x)
    grads = nn.backward(model, cache, y)
    mean_loss = lambda: float(nn.loss(nn.forward(model, x)[0].logits, y).mean())  # noqa: E731
    worst = 0.0
    for p, g in zip(model.params(), grads.params):
        worst = max(worst, relative_error(g, _central_difference(mean_loss, p)).max())
    for i in range(batch):
        xi = x[i:i + 1].copy()
        own = lambda: float(nn.loss(nn.forward(model, xi)[0].logits, y[i:i + 1])[0])  # noqa: E731
        worst = max(worst, relative_error(grads.inputs[i], _central_difference(own, xi[0])).max())
    return worst


def test_gradients_match_finite_differences_4_8_2():
    assert gradient_check((4, 8, 2), seed=1) < 1e-6


@pytest.mark.parametrize("sizes", [(3, 2), (5, 7, 6, 2), (2, 10, 10, 2)])
def test_gradients_match_finite_differences_shapes(sizes):
    assert gradient_check(sizes, seed=sum(sizes)) < 1e-6


def test_gradients_with_dropout_mask():
    model = random_mlp((4, 8, 2), seed=2, dropout_rate=0.3)
    x = np.random.default_rng(0).normal(size=(1, 4))
    y = np.array([[0.0, 1.0]])
    _, cache = nn.forward(model, x, "train", np.random.default_rng(4))
    grads = nn.backward(model, cache, y)
    masks = cache.masks

    def masked_loss():
        # replay the same mask deterministically
        h = np.maximum(x @ model.layers[0].weights.T + model.layers[0].biases, 0) * masks[0]
        z = h @ model.layers[1].weights.T + model.layers[1].biases
        return float(nn.loss(z, y)[0])

    num = _central_difference(masked_loss, model.layers[0].weights)
    assert relative_error(grads.params[0], num).max() < 1e-6


def test_stale_or_missing_cache():
    model = random_mlp((3, 4, 2), 0)
    _, cache = nn.forward(model, np.ones(3))
    with pytest.raises(UsageError):
        nn.backward(model, None, np.array([1.0, 0.0]))
    model.touch()
    with pytest.raises(UsageError):
        nn.backward(model, cache, np.array([1.0, 0.0]))
    with pytest.raises(UsageError):
        nn.backward(random_mlp((3, 4, 2), 0), cache, np.array([1.0, 0.0]))


def test_adam_first_step_magnitude():
    p = [np.array([0.0])]
    state = nn.AdamState(p)
    nn.adam_step(state, p, [np.array([1.0])])
    assert p[0][0] == pytest.approx(-0.001, rel=1e-6)


def test_adam_zero_gradient():
    p = [np.array([1.5, -2.0])]
    state = nn.AdamState(p)
    nn.adam_step(state, p, [np.zeros(2)])
    assert p[0].tolist() == [1.5, -2.0]

    nn.adam_step(state, p, [np.array([1.0, -3.0])])
    m, v = state.m[0].copy(), state.v[0].copy()
    nn.adam_step(state, p, [np.zeros(2)])
    assert np.array_equal(state.m[0], 0.9 * m)
    assert np.array_equal(state.v[0], 0.999 * v)


def test_adam_three_step_trace():
    def reference(theta, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
        m = v = 0.0
        for t, g in enumerate(grads, 1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        return theta

    grads = [0.3, -1.7, 0.05]
    p = [np.array([0.42])]
    state = nn.AdamState(p)
    for g in grads:
        nn.adam_step(state, p, [np.array([g])])
    assert abs(p[0][0] - reference(0.42, grads)) < 1e-12
    assert state.t == 3


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    with pytest.raises(ShapeError):
        nn.adam_step(nn.AdamState(p), p, [np.zeros(2)])


def test_xor_converges():
    x = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], float)
    labels = one_hot([0, 1, 1, 0])
    ds = EncodedDataset(x, labels)
    cfg = nn.TrainConfig(epochs=2000, batch_size=4, learning_rate=0.01, dropout_rate=0.0,
                         hidden=(8, 8), seed=3)
    model = nn.build_detector(2, cfg)
    model, history = nn.train(model, ds, cfg)
    assert nn.evaluate(model, ds).accuracy == 1.0
    assert history[-1] < history[0]


def test_training_is_deterministic(synthetic_split):
    _, train, _ = synthetic_split
    cfg = nn.TrainConfig(epochs=1, hidden=(16, 16), seed=9)
    a, ha = nn.train(nn.build_detector(train.features.shape[1], cfg), train, cfg)
    b, hb = nn.train(nn.build_detector(train.features.shape[1], cfg), train, cfg)
    assert ha == hb
    for p, q in zip(a.params(), b.params()):
        assert p.tobytes() == q.tobytes()


def test_nonfinite_loss_aborts():
    model = nn.build_detector(3, nn.TrainConfig(hidden=(4,)))
    model.layers[-1].weights[:] = np.nan
    ds = EncodedDataset(np.ones((4, 3)), one_hot([0, 1, 0, 1]))
    with pytest.raises(NumericalError, match="epoch 1"):
        nn.train(model, ds, nn.TrainConfig(epochs=1, hidden=(4,)))


def test_float32_option(synthetic_split):
    _, train, test = synthetic_split
    accs = {}
    for dtype in ("float32", "float64"):
        cfg = nn.TrainConfig(epochs=3, hidden=(16,), dtype=dtype)
        model, _ = nn.train(nn.build_detector(train.features.shape[1], cfg), train, cfg)
        assert model.dtype == np.dtype(dtype)
        accs[dtype] = nn.evaluate(model, test).accuracy
    assert abs(accs["float32"] - accs["float64"]) < 0.01


def test_constant_anomaly_accuracy_on_reference_counts():
    truth = np.array([0] * 13468 + [1] * (9185 + 2331 + 199 + 10))
    ev = nn.evaluate_predictions(np.ones_like(truth), truth)
    assert ev.accuracy == pytest.approx((9185 + 2331 + 199 + 10) / 25193)
    assert round(ev.accuracy * 100, 2) == 46.54
    assert ev.confusion.tolist() == [[0, 13468], [0, 11725]]
    assert ev.accuracy + ev.error_rate == 1.0


def test_perfect_playback():
    truth = np.array([0, 1, 1, 0, 1])
    ev = nn.evaluate_predictions(truth, truth)
    assert ev.accuracy == 1.0 and ev.error_rate == 0.0


def test_evaluate_empty():
    model = random_mlp((3, 2), 0)
    with pytest.raises(Exception):
        nn.evaluate(model, EncodedDataset(np.zeros((0, 3)), np.zeros((0, 2))))


def test_model_file_roundtrip(tmp_path):
    cfg = nn.TrainConfig()
    model = nn.build_detector(10, cfg)
    nn.save_model(tmp_path / "m.mdl", model, cfg, {"note": "x"})
    back, header = nn.load_model(tmp_path / "m.mdl")
    assert back.sizes == (10, 512, 512, 2)
    assert back.dropout_rate == 0.2
    for p, q in zip(model.params(), back.params()):
        assert np.array_equal(p, q)
    text = (tmp_path / "m.mdl").read_bytes().split(b"%%\n")[0].decode()
    assert "hidden=512,512\n" in text and "dropout=0.2\n" in text
    assert header["note"] == "x"
    assert nn.train_config_from_header(header) == cfg
