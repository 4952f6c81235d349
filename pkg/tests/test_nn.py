import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ocimix import nn


def random_model(rng, input_dim=6, hidden=(5, 4), classes=3, head_scale=0.5):
    model = nn.init_model(input_dim, hidden, classes, rng)
    layers = tuple(nn.Layer(l.weight, 0.1 * rng.standard_normal(l.bias.shape), l.activation)
                   for l in model.layers)
    return nn.Model(layers, head_scale * rng.standard_normal(model.head_weights.shape))


def soft_labels(rng, n, classes):
    y = rng.random((n, classes))
    return y / y.sum(axis=1, keepdims=True)


def loss_of(model, x, y):
    return nn.cross_entropy(nn.forward(model, x)[1], y)


def with_param(model, index, value):
    """Copy of ``model`` with flat parameter ``index`` replaced by ``value``."""
    params = [p.copy() for p in model.parameters()]
    params[index] = value
    layers = tuple(nn.Layer(params[2 * i], params[2 * i + 1], l.activation)
                   for i, l in enumerate(model.layers))
    return nn.Model(layers, params[-1])


def test_zero_head_gives_uniform_probabilities():
    model = nn.init_model(5, (7,), 4, np.random.default_rng(0))
    _, p = nn.forward(model, np.random.default_rng(1).random((3, 5)))
    np.testing.assert_allclose(p, 0.25, rtol=0, atol=1e-15)


def test_identity_head_argmax():
    model = nn.Model((), np.eye(4))
    _, p = nn.forward(model, np.array([[1.0, 0, 0, 0]]))
    assert p.argmax() == 0


def test_forward_rows_sum_to_one_seeded():
    rng = np.random.default_rng(3)
    model = random_model(rng)
    h, p = nn.forward(model, rng.random((3, 6)))
    assert h.shape == (3, 4) and (h >= 0).all()
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-9


def test_forward_dimension_error():
    model = nn.init_model(5, (3,), 2, np.random.default_rng(0))
    with pytest.raises(nn.DimensionError):
        nn.forward(model, np.zeros((2, 4)))
    with pytest.raises(nn.DimensionError):
        nn.forward(model, np.zeros((0, 5)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-700, 700)))
def test_softmax_normalised_for_any_finite_logits(logits):
    p = nn.softmax(logits)
    assert np.isfinite(p).all()
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-9


def test_cross_entropy_analytic_cases():
    assert nn.cross_entropy(np.full((1, 4), 0.25), np.eye(4)[[2]]) == pytest.approx(math.log(4), abs=1e-12)
    assert nn.cross_entropy(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]])) == pytest.approx(math.log(2), abs=1e-12)
    eps = 1e-6
    p = np.array([[1 - eps, eps]])
    assert nn.cross_entropy(p, np.array([[1.0, 0.0]])) <= -math.log(1 - eps) + 1e-15


def test_cross_entropy_clamps_zero_mass():
    loss = nn.cross_entropy(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert np.isfinite(loss) and loss == pytest.approx(-math.log(nn.LOG_FLOOR))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cross_entropy_non_negative(seed):
    rng = np.random.default_rng(seed)
    p = soft_labels(rng, 5, 4)
    y = soft_labels(rng, 5, 4)
    assert nn.cross_entropy(p, y) >= 0


def test_head_gradient_vanishes_when_prediction_matches_label():
    rng = np.random.default_rng(0)
    model = random_model(rng)
    x = rng.random((4, 6))
    _, p = nn.forward(model, x)
    grads = nn.backward(model, x, p)
    assert np.abs(grads.head_weights).max() < 1e-15


def test_single_sample_head_gradient_row():
    rng = np.random.default_rng(1)
    model = random_model(rng)
    x = rng.random((1, 6))
    h, p = nn.forward(model, x)
    c = 1
    grads = nn.backward(model, x, np.eye(3)[[c]])
    np.testing.assert_allclose(grads.head_weights[c], -(1 - p[0, c]) * h[0], atol=1e-15)


@pytest.mark.parametrize("hidden", [(), (5,), (5, 4), (6, 5, 4)])
def test_backward_matches_central_differences(hidden):
    rng = np.random.default_rng(len(hidden) + 10)
    model = random_model(rng, hidden=hidden) if hidden else nn.Model((), rng.standard_normal((3, 6)))
    x = rng.random((5, 6))
    y = soft_labels(rng, 5, 3)
    analytic = nn.backward(model, x, y).arrays()
    step = 1e-5
    for k, param in enumerate(model.parameters()):
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            up = param.copy()
            up[idx] += step
            down = param.copy()
            down[idx] -= step
            numeric[idx] = (loss_of(with_param(model, k, up), x, y)
                            - loss_of(with_param(model, k, down), x, y)) / (2 * step)
        scale = np.maximum(np.abs(numeric), np.abs(analytic[k]))
        rel = np.abs(numeric - analytic[k]) / np.maximum(scale, 1e-8)
        assert rel.max() < 1e-4, (k, rel.max())


def test_sgd_step_basics():
    model = nn.Model((), np.array([[2.0]]))
    zero = nn.GradientSet((), np.zeros((1, 1)))
    assert nn.sgd_step(model, zero, 0.1).head_weights[0, 0] == 2.0
    g = nn.GradientSet((), np.array([[3.0]]))
    assert nn.sgd_step(model, g, 0.1).head_weights[0, 0] == pytest.approx(2.0 - 0.3)


def test_sgd_step_leaves_input_model_untouched():
    rng = np.random.default_rng(4)
    model = random_model(rng)
    before = [p.copy() for p in model.parameters()]
    x = rng.random((3, 6))
    nn.sgd_step(model, nn.backward(model, x, soft_labels(rng, 3, 3)), 0.5)
    for a, b in zip(before, model.parameters()):
        np.testing.assert_array_equal(a, b)


def test_mixed_label_update_matches_closed_form():
    """Head-only model, old class mixed into current samples at ratio mu_y.

    Closed form per class row, written out term by term: samples that carry
    mass mu_y on c contribute (mu_y - p) h, samples carrying no mass on c
    contribute -p h; the batch mean divides by B.
    """
    rng = np.random.default_rng(11)
    C, d, B = 4, 5, 6
    model = nn.Model((), 0.3 * rng.standard_normal((C, d)))
    h = rng.random((B, d))  # positive "relu" features
    old, mu_y, lr = 0, 0.75, 0.1
    y = np.zeros((B, C))
    # first four samples: mixed between old class 0 and new class 2 or 3
    new_of = [2, 3, 2, 3]
    for i, n in enumerate(new_of):
        y[i, old] = mu_y
        y[i, n] = 1 - mu_y
    y[4, 2] = 1.0
    y[5, 3] = 1.0
    _, p = nn.forward(model, h)
    updated = nn.sgd_step(model, nn.backward(model, h, y), lr)

    expected = model.head_weights.copy()
    # old class row: mass mu_y on samples 0..3, none on 4, 5
    delta = sum((mu_y - p[i, old]) * h[i] for i in range(4)) - sum(p[i, old] * h[i] for i in (4, 5))
    expected[old] += lr * delta / B
    # class 1 carries no mass anywhere
    expected[1] += -lr * sum(p[i, 1] * h[i] for i in range(B)) / B
    for c in (2, 3):
        term = np.zeros(d)
        for i in range(B):
            mass = y[i, c]
            term += (mass - p[i, c]) * h[i]
        expected[c] += lr * term / B
    np.testing.assert_allclose(updated.head_weights, expected, rtol=0, atol=1e-9)


def test_weight_norms():
    rng = np.random.default_rng(5)
    model = nn.init_model(3, (4,), 3, rng)
    np.testing.assert_array_equal(nn.classifier_weight_norms(model, [0, 1, 2]), 0.0)
    head = np.zeros((3, 2))
    head[1] = [3.0, 4.0]
    assert nn.classifier_weight_norms(nn.Model((), head), [1])[0] == pytest.approx(5.0)
    w = rng.standard_normal((3, 7))
    m = nn.Model((), w)
    manual = [math.sqrt(sum(v * v for v in w[c])) for c in (2, 0)]
    np.testing.assert_allclose(nn.classifier_weight_norms(m, [2, 0]), manual, rtol=1e-14)
    with pytest.raises(KeyError):
        nn.classifier_weight_norms(m, [3])


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(9)
        model = nn.init_model(6, (8, 5), 3, rng)
        for _ in range(20):
            x = rng.random((4, 6))
            y = np.eye(3)[rng.integers(0, 3, 4)]
            model, _ = nn.train_step(model, x, y, 0.1)
        return model
    a, b = run(), run()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.tobytes() == pb.tobytes()


def test_checkpoint_round_trip(tmp_path):
    model = random_model(np.random.default_rng(6))
    path = tmp_path / "model.json"
    nn.save_model(model, path)
    assert nn.CHECKPOINT_HEADER in path.read_text()[:40]
    loaded = nn.load_model(path)
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        nn.load_model(path)


def test_model_requires_relu_last_layer():
    with pytest.raises(ValueError):
        nn.Model((nn.Layer(np.zeros((3, 2)), np.zeros(2), "identity"),), np.zeros((2, 2)))
