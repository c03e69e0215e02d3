import numpy as np
import pytest

from memda.errors import ConfigurationError, NumericalError
from memda.nn import (
    PROB_EPS,
    Dense,
    MLP,
    build_model,
    classifier_forward,
    discriminator_forward,
    encoder_forward,
    finite_difference_check,
    gradient_reversal,
    gradient_reversal_forward,
    sigmoid,
    softmax,
)


def test_zero_network_gives_zero_features():
    model = build_model(input_dim=3, embed_dim=4, num_classes=2, seed=0)
    for p in model.encoder.parameters():
        p[...] = 0.0
    f, _ = encoder_forward(np.ones((5, 3)), model.encoder)
    assert np.all(f == 0.0)


def test_identity_layer_forward():
    rng = np.random.default_rng(0)
    layer = Dense(2, 2, rng)
    layer.w[...] = np.eye(2)
    layer.b[...] = 0.0
    net = MLP([layer])
    f, _ = net.forward(np.array([[1.0, 2.0]]))
    assert np.array_equal(f, [[1.0, 2.0]])


def test_encoder_matches_straight_line_oracle():
    # re-evaluate the 2-hidden-layer forward pass with explicit matmuls
    model = build_model(input_dim=5, embed_dim=3, num_classes=2,
                        encoder_hidden=7, encoder_layers=2, seed=11)
    rng = np.random.default_rng(42)
    x = rng.normal(size=(6, 5))
    f, _ = encoder_forward(x, model.encoder)

    w1, b1, w2, b2, w3, b3 = model.encoder.parameters()
    expected = np.tanh(np.tanh(x @ w1.T + b1) @ w2.T + b2) @ w3.T + b3
    assert np.max(np.abs(f - expected)) <= 1e-12


def test_encoder_shape_mismatch():
    model = build_model(input_dim=5, embed_dim=3, seed=0)
    with pytest.raises(ConfigurationError):
        encoder_forward(np.zeros((2, 4)), model.encoder)
    with pytest.raises(ConfigurationError):
        encoder_forward(np.zeros((0, 5)), model.encoder)


def test_softmax_uniform_on_zero_logits():
    p = softmax(np.zeros((1, 4)))
    assert np.allclose(p, 0.25, atol=1e-15)


def test_softmax_no_overflow_on_extreme_logits():
    p = softmax(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(p))
    assert p[0, 0] == pytest.approx(1.0)
    assert p[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_direct_evaluation_oracle():
    logits = np.array([[1.0, 2.0, 3.0]])
    oracle = np.exp(logits) / np.exp(logits).sum()
    p = softmax(logits)
    assert np.max(np.abs(p - oracle)) <= 1e-12
    assert np.allclose(p[0], [0.0900, 0.2447, 0.6652], atol=5e-5)


def test_classifier_rows_are_distributions():
    model = build_model(input_dim=4, embed_dim=6, num_classes=9, seed=3)
    rng = np.random.default_rng(0)
    probs, _, _ = classifier_forward(rng.normal(size=(20, 6)), model.classifier)
    assert np.all(probs >= 0.0)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-9


def test_classifier_rejects_non_finite_logits():
    model = build_model(input_dim=4, embed_dim=6, num_classes=3, seed=3)
    model.classifier.parameters()[0][...] = np.inf
    with pytest.raises(NumericalError):
        classifier_forward(np.ones((1, 6)), model.classifier)


def test_discriminator_zero_network_outputs_half():
    model = build_model(input_dim=4, embed_dim=2, num_classes=2, seed=0)
    for p in model.discriminator.parameters():
        p[...] = 0.0
    p, _ = discriminator_forward(np.ones((3, 4)), model.discriminator)
    assert np.all(p == 0.5)


def test_discriminator_clamps_saturated_output():
    model = build_model(input_dim=1, embed_dim=1, num_classes=1, disc_hidden=2, seed=0)
    for p in model.discriminator.parameters():
        p[...] = 50.0
    p, _ = discriminator_forward(np.array([[100.0]]), model.discriminator)
    assert p[0] == 1.0 - PROB_EPS


def test_discriminator_matches_straight_line_oracle():
    model = build_model(input_dim=2, embed_dim=2, num_classes=2,
                        disc_hidden=5, seed=9)
    rng = np.random.default_rng(7)
    h = rng.normal(size=(4, 4))
    p, _ = discriminator_forward(h, model.discriminator)

    w1, b1, w2, b2, w3, b3 = model.discriminator.parameters()
    z = np.maximum(h @ w1.T + b1, 0.0)
    z = np.maximum(z @ w2.T + b2, 0.0)
    z = (z @ w3.T + b3)[:, 0]
    oracle = np.clip(1.0 / (1.0 + np.exp(-z)), PROB_EPS, 1 - PROB_EPS)
    assert np.max(np.abs(p - oracle)) <= 1e-12
    assert np.all((p > 0.0) & (p < 1.0))


def test_gradient_reversal_values():
    v = np.array([2.0, -4.0])
    assert np.array_equal(gradient_reversal(v, 1.0), -v)
    assert np.array_equal(gradient_reversal(v, 0.0), np.zeros(2))
    assert np.array_equal(gradient_reversal(v, 0.5), np.array([-1.0, 2.0]))
    with pytest.raises(ConfigurationError):
        gradient_reversal(v, -0.1)


def test_gradient_reversal_forward_is_bitwise_identity():
    x = np.array([[1.0, -0.0, np.pi]])
    assert gradient_reversal_forward(x) is x


def test_sigmoid_stable_both_tails():
    z = np.array([-800.0, 0.0, 800.0])
    s = sigmoid(z)
    assert np.all(np.isfinite(s))
    assert s[1] == 0.5


def test_fd_check_quadratic():
    theta = np.array([3.0, 4.0])

    def loss_fn():
        return 0.5 * float(theta @ theta), [theta.copy()]

    err = finite_difference_check(loss_fn, [theta], h_step=1e-6)
    assert err <= 1e-9


def test_fd_check_rejects_bad_step():
    theta = np.zeros(1)
    loss_fn = lambda: (0.0, [np.zeros(1)])
    for h in (1e-8, 1e-3):
        with pytest.raises(ConfigurationError):
            finite_difference_check(loss_fn, [theta], h_step=h)


def test_fd_check_reports_non_finite_probes():
    theta = np.array([0.0])

    def loss_fn():
        # finite at the expansion point, NaN anywhere else
        if theta[0] == 0.0:
            return 0.0, [np.zeros(1)]
        return float("nan"), [np.zeros(1)]

    with pytest.raises(NumericalError, match="probing"):
        finite_difference_check(loss_fn, [theta], h_step=1e-6)


def test_same_seed_bitwise_identical_forward_and_grads():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    dy = rng.normal(size=(4, 2))
    outs, grads = [], []
    for _ in range(2):
        model = build_model(input_dim=3, embed_dim=2, num_classes=2, seed=77)
        f, tape = encoder_forward(x, model.encoder)
        model.encoder.backward(tape, dy)
        outs.append(f)
        grads.append([g.copy() for g in model.encoder.gradients()])
    assert np.array_equal(outs[0], outs[1])
    for a, b in zip(*grads):
        assert np.array_equal(a, b)
