import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coldfusion import diffcore as dc
from coldfusion.encoders import LatentSequence
from coldfusion.fusion import ModelConfig, init_model, model_forward
from coldfusion.losses import (
    LossWeights,
    cold_loss,
    crossmodal_vectors,
    distance_vector,
    emotion_loss,
    model_objective,
    total_loss,
    variance_norm_vector,
    variance_regularizer,
)
from coldfusion.metrics import spearman


def _latent(mu, sigma):
    tape = dc.Tape()
    return LatentSequence(tape.leaf(np.asarray(mu, float)), tape.leaf(np.asarray(sigma, float)))


def test_default_weights():
    w = LossWeights()
    assert (w.co_v, w.co_a, w.co_av, w.regu) == (1e-3, 1e-3, 1e-3, 1e-4)
    with pytest.raises(ValueError):
        LossWeights(co_v=-1.0)


def test_regression_loss_zero_at_perfect_prediction():
    y = np.random.default_rng(0).uniform(-1, 1, size=(2, 10, 2))
    tape = dc.Tape()
    pred = tape.leaf(y.copy())
    assert emotion_loss({"V": pred, "A": pred, "AV": pred}, y, "regression").value == pytest.approx(0, abs=1e-12)


def test_classification_uniform_logits_give_log3():
    tape = dc.Tape()
    logits = tape.leaf(np.zeros((4, 5, 2, 3)))
    classes = np.random.default_rng(1).integers(0, 3, size=(4, 5, 2))
    assert emotion_loss(logits, classes, "classification").value == pytest.approx(math.log(3), abs=1e-12)


def test_class_weights_rescale_per_class_terms():
    tape = dc.Tape()
    logits = tape.leaf(np.zeros((3, 1, 2, 3)))
    classes = np.array([[[0, 0]], [[1, 1]], [[2, 2]]])
    cw = np.array([[2.0, 1.0, 0.0], [2.0, 1.0, 0.0]])
    # mean of ln3 * (2, 1, 0)
    assert emotion_loss(logits, classes, "classification", cw).value == pytest.approx(math.log(3), abs=1e-12)


def test_distance_vector_examples():
    tape = dc.Tape()
    d = distance_vector(tape.leaf([[0.5, -0.5], [0.0, 0.0]]), np.zeros((2, 2)), "regression")
    np.testing.assert_allclose(d.value, [0.25, 0.0])
    logits = tape.leaf(np.zeros((1, 2, 3)))
    d = distance_vector(logits, np.array([[0, 2]]), "classification")
    np.testing.assert_allclose(d.value, [math.log(3)], atol=1e-12)


def test_distance_vector_gradient_switch():
    tape = dc.Tape()
    y = tape.leaf(np.array([[0.5, 0.1], [0.2, -0.3]]))
    S = tape.leaf(np.array([0.3, 1.0]))
    dc.backward(tape, cold_loss(distance_vector(y, np.zeros((2, 2)), "regression"), S))
    np.testing.assert_array_equal(y.grad, 0.0)
    assert np.any(S.grad != 0)
    dc.backward(tape, cold_loss(distance_vector(y, np.zeros((2, 2)), "regression", route_grad=True), S))
    assert np.any(y.grad != 0)


def test_variance_norm_examples():
    s = variance_norm_vector(_latent(np.zeros((2, 2)), [[3.0, 4.0], [1e-4, 0.0 + 1e-4]]))
    np.testing.assert_allclose(s.value, [0.2, 1.0 / (1e-4 * math.sqrt(2))])


def test_variance_norm_gradients():
    x = np.random.default_rng(2).uniform(0.1, 2.0, size=(4, 3))
    assert dc.grad_check(lambda t, v: dc.sum_(variance_norm_vector(v) * np.arange(1.0, 5.0)), x) < 1e-4


def test_cold_loss_examples():
    D = np.array([0.3, 1.2, -0.4])
    assert cold_loss(D, D.copy()).value == pytest.approx(0.0, abs=1e-15)
    assert cold_loss(D, D + 7.5).value == pytest.approx(0.0, abs=1e-12)
    value = cold_loss(np.array([0.0, math.log(2)]), np.array([math.log(2), 0.0])).value
    # softmax gives (1/3, 2/3) against (2/3, 1/3): symmetric KL = (2/3) ln 2
    assert value == pytest.approx(2 / 3 * math.log(2), abs=1e-12)
    assert value == pytest.approx(0.4621, abs=1e-4)


def test_cold_loss_rejects_short_vectors():
    with pytest.raises(ValueError):
        cold_loss(np.array([1.0]), np.array([1.0]))
    with pytest.raises(dc.ShapeError):
        cold_loss(np.zeros(3), np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), arrays(np.float64, 6, elements=st.floats(-5, 5)),
       st.floats(-50, 50))
def test_cold_loss_nonnegative_symmetric_shift_invariant(D, S, c):
    a = cold_loss(D, S).value
    assert a >= -1e-12
    assert cold_loss(S, D).value == pytest.approx(a, abs=1e-10)
    assert cold_loss(D + c, S).value == pytest.approx(a, abs=1e-9)


def test_cold_loss_gradients():
    rng = np.random.default_rng(3)
    D = rng.normal(size=(2, 5))
    assert dc.grad_check(lambda t, s: cold_loss(D, s), rng.normal(size=(2, 5))) < 1e-4


def test_ordinality_emerges_from_descent():
    rng = np.random.default_rng(4)
    D = rng.uniform(0, 3, size=50)
    s0 = rng.normal(size=50)
    tape = dc.Tape()
    S = tape.leaf(s0)
    for _ in range(2000):
        loss = cold_loss(D, S)
        dc.backward(tape, loss)
        S = (tape := dc.Tape()).leaf(S.value - 20.0 * S.grad)
    assert spearman(S.value, D) > 0.99


def test_crossmodal_interleaving():
    D, S = crossmodal_vectors([1.0, 2.0], [10.0, 20.0], [3.0, 4.0], [30.0, 40.0])
    np.testing.assert_array_equal(D.value, [10.0, 1.0, 20.0, 2.0])
    np.testing.assert_array_equal(S.value, [30.0, 3.0, 40.0, 4.0])
    D1, S1 = crossmodal_vectors([1.0], [2.0], [3.0], [4.0])
    assert D1.shape == (2,)
    assert cold_loss(D1, S1).value >= 0.0


def test_variance_regularizer_examples():
    assert variance_regularizer(_latent([[0.0]], [[1.0]])).value == pytest.approx(0.0, abs=1e-15)
    assert variance_regularizer(_latent([[1.0]], [[1.0]])).value == pytest.approx(0.5, abs=1e-15)
    closed = variance_regularizer(_latent([[0.0]], [[2.0]])).value
    assert closed == pytest.approx(0.8069, abs=1e-4)
    # Monte Carlo estimate of KL(N(0, 4) || N(0, 1))
    x = np.random.default_rng(5).normal(0.0, 2.0, size=1_000_000)
    log_q = -0.5 * (x / 2.0) ** 2 - math.log(2.0)
    log_p = -0.5 * x**2
    assert abs(closed - float(np.mean(log_q - log_p))) < 1e-2


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(0.05, 5))
def test_variance_regularizer_nonnegative(mu, sigma):
    v = variance_regularizer(_latent([[mu]], [[sigma]])).value
    assert v >= -1e-15
    if abs(mu) > 1e-3 or abs(sigma - 1) > 1e-3:
        assert v > 0


def test_variance_regularizer_gradients():
    rng = np.random.default_rng(6)
    params = {"mu": rng.normal(size=(3, 2)), "sigma": rng.uniform(0.3, 2, size=(3, 2))}
    err = dc.grad_check_params(lambda t, p: variance_regularizer(LatentSequence(p["mu"], p["sigma"])), params)
    assert err < 1e-4


def test_total_loss_weights():
    parts = {k: 1.0 for k in ("emo", "co_v", "co_a", "co_av", "regu")}
    assert total_loss(parts, LossWeights(0, 0, 0, 0)).total == 1.0
    assert total_loss(parts, LossWeights(1, 1, 1, 1)).total == 5.0
    b = total_loss({**parts, "emo": 2.0}, LossWeights())
    assert b.total == pytest.approx(2.0 + 3e-3 + 1e-4, abs=1e-15)
    with pytest.raises(FloatingPointError):
        total_loss({**parts, "co_v": float("nan")}, LossWeights())


def test_objective_gradients_reach_every_parameter():
    cfg = ModelConfig(fusion="cold", d_v=6, d_a=6, hidden=2, layers=2, dropout=0.0)
    params = init_model(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    z_v, z_a = rng.normal(size=(1, 3, 6)), rng.normal(size=(1, 3, 6))
    y = rng.uniform(-1, 1, size=(1, 3, 2))
    noise = {"V": rng.normal(size=(1, 3, 4)), "A": rng.normal(size=(1, 3, 4))}
    weights = LossWeights(0.5, 0.5, 0.5, 0.1)

    def build(t, P):
        out = model_forward(cfg, P, z_v, z_a, "train", np.random.default_rng(0), noise=noise)
        # finite differences see D move, so the check routes its gradient too
        return model_objective(out, y, cfg, weights, route_distance_grad=True).node

    assert dc.grad_check_params(build, params) < 1e-4
