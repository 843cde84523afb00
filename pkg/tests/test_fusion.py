import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coldfusion import diffcore as dc
from coldfusion.encoders import gru_encode
from coldfusion.fusion import (
    FusionWeights,
    ModelConfig,
    cold_weights,
    fuse_context,
    head,
    init_model,
    model_forward,
    prediction_fusion,
)


def _leaves(tape, params):
    return {k: tape.leaf(v) for k, v in params.items()}


def test_cold_weights_arithmetic():
    w = cold_weights(np.array([[1.0]]), np.array([[1.0]]))
    assert (w.w_v.value[0], w.w_a.value[0]) == (0.5, 0.5)
    w = cold_weights(np.array([[3.0]]), np.array([[1.0]]))
    assert w.w_v.value[0] == pytest.approx(0.75, abs=1e-15)
    assert w.w_a.value[0] == pytest.approx(0.25, abs=1e-15)
    # norm 3 spread over several dims
    w = cold_weights(np.array([[2.0, 2.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]) + 0.0)
    assert w.w_v.value[0] == pytest.approx(0.75, abs=1e-15)


def test_cold_weights_simplex_many_draws():
    rng = np.random.default_rng(0)
    sv = rng.uniform(1e-4, 5.0, size=(10_000, 8))
    sa = rng.uniform(1e-4, 5.0, size=(10_000, 8))
    w = cold_weights(sv, sa)
    assert np.all((w.w_v.value >= 0) & (w.w_v.value <= 1))
    np.testing.assert_allclose(w.w_v.value + w.w_a.value, 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(1e-3, 10.0)),
       arrays(np.float64, (3, 4), elements=st.floats(1e-3, 10.0)),
       st.floats(1e-2, 1e2))
def test_cold_weights_scale_invariance(sv, sa, scale):
    a = cold_weights(sv, sa).w_v.value
    b = cold_weights(sv * scale, sa * scale).w_v.value
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_cold_weights_guard():
    with pytest.raises(ValueError):
        cold_weights(np.zeros((1, 2)) + 1e-300, np.zeros((1, 2)) + 1e-300)


def _weights(tape, wv):
    wv = np.asarray(wv, dtype=float)
    return FusionWeights(tape.constant(wv), tape.constant(1.0 - wv))


def test_fuse_context_degenerate_and_cancellation():
    rng = np.random.default_rng(0)
    tape = dc.Tape()
    h_v = tape.leaf(rng.normal(size=(2, 3, 4)))
    h_a = tape.leaf(rng.normal(size=(2, 3, 4)))
    np.testing.assert_array_equal(fuse_context(h_v, h_a, _weights(tape, np.ones((2, 3)))).value, h_v.value)
    neg = tape.leaf(-h_v.value)
    np.testing.assert_allclose(fuse_context(h_v, neg, _weights(tape, np.full((2, 3), 0.5))).value, 0.0,
                               atol=1e-15)


def test_fuse_context_shape_mismatch():
    tape = dc.Tape()
    with pytest.raises(dc.ShapeError):
        fuse_context(tape.leaf(np.ones((1, 2, 3))), tape.leaf(np.ones((1, 2, 4))),
                     _weights(tape, np.ones((1, 2))))


def test_fuse_context_gradients():
    rng = np.random.default_rng(1)
    params = {"hv": rng.normal(size=(1, 3, 4)), "ha": rng.normal(size=(1, 3, 4)),
              "sv": rng.uniform(0.2, 2, size=(1, 3, 4)), "sa": rng.uniform(0.2, 2, size=(1, 3, 4))}
    g = rng.normal(size=(1, 3, 4))

    def build(t, p):
        return dc.sum_(fuse_context(p["hv"], p["ha"], cold_weights(p["sv"], p["sa"])) * g)

    assert dc.grad_check_params(build, params) < 1e-4


def test_prediction_fusion_rules():
    tape = dc.Tape()
    y = tape.leaf(np.array([[0.3, -0.2]]))
    same = prediction_fusion(y, y, tape.constant([[0.9]]), tape.constant([[0.4]]))
    np.testing.assert_allclose(same.value, y.value, atol=1e-15)
    other = tape.leaf(np.array([[-0.7, 0.8]]))
    only_v = prediction_fusion(y, other, tape.constant([[1.0]]), tape.constant([[0.0]]))
    np.testing.assert_array_equal(only_v.value, y.value)
    p = prediction_fusion(np.array([0.6, 0.3, 0.1]), np.array([0.2, 0.2, 0.6]), np.array([0.6]),
                          np.array([0.6]))
    np.testing.assert_allclose(p.value, [0.4, 0.25, 0.35], atol=1e-15)


def _cfg(**kw):
    base = dict(d_v=6, d_a=6, hidden=2, layers=2, dropout=0.0, backbone="tanh")
    base.update(kw)
    return ModelConfig(**base)


def _inputs(seed=0, B=1, N=3, D=6):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(B, N, D)), rng.normal(size=(B, N, D))


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(fusion="late")
    with pytest.raises(ValueError):
        ModelConfig(task="ranking")


def test_feature_fusion_concatenated_width():
    cfg = ModelConfig(fusion="feature", d_v=16, d_a=16, hidden=4)
    params = init_model(cfg, np.random.default_rng(0))
    assert params["AV.gru.l0.fwd.w_in"].shape[0] == 32


def test_feature_fusion_duplicate_modality_matches_tiled_stream():
    cfg = _cfg(fusion="feature", backbone="none")
    params = init_model(cfg, np.random.default_rng(0))
    z, _ = _inputs()
    tape = dc.Tape()
    P = _leaves(tape, params)
    y = model_forward(cfg, P, z, z).y["AV"].value
    h = gru_encode(tape.constant(np.concatenate([z, z], axis=-1)), P, cfg.encoder(12), "AV.gru")
    np.testing.assert_array_equal(y, head(h, P, "AV.head", cfg).value)


def test_feature_fusion_frame_mismatch():
    cfg = _cfg(fusion="feature")
    tape = dc.Tape()
    P = _leaves(tape, init_model(cfg, np.random.default_rng(0)))
    with pytest.raises(dc.ShapeError):
        model_forward(cfg, P, np.zeros((1, 3, 6)), np.zeros((1, 4, 6)))


def test_context_fusion_zero_context_gives_head_bias():
    cfg = _cfg(fusion="context")
    params = init_model(cfg, np.random.default_rng(0))
    tape = dc.Tape()
    P = _leaves(tape, params)
    zero = tape.constant(np.zeros((1, 3, cfg.context_dim)))
    from coldfusion.fusion import context_fusion_forward

    out = context_fusion_forward(cfg, P, zero, zero)
    np.testing.assert_allclose(out.y["AV"].value, np.broadcast_to(np.tanh(params["AV.head.b"]), (1, 3, 2)))


def test_context_fusion_head_width():
    cfg = ModelConfig(fusion="context", hidden=32)
    assert cfg.context_dim == 64
    assert init_model(cfg, np.random.default_rng(0))["AV.head.w"].shape == (128, 2)


@pytest.mark.parametrize("fusion", ["feature", "prediction", "context", "cold"])
@pytest.mark.parametrize("task", ["regression", "classification"])
def test_model_gradients(fusion, task):
    cfg = _cfg(fusion=fusion, task=task)
    params = init_model(cfg, np.random.default_rng(7))
    z_v, z_a = _inputs(1)
    g = np.random.default_rng(2)

    def build(t, P):
        out = model_forward(cfg, P, z_v, z_a, "train", np.random.default_rng(0),
                            noise={"V": np.zeros((1, 3, 4)), "A": np.zeros((1, 3, 4))})
        total = 0.0
        for y in out.y.values():
            total = total + dc.sum_(dc.tanh(y) * np.random.default_rng(3).normal(size=y.shape))
        return total

    assert dc.grad_check_params(build, params) < 1e-4


def test_cold_eval_is_deterministic():
    cfg = _cfg(fusion="cold", dropout=0.5)
    params = init_model(cfg, np.random.default_rng(0))
    z_v, z_a = _inputs(2, B=2, N=5)

    def run():
        tape = dc.Tape()
        out = model_forward(cfg, _leaves(tape, params), z_v, z_a, "eval")
        return out.y["AV"].value.tobytes(), out.weights.w_v.value.tobytes()

    assert run() == run()


def test_cold_sigma_floor_limit_drives_visual_weight_to_one():
    cfg = _cfg(fusion="cold")
    params = init_model(cfg, np.random.default_rng(0))
    params["A.latent.sigma.w"][:] = 0.0
    params["A.latent.sigma.b"][:] = -60.0
    z_v, z_a = _inputs(3, N=4)
    tape = dc.Tape()
    out = model_forward(cfg, _leaves(tape, params), z_v, z_a, "eval")
    assert np.all(out.weights.w_v.value > 0.999)


def test_identical_modalities_get_equal_weights():
    cfg = _cfg(fusion="cold")
    params = init_model(cfg, np.random.default_rng(0))
    for k in list(params):
        if k.startswith("A."):
            params[k] = params["V." + k[2:]].copy()
    z, _ = _inputs(4, B=2, N=6)
    tape = dc.Tape()
    out = model_forward(cfg, _leaves(tape, params), z, z.copy(), "eval")
    np.testing.assert_allclose(out.weights.w_v.value, 0.5, atol=1e-15)
    np.testing.assert_allclose(out.weights.w_a.value, 0.5, atol=1e-15)


def test_classification_heads_emit_three_way_logits():
    cfg = _cfg(fusion="cold", task="classification")
    tape = dc.Tape()
    out = model_forward(cfg, _leaves(tape, init_model(cfg, np.random.default_rng(0))), *_inputs(B=2, N=5))
    for y in out.y.values():
        assert y.shape == (2, 5, 2, 3)
