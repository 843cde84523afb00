import json
import math

import numpy as np
import pytest

from coldfusion import harness
from coldfusion.harness import (
    ABLATION_ROWS,
    TRACE_COLUMNS,
    Checkpoint,
    OptimizerState,
    TrainConfig,
    ablation_configs,
    adam_step,
    cosine_warm_restart_lr,
    evaluate,
    predict,
    run_ablation,
    train,
    write_eval_outputs,
)
from coldfusion.losses import LossWeights
from coldfusion.synthdata import SynthSpec, generate

TINY = SynthSpec(seed=0, n_train=8, n_val=4, n_test=4, n_frames=12, d_v=4, d_a=4, segment_len=4)


@pytest.fixture(scope="module")
def corpus():
    return generate(TINY)


@pytest.fixture(scope="module")
def cold_run(corpus):
    return train(TrainConfig(fusion="cold", epochs=2, hidden=4, seed=3), corpus)


def test_adam_zero_grad_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, OptimizerState.zeros_like(p), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_minus_lr():
    p = {"w": np.array([0.5])}
    adam_step(p, {"w": np.array([1.0])}, OptimizerState.zeros_like(p), lr=0.01)
    assert p["w"][0] == pytest.approx(0.5 - 0.01, abs=1e-9)


def test_adam_decoupled_weight_decay():
    p = {"w": np.array([2.0])}
    adam_step(p, {"w": np.zeros(1)}, OptimizerState.zeros_like(p), lr=0.1, weight_decay=0.5)
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def _reference_adam(x, lr, wd, steps, b1=0.9, b2=0.999, eps=1e-8):
    # scalar loop on f(x) = 1.5 (x - 2)^2
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = 3.0 * (x - 2.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x * (1 - lr * wd)
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        trace.append(x)
    return trace


def test_adam_matches_reference_trace():
    p = {"x": np.array([-1.0])}
    state = OptimizerState.zeros_like(p)
    trace = []
    for _ in range(10):
        adam_step(p, {"x": 3.0 * (p["x"] - 2.0)}, state, lr=0.05, weight_decay=0.01)
        trace.append(float(p["x"][0]))
    np.testing.assert_allclose(trace, _reference_adam(-1.0, 0.05, 0.01, 10), atol=1e-10, rtol=0)


def test_adam_skips_nonfinite():
    p = {"w": np.array([1.0])}
    state = OptimizerState.zeros_like(p)
    assert adam_step(p, {"w": np.array([np.nan])}, state, lr=0.1) is False
    assert p["w"][0] == 1.0 and state.step == 0 and state.skipped == 1


def test_lr_schedule_examples():
    assert cosine_warm_restart_lr(0, 10, 5e-3) == 5e-3
    assert cosine_warm_restart_lr(5, 10, 5e-3) == pytest.approx(2.5e-3, abs=1e-18)
    assert cosine_warm_restart_lr(10 - 1e-9, 10, 5e-3) == pytest.approx(0.0, abs=1e-15)
    assert cosine_warm_restart_lr(10, 10, 5e-3) == 5e-3
    # second period lasts two epochs
    assert cosine_warm_restart_lr(20, 10, 5e-3) == pytest.approx(2.5e-3, abs=1e-18)
    assert cosine_warm_restart_lr(30, 10, 5e-3) == 5e-3
    with pytest.raises(ValueError):
        cosine_warm_restart_lr(-1, 10, 1.0)


def test_lr_schedule_matches_closed_form_every_step():
    starts = [0, 3, 9, 21, 45]  # restart steps for epoch_len 3: periods of 1, 2, 4, 8 epochs
    for step in range(45):
        k = max(i for i, s in enumerate(starts) if s <= step)
        t, T = step - starts[k], starts[k + 1] - starts[k]
        expected = 0.5 * 0.01 * (1 + math.cos(math.pi * t / T))
        assert cosine_warm_restart_lr(step, 3, 0.01) == pytest.approx(expected, abs=1e-15)


def test_train_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(fusion="late")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"fusion": "cold", "bogus": 1})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"fusion": "context", "loss_weights": {"co_v": 0.5}}))
    cfg = TrainConfig.load(path)
    assert cfg.loss_weights.co_v == 0.5 and cfg.loss_weights.regu == 1e-4
    assert (cfg.batch_size, cfg.lr, cfg.weight_decay) == (4, 5e-3, 1e-4)


def test_smoke_train_writes_valid_checkpoint(cold_run, corpus, tmp_path):
    log = cold_run.log
    assert len(log) == 2 * 2
    assert {"step", "epoch", "lr", "emo", "co_v", "co_a", "co_av", "regu", "total"} <= set(log[0])
    assert [r["lr"] for r in log] == [cosine_warm_restart_lr(r["step"], 2, 5e-3) for r in log]
    path = cold_run.checkpoint.save(tmp_path / "ckpt.json")
    back = Checkpoint.load(path)
    assert back.model_config == cold_run.checkpoint.model_config
    for k, v in cold_run.checkpoint.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    assert back.info["selection"] == "val ccc_avg"


def test_training_log_file(corpus, tmp_path):
    train(TrainConfig(fusion="context", epochs=1, hidden=4), corpus, log_path=tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0])["step"] == 0


def test_training_is_deterministic(cold_run, corpus):
    again = train(TrainConfig(fusion="cold", epochs=2, hidden=4, seed=3), corpus)
    assert again.val_history == cold_run.val_history
    for k, v in cold_run.checkpoint.params.items():
        assert again.checkpoint.params[k].tobytes() == v.tobytes()


def test_save_load_evaluate_identical(cold_run, corpus, tmp_path):
    path = cold_run.checkpoint.save(tmp_path / "ckpt.json")
    a = evaluate(cold_run.checkpoint, corpus["test"])["metrics"]
    b = evaluate(path, corpus["test"])["metrics"]
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_evaluate_rejects_width_mismatch(cold_run):
    other = generate(SynthSpec(seed=0, n_train=1, n_val=1, n_test=2, n_frames=12, d_v=5, d_a=4))
    with pytest.raises(ValueError):
        predict(cold_run.checkpoint, other["test"])


def test_corruption_touches_only_masked_inputs(cold_run, corpus):
    clean = evaluate(cold_run.checkpoint, corpus["test"])
    bad = evaluate(cold_run.checkpoint, corpus["test"], {"modality": "V", "fraction": 0.5, "contiguous": True},
                   seed=1, noise_scale=TINY.noise_scale)
    mask = bad["split"].mask[..., 0]
    assert mask.sum() == 4 * 6
    np.testing.assert_array_equal(bad["split"].z_v[~mask], clean["split"].z_v[~mask])
    np.testing.assert_array_equal(bad["split"].z_a, clean["split"].z_a)
    np.testing.assert_array_equal(bad["split"].targets, clean["split"].targets)
    with pytest.raises(ValueError):
        evaluate(cold_run.checkpoint, corpus["test"], {"modality": "V", "fraction": 0.5})


def test_eval_outputs_schema(cold_run, corpus, tmp_path):
    res = evaluate(cold_run.checkpoint, corpus["test"])
    write_eval_outputs(res, tmp_path, "regression")
    rows = (tmp_path / "traces.csv").read_text().splitlines()
    header = rows[0].split(",")
    assert header == TRACE_COLUMNS
    # 2 modalities x (weight + variance norm) + 3 branches x 2 dims + 2 targets + ids, frame, 2 masks
    assert len(header) == 2 * 2 + 6 + 2 + 4
    assert len(rows) == 1 + 4 * 12
    metrics = json.loads((tmp_path / "metrics.json").read_text())["metrics"]
    assert {"ccc_valence", "ccc_arousal", "ccc_avg", "precision", "recall", "f1"} <= set(metrics)
    assert len(metrics["sequence_errors"]) == 4
    assert (tmp_path / "reliability.csv").read_text().startswith("bin_low,")


def test_classification_train_and_temperature_scaling(corpus, tmp_path):
    res = train(TrainConfig(fusion="cold", task="classification", epochs=1, hidden=4), corpus)
    assert res.checkpoint.info["selection"] == "val macro f1"
    out = evaluate(res.checkpoint, corpus["test"], temperature_scaling=True)
    m = out["metrics"]
    assert m["ece_after"] <= m["ece_before"]
    for name in ("valence", "arousal"):
        assert m[f"ece_after_{name}"] <= m[f"ece_before_{name}"]
        assert m[f"temperature_{name}"] > 0
    write_eval_outputs(out, tmp_path, "classification")
    assert len((tmp_path / "reliability.csv").read_text().splitlines()) == 11
    assert (tmp_path / "reliability_after_valence.csv").is_file()


def test_divergence_aborts(corpus, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("loss part emo is non-finite")

    monkeypatch.setattr(harness, "model_objective", boom)
    with pytest.raises(RuntimeError, match="diverged"):
        train(TrainConfig(fusion="cold", epochs=2, hidden=4), corpus)


def test_checkpoint_rejects_foreign_files(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "x.json")


def test_ablation_grid():
    rows = ablation_configs(TrainConfig(fusion="context"))
    assert [name for name, _ in rows] == [name for name, _ in ABLATION_ROWS]
    assert all(cfg.fusion == "cold" for _, cfg in rows)
    w = {name: cfg.loss_weights for name, cfg in rows}
    assert w["all constraints"] == LossWeights()
    assert w["without regularization"] == LossWeights(regu=0.0)
    assert w["without intramodal"] == LossWeights(co_v=0.0, co_a=0.0)
    assert w["without crossmodal"] == LossWeights(co_av=0.0)
    assert w["without any constraints"] == LossWeights(0.0, 0.0, 0.0, 0.0)


def test_run_ablation_table(corpus, tmp_path):
    table = run_ablation(TrainConfig(epochs=1, hidden=4), corpus)
    assert len(table) == 5
    for row in table:
        assert {"configuration", "ccc_valence", "ccc_arousal"} <= set(row)
    harness.write_table(table, tmp_path / "t.csv")
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 6
