"""Training loop, learning-rate schedule, checkpoints, evaluation and ablation runner."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import metrics as M
from .fusion import FUSION_MODES, TASKS, ModelConfig, init_model, model_forward
from .losses import LossWeights, model_objective
from .synthdata import Corpus, Split, class_weights, corrupt_split, sequence_class, weighted_sampler

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "coldfusion-checkpoint"
CHECKPOINT_VERSION = 1
DIM_NAMES = ("valence", "arousal")


@dataclass
class TrainConfig:
    fusion: str = "cold"
    task: str = "regression"
    batch_size: int = 4
    lr: float = 5e-3
    weight_decay: float = 1e-4
    loss_weights: LossWeights = field(default_factory=LossWeights)
    first_period: int = 1
    period_mult: int = 2
    epochs: int = 30
    seed: int = 0
    hidden: int = 32
    layers: int = 2
    bidirectional: bool = True
    dropout: float = 0.5
    backbone: str = "tanh"
    route_distance_grad: bool = False
    balanced_sampling: bool = True
    ece_bins: int = 10

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.first_period < 1 or self.period_mult < 1:
            raise ValueError("batch_size, epochs, first_period and period_mult must be >= 1")
        if not (self.lr > 0 and self.weight_decay >= 0):
            raise ValueError("lr must be positive and weight_decay non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def model_config(self, d_v, d_a):
        return ModelConfig(self.fusion, self.task, d_v, d_a, self.hidden, self.layers,
                           self.bidirectional, self.dropout, self.backbone)


# -------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: OptimizerState, lr, weight_decay=0.0):
    """In-place Adam update with bias correction and decoupled weight decay.

    Returns False (and leaves everything untouched) if any gradient is non-finite.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("adam_step: non-finite gradient, step skipped")
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def cosine_warm_restart_lr(step, epoch_len, base_lr, first_period=1, mult=2, lr_min=0.0):
    """SGDR schedule; periods (in epochs) are first_period * mult**k."""
    if step < 0:
        raise ValueError("step must be >= 0")
    t = step / epoch_len
    period = float(first_period)
    while t >= period:
        t -= period
        period *= mult
    return lr_min + 0.5 * (base_lr - lr_min) * (1.0 + math.cos(math.pi * t / period))


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    train_config: TrainConfig | None = None
    info: dict = field(default_factory=dict)

    def save(self, path):
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict() if self.train_config else None,
            "info": self.info,
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                       for k, v in sorted(self.params.items())},
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
        params = {}
        for k, entry in doc["params"].items():
            arr = np.array(entry["data"], dtype=np.float64)
            if arr.size != int(np.prod(entry["shape"])):
                raise ValueError(f"{path}: parameter {k} has {arr.size} values for shape {entry['shape']}")
            params[k] = arr.reshape(entry["shape"])
        tc = TrainConfig.from_dict(doc["train_config"]) if doc.get("train_config") else None
        return cls(ModelConfig(**doc["model_config"]), params, tc, doc.get("info", {}))


# -------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    val_history: list


def _batches(order, size):
    return [order[i:i + size] for i in range(0, len(order), size)]


def _train_class_weights(cfg: TrainConfig, split: Split):
    if cfg.task != "classification":
        return None
    cls = split.classes.reshape(-1, 2)
    return np.stack([class_weights(np.bincount(cls[:, d], minlength=3)) for d in range(2)])


def _selection_score(metrics, task):
    return metrics["ccc_avg"] if task == "regression" else metrics["f1"]


def train(config: TrainConfig, corpus: Corpus, log_path=None) -> TrainResult:
    """Mini-batch Adam on the full objective; keeps the best validation checkpoint."""
    spec = corpus.spec
    mcfg = config.model_config(spec.d_v, spec.d_a)
    label_mode = spec.label_mode
    rng = np.random.default_rng(config.seed)
    params = init_model(mcfg, rng)
    state = OptimizerState.zeros_like(params)
    train_split = corpus["train"]
    cw = _train_class_weights(config, train_split)
    n = len(train_split)
    epoch_len = math.ceil(n / config.batch_size)
    records = []
    val_history = []
    best = (-math.inf, None, -1)
    bad_steps = 0
    step = 0
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            if config.task == "classification" and config.balanced_sampling:
                order = weighted_sampler(sequence_class(train_split), rng)
            else:
                order = rng.permutation(n)
            for idx in _batches(order, config.batch_size):
                lr = cosine_warm_restart_lr(step, epoch_len, config.lr, config.first_period,
                                            config.period_mult)
                tape = dc.Tape()
                P = {k: tape.leaf(v, name=k) for k, v in params.items()}
                try:
                    out = model_forward(mcfg, P, train_split.z_v[idx], train_split.z_a[idx], "train", rng)
                    targets = train_split.targets[idx] if config.task == "regression" else train_split.classes[idx]
                    bd = model_objective(out, targets, mcfg, config.loss_weights, cw, label_mode,
                                         config.route_distance_grad)
                except FloatingPointError as exc:
                    bad_steps += 1
                    log.warning("step %d: %s", step, exc)
                    if bad_steps >= 3:
                        raise RuntimeError(f"training diverged at step {step}: {exc}") from exc
                    step += 1
                    continue
                bad_steps = 0
                dc.backward(tape, bd.node)
                adam_step(params, {k: P[k].grad for k in params}, state, lr, config.weight_decay)
                rec = {"step": step, "epoch": epoch, "lr": lr, **bd.as_dict()}
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                step += 1
            ckpt = Checkpoint(mcfg, params, config)
            val = evaluate(ckpt, corpus["val"], label_mode=label_mode)["metrics"]
            score = _selection_score(val, config.task)
            val_history.append({"epoch": epoch, "score": score})
            if score > best[0]:
                best = (score, {k: v.copy() for k, v in params.items()}, epoch)
    finally:
        if log_fh:
            log_fh.close()
    info = {"best_epoch": best[2], "best_val_score": best[0],
            "selection": "val ccc_avg" if config.task == "regression" else "val macro f1",
            "skipped_steps": state.skipped, "label_mode": label_mode}
    return TrainResult(Checkpoint(mcfg, best[1], config, info), records, val_history)


# -------------------------------------------------------------- evaluation


def predict(ckpt: Checkpoint, split: Split, chunk=16):
    """Eval-mode forward over a split; returns per-branch arrays and COLD diagnostics."""
    cfg = ckpt.model_config
    if split.z_v.shape[-1] != cfg.d_v or split.z_a.shape[-1] != cfg.d_a:
        raise ValueError(f"split feature widths ({split.z_v.shape[-1]}, {split.z_a.shape[-1]}) do not "
                         f"match checkpoint ({cfg.d_v}, {cfg.d_a})")
    pieces = []
    for s in range(0, len(split), chunk):
        tape = dc.Tape()
        P = {k: tape.constant(v) for k, v in ckpt.params.items()}
        out = model_forward(cfg, P, split.z_v[s:s + chunk], split.z_a[s:s + chunk], "eval")
        rec = {f"y_{k}": v.value for k, v in out.y.items()}
        if out.weights is not None:
            rec["w_V"] = out.weights.w_v.value
            rec["w_A"] = out.weights.w_a.value
            rec["sigma_norm_V"] = np.linalg.norm(out.latents["V"].sigma.value, axis=-1)
            rec["sigma_norm_A"] = np.linalg.norm(out.latents["A"].sigma.value, axis=-1)
        pieces.append(rec)
    return {k: np.concatenate([p[k] for p in pieces]) for k in pieces[0]}


def _pool(y, label_mode):
    return y.mean(axis=1) if label_mode == "sequence" else y


def _regression_metrics(y, targets):
    out = {}
    for d, name in enumerate(DIM_NAMES):
        out[f"ccc_{name}"] = M.ccc(targets[..., d], y[..., d])
    out["ccc_avg"] = 0.5 * (out["ccc_valence"] + out["ccc_arousal"])
    return out


def _classification_prf(pred_cls, true_cls):
    per = [M.macro_prf1(pred_cls[..., d], true_cls[..., d]) for d in range(2)]
    out = {}
    for d, name in enumerate(DIM_NAMES):
        out[f"precision_{name}"], out[f"recall_{name}"], out[f"f1_{name}"] = per[d]
    out["precision"] = float(np.mean([p[0] for p in per]))
    out["recall"] = float(np.mean([p[1] for p in per]))
    out["f1"] = float(np.mean([p[2] for p in per]))
    return out


def evaluate(ckpt, split: Split, corruption=None, temperature_scaling=False, label_mode="frame",
             seed=0, noise_scale=None, ece_bins=10):
    """Metrics, reliability bins and per-frame traces for one split.

    ``corruption`` is an optional dict(modality, fraction, contiguous); corrupted
    frames are drawn from a seed-derived stream so repeated calls agree.
    Temperature scaling searches T on the evaluated split itself.
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    cfg = ckpt.model_config
    if corruption and corruption.get("fraction", 0) > 0:
        if noise_scale is None:
            raise ValueError("evaluate: corruption needs the corpus noise_scale")
        split = corrupt_split(split, corruption["modality"], corruption["fraction"],
                              corruption.get("contiguous", True), seed, noise_scale)
    pred = predict(ckpt, split)
    y = {k[2:]: _pool(v, label_mode) for k, v in pred.items() if k.startswith("y_")}
    result = {"metrics": {}, "branches": {}, "reliability": {}, "pred": pred, "split": split}
    m = result["metrics"]
    if cfg.task == "regression":
        targets = split.targets
        m.update(_regression_metrics(y["AV"], targets))
        m.update(_classification_prf(_bin_predictions(y["AV"]), split.classes))
        for b, yb in y.items():
            result["branches"][b] = _regression_metrics(yb, targets)
        err = np.abs(y["AV"] - targets)
        m["sequence_errors"] = (err.reshape(len(split), -1).mean(axis=1)).tolist()
        m["ece_before"] = m["ece_after"] = None
    else:
        true = split.classes
        for b, yb in y.items():
            result["branches"][b] = _classification_prf(yb.argmax(-1), true)
        m.update(result["branches"]["AV"])
        wrong = y["AV"].argmax(-1) != true
        m["sequence_errors"] = wrong.reshape(len(split), -1).mean(axis=1).tolist()
        conf, correct = M.scaled_confidence(y["AV"], true)
        result["reliability"]["before"] = M.reliability_bins(conf, correct, ece_bins)
        befores, afters = [], []
        for d, name in enumerate(DIM_NAMES):
            logits = y["AV"][..., d, :]
            if temperature_scaling:
                rep = M.temperature_search(logits, true[..., d], ece_bins, np.random.default_rng([seed, d]))
                m[f"temperature_{name}"] = rep.temperature
                m[f"ece_after_{name}"] = rep.ece_after
                afters.append(rep.ece_after)
                result["reliability"][f"after_{name}"] = rep.bins_after
                ece_b = rep.ece_before
            else:
                ece_b = M.ece(*M.scaled_confidence(logits, true[..., d]), ece_bins)
            m[f"ece_before_{name}"] = ece_b
            befores.append(ece_b)
        m["ece_before"] = float(np.mean(befores))
        m["ece_after"] = float(np.mean(afters)) if temperature_scaling else None
    m["n_sequences"] = len(split)
    m["fusion"] = cfg.fusion
    m["task"] = cfg.task
    m["ttest_unit"] = "per-sequence mean absolute error of fused predictions (two-sided paired t-test)"
    return result


def _bin_predictions(y):
    from .synthdata import bin_labels

    return bin_labels(np.clip(y, -1.0, 1.0))


TRACE_COLUMNS = ["seq_id", "frame", "w_V", "w_A", "sigma_norm_V", "sigma_norm_A",
                 "pred_V_valence", "pred_V_arousal", "pred_A_valence", "pred_A_arousal",
                 "pred_AV_valence", "pred_AV_arousal", "target_valence", "target_arousal",
                 "mask_V", "mask_A"]


def _trace_values(pred, split, task):
    """Per-frame columns; classification predictions are predicted class indices."""
    S, N = split.z_v.shape[:2]
    cols = {"seq_id": np.repeat(split.ids, N), "frame": np.tile(np.arange(N), S)}
    for k in ("w_V", "w_A", "sigma_norm_V", "sigma_norm_A"):
        cols[k] = pred[k].reshape(-1) if k in pred else None
    for b in ("V", "A", "AV"):
        y = pred.get(f"y_{b}")
        if y is not None and task == "classification":
            y = y.argmax(-1)
        for d, name in enumerate(DIM_NAMES):
            cols[f"pred_{b}_{name}"] = y[..., d].reshape(-1) if y is not None else None
    tgt = split.targets if task == "regression" else split.classes
    if tgt.ndim == 2:
        tgt = np.repeat(tgt[:, None, :], N, axis=1)
    for d, name in enumerate(DIM_NAMES):
        cols[f"target_{name}"] = tgt[..., d].reshape(-1)
    cols["mask_V"] = split.mask[..., 0].reshape(-1).astype(int)
    cols["mask_A"] = split.mask[..., 1].reshape(-1).astype(int)
    return cols


def _fmt(v):
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return repr(float(v))


def write_traces(result, path, task):
    cols = _trace_values(result["pred"], result["split"], task)
    n = len(cols["seq_id"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for i in range(n):
            w.writerow(["" if cols[c] is None else _fmt(cols[c][i]) for c in TRACE_COLUMNS])


def write_eval_outputs(result, out_dir, task):
    """metrics.json, traces.csv and reliability.csv (header only for regression)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"metrics": result["metrics"], "branches": result["branches"]}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_traces(result, out / "traces.csv", task)
    rel = result["reliability"]
    if "before" in rel:
        M.reliability_export(rel["before"], out / "reliability.csv")
        for key, bins in rel.items():
            if key != "before":
                M.reliability_export(bins, out / f"reliability_{key}.csv")
    else:
        (out / "reliability.csv").write_text("bin_low,bin_high,count,mean_confidence,mean_accuracy\n")
    return out


# -------------------------------------------------------------- ablation


ABLATION_ROWS = (
    ("all constraints", {}),
    ("without intramodal", {"co_v": 0.0, "co_a": 0.0}),
    ("without crossmodal", {"co_av": 0.0}),
    ("without regularization", {"regu": 0.0}),
    ("without any constraints", {"co_v": 0.0, "co_a": 0.0, "co_av": 0.0, "regu": 0.0}),
)


def ablation_configs(base: TrainConfig):
    rows = []
    for name, zeroed in ABLATION_ROWS:
        rows.append((name, replace(base, fusion="cold", loss_weights=replace(base.loss_weights, **zeroed))))
    return rows


def run_ablation(base: TrainConfig, corpus: Corpus, split="val"):
    """Train the five loss-ablation configurations; returns one row per configuration."""
    table = []
    for name, cfg in ablation_configs(base):
        res = train(cfg, corpus)
        m = evaluate(res.checkpoint, corpus[split], label_mode=corpus.spec.label_mode)["metrics"]
        table.append({"configuration": name, **asdict(cfg.loss_weights),
                      "ccc_valence": m["ccc_valence"], "ccc_arousal": m["ccc_arousal"],
                      "ccc_avg": m["ccc_avg"]})
    return table


def write_table(rows, path):
    """CSV over the union of row keys, in first-seen order; missing cells stay empty."""
    fieldnames = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
