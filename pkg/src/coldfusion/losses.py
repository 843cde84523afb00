"""Training objective: emotion loss, softmax distribution matching, variance regularizer."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .encoders import LatentSequence


@dataclass
class LossWeights:
    co_v: float = 1e-3
    co_a: float = 1e-3
    co_av: float = 1e-3
    regu: float = 1e-4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")


@dataclass
class LossBreakdown:
    emo: float
    co_v: float
    co_a: float
    co_av: float
    regu: float
    total: float
    node: dc.Node | None = field(default=None, repr=False, compare=False)

    def as_dict(self):
        return {k: getattr(self, k) for k in ("emo", "co_v", "co_a", "co_av", "regu", "total")}


def _node(x, tape=None):
    if isinstance(x, dc.Node):
        return x
    return (tape or dc.Tape()).leaf(x)


# ------------------------------------------------------------ emotion loss


def ccc_node(pred, target):
    """Concordance correlation of a prediction node against a constant target, flattened."""
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    p = dc.reshape(pred, (t.size,))
    mu_p = dc.mean(p)
    pc = p - mu_p
    tc = t - t.mean()
    cov = dc.mean(pc * tc)
    var_p = dc.mean(dc.square(pc))
    denom = var_p + float(tc @ tc / t.size) + dc.square(mu_p - t.mean())
    return 2.0 * cov / dc.clamp_min(denom, 1e-12)


def regression_loss(pred, target):
    target = np.asarray(target, dtype=np.float64)
    n_dims = target.shape[-1]
    one_minus_ccc = 0.0
    for d in range(n_dims):
        one_minus_ccc = one_minus_ccc + (1.0 - ccc_node(pred[..., d], target[..., d]))
    mse = dc.mean(dc.square(pred - target))
    return one_minus_ccc / n_dims + mse


def cross_entropy(logits, classes):
    """Per-item cross-entropy; ``classes`` are integer indices over the last logit axis."""
    classes = np.asarray(classes, dtype=np.int64)
    onehot = np.eye(logits.shape[-1])[classes]
    logp = dc.safe_log(dc.softmax(logits, axis=-1))
    return -dc.sum_(logp * onehot, axis=-1)


def classification_loss(logits, classes, class_weights=None):
    classes = np.asarray(classes, dtype=np.int64)
    ce = cross_entropy(logits, classes)
    if class_weights is None:
        return dc.mean(ce)
    cw = np.asarray(class_weights, dtype=np.float64)
    if cw.ndim == 1:
        w = cw[classes]
    else:
        w = np.take_along_axis(np.broadcast_to(cw, classes.shape[:-1] + cw.shape),
                               classes[..., None], axis=-1)[..., 0]
    return dc.mean(ce * w)


def emotion_loss(predictions, targets, task, class_weights=None):
    """Mean of the per-branch emotion losses.

    ``predictions`` is a node or a dict of branch nodes. Regression: mean over
    emotion dimensions of (1 - CCC), plus MSE. Classification: class-weighted
    cross-entropy.
    """
    if not isinstance(predictions, dict):
        predictions = {"AV": predictions}
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("emotion_loss: empty batch")
    total = 0.0
    for pred in predictions.values():
        if task == "regression":
            total = total + regression_loss(pred, targets)
        elif task == "classification":
            total = total + classification_loss(pred, targets, class_weights)
        else:
            raise ValueError(f"unknown task {task!r}")
    return total / len(predictions)


# ------------------------------------------------------- distribution matching


def distance_vector(y_branch, y_star, task, route_grad=False):
    """Per-item prediction error: MSE over emotion dims, or mean cross-entropy."""
    y_branch = _node(y_branch)
    if task == "regression":
        d = dc.mean(dc.square(y_branch - np.asarray(y_star, dtype=np.float64)), axis=-1)
    elif task == "classification":
        d = dc.mean(cross_entropy(y_branch, y_star), axis=-1)
    else:
        raise ValueError(f"unknown task {task!r}")
    return d if route_grad else dc.stop_gradient(d)


def variance_norm_vector(latent):
    sigma = latent.sigma if isinstance(latent, LatentSequence) else _node(latent)
    return dc.reciprocal(dc.l2norm(sigma, axis=-1))


def cold_loss(D, S):
    """Symmetric KL between softmax(D) and softmax(S) along the last axis.

    Leading axes are averaged. Gradient reaches ``D`` only if it is a
    non-constant node.
    """
    S = _node(S)
    D = _node(D, S.tape)
    if D.shape != S.shape:
        raise dc.ShapeError(f"cold_loss: shapes {D.shape} and {S.shape} differ")
    if D.shape[-1] < 2:
        raise ValueError("cold_loss: need at least 2 items per softmax")
    p_d = dc.softmax(D, axis=-1)
    p_s = dc.softmax(S, axis=-1)
    kl = dc.sum_((p_d - p_s) * (dc.safe_log(p_d) - dc.safe_log(p_s)), axis=-1)
    return dc.mean(kl)


def _interleave(first, second):
    shape = first.shape + (1,)
    pair = dc.concat([dc.reshape(first, shape), dc.reshape(second, shape)], axis=-1)
    return dc.reshape(pair, first.shape[:-1] + (2 * first.shape[-1],))


def crossmodal_vectors(D_v, D_a, S_v, S_a):
    """Interleave per-frame entries as [a1, v1, a2, v2, ...]."""
    S_v = _node(S_v)
    tape = S_v.tape
    D_v, D_a, S_a = _node(D_v, tape), _node(D_a, tape), _node(S_a, tape)
    if not (D_v.shape == D_a.shape == S_v.shape == S_a.shape):
        raise dc.ShapeError(
            f"crossmodal_vectors: shapes {D_v.shape}, {D_a.shape}, {S_v.shape}, {S_a.shape} differ")
    return _interleave(D_a, D_v), _interleave(S_a, S_v)


def variance_regularizer(latent: LatentSequence):
    """Mean over frames and dims of KL(N(mu, sigma^2) || N(0, 1))."""
    mu, sigma = latent.mu, latent.sigma
    log_var = 2.0 * dc.log(sigma)
    return dc.mean(-0.5 * (1.0 + log_var - dc.square(mu) - dc.square(sigma)))


# ------------------------------------------------------------------ total


def total_loss(parts: dict, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of ``parts`` (keys emo, co_v, co_a, co_av, regu; nodes or floats)."""
    vals = {}
    for key in ("emo", "co_v", "co_a", "co_av", "regu"):
        p = parts.get(key, 0.0)
        v = float(p.value) if isinstance(p, dc.Node) else float(p)
        if not math.isfinite(v):
            raise FloatingPointError(f"loss part {key} is non-finite")
        vals[key] = v
    total = parts["emo"]
    for key, lam in (("co_v", weights.co_v), ("co_a", weights.co_a), ("co_av", weights.co_av),
                     ("regu", weights.regu)):
        if lam and key in parts:
            total = total + lam * parts[key]
    total_value = float(total.value) if isinstance(total, dc.Node) else float(total)
    return LossBreakdown(**vals, total=total_value, node=total if isinstance(total, dc.Node) else None)


def pool_sequence(y):
    """Mean over the frame axis, for per-sequence labels."""
    return dc.mean(y, axis=1)


def model_objective(out, targets, cfg, weights: LossWeights, class_weights=None,
                    label_mode="frame", route_distance_grad=False) -> LossBreakdown:
    """Assemble the full objective for a :class:`ModelOutput`.

    Non-COLD models train on the emotion loss alone. With per-sequence labels
    the COLD vectors span the batch instead of the frames.
    """
    y = out.y
    if label_mode == "sequence":
        y = {k: pool_sequence(v) for k, v in y.items()}
    parts = {"emo": emotion_loss(y, targets, cfg.task, class_weights)}
    if cfg.fusion != "cold":
        return total_loss(parts, LossWeights(0.0, 0.0, 0.0, 0.0))
    D = {m: distance_vector(y[m], targets, cfg.task, route_distance_grad) for m in ("V", "A")}
    S = {m: variance_norm_vector(out.latents[m]) for m in ("V", "A")}
    if label_mode == "sequence":
        S = {m: dc.mean(s, axis=1) for m, s in S.items()}
    parts["co_v"] = cold_loss(D["V"], S["V"])
    parts["co_a"] = cold_loss(D["A"], S["A"])
    parts["co_av"] = cold_loss(*crossmodal_vectors(D["V"], D["A"], S["V"], S["A"]))
    parts["regu"] = variance_regularizer(out.latents["V"]) + variance_regularizer(out.latents["A"])
    return total_loss(parts, weights)
