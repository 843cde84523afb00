"""Variance-weighted context fusion and the feature / prediction / context baselines.

All four fusion modes share one forward entry point, :func:`model_forward`,
which returns per-branch predictions ``y`` keyed by ``"V"``, ``"A"`` and
``"AV"`` (feature fusion only has ``"AV"``). Regression heads emit
(B, N, 2) values in [-1, 1]; classification heads emit (B, N, 2, 3) logits,
one 3-way distribution per emotion dimension.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .encoders import (
    SIGMA_FLOOR,
    EncoderConfig,
    LatentSequence,
    backbone_project,
    gru_encode,
    init_backbone,
    init_gru,
    init_latent_head,
    init_linear,
    latent_head,
    linear,
    sample_context,
)

FUSION_MODES = ("feature", "prediction", "context", "cold")
TASKS = ("regression", "classification")
N_DIMS = 2
N_CLASSES = 3


@dataclass
class ModelConfig:
    fusion: str = "cold"
    task: str = "regression"
    d_v: int = 16
    d_a: int = 16
    hidden: int = 32
    layers: int = 2
    bidirectional: bool = True
    dropout: float = 0.5
    backbone: str = "tanh"
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.backbone not in ("none", "linear", "tanh"):
            raise ValueError(f"unknown backbone {self.backbone!r}")

    def encoder(self, d_in):
        return EncoderConfig(d_in, self.hidden, self.layers, self.bidirectional, self.dropout)

    @property
    def context_dim(self):
        return self.encoder(1).context_dim

    @property
    def n_out(self):
        return N_DIMS if self.task == "regression" else N_DIMS * N_CLASSES

    def to_dict(self):
        return asdict(self)


@dataclass
class FusionWeights:
    w_v: dc.Node
    w_a: dc.Node


@dataclass
class ModelOutput:
    y: dict
    latents: dict | None = None
    weights: FusionWeights | None = None
    contexts: dict | None = None


def _nodes(*xs):
    """Wrap plain arrays onto a fresh tape so functions work standalone."""
    if any(isinstance(x, dc.Node) for x in xs):
        tape = next(x.tape for x in xs if isinstance(x, dc.Node))
        return [x if isinstance(x, dc.Node) else tape.constant(x) for x in xs]
    tape = dc.Tape()
    return [tape.leaf(x) for x in xs]


def cold_weights(sigma_v, sigma_a) -> FusionWeights:
    """Per-frame weights proportional to each modality's variance-vector L2 norm."""
    sigma_v, sigma_a = _nodes(sigma_v, sigma_a)
    if sigma_v.shape != sigma_a.shape:
        raise dc.ShapeError(f"cold_weights: shapes {sigma_v.shape} and {sigma_a.shape} differ")
    n_v = dc.l2norm(sigma_v, axis=-1)
    n_a = dc.l2norm(sigma_a, axis=-1)
    total = n_v + n_a
    if np.any(total.value < 1e-12):
        raise ValueError("cold_weights: both variance norms vanish")
    return FusionWeights(n_v / total, n_a / total)


def fuse_context(h_v, h_a, w: FusionWeights):
    h_v, h_a = _nodes(h_v, h_a)
    if h_v.shape != h_a.shape:
        raise dc.ShapeError(f"fuse_context: shapes {h_v.shape} and {h_a.shape} differ")
    if w.w_v.shape != h_v.shape[:-1]:
        raise dc.ShapeError(f"fuse_context: weights {w.w_v.shape} do not match contexts {h_v.shape}")
    shape = w.w_v.shape + (1,)
    return dc.reshape(w.w_v, shape) * h_v + dc.reshape(w.w_a, shape) * h_a


def prediction_fusion(y_v, y_a, conf_v, conf_a):
    """Confidence-weighted average of two aligned predictions.

    Confidences are normalized per item; they must broadcast against the
    predictions (e.g. (B, N, 1) for regression values, (B, N, 2, 1) for
    class distributions).
    """
    y_v, y_a, conf_v, conf_a = _nodes(y_v, y_a, conf_v, conf_a)
    total = conf_v + conf_a
    return (conf_v / total) * y_v + (conf_a / total) * y_a


def max_prob_confidence(probs):
    """Max class probability along the last axis, kept as a (..., 1) node."""
    mask = (probs.value == probs.value.max(axis=-1, keepdims=True)).astype(np.float64)
    mask /= mask.sum(axis=-1, keepdims=True)
    return dc.sum_(probs * mask, axis=-1, keepdims=True)


# ------------------------------------------------------------------ models


def init_head(rng, cfg: ModelConfig, d_in, prefix):
    return init_linear(rng, d_in, cfg.n_out, prefix)


def head(h, P, prefix, cfg: ModelConfig):
    out = linear(h, P, prefix)
    if cfg.task == "regression":
        return dc.tanh(out)
    return dc.reshape(out, out.shape[:-1] + (N_DIMS, N_CLASSES))


def init_model(cfg: ModelConfig, rng) -> dict:
    params = {}
    widths = {"V": cfg.d_v, "A": cfg.d_a}
    if cfg.backbone != "none":
        for m, d in widths.items():
            params.update(init_backbone(rng, d, d, f"{m}.backbone"))
    C = cfg.context_dim
    if cfg.fusion == "feature":
        params.update(init_gru(rng, cfg.encoder(cfg.d_v + cfg.d_a), cfg.d_v + cfg.d_a, "AV.gru"))
        params.update(init_head(rng, cfg, C, "AV.head"))
        return params
    for m, d in widths.items():
        params.update(init_gru(rng, cfg.encoder(d), d, f"{m}.gru"))
        params.update(init_head(rng, cfg, C, f"{m}.head"))
        if cfg.fusion == "cold":
            params.update(init_latent_head(rng, C, f"{m}.latent"))
        if cfg.fusion == "prediction" and cfg.task == "regression":
            params.update(init_linear(rng, C, 1, f"{m}.conf"))
    if cfg.fusion == "context":
        params.update(init_head(rng, cfg, 2 * C, "AV.head"))
    elif cfg.fusion == "cold":
        params.update(init_head(rng, cfg, C, "AV.head"))
    return params


def _features(cfg, P, z, modality):
    if cfg.backbone == "none":
        return z
    return backbone_project(z, P, f"{modality}.backbone", activation=cfg.backbone)


def feature_fusion_forward(cfg, P, z_v, z_a, train=False, rng=None):
    if z_v.shape[:2] != z_a.shape[:2]:
        raise dc.ShapeError(f"feature fusion: frame counts differ, {z_v.shape} vs {z_a.shape}")
    z = dc.concat([_features(cfg, P, z_v, "V"), _features(cfg, P, z_a, "A")], axis=-1)
    h = gru_encode(z, P, cfg.encoder(cfg.d_v + cfg.d_a), "AV.gru", train, rng)
    return ModelOutput(y={"AV": head(h, P, "AV.head", cfg)})


def _unimodal_hidden(cfg, P, z_v, z_a, train, rng):
    if z_v.shape[:2] != z_a.shape[:2]:
        raise dc.ShapeError(f"frame counts differ, {z_v.shape} vs {z_a.shape}")
    h_v = gru_encode(_features(cfg, P, z_v, "V"), P, cfg.encoder(cfg.d_v), "V.gru", train, rng)
    h_a = gru_encode(_features(cfg, P, z_a, "A"), P, cfg.encoder(cfg.d_a), "A.gru", train, rng)
    return h_v, h_a


def context_fusion_forward(cfg, P, h_v, h_a):
    if h_v.shape != h_a.shape:
        raise dc.ShapeError(f"context fusion: shapes {h_v.shape} and {h_a.shape} differ")
    y = {
        "V": head(h_v, P, "V.head", cfg),
        "A": head(h_a, P, "A.head", cfg),
        "AV": head(dc.concat([h_v, h_a], axis=-1), P, "AV.head", cfg),
    }
    return ModelOutput(y=y, contexts={"V": h_v, "A": h_a})


def prediction_fusion_forward(cfg, P, h_v, h_a):
    y_v = head(h_v, P, "V.head", cfg)
    y_a = head(h_a, P, "A.head", cfg)
    if cfg.task == "regression":
        conf_v = dc.exp(linear(h_v, P, "V.conf"))
        conf_a = dc.exp(linear(h_a, P, "A.conf"))
        fused = prediction_fusion(y_v, y_a, conf_v, conf_a)
    else:
        p_v = dc.softmax(y_v, axis=-1)
        p_a = dc.softmax(y_a, axis=-1)
        fused = dc.safe_log(prediction_fusion(p_v, p_a, max_prob_confidence(p_v), max_prob_confidence(p_a)))
    return ModelOutput(y={"V": y_v, "A": y_a, "AV": fused}, contexts={"V": h_v, "A": h_a})


def cold_forward(cfg, P, z_v, z_a, mode="eval", rng=None, noise=None):
    """COLD fusion: latent context distributions, variance-norm weights, fused head.

    ``noise`` optionally pins the reparameterization draws, given as a dict
    with keys ``"V"`` and ``"A"``.
    """
    train = mode == "train"
    h_v, h_a = _unimodal_hidden(cfg, P, z_v, z_a, train, rng)
    lat_v = latent_head(h_v, P, "V.latent", cfg.sigma_floor)
    lat_a = latent_head(h_a, P, "A.latent", cfg.sigma_floor)
    noise = noise or {}
    c_v = sample_context(lat_v, mode, rng, noise.get("V"))
    c_a = sample_context(lat_a, mode, rng, noise.get("A"))
    w = cold_weights(lat_v.sigma, lat_a.sigma)
    fused = fuse_context(c_v, c_a, w)
    y = {
        "V": head(c_v, P, "V.head", cfg),
        "A": head(c_a, P, "A.head", cfg),
        "AV": head(fused, P, "AV.head", cfg),
    }
    return ModelOutput(y=y, latents={"V": lat_v, "A": lat_a}, weights=w,
                       contexts={"V": c_v, "A": c_a})


def model_forward(cfg: ModelConfig, P, z_v, z_a, mode="eval", rng=None, noise=None) -> ModelOutput:
    """Dispatch on ``cfg.fusion``. ``P`` maps parameter names to tape nodes."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    train = mode == "train"
    if not isinstance(z_v, dc.Node):
        tape = next(iter(P.values())).tape
        z_v, z_a = tape.constant(z_v), tape.constant(z_a)
    if cfg.fusion == "feature":
        return feature_fusion_forward(cfg, P, z_v, z_a, train, rng)
    if cfg.fusion == "cold":
        return cold_forward(cfg, P, z_v, z_a, mode, rng, noise)
    h_v, h_a = _unimodal_hidden(cfg, P, z_v, z_a, train, rng)
    if cfg.fusion == "context":
        return context_fusion_forward(cfg, P, h_v, h_a)
    return prediction_fusion_forward(cfg, P, h_v, h_a)


__all__ = [
    "FUSION_MODES",
    "FusionWeights",
    "LatentSequence",
    "ModelConfig",
    "ModelOutput",
    "cold_forward",
    "cold_weights",
    "context_fusion_forward",
    "feature_fusion_forward",
    "fuse_context",
    "init_model",
    "model_forward",
    "prediction_fusion",
]
