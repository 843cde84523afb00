"""Unimodal temporal encoders: feature projection, bidirectional GRU, latent head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

SIGMA_FLOOR = 1e-4


@dataclass
class FeatureSequence:
    modality: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.modality not in ("V", "A"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be N x D with N >= 1, got {self.frames.shape}")

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class EncoderConfig:
    feature_dim: int = 16
    hidden: int = 32
    layers: int = 2
    bidirectional: bool = True
    dropout: float = 0.5

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1:
            raise ValueError("hidden and layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def context_dim(self):
        return 2 * self.hidden if self.bidirectional else self.hidden


@dataclass
class LatentSequence:
    mu: dc.Node
    sigma: dc.Node


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(rng, d_in, d_out, prefix):
    return {
        f"{prefix}.w": uniform_init(rng, d_in, (d_in, d_out)),
        f"{prefix}.b": uniform_init(rng, d_in, (d_out,)),
    }


def linear(x, P, prefix):
    return x @ P[f"{prefix}.w"] + P[f"{prefix}.b"]


def init_backbone(rng, d_in, d_out, prefix):
    return init_linear(rng, d_in, d_out, prefix)


def backbone_project(raw, P, prefix, activation="tanh"):
    """Per-frame affine map followed by ``activation`` ("tanh" or "linear")."""
    w = P[f"{prefix}.w"]
    if raw.shape[-1] != w.shape[0]:
        raise dc.ShapeError(f"backbone_project: input width {raw.shape[-1]} != {w.shape[0]}")
    out = linear(raw, P, prefix)
    if activation == "tanh":
        return dc.tanh(out)
    if activation == "linear":
        return out
    raise ValueError(f"unknown activation {activation!r}")


def _directions(cfg):
    return ("fwd", "bwd") if cfg.bidirectional else ("fwd",)


def init_gru(rng, cfg: EncoderConfig, d_in, prefix):
    H = cfg.hidden
    params = {}
    width = d_in
    for layer in range(cfg.layers):
        for direction in _directions(cfg):
            key = f"{prefix}.l{layer}.{direction}"
            params[f"{key}.w_in"] = uniform_init(rng, H, (width, 3 * H))
            params[f"{key}.w_hid"] = uniform_init(rng, H, (H, 3 * H))
            params[f"{key}.b_in"] = uniform_init(rng, H, (3 * H,))
            params[f"{key}.b_hid"] = uniform_init(rng, H, (3 * H,))
        width = cfg.context_dim
    return params


def gru_encode(x, P, cfg: EncoderConfig, prefix, train=False, rng=None):
    """Stacked (bi)GRU over (B, N, D) input; returns (B, N, C) hidden states."""
    h = x
    for layer in range(cfg.layers):
        if layer > 0 and train and cfg.dropout > 0:
            keep = 1.0 - cfg.dropout
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        outs = []
        for direction in _directions(cfg):
            key = f"{prefix}.l{layer}.{direction}"
            outs.append(dc.gru_layer(h, P[f"{key}.w_in"], P[f"{key}.w_hid"], P[f"{key}.b_in"],
                                     P[f"{key}.b_hid"], reverse=direction == "bwd"))
        h = dc.concat(outs, axis=-1) if len(outs) > 1 else outs[0]
    if not np.all(np.isfinite(h.value)):
        raise FloatingPointError(f"gru_encode[{prefix}]: non-finite activation")
    return h


def init_latent_head(rng, c, prefix):
    return {**init_linear(rng, c, c, f"{prefix}.mu"), **init_linear(rng, c, c, f"{prefix}.sigma")}


def latent_head(hidden, P, prefix, sigma_floor=SIGMA_FLOOR):
    mu = linear(hidden, P, f"{prefix}.mu")
    sigma = dc.softplus(linear(hidden, P, f"{prefix}.sigma")) + sigma_floor
    return LatentSequence(mu, sigma)


def sample_context(latent: LatentSequence, mode, rng=None, noise=None):
    """Mean in eval mode; ``mu + sigma * z`` (reparameterized) in train mode.

    ``noise`` overrides the standard-normal draw, e.g. zeros for gradient checks.
    """
    if mode == "eval":
        return latent.mu
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    z = rng.standard_normal(latent.mu.shape) if noise is None else noise
    return latent.mu + latent.sigma * z
