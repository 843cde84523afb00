"""Synthetic two-modality emotion corpus with per-frame SNR schedules.

Each sequence carries a smooth (valence, arousal) trajectory. Both
modalities observe the same latent state (the trajectory and its time
derivative) through a fixed random linear map, plus Gaussian noise whose
level follows a piecewise SNR schedule over frames. Anti-phase schedules make
the two modalities informative on alternating segments.

On-disk layout of a corpus directory::

    spec.json          SynthSpec fields
    train.npz          arrays: ids (S,), z_v (S,N,D_V), z_a (S,N,D_A),
    val.npz            targets (S,N,2) or (S,2), classes (same leading shape, int),
    test.npz           snr_v (S,N), snr_a (S,N), mask (S,N,2) bool [V, A]
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
MODALITIES = ("V", "A")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ClassBinning:
    t_lo: float = -0.05
    t_hi: float = 0.05

    def __post_init__(self):
        if not self.t_lo < self.t_hi:
            raise ValueError("t_lo must be below t_hi")


@dataclass
class SynthSpec:
    seed: int = 0
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    n_frames: int = 150
    d_v: int = 16
    d_a: int = 16
    snr_v: list = field(default_factory=lambda: [10.0, 0.1])
    snr_a: list = field(default_factory=lambda: [0.1, 10.0])
    segment_len: int = 25
    random_offset: bool = True
    label_mode: str = "frame"
    corrupt_fraction: float = 0.0
    corrupt_contiguous: bool = True
    corrupt_modality: str = "V"

    def __post_init__(self):
        self.snr_v = [float(s) for s in self.snr_v]
        self.snr_a = [float(s) for s in self.snr_a]

    def validate(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("split counts must be >= 1")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if min(self.d_v, self.d_a) < 1:
            raise ValueError("feature widths must be >= 1")
        if not self.snr_v or not self.snr_a or min(self.snr_v + self.snr_a) <= 0:
            raise ValueError("SNR schedules must be non-empty and positive")
        if self.segment_len < 1:
            raise ValueError("segment_len must be >= 1")
        if self.label_mode not in ("frame", "sequence"):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ValueError("corrupt_fraction must lie in [0, 1]")
        if self.corrupt_modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.corrupt_modality!r}")
        return self

    @property
    def noise_scale(self):
        """Feature std of the noisiest scheduled frame; used for corruption."""
        return float(np.sqrt(1.0 + 1.0 / min(self.snr_v + self.snr_a)))

    def counts(self):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LabeledSequence:
    z_v: np.ndarray
    z_a: np.ndarray
    targets: np.ndarray
    classes: np.ndarray
    mask: np.ndarray
    snr_v: np.ndarray
    snr_a: np.ndarray
    seq_id: int = 0

    @property
    def n_frames(self):
        return self.z_v.shape[0]

    def copy(self):
        return replace(self, **{k: v.copy() for k, v in self.__dict__.items() if isinstance(v, np.ndarray)})


@dataclass
class Split:
    ids: np.ndarray
    z_v: np.ndarray
    z_a: np.ndarray
    targets: np.ndarray
    classes: np.ndarray
    snr_v: np.ndarray
    snr_a: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> LabeledSequence:
        return LabeledSequence(self.z_v[i], self.z_a[i], self.targets[i], self.classes[i],
                               self.mask[i], self.snr_v[i], self.snr_a[i], int(self.ids[i]))

    def subset(self, idx):
        return Split(**{k: v[idx] for k, v in self.arrays().items()})

    def arrays(self):
        return dict(ids=self.ids, z_v=self.z_v, z_a=self.z_a, targets=self.targets,
                    classes=self.classes, snr_v=self.snr_v, snr_a=self.snr_a, mask=self.mask)

    @classmethod
    def from_sequences(cls, seqs):
        return cls(
            ids=np.array([s.seq_id for s in seqs]),
            z_v=np.stack([s.z_v for s in seqs]),
            z_a=np.stack([s.z_a for s in seqs]),
            targets=np.stack([s.targets for s in seqs]),
            classes=np.stack([s.classes for s in seqs]),
            snr_v=np.stack([s.snr_v for s in seqs]),
            snr_a=np.stack([s.snr_a for s in seqs]),
            mask=np.stack([s.mask for s in seqs]),
        )


@dataclass
class Corpus:
    spec: SynthSpec
    splits: dict

    def __getitem__(self, name) -> Split:
        return self.splits[name]


# ------------------------------------------------------------- generation


def _trajectory(rng, n):
    t = np.linspace(0.0, 1.0, n)
    freqs = rng.uniform(0.5, 3.0, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    amps = rng.uniform(0.3, 1.0, size=3)
    x = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    x += rng.uniform(-0.5, 0.5)
    return x / np.abs(x).max()


def _scaled_derivative(x):
    d = np.gradient(x)
    peak = np.abs(d).max()
    return d / peak if peak > 0 else d


def _schedule(values, n, segment_len, offset):
    seg = (np.arange(n) + offset) // segment_len
    return np.asarray(values, dtype=np.float64)[seg % len(values)]


def emission_maps(spec: SynthSpec):
    """Fixed per-corpus linear maps from the 4-dim latent state to features."""
    rng = np.random.default_rng([spec.seed, 7919])
    return {
        "V": rng.normal(0.0, 1.0 / np.sqrt(4 * 0.35), size=(4, spec.d_v)),
        "A": rng.normal(0.0, 1.0 / np.sqrt(4 * 0.35), size=(4, spec.d_a)),
    }


def bin_labels(value, binning: ClassBinning = ClassBinning()):
    """Class index: 0 below t_lo, 1 on [t_lo, t_hi] (boundaries neutral), 2 above t_hi.

    Works elementwise on arrays.
    """
    v = np.asarray(value, dtype=np.float64)
    if np.any((v < -1.0) | (v > 1.0)) or np.any(~np.isfinite(v)):
        raise ValueError("bin_labels: values must lie in [-1, 1]")
    out = np.where(v < binning.t_lo, 0, np.where(v > binning.t_hi, 2, 1))
    return int(out) if out.ndim == 0 else out.astype(np.int64)


def generate_sequence(spec: SynthSpec, maps, rng, seq_id=0) -> LabeledSequence:
    n = spec.n_frames
    traj = np.stack([_trajectory(rng, n), _trajectory(rng, n)], axis=-1)
    state = np.concatenate([traj, np.stack([_scaled_derivative(traj[:, k]) for k in range(2)], -1)], -1)
    period = spec.segment_len * max(len(spec.snr_v), len(spec.snr_a))
    offset = int(rng.integers(0, period)) if spec.random_offset else 0
    snr = {
        "V": _schedule(spec.snr_v, n, spec.segment_len, offset),
        "A": _schedule(spec.snr_a, n, spec.segment_len, offset),
    }
    feats = {}
    for m in MODALITIES:
        clean = state @ maps[m]
        noise = rng.standard_normal(clean.shape) / np.sqrt(snr[m])[:, None]
        feats[m] = clean + noise
    targets = traj if spec.label_mode == "frame" else traj.mean(axis=0)
    return LabeledSequence(
        z_v=feats["V"], z_a=feats["A"], targets=targets, classes=bin_labels(targets),
        mask=np.zeros((n, 2), dtype=bool), snr_v=snr["V"], snr_a=snr["A"], seq_id=seq_id,
    )


def generate(spec: SynthSpec) -> Corpus:
    """Deterministic given ``spec.seed``; each sequence draws from its own rng stream."""
    spec.validate()
    maps = emission_maps(spec)
    splits = {}
    for s_idx, name in enumerate(SPLITS):
        seqs = []
        for i in range(spec.counts()[name]):
            rng = np.random.default_rng([spec.seed, s_idx, i])
            seq = generate_sequence(spec, maps, rng, seq_id=i)
            if name == "test" and spec.corrupt_fraction > 0:
                crng = np.random.default_rng([spec.seed, 101, i])
                seq, _ = corrupt_modality(seq, spec.corrupt_modality, spec.corrupt_fraction,
                                          spec.corrupt_contiguous, crng, spec.noise_scale)
            seqs.append(seq)
        splits[name] = Split.from_sequences(seqs)
    return Corpus(spec, splits)


# ------------------------------------------------------------- imbalance


def class_weights(counts):
    """weight_k = total / count_k, normalized to mean 1 over present classes.

    Absent classes get weight 0 and a warning.
    """
    counts = np.asarray(counts, dtype=np.float64)
    present = counts > 0
    if not present.any():
        raise ValueError("class_weights: all counts are zero")
    if not present.all():
        warnings.warn(f"class_weights: classes {np.flatnonzero(~present).tolist()} have no samples")
    w = np.zeros_like(counts)
    w[present] = counts.sum() / counts[present]
    w[present] /= w[present].mean()
    return w


def weighted_sampler(labels, rng, size=None):
    """Indices drawn with replacement, probability proportional to 1 / class count."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("weighted_sampler: empty labels")
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    p = 1.0 / counts[inverse]
    p /= p.sum()
    return rng.choice(labels.size, size=labels.size if size is None else size, replace=True, p=p)


def sequence_class(split: Split, dim=0):
    """Per-sequence class used for balanced sampling: the modal frame class."""
    c = split.classes[..., dim]
    if c.ndim == 1:
        return c
    return np.array([np.bincount(row, minlength=3).argmax() for row in c])


# ------------------------------------------------------------- corruption


def corrupt_modality(seq: LabeledSequence, modality, fraction, contiguous, rng, noise_scale):
    """Replace a fraction of one modality's frames with pure Gaussian noise.

    Returns the corrupted copy and the boolean frame mask. The other modality
    and the targets are left untouched.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    out = seq.copy()
    n = seq.n_frames
    k = int(np.floor(fraction * n))
    mask = np.zeros(n, dtype=bool)
    if k > 0:
        if contiguous:
            start = int(rng.integers(0, n - k + 1))
            mask[start:start + k] = True
        else:
            mask[rng.choice(n, size=k, replace=False)] = True
    col = MODALITIES.index(modality)
    feats = out.z_v if modality == "V" else out.z_a
    feats[mask] = rng.standard_normal((k, feats.shape[1])) * noise_scale
    out.mask[:, col] |= mask
    return out, mask


def corrupt_split(split: Split, modality, fraction, contiguous, seed, noise_scale) -> Split:
    seqs = []
    for i in range(len(split)):
        rng = np.random.default_rng([seed, 101, int(split.ids[i])])
        seqs.append(corrupt_modality(split[i], modality, fraction, contiguous, rng, noise_scale)[0])
    return Split.from_sequences(seqs)


# ------------------------------------------------------------- persistence


def save_corpus(corpus: Corpus, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, **corpus.spec.to_dict()}
    (out / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for name, split in corpus.splits.items():
        np.savez(out / f"{name}.npz", **split.arrays())
    return out


def _validate_split(spec: SynthSpec, name, split: Split):
    n = spec.n_frames
    S = spec.counts()[name]
    if split.z_v.shape != (S, n, spec.d_v) or split.z_a.shape != (S, n, spec.d_a):
        raise ValueError(f"{name}: feature shapes {split.z_v.shape}, {split.z_a.shape} do not match spec")
    expected_targets = (S, n, 2) if spec.label_mode == "frame" else (S, 2)
    if split.targets.shape != expected_targets:
        raise ValueError(f"{name}: targets shape {split.targets.shape} != {expected_targets}")
    if np.any(np.abs(split.targets) > 1.0):
        raise ValueError(f"{name}: targets outside [-1, 1]")
    if split.mask.shape != (S, n, 2):
        raise ValueError(f"{name}: mask shape {split.mask.shape} != {(S, n, 2)}")
    if not (np.all(np.isfinite(split.z_v)) and np.all(np.isfinite(split.z_a))):
        raise ValueError(f"{name}: non-finite features")


def load_corpus(path) -> Corpus:
    path = Path(path)
    meta = json.loads((path / "spec.json").read_text())
    version = meta.pop("format_version", None)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported corpus format version {version!r}")
    spec = SynthSpec.from_dict(meta)
    splits = {}
    for name in SPLITS:
        with np.load(path / f"{name}.npz") as data:
            split = Split(**{k: data[k] for k in data.files})
        _validate_split(spec, name, split)
        splits[name] = split
    return Corpus(spec, splits)
