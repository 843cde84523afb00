"""Multi-seed trend experiments on the anti-phase corpus.

One call to :func:`run_seed` trains the regression models (COLD, context and
feature fusion), the classification models (COLD and context fusion) and the
five-row loss ablation, then collects the numbers the trend checks need.
:func:`check_trends` turns a list of per-seed results into pass/fail verdicts.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .harness import TrainConfig, evaluate, run_ablation, train
from .metrics import spearman
from .synthdata import SynthSpec, generate

log = logging.getLogger(__name__)

REGRESSION_MODELS = ("cold", "context", "feature")
CLASSIFICATION_MODELS = ("cold", "context")
PARTS = ("regression", "classification", "ablation")


@dataclass
class TrendSetup:
    corpus: SynthSpec
    train: TrainConfig
    seeds: tuple = (1, 2, 3)
    corruption: dict = field(default_factory=lambda: {"modality": "V", "fraction": 0.5, "contiguous": True})

    @classmethod
    def load(cls, corpus_path, train_path, seeds=(1, 2, 3)):
        return cls(SynthSpec.load(corpus_path), TrainConfig.load(train_path), tuple(seeds))


def calibration_diagnostics(pred, split):
    """Per-frame Spearman statistics for one evaluated COLD model.

    ``inv_sigma_vs_error``: 1/||sigma|| against the modality branch's absolute
    error. ``low_snr_vs_weight``: low-SNR indicator against the fusion weight.
    """
    out = {}
    for m in ("V", "A"):
        err = np.abs(pred[f"y_{m}"] - split.targets).mean(axis=-1)
        low = (split.snr_v if m == "V" else split.snr_a) < 1.0
        out[m] = {
            "inv_sigma_vs_error": spearman(1.0 / pred[f"sigma_norm_{m}"], err),
            "low_snr_vs_weight": spearman(low, pred[f"w_{m}"]),
        }
    return out


def _regression(setup, corpus, seed):
    res = {}
    for fusion in REGRESSION_MODELS:
        cfg = replace(setup.train, fusion=fusion, task="regression", seed=seed)
        ckpt = train(cfg, corpus).checkpoint
        clean = evaluate(ckpt, corpus["test"])
        bad = evaluate(ckpt, corpus["test"], setup.corruption, seed=seed, noise_scale=corpus.spec.noise_scale)
        row = {
            "ccc_avg": clean["metrics"]["ccc_avg"],
            "branches": {b: v["ccc_avg"] for b, v in clean["branches"].items()},
            "corrupted_ccc_avg": bad["metrics"]["ccc_avg"],
        }
        row["relative_drop"] = (row["ccc_avg"] - row["corrupted_ccc_avg"]) / abs(row["ccc_avg"])
        if fusion == "cold":
            row["calibration"] = calibration_diagnostics(clean["pred"], clean["split"])
            mask = bad["split"].mask[..., 0]
            row["corrupt_mask_vs_weight_V"] = spearman(mask, bad["pred"]["w_V"])
        res[fusion] = row
    return res


def _classification(setup, corpus, seed):
    res = {}
    for fusion in CLASSIFICATION_MODELS:
        cfg = replace(setup.train, fusion=fusion, task="classification", seed=seed)
        ckpt = train(cfg, corpus).checkpoint
        m = evaluate(ckpt, corpus["test"], temperature_scaling=True, seed=seed)["metrics"]
        res[fusion] = {k: m[k] for k in ("f1", "ece_before", "ece_after", "ece_before_valence",
                                         "ece_after_valence", "ece_before_arousal", "ece_after_arousal")}
    return res


def run_seed(setup: TrendSetup, seed, parts=PARTS):
    corpus = generate(replace(setup.corpus, seed=seed))
    out = {"seed": seed, "seconds": {}}
    runners = {
        "regression": lambda: _regression(setup, corpus, seed),
        "classification": lambda: _classification(setup, corpus, seed),
        "ablation": lambda: run_ablation(replace(setup.train, seed=seed), corpus, "val"),
    }
    for part in PARTS:
        if part in parts:
            t0 = time.perf_counter()
            out[part] = runners[part]()
            out["seconds"][part] = time.perf_counter() - t0
            log.info("seed %d %s done in %.0f s", seed, part, out["seconds"][part])
    return out


def run_trends(setup: TrendSetup, parts=PARTS, cache=None):
    """Run every seed; with ``cache`` set, results are read from / written to that JSON file."""
    if cache and Path(cache).is_file():
        return json.loads(Path(cache).read_text())
    results = [run_seed(setup, s, parts) for s in setup.seeds]
    if cache:
        Path(cache).parent.mkdir(parents=True, exist_ok=True)
        Path(cache).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


# -------------------------------------------------------------- verdicts


@dataclass
class Verdict:
    criterion: int
    passed: bool
    detail: str

    def line(self):
        return f"criterion {self.criterion}: {'PASS' if self.passed else 'FAIL'} | {self.detail}"


def _fmt(xs):
    return "[" + ", ".join(f"{x:.3f}" for x in xs) + "]"


def check_fusion_trend(results, margin=0.01):
    cold = [r["regression"]["cold"]["ccc_avg"] for r in results]
    ctx = [r["regression"]["context"]["ccc_avg"] for r in results]
    not_worse = sum(c >= x - margin for c, x in zip(cold, ctx))
    better = sum(c > x for c, x in zip(cold, ctx))
    beats_uni = all(
        r["regression"][f]["ccc_avg"] > min(r["regression"][f]["branches"][b] for b in ("V", "A"))
        for r in results for f in ("cold", "context"))
    passed = not_worse >= 2 and better >= 1 and beats_uni
    return Verdict(4, passed, f"cold {_fmt(cold)} vs context {_fmt(ctx)}; >= ctx-{margin} in "
                              f"{not_worse}/3, > ctx in {better}/3, both above worse unimodal: {beats_uni}")


def check_calibration_trend(results):
    ok = []
    cells = []
    for r in results:
        cal = r["regression"]["cold"]["calibration"]
        inv = [cal[m]["inv_sigma_vs_error"] for m in ("V", "A")]
        wt = [cal[m]["low_snr_vs_weight"] for m in ("V", "A")]
        ok.append(min(inv) >= 0.3 and max(wt) <= -0.5)
        cells.append(f"s{r['seed']}: rho(1/sigma,err) {_fmt(inv)} rho(low,w) {_fmt(wt)}")
    return Verdict(5, sum(ok) >= 2, f"{sum(ok)}/3 seeds; " + "; ".join(cells))


def check_robustness_trend(results):
    cold = [r["regression"]["cold"]["relative_drop"] for r in results]
    feat = [r["regression"]["feature"]["relative_drop"] for r in results]
    n = sum(c < f for c, f in zip(cold, feat))
    return Verdict(6, n >= 2, f"relative CCC drop cold {_fmt(cold)} vs feature {_fmt(feat)}; smaller in {n}/3")


def check_temperature_trend(results):
    never_worse = all(v["ece_after"] <= v["ece_before"]
                      for r in results for v in r["classification"].values())
    cold = [r["classification"]["cold"]["ece_before"] for r in results]
    ctx = [r["classification"]["context"]["ece_before"] for r in results]
    n = sum(c <= x for c, x in zip(cold, ctx))
    return Verdict(7, never_worse and n >= 2,
                   f"ece_after <= ece_before for all models: {never_worse}; ece_before cold {_fmt(cold)} "
                   f"vs context {_fmt(ctx)}; cold <= context in {n}/3")


def check_ablation_trend(results):
    rows_ok = all(len(r["ablation"]) == 5 for r in results)
    full = [r["ablation"][0]["ccc_avg"] for r in results]
    none = [r["ablation"][-1]["ccc_avg"] for r in results]
    n = sum(f >= z for f, z in zip(full, none))
    return Verdict(8, rows_ok and n >= 2, f"5 rows each: {rows_ok}; val ccc all constraints {_fmt(full)} "
                                          f"vs none {_fmt(none)}; >= in {n}/3")


def check_trends(results):
    return [check_fusion_trend(results), check_calibration_trend(results), check_robustness_trend(results),
            check_temperature_trend(results), check_ablation_trend(results)]
