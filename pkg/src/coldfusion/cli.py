"""Command line: synth, train, eval, robustness, ablate, report.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
Every command writes ``manifest.json`` into its output directory. When
``--out`` is omitted, outputs go under ``$COLDFUSION_OUT`` (default ``runs``)
in a subdirectory named after the command and the config hash.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .harness import (
    Checkpoint,
    TrainConfig,
    evaluate,
    run_ablation,
    train,
    write_eval_outputs,
    write_table,
)
from .metrics import paired_t_test
from .synthdata import SPLITS, SynthSpec, generate, load_corpus, save_corpus

OUT_ENV = "COLDFUSION_OUT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("coldfusion")


class UsageError(Exception):
    """Bad input: missing files, invalid configs, inconsistent runs."""


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _out_dir(args, command, digest):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-{digest}"


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest(out, command, config, seed, artifacts, inputs=None):
    doc = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "inputs": inputs or {},
        "artifacts": sorted(str(Path(a).name) for a in artifacts),
        "version": __version__,
    }
    _write_json(Path(out) / "manifest.json", doc)
    return doc


def _read_json(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {p} is not valid JSON: {exc}") from exc


def _load_corpus(path):
    if not Path(path, "spec.json").is_file():
        raise UsageError(f"corpus directory not found or incomplete: {path}")
    return load_corpus(path)


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


# -------------------------------------------------------------- commands


def cmd_synth(args):
    raw = _read_json(args.spec, "spec file")
    spec = SynthSpec.from_dict(raw)
    cfg = spec.to_dict()
    out = _out_dir(args, "synth", config_hash(cfg))
    save_corpus(generate(spec), out)
    _manifest(out, "synth", cfg, spec.seed, ["spec.json"] + [f"{s}.npz" for s in SPLITS],
              {"spec": str(args.spec)})
    print(out)


def _train_config(path, seed=None):
    cfg = TrainConfig.from_dict(_read_json(path, "config file"))
    if seed is not None:
        cfg.seed = seed
    return cfg


def cmd_train(args):
    cfg = _train_config(args.config, args.seed)
    corpus = _load_corpus(args.corpus)
    doc = cfg.to_dict()
    out = _out_dir(args, "train", config_hash({"config": doc, "corpus": corpus.spec.to_dict()}))
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, corpus, log_path=out / "train_log.jsonl")
    res.checkpoint.save(out / "checkpoint.json")
    _write_json(out / "val_history.json", res.val_history)
    _manifest(out, "train", doc, cfg.seed, ["checkpoint.json", "train_log.jsonl", "val_history.json"],
              {"config": str(args.config), "corpus": str(args.corpus)})
    print(out)


def _corruption(args):
    if args.fraction is None or args.fraction == 0:
        return None
    if not 0 < args.fraction <= 1:
        raise UsageError("--fraction must lie in (0, 1]")
    return {"modality": args.corrupt_modality, "fraction": args.fraction, "contiguous": args.contiguous}


def cmd_eval(args):
    ckpt = _load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    corruption = _corruption(args)
    settings = {"checkpoint": str(args.checkpoint), "split": args.split, "corruption": corruption,
                "temperature_scaling": args.temp_scale, "ece_bins": args.ece_bins}
    out = _out_dir(args, "eval", config_hash({**settings, "seed": args.seed}))
    res = evaluate(ckpt, corpus[args.split], corruption, args.temp_scale, corpus.spec.label_mode,
                   args.seed, corpus.spec.noise_scale, args.ece_bins)
    res["metrics"]["label"] = args.label or ckpt.model_config.fusion
    write_eval_outputs(res, out, ckpt.model_config.task)
    arts = ["metrics.json", "traces.csv", "reliability.csv"]
    arts += [p.name for p in out.glob("reliability_after_*.csv")]
    _manifest(out, "eval", settings, args.seed, arts, {"corpus": str(args.corpus)})
    print(out)


def cmd_robustness(args):
    corpus = _load_corpus(args.corpus)
    corruption = {"modality": args.corrupt_modality, "fraction": args.fraction, "contiguous": args.contiguous}
    if not 0 < args.fraction <= 1:
        raise UsageError("--fraction must lie in (0, 1]")
    settings = {"checkpoints": [str(c) for c in args.checkpoint], "split": args.split, "corruption": corruption}
    out = _out_dir(args, "robustness", config_hash({**settings, "seed": args.seed}))
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in args.checkpoint:
        ckpt = _load_checkpoint(path)
        split = corpus[args.split]
        clean = evaluate(ckpt, split, label_mode=corpus.spec.label_mode)["metrics"]
        bad = evaluate(ckpt, split, corruption, label_mode=corpus.spec.label_mode, seed=args.seed,
                       noise_scale=corpus.spec.noise_scale)["metrics"]
        key = "ccc_avg" if ckpt.model_config.task == "regression" else "f1"
        rows.append({"model": ckpt.model_config.fusion, "checkpoint": str(path), "metric": key,
                     "clean": clean[key], "corrupted": bad[key],
                     "relative_drop": (clean[key] - bad[key]) / abs(clean[key]) if clean[key] else 0.0})
    _write_json(out / "robustness.json", {"corruption": corruption, "rows": rows})
    write_table(rows, out / "robustness.csv")
    _manifest(out, "robustness", settings, args.seed, ["robustness.json", "robustness.csv"],
              {"corpus": str(args.corpus)})
    print(out)


def cmd_ablate(args):
    cfg = _train_config(args.config, args.seed)
    corpus = _load_corpus(args.corpus)
    doc = cfg.to_dict()
    out = _out_dir(args, "ablate", config_hash({"config": doc, "split": args.split}))
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(cfg, corpus, args.split)
    _write_json(out / "ablation.json", {"split": args.split, "rows": rows})
    write_table(rows, out / "ablation.csv")
    _manifest(out, "ablate", doc, cfg.seed, ["ablation.json", "ablation.csv"],
              {"config": str(args.config), "corpus": str(args.corpus)})
    print(out)


# -------------------------------------------------------------- report


def _fmt_cell(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return "" if v is None else str(v)


def _text_table(title, rows):
    if not rows:
        return ""
    cols = list(dict.fromkeys(k for r in rows for k in r))
    cells = [[_fmt_cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = [title, "  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def ttest_matrix(named_errors):
    """Pairwise two-sided paired t-tests; rows are (model_a, model_b, t, p, degenerate)."""
    rows = []
    for a, ea in named_errors:
        for b, eb in named_errors:
            if len(ea) != len(eb):
                raise UsageError(f"runs {a} and {b} were evaluated on different numbers of sequences")
            res = paired_t_test(ea, eb)
            rows.append({"model_a": a, "model_b": b, "t": res.statistic, "p": res.pvalue,
                         "degenerate": res.degenerate})
    return rows


def build_report(run_dirs):
    baseline, robustness, ablation, errors = [], [], [], []
    for d in map(Path, run_dirs):
        if not d.is_dir():
            raise UsageError(f"run directory not found: {d}")
        found = False
        if (d / "metrics.json").is_file():
            found = True
            m = _read_json(d / "metrics.json", "metrics")["metrics"]
            name = m.get("label") or d.name
            row = {"run": name, "fusion": m["fusion"], "task": m["task"]}
            for k in ("ccc_valence", "ccc_arousal", "ccc_avg", "precision", "recall", "f1",
                      "ece_before", "ece_after"):
                if m.get(k) is not None:
                    row[k] = m[k]
            baseline.append(row)
            errors.append((name, m["sequence_errors"]))
        if (d / "robustness.json").is_file():
            found = True
            robustness += _read_json(d / "robustness.json", "robustness")["rows"]
        if (d / "ablation.json").is_file():
            found = True
            ablation += _read_json(d / "ablation.json", "ablation")["rows"]
        if not found:
            raise UsageError(f"{d} holds no metrics.json, robustness.json or ablation.json")
    tables = {"baseline": baseline, "robustness": robustness, "ablation": ablation,
              "ttest": ttest_matrix(errors) if errors else []}
    return tables


def cmd_report(args):
    tables = build_report(args.runs)
    out = _out_dir(args, "report", config_hash([str(r) for r in args.runs]))
    out.mkdir(parents=True, exist_ok=True)
    titles = {"baseline": "Fusion comparison", "robustness": "Robustness (clean vs corrupted)",
              "ablation": "Loss ablation", "ttest": "Paired t-tests on per-sequence mean absolute error"}
    text, arts = [], []
    for key, rows in tables.items():
        if rows:
            write_table(rows, out / f"{key}.csv")
            arts.append(f"{key}.csv")
            text.append(_text_table(titles[key], rows))
    (out / "report.txt").write_text("\n".join(text))
    arts.append("report.txt")
    _manifest(out, "report", {"runs": [str(r) for r in args.runs]}, None, arts)
    sys.stdout.write("\n".join(text))


# -------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="coldfusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--spec", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    def corruption_flags(q, default_fraction):
        q.add_argument("--corrupt-modality", choices=("V", "A"), default="V")
        q.add_argument("--fraction", type=float, default=default_fraction)
        g = q.add_mutually_exclusive_group()
        g.add_argument("--contiguous", dest="contiguous", action="store_true", default=True)
        g.add_argument("--scattered", dest="contiguous", action="store_false")
        q.add_argument("--seed", type=int, default=0, help="seed for the corruption noise")

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    corruption_flags(e, None)
    e.add_argument("--temp-scale", action="store_true")
    e.add_argument("--ece-bins", type=int, default=10)
    e.add_argument("--label", help="row name used by report")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("robustness", help="clean vs corrupted evaluation of several checkpoints")
    r.add_argument("--checkpoint", required=True, nargs="+")
    r.add_argument("--corpus", required=True)
    r.add_argument("--split", choices=SPLITS, default="test")
    corruption_flags(r, 0.5)
    r.add_argument("--out")
    r.set_defaults(func=cmd_robustness)

    a = sub.add_parser("ablate", help="train the five loss-ablation configurations")
    a.add_argument("--config", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--split", choices=SPLITS, default="val")
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    rp = sub.add_parser("report", help="aggregate run directories into tables")
    rp.add_argument("--runs", required=True, nargs="+")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
