"""Run the multi-seed trend experiments and print the verdict for each trend criterion.

Usage: python scripts/run_trends.py [--seeds 1 2 3] [--parts regression classification ablation]
                                    [--out results/trends.json]
"""
import argparse
import json
import logging
from pathlib import Path

from coldfusion.trends import PARTS, TrendSetup, check_trends, run_seed

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--corpus", default=ROOT / "configs" / "anti_phase_corpus.json")
    p.add_argument("--train", default=ROOT / "configs" / "trend_train.json")
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--parts", nargs="+", choices=PARTS, default=list(PARTS))
    p.add_argument("--out", default=ROOT / "results" / "trends.json")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    setup = TrendSetup.load(args.corpus, args.train, args.seeds)
    results = [run_seed(setup, s, tuple(args.parts)) for s in setup.seeds]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    print(f"results written to {out}")
    if set(args.parts) == set(PARTS) and len(results) == 3:
        for v in check_trends(results):
            print(v.line())


if __name__ == "__main__":
    main()
