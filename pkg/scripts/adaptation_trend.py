"""Scratch vs. adaptation without critics vs. adaptation with SC + DC.

Usage: python scripts/adaptation_trend.py --seeds 1 2 3 4 5
"""

import argparse
import json
import logging

from vdanlg.cli import _coerce
from vdanlg.experiments import run_seed, summarize, trend_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--out", help="write per-run results as JSON lines")
    ap.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE",
                    help="override a TrainConfig field, e.g. max_epochs=20")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {}
    for item in args.set:
        key, value = item.split("=", 1)
        overrides[key] = _coerce(key, value)
    cfg = trend_config(**overrides)
    results = []
    for seed in args.seeds:
        for r in run_seed(seed, cfg):
            print(f"seed {r.seed} {r.condition:<12} BLEU {r.bleu:.4f} ERR {r.err:6.2f}% "
                  f"({r.seconds:.0f}s)", flush=True)
            results.append(r)
    for cond, s in summarize(results).items():
        print(f"median {cond:<12} BLEU {s['bleu']:.4f} ERR {s['err']:6.2f}%")
    if args.out:
        with open(args.out, "w") as fh:
            for r in results:
                fh.write(json.dumps(r.__dict__) + "\n")


if __name__ == "__main__":
    main()
