#!/usr/bin/env python3
"""Run the miniature end-to-end pipeline (synth, train, prefix-tune, decode
two systems, fuse, score).  Repeating with the same seed yields byte-identical
result JSON."""

import argparse
import json

from dialectasr.experiments import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="exp-pipeline")
    ap.add_argument("--seed", type=int, default=17)
    args = ap.parse_args()
    print(json.dumps(run_pipeline(seed=args.seed, out_dir=args.out),
                     indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
