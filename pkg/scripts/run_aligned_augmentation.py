#!/usr/bin/env python3
"""Run the aligned-augmentation experiment: a high-repetition corpus trained
with and without aligned word-substitution augmentation."""

import argparse
import json

from dialectasr.experiments import run_fig4


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="exp-fig4")
    ap.add_argument("--seed", type=int, default=17)
    args = ap.parse_args()
    print(json.dumps(run_fig4(seed=args.seed, out_dir=args.out),
                     indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
