#!/usr/bin/env python3
"""Run the prefix-adaptation experiment: dialect-agnostic backbone vs
per-dialect prefix tuning, decoded with and without LM shallow fusion."""

import argparse
import json

from dialectasr.experiments import run_table4


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="exp-table4")
    ap.add_argument("--seed", type=int, default=17)
    args = ap.parse_args()
    print(json.dumps(run_table4(seed=args.seed, out_dir=args.out),
                     indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
