"""Every ablation arm through the CLI pipeline; writes report/comparison.csv."""

import sys

from _sweep import parse_args, sweep

from fecosr.pipeline import ARMS

if __name__ == "__main__":
    args = parse_args(__doc__)
    sys.exit(sweep(args.config, args.out, args.seed, {arm: {"--ablation": arm} for arm in ARMS}))
