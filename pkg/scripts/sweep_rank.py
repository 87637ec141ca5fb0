"""LoRA rank sweep; writes report/sweep_rank_<market>.csv."""

import sys

from _sweep import parse_args, sweep

RANKS = (1, 2, 4, 8, 16)

if __name__ == "__main__":
    args = parse_args(__doc__)
    sys.exit(sweep(args.config, args.out, args.seed, {f"rank_{r}": {"finetune.rank": r} for r in RANKS}))
