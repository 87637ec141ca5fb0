"""Temperature sweep over tau in {0.01, ..., 0.10}; writes report/sweep_tau_<market>.csv."""

import sys

from _sweep import parse_args, sweep

from fecosr.objectives import TAU_GRID

if __name__ == "__main__":
    args = parse_args(__doc__)
    sys.exit(sweep(args.config, args.out, args.seed, {f"tau_{t:.2f}": {"pretrain.tau": t} for t in TAU_GRID}))
