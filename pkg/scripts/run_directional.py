"""Three-seed comparative checks on the desk configuration, printed as JSON."""

import argparse
import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from fecosr.config import load_config
from fecosr.pipeline import Dataset, directional_summary
from fecosr.syngen import generate_universe

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=DEFAULT_CONFIG)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, help="optional JSON output path")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    base = load_config(args.config)
    per_seed = {}
    for seed in args.seeds:
        cfg = dataclasses.replace(base, seed=seed).resolved()
        data = Dataset.from_universe(generate_universe(cfg.data.synthetic))
        per_seed[seed] = directional_summary(data, cfg.experiment()).as_dict()

    rows = list(per_seed.values())
    avg = lambda f: float(np.mean([f(r) for r in rows]))
    markets = list(rows[0]["hr_by_market"]["full"])
    summary = {
        "js": {"ce": avg(lambda r: r["js_ce"]), "s2ce": avg(lambda r: r["js_s2ce"])},
        "ndcg@10": {arm: avg(lambda r, a=arm: r["ndcg"][a]) for arm in rows[0]["ndcg"]},
        "hr@10": {
            arm: {m: avg(lambda r, a=arm, m=m: r["hr_by_market"][a][m]) for m in markets}
            for arm in ("full", "local_ce")
        },
        "similarity": {k: avg(lambda r, k=k: r["sim_mean"][k]) for k in ("s2ce", "ce")},
        "min_s2ce_similarity_std": min(r["sim_std_s2ce"] for r in rows),
    }
    payload = json.dumps({"per_seed": per_seed, "mean": summary}, indent=2, sort_keys=True)
    if args.out:
        args.out.write_text(payload + "\n")
    print(payload)


if __name__ == "__main__":
    main()
