"""Shared helper: run the CLI pipeline once per config override, then tabulate."""

from __future__ import annotations

import argparse
from pathlib import Path

import yaml

from fecosr.cli import main

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def parse_args(description: str) -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--config", type=Path, default=DEFAULT_CONFIG)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    return ap.parse_args()


def set_key(raw: dict, dotted: str, value) -> None:
    node = raw
    *head, last = dotted.split(".")
    for k in head:
        node = node.setdefault(k, {})
    node[last] = value


def sweep(config: Path, out: Path, seed: int, runs: dict[str, dict], extra: tuple[str, ...] = ()) -> int:
    """``runs`` maps a run name to its ``{dotted.key: value}`` overrides."""
    out.mkdir(parents=True, exist_ok=True)
    base = yaml.safe_load(config.read_text()) or {}
    dirs = []
    for name, overrides in runs.items():
        raw = yaml.safe_load(yaml.safe_dump(base))
        cli_extra = list(extra)
        for key, value in overrides.items():
            if key == "--ablation":
                cli_extra += ["--ablation", value]
            else:
                set_key(raw, key, value)
        cfg_path = out / f"{name}.yaml"
        cfg_path.write_text(yaml.safe_dump(raw))
        run_dir = out / name
        code = main(["run", "--config", str(cfg_path), "--out", str(run_dir), "--seed", str(seed), *cli_extra])
        if code:
            return code
        dirs.append(str(run_dir))
    return main(["report", *dirs, "--out", str(out / "report")])
