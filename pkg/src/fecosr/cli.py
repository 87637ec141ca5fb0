"""Command-line entry point: ``fecosr <subcommand> [flags]``.

Layout of a run directory::

    <out>/data/          interactions.tsv, catalog.tsv, embeddings.bin, universe.json
    <out>/pretrain/      round_<k>/, history.json, final/global/, final/markets/<m>/
    <out>/finetune/<m>/  adapter tensors; summary.json
    <out>/evaluate/      metrics.json
    <out>/analyze/       heterogeneity*.csv, similarity_kde.csv, bounds_report.json, pca_coords.csv
    <out>/run_manifest.json

Exit codes: 0 success, 1 I/O, 2 configuration/usage, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import filelock
import numpy as np

from . import analysis
from .config import RunConfig, RunConfigError, config_from_dict, dump_config, load_config
from .datamodel import DataError
from .encoder import NumericalError, load_params, save_params
from .evaluation import EXCLUSION_POLICY, MetricsReport, ModelBundle, evaluate_market
from .fedruntime import FederatedAbort
from .finetune import FinetuneConfigError, enhance_item_embeddings, load_adapters, save_adapters
from .pipeline import ARMS, ArmRunner, Dataset, arm_configs, finetune_all, pretrain, set_threads_from_env
from .syngen import ConfigError, generate_universe, write_universe

logger = logging.getLogger("fecosr")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def usage(msg: str) -> CliError:
    return CliError(EXIT_CONFIG, msg)


def missing(artifact: Path) -> CliError:
    return CliError(EXIT_CONFIG, f"missing upstream artifact: {artifact}")


# -- run directory helpers ---------------------------------------------------


@contextmanager
def locked(out: Path):
    if not out.parent.exists():
        raise CliError(EXIT_IO, f"parent directory does not exist: {out.parent}")
    try:
        out.mkdir(exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {exc}") from exc
    lock = filelock.FileLock(str(out / ".fecosr.lock"))
    try:
        lock.acquire(timeout=0)
    except filelock.Timeout as exc:
        raise CliError(EXIT_IO, f"output directory {out} is locked by another process") from exc
    try:
        yield out
    finally:
        lock.release()


def read_manifest(out: Path) -> dict:
    p = out / "run_manifest.json"
    if not p.exists():
        return {"stages": {}}
    return json.loads(p.read_text())


def record_stage(out: Path, stage: str, cfg: RunConfig, **extra) -> dict:
    """Append a stage entry whose ``upstream`` field chains earlier hashes."""
    man = read_manifest(out)
    stages = man.setdefault("stages", {})
    entry = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "upstream": {k: v["config_hash"] for k, v in sorted(stages.items()) if k != stage},
        **extra,
    }
    stages[stage] = entry
    (out / "run_manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return entry


def stamp(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.hash()} seed={cfg.seed}"


def meta(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, **extra}


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_dataset(cfg: RunConfig, out: Path) -> Dataset:
    d = cfg.data
    if d.interactions is not None:
        return check_dim(Dataset.from_files(d.interactions, d.embeddings, d.catalog, d.min_len), cfg)
    data_dir = Path(d.dir) if d.dir is not None else out / "data"
    if not (data_dir / "interactions.tsv").exists():
        raise missing(data_dir / "interactions.tsv")
    return check_dim(Dataset.from_dir(data_dir, d.min_len), cfg)


def check_dim(data: Dataset, cfg: RunConfig) -> Dataset:
    if data.catalog.dim != cfg.encoder.dim:
        raise usage(f"embedding dim {data.catalog.dim} does not match encoder.dim {cfg.encoder.dim}")
    return data


def recorded_arm(run_dir: Path) -> str | None:
    return read_manifest(run_dir).get("stages", {}).get("pretrain", {}).get("ablation")


def stage_ablation(model_dir: Path, cfg: RunConfig) -> str:
    recorded = recorded_arm(model_dir)
    if recorded is not None and recorded != cfg.ablation:
        raise usage(f"ablation {cfg.ablation} does not match the pretrained arm {recorded}")
    return cfg.ablation


def load_market_params(model_dir: Path, data: Dataset, cfg: RunConfig) -> dict:
    params = {}
    for m in data.views:
        p = model_dir / "pretrain" / "final" / "markets" / m
        if not (p / "manifest.json").exists():
            raise missing(p / "manifest.json")
        params[m] = load_params(p, cfg.encoder)
    return params


def load_market_adapters(model_dir: Path, markets) -> dict | None:
    root = model_dir / "finetune"
    if not root.exists():
        return None
    out = {}
    for m in markets:
        p = root / m
        if not (p / "manifest.json").exists():
            raise missing(p / "manifest.json")
        out[m] = load_adapters(p)
    return out


def scoped_markets(data: Dataset, market: str | None) -> list[str]:
    if market is None:
        return list(data.views)
    if market not in data.views:
        raise usage(f"unknown market {market!r}; known: {list(data.views)}")
    return [market]


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    with locked(out):
        universe = generate_universe(cfg.resolved().data.synthetic)
        data_dir = out / "data"
        data_dir.mkdir(exist_ok=True)
        write_universe(universe, data_dir, cfg.data.embedding_format)
        record_stage(out, "gen_data", cfg)
    logger.info("wrote %s", data_dir)
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, out: Path, args) -> int:
    arm = cfg.ablation
    with locked(out):
        data = load_dataset(cfg, out)
        fed_cfg, _ = arm_configs(cfg.experiment(), arm)
        stage_dir = out / "pretrain"
        m = meta(cfg, ablation=arm)
        result = pretrain(data, cfg.encoder, fed_cfg, cfg.seed, out_dir=stage_dir, meta=m)
        save_params(result.global_params, stage_dir / "final" / "global", m)
        for market, params in result.market_params.items():
            save_params(params, stage_dir / "final" / "markets" / market, m)
        write_json(stage_dir / "best_round.json", {"meta": m, "best_round": result.best_round})
        record_stage(out, "pretrain", cfg, ablation=arm)
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, out: Path, args) -> int:
    with locked(out):
        data = load_dataset(cfg, out)
        arm = stage_ablation(out, cfg)
        _, ft_cfg = arm_configs(cfg.experiment(), arm)
        if ft_cfg is None:
            raise usage(f"arm {arm} has no fine-tuning stage")
        params = load_market_params(out, data, cfg)
        markets = scoped_markets(data, args.market)
        results = finetune_all(data, params, cfg.encoder, ft_cfg, markets)
        m = meta(cfg, ablation=arm)
        summary = {}
        for market, res in results.items():
            save_adapters(res.adapters, out / "finetune" / market, {**m, "best_epoch": res.best_epoch})
            summary[market] = {"best_epoch": res.best_epoch, "history": res.history}
        write_json(out / "finetune" / "summary.json", {"meta": m, "markets": summary})
        record_stage(out, "finetune", cfg, ablation=arm, markets=markets)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> int:
    model_dir = Path(args.model) if args.model else out
    if not (model_dir / "pretrain" / "final").exists():
        raise missing(model_dir / "pretrain" / "final")
    mode = args.mode or cfg.eval.mode
    with locked(out):
        data = load_dataset(cfg, out)
        markets = scoped_markets(data, args.market)
        params = load_market_params(model_dir, data, cfg)
        adapters = load_market_adapters(model_dir, markets)
        report = MetricsReport({
            m: evaluate_market(
                ModelBundle(params[m], cfg.encoder, data.views[m].table, adapters[m] if adapters else None),
                data.views[m].split, mode, cfg.eval.n_list,
            )
            for m in markets
        })
        arm = stage_ablation(model_dir, cfg)
        stage_dir = out / "evaluate"
        stage_dir.mkdir(exist_ok=True)
        payload = {
            "meta": meta(cfg, ablation=arm, mode=mode, exclusion_policy=EXCLUSION_POLICY, finetuned=adapters is not None),
            "records": report.records(cfg.hash(), cfg.seed),
        }
        write_json(stage_dir / "metrics.json", payload)
        record_stage(out, "evaluate", cfg, ablation=arm, mode=mode, markets=markets)
    for r in payload["records"]:
        logger.info("%s %s HR %s NDCG %s", r["market"], mode, r["HR"], r["NDCG"])
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, out: Path, args) -> int:
    a = cfg.analysis
    with locked(out):
        data = load_dataset(cfg, out)
        stage_dir = out / "analyze"
        stage_dir.mkdir(exist_ok=True)
        header = stamp(cfg)
        tables = {m: v.table for m, v in data.views.items()}
        splits = {m: v.split for m, v in data.views.items()}

        runner = ArmRunner(data, cfg.experiment())
        local = {obj: runner.local_encoders(obj) for obj in ("ce", "s2ce")}
        het = {obj: analysis.heterogeneity_matrix(enc, cfg.encoder, tables, splits) for obj, enc in local.items()}
        het[cfg.pretrain.objective].to_csv(stage_dir / "heterogeneity.csv", header)
        het["ce"].to_csv(stage_dir / "heterogeneity_ce.csv", header)
        het["s2ce"].to_csv(stage_dir / "heterogeneity_s2ce.csv", header)
        analysis.difference_matrix(het["ce"], het["s2ce"]).to_csv(stage_dir / "heterogeneity_diff.csv", header)

        models = {f"local_{obj}": (enc, None) for obj, enc in local.items()}
        adapters = None
        if (out / "pretrain" / "final").exists():
            params = load_market_params(out, data, cfg)
            models["pretrained"] = (params, None)
            adapters = load_market_adapters(out, data.views)
            if adapters is not None:
                models["finetuned"] = (params, adapters)
        curves, sim_summary = {}, {}
        for m in data.views:
            for label, (params, ad) in models.items():
                reprs = analysis.user_representations(params[m], cfg.encoder, tables[m], splits[m], ad[m] if ad else None)
                sims = analysis.user_similarity_samples(reprs, a.max_pairs, cfg.seed)
                curves[(m, label)] = analysis.kde(sims, a.bandwidth, a.kde_grid)
                sim_summary.setdefault(m, {})[label] = {"mean": float(sims.mean()), "std": float(sims.std(ddof=1))}
        analysis.write_kde_csv(stage_dir / "similarity_kde.csv", curves, header)
        write_json(stage_dir / "similarity_summary.json", {"meta": meta(cfg), "markets": sim_summary})

        bounds = analysis.verify_soft_target_bound(a.bound_trials, seed=cfg.seed).extend(
            analysis.verify_kl_contrast(a.kl_trials, tau=cfg.pretrain.tau, seed=cfg.seed)
        )
        bounds.to_json(stage_dir / "bounds_report.json", meta(cfg))

        rows = []
        if adapters is not None:
            rng = np.random.default_rng(cfg.seed)
            for m in data.views:
                if adapters[m].id_adapter is None:
                    continue
                table = tables[m]
                n = table.shape[0]
                idx = np.sort(rng.choice(n, size=min(n, a.pca_max_items), replace=False))
                before = table.numpy()[idx]
                after = enhance_item_embeddings(table, adapters[m].id_adapter).numpy()[idx]
                ids = [data.catalog.market_items[m][i] for i in idx]
                rows += analysis.pca_rows(ids, *analysis.pca_project(before, after))
        analysis.write_pca_csv(stage_dir / "pca_coords.csv", rows, header)
        record_stage(out, "analyze", cfg, js_mean_off_diagonal={k: v.mean_off_diagonal() for k, v in het.items()})
    if bounds.violations:
        logger.error("%d bound violations; see bounds_report.json", bounds.violations)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_run(cfg: RunConfig, out: Path, args) -> int:
    """gen-data (for synthetic configs) -> pretrain -> finetune -> evaluate -> analyze."""
    steps = [cmd_pretrain, cmd_finetune, cmd_evaluate, cmd_analyze]
    if cfg.data.dir is None and cfg.data.interactions is None:
        steps.insert(0, cmd_gen_data)
    if cfg.ablation in ("local_ce", "fed_ce"):
        steps.remove(cmd_finetune)
    for step in steps:
        code = step(cfg, out, args)
        if code:
            return code
    return EXIT_OK


# -- report ------------------------------------------------------------------


def _metrics_file(run_dir: Path) -> Path:
    for p in (run_dir / "evaluate" / "metrics.json", run_dir / "metrics.json"):
        if p.exists():
            return p
    raise missing(run_dir / "evaluate" / "metrics.json")


def _run_label(run_dir: Path, payload: dict) -> str:
    return payload.get("meta", {}).get("ablation") or run_dir.name


def _run_config(run_dir: Path) -> dict | None:
    p = run_dir / "config.yaml"
    if not p.exists():
        return None
    import yaml

    return yaml.safe_load(p.read_text())


def _provenance(labels, runs) -> str:
    parts = [f"{l}:{p.get('meta', {}).get('config_hash', '?')}:{p.get('meta', {}).get('seed', '?')}" for l, (_, p) in zip(labels, runs)]
    return "# runs=" + " ".join(parts) + "\n"


def cmd_report(run_dirs: list[Path], out: Path) -> int:
    runs = []
    for d in run_dirs:
        payload = json.loads(_metrics_file(d).read_text())
        runs.append((d, payload))
    n_lists = {tuple(r["n_list"]) for _, p in runs for r in p["records"]}
    if len(n_lists) != 1:
        raise usage(f"inconsistent N-lists across runs: {sorted(n_lists)}")
    labels = [_run_label(d, p) for d, p in runs]
    if len(set(labels)) != len(labels):
        labels = [d.name for d, _ in runs]
    if len(set(labels)) != len(labels):
        labels = [str(d) for d, _ in runs]
    n = 10 if 10 in next(iter(n_lists)) else next(iter(n_lists))[0]
    cells: dict[str, dict[str, str]] = {}
    for label, (_, p) in zip(labels, runs):
        for r in p["records"]:
            hr, nd = r["HR"][str(n)], r["NDCG"][str(n)]
            cells.setdefault(r["market"], {})[label] = "" if hr is None else f"{hr:.4f}/{nd:.4f}"
    with locked(out):
        with (out / "comparison.csv").open("w", newline="") as fh:
            fh.write(f"# cells=HR@{n}/NDCG@{n}\n")
            fh.write(_provenance(labels, runs))
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["market", *labels])
            for market in sorted(cells):
                w.writerow([market, *(cells[market].get(l, "") for l in labels)])
        for key, getter in (("tau", lambda c: c["pretrain"]["tau"]), ("rank", lambda c: c["finetune"]["rank"])):
            _write_sweep(out, key, getter, runs, n)
    return EXIT_OK


def _write_sweep(out: Path, key: str, getter, runs, n: int) -> None:
    """One CSV per market when the runs differ in ``key`` only through their configs."""
    points = []
    for d, p in runs:
        c = _run_config(d)
        if c is None:
            return
        points.append((getter(c), d, p))
    if len({v for v, _, _ in points}) < 2:
        return
    markets = sorted({r["market"] for _, _, p in points for r in p["records"]})
    for market in markets:
        with (out / f"sweep_{key}_{market}.csv").open("w", newline="") as fh:
            fh.write(_provenance([d.name for d, _ in runs], runs))
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([key, f"HR@{n}", f"NDCG@{n}", "run"])
            for v, d, p in sorted(points, key=lambda t: (t[0], str(t[1]))):
                for r in p["records"]:
                    if r["market"] == market:
                        w.writerow([v, r["HR"][str(n)], r["NDCG"][str(n)], d.name])


# -- argument parsing --------------------------------------------------------

COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fecosr", description="Federated cross-market sequential recommendation experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML run config (defaults apply when omitted)")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int)
        if name != "gen-data":
            p.add_argument("--ablation", choices=ARMS)
        if name in ("finetune", "evaluate"):
            p.add_argument("--market")
        if name == "evaluate":
            p.add_argument("--mode", choices=("valid", "test"))
            p.add_argument("--model", help="run directory holding pretrain/ (and finetune/) outputs")
    rp = sub.add_parser("report")
    rp.add_argument("runs", nargs="+", type=Path)
    rp.add_argument("--out", type=Path, required=True)
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    updates = {"out": str(args.out)}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.ablation is not None:
        updates["ablation"] = args.ablation
    elif args.command in ("finetune", "evaluate", "analyze") and cfg.ablation == "full":
        # later stages inherit the arm the run directory was pretrained with
        updates["ablation"] = recorded_arm(Path(args.model) if args.model else args.out) or cfg.ablation
    cfg = dataclasses.replace(cfg, **updates)
    cfg.validate()
    return cfg


def dispatch(args) -> int:
    if args.command == "report":
        return cmd_report(args.runs, args.out)
    for flag in ("ablation", "market", "mode", "model"):
        if not hasattr(args, flag):
            setattr(args, flag, None)
    cfg = resolve_config(args)
    code = COMMANDS[args.command](cfg, args.out, args)
    if code == EXIT_OK and args.out.exists():
        dump_config(cfg, args.out / "config.yaml")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    set_threads_from_env()
    try:
        return dispatch(args)
    except CliError as exc:
        print(f"fecosr: {exc}", file=sys.stderr)
        return exc.code
    except (RunConfigError, ConfigError, FinetuneConfigError) as exc:
        print(f"fecosr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FederatedAbort as exc:
        print(f"fecosr: numerical failure in round {exc.round_index}, market {exc.market}: {exc.cause}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericalError, FloatingPointError) as exc:
        print(f"fecosr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"fecosr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
