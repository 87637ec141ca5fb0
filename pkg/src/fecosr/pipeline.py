"""End-to-end experiment arms built from the stage modules.

An *arm* is a pretraining recipe plus an optional fine-tuning recipe. The
five ablation arms each remove one ingredient of the full method;
``local_ce`` and ``fed_ce`` are the built-in baselines without fine-tuning.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .datamodel import (
    InteractionLog,
    ItemCatalog,
    SplitDataset,
    catalog_from_log,
    leave_one_out_split,
    load_catalog,
    load_embeddings,
    load_interactions,
)
from .encoder import EncoderConfig, EncoderParams, init_params
from .evaluation import MetricsReport, ModelBundle, evaluate_market
from .fedruntime import FedConfig, FedResult, run_federated_pretraining
from .finetune import FinetuneAdapters, FinetuneConfig, FinetuneResult, run_local_finetune
from .syngen import Universe
from .training import MarketView, market_views

logger = logging.getLogger(__name__)

ARMS = ("full", "wo_fed", "wo_s2ce", "wo_lr", "wo_id", "local_ce", "fed_ce")
ABLATION_ARMS = ("full", "wo_fed", "wo_s2ce", "wo_lr", "wo_id")


@dataclass
class Dataset:
    catalog: ItemCatalog
    log: InteractionLog
    split: SplitDataset
    views: dict[str, MarketView]

    @classmethod
    def build(cls, catalog: ItemCatalog, log: InteractionLog, min_len: int = 3) -> "Dataset":
        split = leave_one_out_split(log, catalog, min_len)
        return cls(catalog, log, split, market_views(catalog, split))

    @classmethod
    def from_universe(cls, universe: Universe, min_len: int = 3) -> "Dataset":
        return cls.build(universe.catalog, universe.log, min_len)

    @classmethod
    def from_files(cls, interactions, embeddings, catalog=None, min_len: int = 3) -> "Dataset":
        cat = load_catalog(catalog) if catalog is not None else None
        log = load_interactions(interactions, cat)
        if cat is None:
            cat = catalog_from_log(log)
        return cls.build(load_embeddings(embeddings, cat), log, min_len)

    @classmethod
    def from_dir(cls, data_dir, min_len: int = 3) -> "Dataset":
        d = Path(data_dir)
        emb = d / "embeddings.bin" if (d / "embeddings.bin").exists() else d / "embeddings.tsv"
        cat = d / "catalog.tsv" if (d / "catalog.tsv").exists() else None
        return cls.from_files(d / "interactions.tsv", emb, cat, min_len)


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig = EncoderConfig()
    pretrain: FedConfig = FedConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    n_list: tuple[int, ...] = (10,)
    seed: int = 0

    def seeded(self) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            pretrain=dataclasses.replace(self.pretrain, seed=self.seed),
            finetune=dataclasses.replace(self.finetune, seed=self.seed),
        )


def arm_configs(cfg: ExperimentConfig, arm: str) -> tuple[FedConfig, FinetuneConfig | None]:
    """Pretraining and fine-tuning recipes for one arm."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; choose from {ARMS}")
    cfg = cfg.seeded()
    pre, ft = cfg.pretrain, cfg.finetune
    if arm == "wo_fed":
        pre = dataclasses.replace(pre, federate=False)
    elif arm == "wo_s2ce":
        pre = dataclasses.replace(pre, objective="ce")
    elif arm == "wo_lr":
        ft = dataclasses.replace(ft, rank=0)
    elif arm == "wo_id":
        ft = dataclasses.replace(ft, use_id_adapter=False)
    elif arm in ("local_ce", "fed_ce"):
        # same total epoch budget as pretraining + fine-tuning, best-validation selection
        pre = dataclasses.replace(
            pre,
            objective="ce",
            federate=arm == "fed_ce",
            rounds=pre.rounds + ft.epochs // pre.local_epochs,
            keep_best_valid=True,
        )
        ft = None
    return pre, ft


@dataclass
class ArmResult:
    arm: str
    pretrain: FedResult
    finetune: dict[str, FinetuneResult] | None
    test: MetricsReport
    valid: MetricsReport

    def bundles(self, data: Dataset, enc_cfg: EncoderConfig) -> dict[str, ModelBundle]:
        return bundles_for(data, enc_cfg, self.pretrain.market_params, self.adapters())

    def adapters(self) -> dict[str, FinetuneAdapters] | None:
        if self.finetune is None:
            return None
        return {m: r.adapters for m, r in self.finetune.items()}


def bundles_for(data: Dataset, enc_cfg: EncoderConfig, params: dict[str, EncoderParams], adapters=None) -> dict[str, ModelBundle]:
    return {
        m: ModelBundle(params[m], enc_cfg, data.views[m].table, adapters[m] if adapters else None)
        for m in data.views
    }


def evaluate_bundles(bundles: dict[str, ModelBundle], data: Dataset, mode: str, n_list=(10,)) -> MetricsReport:
    return MetricsReport({m: evaluate_market(b, data.views[m].split, mode, n_list) for m, b in bundles.items()})


def pretrain(data: Dataset, enc_cfg: EncoderConfig, fed_cfg: FedConfig, seed: int, out_dir=None, meta=None) -> FedResult:
    init = init_params(enc_cfg, seed)
    return run_federated_pretraining(data.views, init, enc_cfg, fed_cfg, out_dir=out_dir, meta=meta)


def finetune_all(data: Dataset, market_params: dict[str, EncoderParams], enc_cfg: EncoderConfig, ft_cfg: FinetuneConfig, markets=None) -> dict[str, FinetuneResult]:
    markets = list(markets or data.views)
    return {m: run_local_finetune(market_params[m], data.views[m], enc_cfg, ft_cfg) for m in markets}


@dataclass
class ArmRunner:
    """Runs arms on one dataset, sharing identical pretraining runs between arms."""

    data: Dataset
    cfg: ExperimentConfig
    _cache: dict = field(default_factory=dict)

    def pretrained(self, fed_cfg: FedConfig) -> FedResult:
        key = dataclasses.astuple(fed_cfg)
        key = repr(key)
        if key not in self._cache:
            self._cache[key] = pretrain(self.data, self.cfg.encoder, fed_cfg, self.cfg.seed)
        return self._cache[key]

    def run(self, arm: str) -> ArmResult:
        fed_cfg, ft_cfg = arm_configs(self.cfg, arm)
        pre = self.pretrained(fed_cfg)
        ft = finetune_all(self.data, pre.market_params, self.cfg.encoder, ft_cfg) if ft_cfg is not None else None
        adapters = {m: r.adapters for m, r in ft.items()} if ft is not None else None
        bundles = bundles_for(self.data, self.cfg.encoder, pre.market_params, adapters)
        test = evaluate_bundles(bundles, self.data, "test", self.cfg.n_list)
        valid = evaluate_bundles(bundles, self.data, "valid", self.cfg.n_list)
        logger.info("arm %s: test HR@10 %.4f NDCG@10 %.4f", arm, test.mean("hr"), test.mean("ndcg"))
        return ArmResult(arm, pre, ft, test, valid)

    def local_encoders(self, objective: str) -> dict[str, EncoderParams]:
        """Per-market encoders trained without aggregation (heterogeneity probes)."""
        fed_cfg, _ = arm_configs(self.cfg, "wo_fed")
        fed_cfg = dataclasses.replace(fed_cfg, objective=objective)
        return self.pretrained(fed_cfg).market_params


def set_threads_from_env() -> None:
    import os

    n = os.environ.get("FECOSR_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


@dataclass
class DirectionalSummary:
    """Per-seed quantities behind the comparative checks."""

    js_ce: float
    js_s2ce: float
    ndcg: dict[str, float]
    hr_by_market: dict[str, dict[str, float]]
    sim_mean: dict[str, float]
    sim_std_s2ce: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def directional_summary(data: Dataset, cfg: ExperimentConfig, analysis_pairs: int = 100_000) -> DirectionalSummary:
    from . import analysis

    runner = ArmRunner(data, cfg)
    arms = {a: runner.run(a) for a in ("full", "wo_fed", "wo_s2ce", "local_ce")}
    tables = {m: v.table for m, v in data.views.items()}
    splits = {m: v.split for m, v in data.views.items()}
    het = {
        obj: analysis.heterogeneity_matrix(runner.local_encoders(obj), cfg.encoder, tables, splits)
        for obj in ("ce", "s2ce")
    }
    sims = {}
    for label, arm in (("s2ce", "full"), ("ce", "wo_s2ce")):
        params = arms[arm].pretrain.market_params
        sims[label] = {
            m: analysis.user_similarity_samples(
                analysis.user_representations(params[m], cfg.encoder, tables[m], splits[m]), analysis_pairs, cfg.seed
            )
            for m in data.views
        }
    return DirectionalSummary(
        js_ce=het["ce"].mean_off_diagonal(),
        js_s2ce=het["s2ce"].mean_off_diagonal(),
        ndcg={a: r.test.mean("ndcg") for a, r in arms.items()},
        hr_by_market={a: {m: r.test.markets[m].hr[10] for m in data.views} for a, r in arms.items()},
        sim_mean={k: float(sum(s.mean() for s in v.values()) / len(v)) for k, v in sims.items()},
        sim_std_s2ce=float(min(s.std(ddof=1) for s in sims["s2ce"].values())),
    )
