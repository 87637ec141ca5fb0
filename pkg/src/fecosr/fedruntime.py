"""Federated collaborative pretraining: local training, scoped FedAvg, broadcast.

Each market is a client holding its own ``MarketView`` and its own copy of
the encoder. After every round the server averages the ``aggregated``-scope
tensors; ``local``-scope tensors never leave their market. Clients run in a
fixed canonical order so results do not depend on scheduling.
"""

from __future__ import annotations

import json
import math
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from . import objectives
from .encoder import AGGREGATED, EncoderConfig, EncoderParams, NumericalError, ObjectiveSpec, save_params, set_scope_mode
from .evaluation import ModelBundle, evaluate_market
from .training import MarketView, make_optimizer, run_epoch

logger = logging.getLogger(__name__)


class AggregationError(ValueError):
    pass


class FederatedAbort(RuntimeError):
    def __init__(self, round_index: int, market: str, cause: Exception):
        super().__init__(f"round {round_index}, market {market}: {cause}")
        self.round_index = round_index
        self.market = market
        self.cause = cause


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"
    weighting: str = "uniform"
    aggregate_scope: str = "attention_only"
    objective: str = "s2ce"
    tau: float = objectives.DEFAULT_TAU
    tau_overrides: dict = field(default_factory=dict)
    federate: bool = True
    keep_best_valid: bool = False
    eval_every_round: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("need rounds >= 0, local_epochs >= 1, batch_size >= 1")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError("learning rate must be finite and non-negative")
        if self.weighting not in ("uniform", "data"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.aggregate_scope not in ("attention_only", "full"):
            raise ValueError(f"unknown aggregate_scope {self.aggregate_scope!r}")
        ObjectiveSpec(self.objective, self.tau).validate()
        for m, t in self.tau_overrides.items():
            if not t > 0:
                raise ValueError(f"tau override for {m} must be positive")

    def objective_for(self, market: str) -> ObjectiveSpec:
        return ObjectiveSpec(self.objective, float(self.tau_overrides.get(market, self.tau)))


def aggregation_weights(views: Sequence[MarketView], mode: str = "uniform") -> list[float]:
    if mode == "uniform":
        return [1.0 / len(views)] * len(views)
    sizes = [len(v.split.users) for v in views]
    total = sum(sizes)
    return [s / total for s in sizes]


def aggregate(locals_: Sequence[EncoderParams], weights: Sequence[float], previous: EncoderParams) -> EncoderParams:
    """FedAvg over ``aggregated``-scope tensors, summed in list order.

    Tensors outside the scope are copied from ``previous`` unchanged.
    """
    if len(locals_) != len(weights) or not locals_:
        raise AggregationError("need one weight per local model")
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise AggregationError("weights must be non-negative and sum to 1")
    out = {}
    for name, prev in previous.tensors.items():
        if previous.scopes[name] != AGGREGATED:
            out[name] = prev.clone()
            continue
        # float64 accumulator: averaging identical float32 inputs returns them exactly
        acc = torch.zeros(prev.shape, dtype=torch.float64)
        for params, w in zip(locals_, weights):
            t = params.tensors.get(name)
            if t is None or t.shape != prev.shape:
                raise AggregationError(f"tensor {name}: shape mismatch across clients")
            acc = acc + w * t.to(torch.float64)
        out[name] = acc.to(prev.dtype)
    return EncoderParams(out, dict(previous.scopes))


class Client:
    """A market's private training state: its parameters and optimizer."""

    def __init__(self, view: MarketView, start: EncoderParams, enc_cfg: EncoderConfig, cfg: FedConfig):
        self.view = view
        self.enc_cfg = enc_cfg
        self.cfg = cfg
        self.params = start.clone()
        self.objective = cfg.objective_for(view.market)
        self.optimizer = make_optimizer(cfg.optimizer, list(self.params.tensors.values()), cfg.lr)
        self.soft = (
            objectives.SoftTargets(view.table, self.objective.tau) if self.objective.kind == "s2ce" else None
        )
        self.epochs_done = 0

    def receive(self, global_params: EncoderParams) -> None:
        with torch.no_grad():
            for name in global_params.names(AGGREGATED):
                self.params.tensors[name].copy_(global_params.tensors[name])

    def train(self, epochs: int) -> float:
        losses = []
        for _ in range(epochs):
            losses.append(
                run_epoch(
                    self.params,
                    None,
                    self.view,
                    self.enc_cfg,
                    self.objective,
                    self.params.tensors,
                    self.optimizer,
                    self.cfg.batch_size,
                    ("pretrain", self.cfg.seed, self.view.market, self.epochs_done),
                    self.soft,
                )
            )
            self.epochs_done += 1
        return sum(losses) / len(losses)


def local_pretrain(global_params: EncoderParams, view: MarketView, enc_cfg: EncoderConfig, cfg: FedConfig, round_index: int = 0) -> EncoderParams:
    """One client's round from an exact copy of ``global_params`` with a fresh optimizer."""
    client = Client(view, global_params, enc_cfg, cfg)
    client.epochs_done = round_index * cfg.local_epochs
    client.train(cfg.local_epochs)
    return client.params.clone()


def train_standalone(init: EncoderParams, view: MarketView, enc_cfg: EncoderConfig, cfg: FedConfig, epochs: int) -> EncoderParams:
    """Plain local training with the same RNG streams the federated loop uses."""
    client = Client(view, init, enc_cfg, cfg)
    if epochs:
        client.train(epochs)
    return client.params.clone()


@dataclass
class RoundRecord:
    round: int
    loss: dict[str, float]
    wall_time: float
    delta_norm: dict[str, float]
    valid: dict[str, dict[str, float | None]] = field(default_factory=dict)


@dataclass
class FedResult:
    global_params: EncoderParams
    market_params: dict[str, EncoderParams]
    history: list[RoundRecord]
    best_round: dict[str, int] = field(default_factory=dict)

    def history_json(self) -> list[dict]:
        return [asdict(r) for r in self.history]


def _delta_norm(a: EncoderParams, b: EncoderParams) -> float:
    return float(torch.sqrt(sum(((a.tensors[k] - b.tensors[k]) ** 2).sum() for k in a.tensors)))


def run_federated_pretraining(
    views: dict[str, MarketView],
    init: EncoderParams,
    enc_cfg: EncoderConfig,
    cfg: FedConfig,
    out_dir=None,
    meta: dict | None = None,
) -> FedResult:
    """R rounds of {local training per market -> aggregate -> broadcast}.

    With ``cfg.federate`` off, markets train independently for the same
    budget (the no-collaboration ablation). ``market_params[m]`` is market
    m's personalised view: aggregated tensors from the server plus its own
    local-scope tensors.
    """
    cfg.validate()
    if not views:
        raise ValueError("need at least one market")
    markets = list(views)
    global_params = set_scope_mode(init.clone(), cfg.aggregate_scope)
    clients = {m: Client(views[m], global_params, enc_cfg, cfg) for m in markets}
    weights = aggregation_weights([views[m] for m in markets], cfg.weighting)
    history: list[RoundRecord] = []
    best_score = {m: float("-inf") for m in markets}
    best_params = {m: clients[m].params.clone() for m in markets}
    best_round = {m: 0 for m in markets}
    out = Path(out_dir) if out_dir is not None else None

    for r in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        losses, deltas, uploads = {}, {}, []
        for m in markets:
            c = clients[m]
            start = c.params.clone()
            try:
                losses[m] = c.train(cfg.local_epochs)
            except (NumericalError, FloatingPointError) as exc:
                raise FederatedAbort(r, m, exc) from exc
            deltas[m] = _delta_norm(c.params, start)
            uploads.append(c.params)
        if cfg.federate:
            global_params = aggregate(uploads, weights, global_params)
            for m in markets:
                clients[m].receive(global_params)
        rec = RoundRecord(r, losses, time.perf_counter() - t0, deltas)
        if cfg.eval_every_round or cfg.keep_best_valid:
            for m in markets:
                met = evaluate_market(ModelBundle(clients[m].params, enc_cfg, views[m].table), views[m].split, "valid")
                rec.valid[m] = {"HR@10": met.hr[10], "NDCG@10": met.ndcg[10]}
                score = met.ndcg[10] if met.ndcg[10] is not None else float("-inf")
                if cfg.keep_best_valid and score > best_score[m]:
                    best_score[m], best_params[m], best_round[m] = score, clients[m].params.clone(), r
        history.append(rec)
        logger.info("round %d: loss %s", r, {m: round(v, 4) for m, v in losses.items()})
        if out is not None:
            rdir = out / f"round_{r}"
            save_params(global_params, rdir, meta)
            for m in markets:
                save_params(clients[m].params, rdir / "markets" / m, meta)

    if cfg.keep_best_valid:
        market_params = best_params
    else:
        market_params = {m: clients[m].params.clone() for m in markets}
        best_round = {m: cfg.rounds for m in markets}
    result = FedResult(global_params, market_params, history, best_round)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.json").write_text(json.dumps({"meta": meta or {}, "rounds": result.history_json()}, indent=2, sort_keys=True) + "\n")
    return result
