"""Leave-one-out full-ranking evaluation with HR@N and NDCG@N."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .datamodel import MarketSplit
from .encoder import Adapters, EncoderConfig, EncoderParams, encode, make_batch, user_representation

EXCLUSION_POLICY = "full interaction history up to the evaluated position; target always kept"


class EvaluationError(ValueError):
    pass


def hr_at_n(rank: int, n: int) -> int:
    return int(rank <= n)


def ndcg_at_n(rank: int, n: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= n else 0.0


def rank_ground_truth(scores: np.ndarray, target: int, interacted: Sequence[int] = ()) -> int:
    """1-based rank of ``target`` among non-interacted candidates.

    Ties are broken by item index: an equal-scoring candidate with a smaller
    index ranks ahead of the target.
    """
    scores = np.asarray(scores)
    n = scores.shape[0]
    if not 0 <= target < n:
        raise EvaluationError(f"target {target} outside catalog of {n} items")
    cand = np.ones(n, dtype=bool)
    if len(interacted):
        cand[np.asarray(list(interacted), dtype=np.int64)] = False
    cand[target] = True
    s_t = scores[target]
    higher = np.count_nonzero(cand & (scores > s_t))
    ties = np.count_nonzero(cand[:target] & (scores[:target] == s_t))
    return int(1 + higher + ties)


@dataclass
class ModelBundle:
    """Encoder (+ optional adapters) with the market's frozen embedding view."""

    params: EncoderParams
    cfg: EncoderConfig
    table: torch.Tensor
    adapters: Adapters | None = None

    @torch.no_grad()
    def item_table(self) -> torch.Tensor:
        return self.adapters.enhance(self.table) if self.adapters is not None else self.table

    @torch.no_grad()
    def user_reprs(self, contexts: Sequence[Sequence[int]], batch_size: int = 512) -> torch.Tensor:
        items = self.item_table()
        lora = self.adapters.lora_deltas() if self.adapters is not None else None
        out = []
        for i in range(0, len(contexts), batch_size):
            batch = make_batch(contexts[i : i + batch_size], items.shape[0], self.cfg.max_len)
            out.append(user_representation(encode(self.params, items, batch, self.cfg, lora=lora)))
        if not out:
            return torch.zeros(0, self.cfg.dim)
        return torch.cat(out)

    @torch.no_grad()
    def scores(self, contexts: Sequence[Sequence[int]]) -> torch.Tensor:
        return self.user_reprs(contexts) @ self.item_table().T


@dataclass
class MarketMetrics:
    market: str
    mode: str
    n_list: tuple[int, ...]
    hr: dict[int, float | None]
    ndcg: dict[int, float | None]
    user_count: int
    ranks: list[int] = field(default_factory=list, repr=False)

    def record(self, config_hash: str = "", seed: int | None = None) -> dict:
        return {
            "market": self.market,
            "mode": self.mode,
            "n_list": list(self.n_list),
            "HR": {str(n): v for n, v in self.hr.items()},
            "NDCG": {str(n): v for n, v in self.ndcg.items()},
            "user_count": self.user_count,
            "config_hash": config_hash,
            "seed": seed,
        }


@dataclass
class MetricsReport:
    markets: dict[str, MarketMetrics]

    def mean(self, metric: str, n: int = 10) -> float:
        vals = [getattr(m, metric)[n] for m in self.markets.values() if getattr(m, metric)[n] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def records(self, config_hash: str = "", seed: int | None = None) -> list[dict]:
        return [m.record(config_hash, seed) for m in self.markets.values()]


def metrics_from_ranks(market: str, mode: str, ranks: Sequence[int], n_list: Sequence[int] = (10,)) -> MarketMetrics:
    n_list = tuple(n_list)
    if not ranks:
        return MarketMetrics(market, mode, n_list, {n: None for n in n_list}, {n: None for n in n_list}, 0, [])
    # canonical-order summation
    hr = {n: math.fsum(hr_at_n(r, n) for r in ranks) / len(ranks) for n in n_list}
    nd = {n: math.fsum(ndcg_at_n(r, n) for r in ranks) / len(ranks) for n in n_list}
    return MarketMetrics(market, mode, n_list, hr, nd, len(ranks), list(ranks))


def contexts_and_targets(split: MarketSplit, mode: str):
    if mode not in ("valid", "test"):
        raise EvaluationError(f"mode must be 'valid' or 'test', got {mode!r}")
    ctx, tgt = [], []
    for u in split.users:
        if mode == "valid":
            ctx.append(u.valid_context)
            tgt.append(u.valid_target)
        else:
            ctx.append(u.test_context)
            tgt.append(u.test_target)
    return ctx, tgt


def evaluate_market(bundle: ModelBundle, split: MarketSplit, mode: str = "test", n_list: Sequence[int] = (10,)) -> MarketMetrics:
    ctx, tgt = contexts_and_targets(split, mode)
    if not ctx:
        return metrics_from_ranks(split.market, mode, [], n_list)
    scores = bundle.scores(ctx).numpy()
    ranks = [rank_ground_truth(s, t, c) for s, t, c in zip(scores, tgt, ctx)]
    return metrics_from_ranks(split.market, mode, ranks, n_list)
