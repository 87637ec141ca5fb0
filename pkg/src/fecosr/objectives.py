"""Cross-entropy and semantic soft cross-entropy over a market's item scores.

All functions accept a single score vector (``n``) or a batch (``N x n``);
batched losses are averaged over rows. Natural logarithms throughout.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import torch

DEFAULT_TAU = 0.05
TAU_GRID = tuple(round(0.01 * k, 2) for k in range(1, 11))


class ObjectiveError(ValueError):
    pass


def _check_finite(scores: torch.Tensor) -> None:
    if not bool(torch.isfinite(scores).all()):
        raise FloatingPointError("non-finite scores")


def log_softmax(scores: torch.Tensor) -> torch.Tensor:
    m = scores.max(dim=-1, keepdim=True).values
    shifted = scores - m
    return shifted - shifted.exp().sum(dim=-1, keepdim=True).log()


def ce_loss(scores: torch.Tensor, target) -> torch.Tensor:
    """-log softmax(scores)[target], mean over rows for batched input."""
    _check_finite(scores)
    lp = log_softmax(scores)
    target = torch.as_tensor(target, dtype=torch.long)
    if lp.dim() == 1:
        return -lp[target]
    return -lp.gather(-1, target.view(-1, 1)).squeeze(-1).mean()


def ce_grad(scores: torch.Tensor, target) -> torch.Tensor:
    """d ce_loss / d scores for a single vector: softmax - onehot."""
    g = log_softmax(scores).exp()
    g[int(target)] -= 1.0
    return g


def s2ce_loss(scores: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Cross-entropy H(q, softmax(scores))."""
    _check_finite(scores)
    lp = log_softmax(scores)
    loss = -(q * lp).sum(dim=-1)
    return loss if loss.dim() == 0 else loss.mean()


def s2ce_grad(scores: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return log_softmax(scores).exp() - q


def entropy(q: torch.Tensor) -> torch.Tensor:
    return -(torch.where(q > 0, q * q.log(), torch.zeros_like(q))).sum(dim=-1)


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return (torch.where(p > 0, p * (p.log() - q.log()), torch.zeros_like(p))).sum(dim=-1)


def semantic_targets(table: torch.Tensor, target, tau: float) -> torch.Tensor:
    """q(j | target) = softmax_j(cos(e_j, e_target) / tau) over the market.

    ``table`` rows must be unit-norm so the dot product is the cosine.
    """
    if not tau > 0:
        raise ObjectiveError(f"temperature must be positive, got {tau}")
    target = torch.as_tensor(target, dtype=torch.long)
    cos = table[target] @ table.T
    return (cos / tau).softmax(dim=-1)


@dataclass(frozen=True)
class SoftTargetSpec:
    tau: float
    target: int
    table: torch.Tensor

    def __post_init__(self):
        if not self.tau > 0:
            raise ObjectiveError(f"temperature must be positive, got {self.tau}")

    def distribution(self) -> torch.Tensor:
        return semantic_targets(self.table, self.target, self.tau)


class SoftTargets:
    """Per-market soft target rows with an LRU cache keyed by target index."""

    def __init__(self, table: torch.Tensor, tau: float, cache_size: int = 4096):
        if not tau > 0:
            raise ObjectiveError(f"temperature must be positive, got {tau}")
        self.table = table
        self.tau = tau
        self.cache_size = cache_size
        self._cache: OrderedDict[int, torch.Tensor] = OrderedDict()

    def __call__(self, targets: torch.Tensor) -> torch.Tensor:
        if self.cache_size <= 0:
            return semantic_targets(self.table, targets, self.tau)
        keys = targets.tolist()
        missing = sorted({k for k in keys if k not in self._cache})
        if missing:
            rows = semantic_targets(self.table, torch.tensor(missing), self.tau)
            for k, row in zip(missing, rows):
                self._cache[k] = row
        out = torch.stack([self._cache[k] for k in keys])
        for k in dict.fromkeys(keys):
            self._cache.move_to_end(k)
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return out
