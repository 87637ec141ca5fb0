"""Mini-batch training loop shared by pretraining and fine-tuning."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import objectives
from .datamodel import ItemCatalog, MarketSplit, SplitDataset
from .encoder import (
    Adapters,
    EncoderConfig,
    EncoderParams,
    NumericalError,
    ObjectiveSpec,
    loss_and_gradients,
    make_batch,
)


def derive_seed(*keys) -> int:
    digest = hashlib.sha256("|".join(str(k) for k in keys).encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def torch_stream(*keys) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*keys))


@dataclass
class MarketView:
    """Everything one market may see: its own split and its embedding view."""

    market: str
    table: torch.Tensor
    split: MarketSplit

    @property
    def num_items(self) -> int:
        return self.table.shape[0]

    def training_sequences(self, max_len: int) -> tuple[list[list[int]], list[list[int]]]:
        """(inputs, next-item targets) from each user's training prefix."""
        inputs, targets = [], []
        for u in self.split.users:
            seq = list(u.train)[-(max_len + 1) :]
            if len(seq) < 2:
                continue
            inputs.append(seq[:-1])
            targets.append(seq[1:])
        return inputs, targets


def market_views(catalog: ItemCatalog, split: SplitDataset) -> dict[str, MarketView]:
    return {
        m: MarketView(m, torch.from_numpy(np.array(catalog.market_embeddings(m), dtype=np.float32)), split.markets[m])
        for m in catalog.markets
    }


def make_optimizer(kind: str, tensors: Sequence[torch.Tensor], lr: float):
    if kind == "adam":
        return torch.optim.Adam(tensors, lr=lr, betas=(0.9, 0.999), eps=1e-8, foreach=False)
    if kind == "sgd":
        return torch.optim.SGD(tensors, lr=lr, foreach=False)
    raise ValueError(f"unknown optimizer {kind!r}")


def run_epoch(
    params: EncoderParams,
    adapters: Adapters | None,
    view: MarketView,
    enc_cfg: EncoderConfig,
    objective: ObjectiveSpec,
    trainable: dict[str, torch.Tensor],
    optimizer,
    batch_size: int,
    stream_keys: tuple,
    soft_targets: objectives.SoftTargets | None = None,
) -> float:
    """One shuffled pass over the market's training sequences; returns mean loss."""
    inputs, targets = view.training_sequences(enc_cfg.max_len)
    if not inputs:
        return float("nan")
    gen = torch_stream(*stream_keys)
    perm = torch.randperm(len(inputs), generator=gen).tolist()
    losses = []
    for b, start in enumerate(range(0, len(perm), batch_size)):
        idx = perm[start : start + batch_size]
        batch = make_batch(
            [inputs[i] for i in idx],
            view.num_items,
            enc_cfg.max_len,
            targets=[targets[i] for i in idx],
            batch_id=(*stream_keys, b),
        )
        loss, grads = loss_and_gradients(
            params, adapters, view.table, batch, enc_cfg, objective, trainable, gen=gen, soft_targets=soft_targets
        )
        for name, t in trainable.items():
            t.grad = grads[name]
        optimizer.step()
        for t in trainable.values():
            t.grad = None
        if not all(bool(torch.isfinite(t).all()) for t in trainable.values()):
            raise NumericalError("non-finite parameters after update", batch.batch_id)
        losses.append(float(loss))
    return float(np.mean(losses))
