"""Market-specific fine-tuning: LoRA on the frozen encoder plus a gated ID adapter.

Only the LoRA factors, the adapter MLP and the per-item gate logits train.
The pretrained encoder and the semantic item table stay bitwise frozen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .encoder import (
    ATTN_PROJ,
    EncoderConfig,
    EncoderParams,
    ObjectiveSpec,
    encode,
    load_tensors,
    save_tensors,
    xavier_uniform,
)
from .evaluation import MarketMetrics, ModelBundle, evaluate_market
from .training import MarketView, make_optimizer, run_epoch, torch_stream

logger = logging.getLogger(__name__)

GATE_INIT = -2.2


class FinetuneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 256
    optimizer: str = "adam"
    rank: int = 2
    lora_targets: tuple[str, ...] = ("W_Q", "W_V")
    use_id_adapter: bool = True
    adapter_hidden: int | None = None
    gate_init: float = GATE_INIT
    select_metric: str = "NDCG@10"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.rank < 0 or not (math.isfinite(self.lr) and self.lr >= 0) or self.batch_size < 1:
            raise FinetuneConfigError("epochs, rank, lr must be >= 0 (lr finite) and batch_size >= 1")
        bad = set(self.lora_targets) - set(ATTN_PROJ)
        if bad:
            raise FinetuneConfigError(f"unknown LoRA targets {sorted(bad)}")


@dataclass
class LoraState:
    rank: int
    A: dict[str, torch.Tensor]
    B: dict[str, torch.Tensor]

    @property
    def targets(self) -> list[str]:
        return list(self.A)

    def deltas(self) -> dict[str, torch.Tensor]:
        return {k: self.A[k] @ self.B[k] for k in self.A}

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for k in self.A:
            out[f"lora.{k}.A"] = self.A[k]
            out[f"lora.{k}.B"] = self.B[k]
        return out

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors().values())


def init_lora(params: EncoderParams, cfg: EncoderConfig, rank: int, targets, seed: int) -> LoraState:
    if rank < 1:
        raise FinetuneConfigError("LoRA rank must be >= 1")
    gen = torch_stream("lora", seed)
    A, B = {}, {}
    for b in range(cfg.num_blocks):
        for w in targets:
            name = f"blocks.{b}.attn.{w}"
            if name not in params.tensors:
                raise FinetuneConfigError(f"no tensor named {name!r} in the encoder")
            d_in, d_out = params.tensors[name].shape
            A[name] = xavier_uniform((d_in, rank), gen)
            B[name] = torch.zeros(rank, d_out)
    return LoraState(rank, A, B)


@dataclass
class IdAdapterState:
    """ẽ_i = e_i + sigmoid(b_i) * g(e_i), g = tanh MLP with zero-init output."""

    W1: torch.Tensor
    b1: torch.Tensor
    W2: torch.Tensor
    b2: torch.Tensor
    gate_logits: torch.Tensor

    def g(self, table: torch.Tensor) -> torch.Tensor:
        return torch.tanh(table @ self.W1 + self.b1) @ self.W2 + self.b2

    def gates(self) -> torch.Tensor:
        return torch.sigmoid(self.gate_logits)

    def enhance(self, table: torch.Tensor) -> torch.Tensor:
        return table + self.gates().unsqueeze(-1) * self.g(table)

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"id.W1": self.W1, "id.b1": self.b1, "id.W2": self.W2, "id.b2": self.b2, "id.gate_logits": self.gate_logits}


def init_id_adapter(num_items: int, dim: int, hidden: int | None, seed: int, gate_init: float = GATE_INIT) -> IdAdapterState:
    h = hidden or dim
    gen = torch_stream("id_adapter", seed)
    return IdAdapterState(
        W1=xavier_uniform((dim, h), gen),
        b1=torch.zeros(h),
        W2=torch.zeros(h, dim),
        b2=torch.zeros(dim),
        gate_logits=torch.full((num_items,), float(gate_init)),
    )


def enhance_item_embeddings(table: torch.Tensor, adapter: IdAdapterState) -> torch.Tensor:
    with torch.no_grad():
        return adapter.enhance(table)


@dataclass
class FinetuneAdapters:
    lora: LoraState | None = None
    id_adapter: IdAdapterState | None = None

    def lora_deltas(self):
        return self.lora.deltas() if self.lora is not None else None

    def enhance(self, table: torch.Tensor) -> torch.Tensor:
        return self.id_adapter.enhance(table) if self.id_adapter is not None else table

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        if self.lora is not None:
            out.update(self.lora.tensors())
        if self.id_adapter is not None:
            out.update(self.id_adapter.tensors())
        return out

    def clone(self) -> "FinetuneAdapters":
        lora = None
        if self.lora is not None:
            lora = LoraState(
                self.lora.rank,
                {k: v.detach().clone() for k, v in self.lora.A.items()},
                {k: v.detach().clone() for k, v in self.lora.B.items()},
            )
        ida = None
        if self.id_adapter is not None:
            ida = IdAdapterState(*(t.detach().clone() for t in (
                self.id_adapter.W1, self.id_adapter.b1, self.id_adapter.W2, self.id_adapter.b2, self.id_adapter.gate_logits
            )))
        return FinetuneAdapters(lora, ida)


def adapted_forward(frozen: EncoderParams, lora: LoraState | None, table, batch, cfg: EncoderConfig):
    for name in (lora.targets if lora is not None else []):
        if name not in frozen.tensors:
            raise FinetuneConfigError(f"no tensor named {name!r} in the encoder")
    with torch.no_grad():
        return encode(frozen, table, batch, cfg, lora=lora.deltas() if lora is not None else None)


def init_adapters(pretrained: EncoderParams, view: MarketView, enc_cfg: EncoderConfig, cfg: FinetuneConfig) -> FinetuneAdapters:
    lora = init_lora(pretrained, enc_cfg, cfg.rank, cfg.lora_targets, cfg.seed) if cfg.rank > 0 else None
    ida = (
        init_id_adapter(view.num_items, enc_cfg.dim, cfg.adapter_hidden, cfg.seed, cfg.gate_init)
        if cfg.use_id_adapter
        else None
    )
    return FinetuneAdapters(lora, ida)


@dataclass
class FinetuneResult:
    adapters: FinetuneAdapters
    valid: MarketMetrics
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def _metric(m: MarketMetrics, name: str) -> float:
    kind, n = name.split("@")
    v = (m.ndcg if kind == "NDCG" else m.hr)[int(n)]
    return float("-inf") if v is None else v


def run_local_finetune(pretrained: EncoderParams, view: MarketView, enc_cfg: EncoderConfig, cfg: FinetuneConfig) -> FinetuneResult:
    """CE fine-tuning of the adapters; keeps the epoch with the best validation metric."""
    cfg.validate()
    frozen = pretrained
    adapters = init_adapters(frozen, view, enc_cfg, cfg)
    n_eval = int(cfg.select_metric.split("@")[1])
    n_list = tuple(sorted({10, n_eval}))

    def validate_now():
        return evaluate_market(ModelBundle(frozen, enc_cfg, view.table, adapters), view.split, "valid", n_list)

    best = validate_now()
    best_adapters, best_epoch = adapters.clone(), 0
    history = [{"epoch": 0, "loss": None, cfg.select_metric: _metric(best, cfg.select_metric)}]
    trainable = adapters.tensors()
    if not trainable or cfg.epochs == 0:
        return FinetuneResult(best_adapters, best, 0, history)
    opt = make_optimizer(cfg.optimizer, list(trainable.values()), cfg.lr)
    objective = ObjectiveSpec("ce")
    for epoch in range(1, cfg.epochs + 1):
        loss = run_epoch(
            frozen, adapters, view, enc_cfg, objective, trainable, opt, cfg.batch_size,
            ("finetune", cfg.seed, view.market, epoch - 1),
        )
        met = validate_now()
        history.append({"epoch": epoch, "loss": loss, cfg.select_metric: _metric(met, cfg.select_metric)})
        if _metric(met, cfg.select_metric) > _metric(best, cfg.select_metric):
            best, best_adapters, best_epoch = met, adapters.clone(), epoch
    logger.info("market %s: best %s=%.4f at epoch %d", view.market, cfg.select_metric, _metric(best, cfg.select_metric), best_epoch)
    return FinetuneResult(best_adapters, best, best_epoch, history)


def save_adapters(adapters: FinetuneAdapters, out_dir, meta: dict | None = None) -> None:
    tensors = adapters.tensors()
    meta = dict(meta or {})
    meta["lora_rank"] = adapters.lora.rank if adapters.lora is not None else 0
    save_tensors(tensors, {k: "local" for k in tensors}, out_dir, meta)


def load_adapters(in_dir) -> FinetuneAdapters:
    tensors, _, meta = load_tensors(Path(in_dir))
    lora = None
    A = {k[len("lora."):-2]: v for k, v in tensors.items() if k.startswith("lora.") and k.endswith(".A")}
    if A:
        B = {k: tensors[f"lora.{k}.B"] for k in A}
        lora = LoraState(int(meta.get("lora_rank", next(iter(A.values())).shape[1])), A, B)
    ida = None
    if "id.W1" in tensors:
        ida = IdAdapterState(tensors["id.W1"], tensors["id.b1"], tensors["id.W2"], tensors["id.b2"], tensors["id.gate_logits"])
    return FinetuneAdapters(lora, ida)
