"""Causal self-attention behaviour encoder over frozen item embeddings.

The encoder is written functionally: parameters live in a flat, ordered dict
of named tensors (``EncoderParams``) and :func:`encode` takes that dict. This
keeps federated averaging, scope partitioning and LoRA deltas trivial.

Block layout (pre-norm)::

    x = sqrt(d) * E[items] + P[pos]
    x = x + Attn(LN1(x))         # causal, pad keys masked
    x = x + FFN(LN2(x))          # GELU
    out = LN_out(x)

Sequences are left-padded; positions are aligned to the right edge so the
last column always uses row ``max_len - 1`` of the positional table.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import objectives

IGNORE_INDEX = -100
AGGREGATED = "aggregated"
LOCAL = "local"
ATTN_PROJ = ("W_Q", "W_K", "W_V", "W_O")


class NumericalError(RuntimeError):
    def __init__(self, msg: str, batch_id=None):
        super().__init__(f"{msg} (batch {batch_id})" if batch_id is not None else msg)
        self.batch_id = batch_id


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    max_len: int = 50
    num_blocks: int = 2
    num_heads: int = 2
    ffn_dim: int | None = None
    dropout: float = 0.2
    aggregate_scope: str = "attention_only"

    def validate(self) -> None:
        if self.dim % self.num_heads:
            raise ValueError("dim must be divisible by num_heads")
        if self.max_len < 1 or self.num_blocks < 1:
            raise ValueError("max_len and num_blocks must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.aggregate_scope not in ("attention_only", "full"):
            raise ValueError(f"unknown aggregate_scope {self.aggregate_scope!r}")

    @property
    def hidden(self) -> int:
        return self.ffn_dim or self.dim


@dataclass
class EncoderParams:
    tensors: dict[str, torch.Tensor]
    scopes: dict[str, str]

    def clone(self) -> "EncoderParams":
        return EncoderParams({k: v.detach().clone() for k, v in self.tensors.items()}, dict(self.scopes))

    def names(self, scope: str | None = None) -> list[str]:
        return [k for k in self.tensors if scope is None or self.scopes[k] == scope]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def to(self, dtype: torch.dtype) -> "EncoderParams":
        return EncoderParams({k: v.detach().to(dtype).clone() for k, v in self.tensors.items()}, dict(self.scopes))

    def bitwise_equal(self, other: "EncoderParams") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def default_scope(name: str, mode: str) -> str:
    if mode == "full":
        return AGGREGATED
    return AGGREGATED if name.rsplit(".", 1)[-1] in ATTN_PROJ else LOCAL


def xavier_uniform(shape: tuple[int, int], gen: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


def init_params(cfg: EncoderConfig, seed: int) -> EncoderParams:
    cfg.validate()
    gen = torch.Generator().manual_seed(seed)
    d, h = cfg.dim, cfg.hidden
    t: dict[str, torch.Tensor] = {"pos_emb": xavier_uniform((cfg.max_len, d), gen)}
    for b in range(cfg.num_blocks):
        p = f"blocks.{b}."
        t[p + "ln1.weight"] = torch.ones(d)
        t[p + "ln1.bias"] = torch.zeros(d)
        for w in ATTN_PROJ:
            t[p + "attn." + w] = xavier_uniform((d, d), gen)
        t[p + "ln2.weight"] = torch.ones(d)
        t[p + "ln2.bias"] = torch.zeros(d)
        t[p + "ffn.W1"] = xavier_uniform((d, h), gen)
        t[p + "ffn.b1"] = torch.zeros(h)
        t[p + "ffn.W2"] = xavier_uniform((h, d), gen)
        t[p + "ffn.b2"] = torch.zeros(d)
    t["ln_out.weight"] = torch.ones(d)
    t["ln_out.bias"] = torch.zeros(d)
    return EncoderParams(t, {k: default_scope(k, cfg.aggregate_scope) for k in t})


def set_scope_mode(params: EncoderParams, mode: str) -> EncoderParams:
    return EncoderParams(dict(params.tensors), {k: default_scope(k, mode) for k in params.tensors})


def partition_params(params: EncoderParams) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    agg = {k: v for k, v in params.tensors.items() if params.scopes[k] == AGGREGATED}
    loc = {k: v for k, v in params.tensors.items() if params.scopes[k] != AGGREGATED}
    return agg, loc


def merge_params(template: EncoderParams, *parts: dict[str, torch.Tensor]) -> EncoderParams:
    merged: dict[str, torch.Tensor] = {}
    for part in parts:
        merged.update(part)
    if merged.keys() != template.tensors.keys():
        raise KeyError("partition parts do not cover the parameter set")
    return EncoderParams({k: merged[k] for k in template.tensors}, dict(template.scopes))


@dataclass
class SequenceBatch:
    """Left-padded ``items`` (B x L), valid ``lengths`` and next-item ``targets``."""

    items: torch.Tensor
    lengths: torch.Tensor
    targets: torch.Tensor | None = None
    batch_id: object = None

    @property
    def valid_mask(self) -> torch.Tensor:
        L = self.items.shape[1]
        return torch.arange(L).unsqueeze(0) >= (L - self.lengths).unsqueeze(1)


def make_batch(
    inputs: Sequence[Sequence[int]],
    pad_index: int,
    max_len: int,
    targets: Sequence[Sequence[int]] | None = None,
    batch_id=None,
) -> SequenceBatch:
    """Pack sequences, keeping the last ``max_len`` items of each."""
    inputs = [list(s)[-max_len:] for s in inputs]
    L = max(1, max(len(s) for s in inputs))
    items = torch.full((len(inputs), L), pad_index, dtype=torch.long)
    tg = torch.full((len(inputs), L), IGNORE_INDEX, dtype=torch.long) if targets is not None else None
    for r, s in enumerate(inputs):
        if s:
            items[r, L - len(s) :] = torch.tensor(s, dtype=torch.long)
        if tg is not None:
            t = list(targets[r])[-len(s) :] if s else []
            if len(t) != len(s):
                raise ValueError("targets must align with inputs")
            if t:
                tg[r, L - len(t) :] = torch.tensor(t, dtype=torch.long)
    lengths = torch.tensor([len(s) for s in inputs], dtype=torch.long)
    return SequenceBatch(items, lengths, tg, batch_id)


def padded_table(table: torch.Tensor) -> torch.Tensor:
    """Append the all-zero pad row at index ``len(table)``."""
    return torch.cat([table, table.new_zeros(1, table.shape[1])], dim=0)


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    if p == 0.0 or gen is None:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=torch.float32) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def encode(
    params: EncoderParams,
    table: torch.Tensor,
    batch: SequenceBatch,
    cfg: EncoderConfig,
    lora: dict[str, torch.Tensor] | None = None,
    gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Return B x L x d representations; rows at pad positions are zero.

    ``table`` is the market embedding view E^m (pad row appended here).
    ``lora`` maps tensor names to additive deltas. Dropout is active only when
    an RNG ``gen`` is supplied (training mode).
    """
    t = params.tensors
    n_items = table.shape[0]
    items = batch.items
    B, L = items.shape
    if L > cfg.max_len:
        raise ValueError(f"batch length {L} exceeds max_len {cfg.max_len}")
    valid = batch.valid_mask
    if items[valid].numel() and (items[valid].min() < 0 or items[valid].max() >= n_items):
        raise IndexError("item index out of range for the market embedding view")
    d = cfg.dim
    nh = cfg.num_heads
    dh = d // nh
    p = cfg.dropout if gen is not None else 0.0

    safe_items = torch.where(valid, items, torch.full_like(items, n_items))
    emb = padded_table(table)[safe_items] * math.sqrt(d)
    x = emb + t["pos_emb"][cfg.max_len - L :].unsqueeze(0)
    vmask = valid.unsqueeze(-1).to(x.dtype)
    x = _dropout(x * vmask, p, gen)

    causal = torch.ones(L, L, dtype=torch.bool).tril()
    allowed = causal.unsqueeze(0) & valid.unsqueeze(1)
    allowed = allowed | torch.eye(L, dtype=torch.bool).unsqueeze(0)
    allowed = allowed.unsqueeze(1)  # B x 1 x L x L

    def w(name: str) -> torch.Tensor:
        if lora is not None and name in lora:
            return t[name] + lora[name]
        return t[name]

    for b in range(cfg.num_blocks):
        pre = f"blocks.{b}."
        hn = F.layer_norm(x, (d,), t[pre + "ln1.weight"], t[pre + "ln1.bias"])
        q = (hn @ w(pre + "attn.W_Q")).view(B, L, nh, dh).transpose(1, 2)
        k = (hn @ w(pre + "attn.W_K")).view(B, L, nh, dh).transpose(1, 2)
        v = (hn @ w(pre + "attn.W_V")).view(B, L, nh, dh).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(~allowed, float("-inf")).softmax(dim=-1)
        att = _dropout(att, p, gen)
        a = (att @ v).transpose(1, 2).reshape(B, L, d) @ w(pre + "attn.W_O")
        x = x + _dropout(a, p, gen)
        hn = F.layer_norm(x, (d,), t[pre + "ln2.weight"], t[pre + "ln2.bias"])
        f = F.gelu(hn @ t[pre + "ffn.W1"] + t[pre + "ffn.b1"]) @ t[pre + "ffn.W2"] + t[pre + "ffn.b2"]
        x = (x + _dropout(f, p, gen)) * vmask
    out = F.layer_norm(x, (d,), t["ln_out.weight"], t["ln_out.bias"])
    return out * vmask


def user_representation(reprs: torch.Tensor) -> torch.Tensor:
    """h_u: output at the last (always valid, right-aligned) position."""
    return reprs[:, -1]


def score(h: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """r_u = h_u (E^m)^T."""
    return h @ table.T


class Adapters(Protocol):
    def lora_deltas(self) -> dict[str, torch.Tensor] | None: ...

    def enhance(self, table: torch.Tensor) -> torch.Tensor: ...

    def tensors(self) -> dict[str, torch.Tensor]: ...


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "s2ce"
    tau: float = 0.05

    def validate(self) -> None:
        if self.kind not in ("ce", "s2ce"):
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.kind == "s2ce" and not self.tau > 0:
            raise ValueError("tau must be positive")


def batch_loss(
    params: EncoderParams,
    table: torch.Tensor,
    batch: SequenceBatch,
    cfg: EncoderConfig,
    objective: ObjectiveSpec,
    adapters: Adapters | None = None,
    gen: torch.Generator | None = None,
    soft_targets: objectives.SoftTargets | None = None,
) -> torch.Tensor:
    """Mean per-position loss over all valid next-item targets."""
    if batch.targets is None:
        raise ValueError("batch has no targets")
    sel = batch.targets != IGNORE_INDEX
    if not bool(sel.any()):
        raise EmptyBatchError(f"batch {batch.batch_id} has no valid targets")
    item_table = adapters.enhance(table) if adapters is not None else table
    lora = adapters.lora_deltas() if adapters is not None else None
    reprs = encode(params, item_table, batch, cfg, lora=lora, gen=gen)
    logits = score(reprs[sel], item_table)
    tgt = batch.targets[sel]
    if objective.kind == "ce":
        return objectives.ce_loss(logits, tgt)
    # soft targets always come from the frozen semantic table
    if soft_targets is not None:
        q = soft_targets(tgt)
    else:
        q = objectives.semantic_targets(table, tgt, objective.tau)
    return objectives.s2ce_loss(logits, q.to(logits.dtype))


def loss_and_gradients(
    params: EncoderParams,
    adapters: Adapters | None,
    table: torch.Tensor,
    batch: SequenceBatch,
    cfg: EncoderConfig,
    objective: ObjectiveSpec,
    trainable: dict[str, torch.Tensor],
    gen: torch.Generator | None = None,
    soft_targets: objectives.SoftTargets | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Loss and gradients for exactly the tensors in ``trainable``.

    ``trainable`` must hold the very tensor objects referenced by ``params``
    or ``adapters``; everything else is treated as a constant.
    """
    leaves = list(trainable.values())
    with torch.enable_grad():
        for x in leaves:
            x.requires_grad_(True)
        try:
            try:
                loss = batch_loss(params, table, batch, cfg, objective, adapters, gen, soft_targets)
            except FloatingPointError as exc:
                raise NumericalError(str(exc), batch.batch_id) from exc
            if not torch.isfinite(loss):
                raise NumericalError("non-finite loss", batch.batch_id)
            grads = torch.autograd.grad(loss, leaves, allow_unused=True)
        finally:
            for x in leaves:
                x.requires_grad_(False)
    out = {k: (g if g is not None else torch.zeros_like(v)) for (k, v), g in zip(trainable.items(), grads)}
    return loss.detach(), out


def save_tensors(tensors: dict[str, torch.Tensor], scopes: dict[str, str], out_dir, meta: dict | None = None) -> None:
    """Checkpoint: ``manifest.json`` plus one raw little-endian float32 file per tensor."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, v in tensors.items():
        fname = k.replace("/", "_") + ".bin"
        arr = v.detach().to(torch.float32).contiguous().numpy().astype("<f4")
        (out / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": k, "shape": list(v.shape), "scope": scopes.get(k, LOCAL), "dtype": "float32", "file": fname})
    manifest = {"tensors": entries}
    if meta:
        manifest["meta"] = meta
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_tensors(in_dir) -> tuple[dict[str, torch.Tensor], dict[str, str], dict]:
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    tensors, scopes = {}, {}
    for e in manifest["tensors"]:
        raw = (src / e["file"]).read_bytes()
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        if len(raw) != 4 * n:
            raise ValueError(f"tensor {e['name']}: {len(raw)} bytes does not match shape {shape}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
        scopes[e["name"]] = e["scope"]
    return tensors, scopes, manifest.get("meta", {})


def save_params(params: EncoderParams, out_dir, meta: dict | None = None) -> None:
    save_tensors(params.tensors, params.scopes, out_dir, meta)


def load_params(in_dir, cfg: EncoderConfig | None = None) -> EncoderParams:
    tensors, scopes, _ = load_tensors(in_dir)
    params = EncoderParams(tensors, scopes)
    if cfg is not None:
        ref = init_params(cfg, 0)
        if ref.tensors.keys() != tensors.keys():
            raise ValueError("checkpoint tensor names do not match the encoder config")
        for k, v in ref.tensors.items():
            if v.shape != tensors[k].shape:
                raise ValueError(f"tensor {k}: shape {tuple(tensors[k].shape)} != expected {tuple(v.shape)}")
    return params


def iter_minibatches(n: int, batch_size: int, perm: Iterable[int]) -> list[list[int]]:
    perm = list(perm)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]
