"""Synthetic multi-market universe with shared behaviour and local item taste.

Clusters play the role of product categories. Every market walks the same
kind of cluster-level Markov chain (a blend of one shared transition matrix
and a market-local one) but picks items inside a cluster with its own Zipf
popularity order. Item embeddings sit around shared cluster prototypes, so
semantic similarity carries the behaviour-level signal and nothing else.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datamodel import InteractionLog, ItemCatalog, write_catalog, write_embeddings, write_interactions


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynConfig:
    num_markets: int = 4
    items_per_market: int = 200
    users_per_market: int = 300
    num_clusters: int = 20
    dim: int = 64
    seq_len_min: int = 5
    seq_len_max: int = 20
    shared_pattern_strength: float = 0.8
    noise_scale: float = 0.5
    seed: int = 0
    zipf_s: float = 1.2
    local_alpha: float = 1.0
    shared_alpha: float = 0.3

    def validate(self) -> None:
        for name in ("num_markets", "items_per_market", "users_per_market", "num_clusters", "dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.num_clusters > self.items_per_market:
            raise ConfigError("num_clusters cannot exceed items_per_market")
        if not 0.0 <= self.shared_pattern_strength <= 1.0:
            raise ConfigError("shared_pattern_strength must lie in [0, 1]")
        if not 1 <= self.seq_len_min <= self.seq_len_max:
            raise ConfigError("need 1 <= seq_len_min <= seq_len_max")
        if self.noise_scale < 0 or self.zipf_s < 0:
            raise ConfigError("noise_scale and zipf_s must be non-negative")
        if self.local_alpha <= 0 or self.shared_alpha <= 0:
            raise ConfigError("Dirichlet concentrations must be positive")

    def market_ids(self) -> list[str]:
        return [f"m{k}" for k in range(self.num_markets)]


def stream(seed: int, market: str, purpose: str) -> np.random.Generator:
    """Independent RNG stream keyed by (seed, market, purpose)."""
    digest = hashlib.sha256(f"{seed}|{market}|{purpose}".encode()).digest()
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest[:16], "little")))


@dataclass
class Universe:
    config: SynConfig
    catalog: ItemCatalog
    log: InteractionLog
    item_cluster: dict[str, int]
    transitions: dict[str, np.ndarray]
    shared_transition: np.ndarray

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "markets": list(self.catalog.markets),
            "item_cluster": self.item_cluster,
            "stats": self.log.stats(),
        }


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    return m / m.sum(axis=1, keepdims=True)


def market_transition(cfg: SynConfig, shared: np.ndarray, market: str) -> np.ndarray:
    C = cfg.num_clusters
    local = stream(cfg.seed, market, "local_transition").dirichlet(np.full(C, cfg.local_alpha), size=C)
    lam = cfg.shared_pattern_strength
    return _normalize_rows(lam * shared + (1.0 - lam) * local)


def generate_universe(cfg: SynConfig) -> Universe:
    cfg.validate()
    C, d = cfg.num_clusters, cfg.dim
    protos = stream(cfg.seed, "*", "prototypes").standard_normal((C, d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    shared = stream(cfg.seed, "*", "shared_transition").dirichlet(np.full(C, cfg.shared_alpha), size=C)

    market_items: dict[str, list[str]] = {}
    item_cluster: dict[str, int] = {}
    emb_rows = []
    transitions = {}
    sequences: dict[str, dict[str, tuple[tuple[str, int], ...]]] = {}

    for m in cfg.market_ids():
        n = cfg.items_per_market
        clusters = np.arange(n) % C
        noise = stream(cfg.seed, m, "item_noise").standard_normal((n, d)) * (cfg.noise_scale / np.sqrt(d))
        emb = protos[clusters] + noise
        items = [f"{m}_i{k}" for k in range(n)]
        market_items[m] = items
        item_cluster.update({it: int(c) for it, c in zip(items, clusters)})
        emb_rows.append(emb)

        # market-specific popularity order inside each cluster
        pop_rng = stream(cfg.seed, m, "popularity")
        members, probs = [], []
        for c in range(C):
            idx = np.flatnonzero(clusters == c)
            idx = idx[pop_rng.permutation(len(idx))]
            w = 1.0 / np.arange(1, len(idx) + 1) ** cfg.zipf_s
            members.append(idx)
            probs.append(w / w.sum())

        T = market_transition(cfg, shared, m)
        transitions[m] = T
        walk = stream(cfg.seed, m, "users")
        users = {}
        for j in range(cfg.users_per_market):
            length = int(walk.integers(cfg.seq_len_min, cfg.seq_len_max + 1))
            c = int(walk.integers(C))
            t0 = 1_600_000_000 + int(walk.integers(0, 10_000_000))
            seq = []
            for step in range(length):
                k = int(members[c][walk.choice(len(members[c]), p=probs[c])])
                seq.append((items[k], t0 + 3600 * step))
                c = int(walk.choice(C, p=T[c]))
            users[f"{m}_u{j}"] = tuple(seq)
        sequences[m] = users

    catalog = ItemCatalog.build(market_items, np.concatenate(emb_rows))
    return Universe(cfg, catalog, InteractionLog(sequences), item_cluster, transitions, shared)


def mean_transition_tv(transitions: dict[str, np.ndarray]) -> float:
    """Mean row-wise total variation over all market pairs."""
    mats = list(transitions.values())
    vals = []
    for a in range(len(mats)):
        for b in range(a + 1, len(mats)):
            vals.append(0.5 * np.abs(mats[a] - mats[b]).sum(axis=1).mean())
    return float(np.mean(vals)) if vals else 0.0


def write_universe(universe: Universe, out_dir, embedding_format: str = "binary") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    emb_name = "embeddings.bin" if embedding_format == "binary" else "embeddings.tsv"
    paths = {
        "interactions": out / "interactions.tsv",
        "catalog": out / "catalog.tsv",
        "embeddings": out / emb_name,
        "manifest": out / "universe.json",
    }
    write_interactions(universe.log, paths["interactions"])
    write_catalog(universe.catalog, paths["catalog"])
    write_embeddings(universe.catalog, paths["embeddings"], embedding_format)
    paths["manifest"].write_text(json.dumps(universe.manifest(), indent=2, sort_keys=True) + "\n")
    return paths
