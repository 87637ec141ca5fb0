"""Diagnostics: cross-market JS heterogeneity, inter-user similarity KDE,
item-embedding projection, and numeric checks of the KL/soft-target bounds."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import gaussian_kde

from .datamodel import MarketSplit
from .encoder import EncoderConfig, EncoderParams
from .evaluation import ModelBundle
from .objectives import semantic_targets

LN2 = math.log(2.0)
BOUND_SLACK = 1e-9


class AnalysisError(ValueError):
    pass


def _as_dist(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64)


def kl(p, q) -> float:
    p, q = _as_dist(p), _as_dist(q)
    nz = p > 0
    with np.errstate(divide="ignore"):
        return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def js_divergence(p, q) -> float:
    p, q = _as_dist(p), _as_dist(q)
    if p.shape != q.shape:
        raise AnalysisError(f"support mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    val = 0.5 * kl(p, m) + 0.5 * kl(q, m)
    return min(max(val, 0.0), LN2)


def user_contexts(split: MarketSplit) -> list[tuple[int, ...]]:
    """Each user's history up to (not including) the test item."""
    return [u.test_context for u in split.users]


def population_prediction_distribution(params: EncoderParams, cfg: EncoderConfig, table: torch.Tensor, split: MarketSplit) -> np.ndarray:
    """Mean over users of softmax(h_u E^T) on the data-owner's catalog."""
    ctx = user_contexts(split)
    if not ctx:
        raise AnalysisError(f"market {split.market} has no users")
    scores = ModelBundle(params, cfg, table).scores(ctx).to(torch.float64)
    return scores.softmax(dim=-1).mean(dim=0).numpy()


@dataclass
class HeterogeneityMatrix:
    markets: list[str]
    values: np.ndarray

    def mean_off_diagonal(self) -> float:
        n = len(self.markets)
        if n < 2:
            return 0.0
        mask = ~np.eye(n, dtype=bool)
        return float(self.values[mask].mean())

    def to_csv(self, path, header: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["data\\encoder", *self.markets])
            for m, row in zip(self.markets, self.values):
                w.writerow([m, *(f"{v:.10f}" for v in row)])


def matrix_from_distributions(dists: dict[str, dict[str, np.ndarray]]) -> HeterogeneityMatrix:
    """``dists[m][m2]`` is P^{m2 -> m}; entry (m, m2) = JS(P^{m->m}, P^{m2->m})."""
    markets = list(dists)
    vals = np.zeros((len(markets), len(markets)))
    for i, m in enumerate(markets):
        for j, m2 in enumerate(markets):
            vals[i, j] = 0.0 if m == m2 else js_divergence(dists[m][m], dists[m][m2])
    return HeterogeneityMatrix(markets, vals)


def heterogeneity_matrix(encoders: dict[str, EncoderParams], cfg: EncoderConfig, tables: dict[str, torch.Tensor], splits: dict[str, MarketSplit]) -> HeterogeneityMatrix:
    """Row m: market m's data and embeddings; column m2: market m2's encoder."""
    dists = {
        m: {m2: population_prediction_distribution(encoders[m2], cfg, tables[m], splits[m]) for m2 in encoders}
        for m in encoders
    }
    return matrix_from_distributions(dists)


def difference_matrix(ce: HeterogeneityMatrix, s2ce: HeterogeneityMatrix) -> HeterogeneityMatrix:
    if ce.markets != s2ce.markets:
        raise AnalysisError("matrices cover different markets")
    return HeterogeneityMatrix(ce.markets, ce.values - s2ce.values)


def pair_from_index(k: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Decode a linear index over the strict upper triangle of an n x n grid."""
    k = np.asarray(k, dtype=np.int64)
    # row i holds n-1-i pairs; invert the cumulative count
    i = (n - 2 - np.floor(np.sqrt(-8 * k + 4 * n * (n - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
    start = i * (2 * n - i - 1) // 2
    j = k - start + i + 1
    return i, j


def user_similarity_samples(reprs, max_pairs: int = 100_000, seed: int = 0) -> np.ndarray:
    """sim(u, v) = 1 / (1 + ||h_u - h_v||) over pairs drawn without replacement."""
    h = np.asarray(reprs, dtype=np.float64)
    n = h.shape[0]
    if n < 2:
        raise AnalysisError("need at least two users")
    total = n * (n - 1) // 2
    if total <= max_pairs:
        idx = np.arange(total)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(total, size=max_pairs, replace=False))
    i, j = pair_from_index(idx, n)
    dist = np.linalg.norm(h[i] - h[j], axis=1)
    return 1.0 / (1.0 + dist)


def kde(samples, bandwidth: float | None = None, grid_points: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE on a uniform grid over [0, 1]; Scott's rule by default."""
    s = np.asarray(samples, dtype=np.float64)
    grid = np.linspace(0.0, 1.0, grid_points)
    std = s.std(ddof=1) if len(s) > 1 else 0.0
    if std == 0.0 or not np.isfinite(std):
        h = bandwidth or 1e-3
        z = (grid[:, None] - s[None, :]) / h
        return grid, np.exp(-0.5 * z**2).mean(axis=1) / (h * math.sqrt(2 * math.pi))
    bw = None if bandwidth is None else bandwidth / std
    return grid, gaussian_kde(s, bw_method=bw)(grid)


def user_representations(params: EncoderParams, cfg: EncoderConfig, table: torch.Tensor, split: MarketSplit, adapters=None) -> np.ndarray:
    return ModelBundle(params, cfg, table, adapters).user_reprs(user_contexts(split)).numpy()


@dataclass
class BoundTrial:
    kind: str
    n_items: int
    tau: float | None
    sigma: float | None
    eps: float | None
    measured: float
    bound: float
    direction: str
    passed: bool


@dataclass
class BoundCheckReport:
    trials: list[BoundTrial] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(not t.passed for t in self.trials)

    def passed(self, kind: str | None = None) -> int:
        return sum(t.passed for t in self.trials if kind is None or t.kind == kind)

    def count(self, kind: str | None = None) -> int:
        return sum(1 for t in self.trials if kind is None or t.kind == kind)

    def extend(self, other: "BoundCheckReport") -> "BoundCheckReport":
        return BoundCheckReport(self.trials + other.trials)

    def to_json(self, path, meta: dict | None = None) -> None:
        kinds = sorted({t.kind for t in self.trials})
        payload = {
            "meta": meta or {},
            "summary": {k: {"trials": self.count(k), "passed": self.passed(k)} for k in kinds},
            "trials": [asdict(t) for t in self.trials],
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _check(measured: float, bound: float, direction: str) -> bool:
    if direction == "lower":
        return measured >= bound - BOUND_SLACK
    return measured <= bound + BOUND_SLACK


def random_unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def soft_target_bound(sigma: float, tau: float, n_items: int) -> float:
    return math.exp((sigma - 1.0) / tau) / n_items


def verify_soft_target_bound(trials: int = 1000, n_range=(3, 200), tau_range=(0.01, 1.0), seed: int = 0, dim: int = 16) -> BoundCheckReport:
    """q(a|b) >= exp((sigma - 1)/tau) / |I| for random unit embeddings."""
    rng = np.random.default_rng(seed)
    report = BoundCheckReport()
    for _ in range(trials):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        tau = float(rng.uniform(*tau_range))
        table = torch.from_numpy(random_unit(rng, n, dim))
        a, b = (int(x) for x in rng.integers(0, n, size=2))
        q = semantic_targets(table, b, tau)
        sigma = float(table[a] @ table[b])
        bound = soft_target_bound(sigma, tau, n)
        measured = float(q[a])
        report.trials.append(BoundTrial("soft_target", n, tau, sigma, None, measured, bound, "lower", _check(measured, bound, "lower")))
    return report


def ce_contrast_lower_bound(eps: float) -> float:
    if not 0 < eps <= 0.5:
        raise AnalysisError("eps must lie in (0, 1/2]")
    return (1 - eps) * math.log((1 - eps) / eps)


def s2ce_contrast_upper_bound(sigma: float, tau: float, n_items: int, delta: float) -> float:
    return math.log(n_items) + (1 - sigma) / tau + 10 * delta * math.log(n_items)


def concentrated_pair(rng: np.random.Generator, n: int, eps: float, a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
    """p1 has mass 1-eps on a (rest off {a,b}); p2 has 1-eps on b (rest off b)."""
    p1 = np.zeros(n)
    p1[a] = 1 - eps
    others = np.array([j for j in range(n) if j not in (a, b)])
    p1[others] = eps * rng.dirichlet(np.ones(len(others)))
    p2 = np.zeros(n)
    p2[b] = 1 - eps
    rest = np.array([j for j in range(n) if j != b])
    p2[rest] = eps * rng.dirichlet(np.ones(len(rest)))
    return p1, p2


def embeddings_with_similarity(rng: np.random.Generator, n: int, dim: int, a: int, b: int, sigma: float) -> np.ndarray:
    table = random_unit(rng, n, dim)
    eb = table[b]
    u = rng.standard_normal(dim)
    u -= (u @ eb) * eb
    u /= np.linalg.norm(u)
    table[a] = sigma * eb + math.sqrt(max(0.0, 1 - sigma**2)) * u
    table[a] /= np.linalg.norm(table[a])
    return table


def verify_kl_contrast(
    trials: int = 1000,
    eps_range=(1e-4, 0.5),
    sigma_range=(-1.0, 1.0),
    tau: float = 0.05,
    n_items: int = 100,
    seed: int = 0,
    delta: float = 1e-4,
    dim: int = 16,
) -> BoundCheckReport:
    """Lower bound on KL between CE-style concentrated predictions, and the
    S²CE-style upper bound log|I| + (1 - sigma)/tau (+ declared slack)."""
    rng = np.random.default_rng(seed)
    report = BoundCheckReport()
    for _ in range(trials):
        n = int(n_items)
        a, b = (int(x) for x in rng.choice(n, size=2, replace=False))
        eps = float(rng.uniform(*eps_range))
        p1, p2 = concentrated_pair(rng, n, eps, a, b)
        measured = kl(p1, p2)
        bound = ce_contrast_lower_bound(eps)
        report.trials.append(BoundTrial("ce_lower", n, None, None, eps, measured, bound, "lower", _check(measured, bound, "lower")))

        sigma = float(rng.uniform(*sigma_range))
        report.trials.append(s2ce_trial(rng, n, dim, a, b, sigma, tau, delta))
    return report


def s2ce_trial(rng, n: int, dim: int, a: int, b: int, sigma: float, tau: float, delta: float) -> BoundTrial:
    table = torch.from_numpy(embeddings_with_similarity(rng, n, dim, a, b, sigma))
    p2 = semantic_targets(table, b, tau).numpy()
    p1 = np.full(n, delta / (n - 1))
    p1[a] = 1 - delta
    measured = kl(p1, p2)
    s = float(table[a] @ table[b])
    bound = s2ce_contrast_upper_bound(s, tau, n, delta)
    return BoundTrial("s2ce_upper", n, tau, s, delta, measured, bound, "upper", _check(measured, bound, "upper"))


def pca_project(before: np.ndarray, after: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project both tables onto the top-2 principal axes of their union.

    Sign convention: the first nonzero loading of each axis is positive.
    """
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    union = np.concatenate([before, after])
    if union.shape[0] < 2:
        raise AnalysisError("need at least two items")
    mean = union.mean(axis=0)
    cov = np.cov(union - mean, rowvar=False, bias=True)
    cov = np.atleast_2d(cov)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    axes = vecs[:, order]
    for k in range(axes.shape[1]):
        col = axes[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            axes[:, k] = -col
    if axes.shape[1] < 2:
        axes = np.concatenate([axes, np.zeros((axes.shape[0], 2 - axes.shape[1]))], axis=1)
    return (before - mean) @ axes, (after - mean) @ axes


def pca_rows(item_ids: Sequence[str], before_xy: np.ndarray, after_xy: np.ndarray) -> list[tuple[str, str, float, float]]:
    return [
        (it, stage, float(x), float(y))
        for stage, xy in (("before", before_xy), ("after", after_xy))
        for it, (x, y) in zip(item_ids, xy)
    ]


def write_pca_csv(path, rows: Sequence[tuple[str, str, float, float]], header: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "stage", "x", "y"])
        for it, stage, x, y in rows:
            w.writerow([it, stage, f"{x:.10f}", f"{y:.10f}"])


def write_kde_csv(path, curves: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]], header: str | None = None) -> None:
    """Long format: one row per (market, model, grid point)."""
    with Path(path).open("w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["market", "model", "grid", "density"])
        for (market, model), (grid, dens) in curves.items():
            for g, v in zip(grid, dens):
                w.writerow([market, model, f"{g:.6f}", f"{v:.10f}"])
