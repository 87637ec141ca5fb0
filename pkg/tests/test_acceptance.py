"""The eleven acceptance criteria, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict that is printed in the
terminal summary. Criteria 7-11 share one three-seed run over the desk
configuration (several minutes on one CPU core).
"""

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from fecosr import objectives as O
from fecosr.analysis import ce_contrast_lower_bound, concentrated_pair, kl, verify_kl_contrast, verify_soft_target_bound
from fecosr.cli import main
from fecosr.config import load_config
from fecosr.datamodel import MarketSplit, UserSplit
from fecosr.encoder import AGGREGATED, EncoderConfig, ObjectiveSpec, batch_loss, init_params, loss_and_gradients, make_batch
from fecosr.evaluation import evaluate_market, ndcg_at_n
from fecosr.fedruntime import FedConfig, aggregate, run_federated_pretraining, train_standalone
from fecosr.pipeline import Dataset, directional_summary
from fecosr.syngen import generate_universe

from conftest import TINY_ENC

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
SEEDS = (0, 1, 2)


def verdict(log, k: int, ok: bool, detail: str) -> None:
    log[k] = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, log[k]


# -- exact / property criteria -----------------------------------------------


def test_c01_gradient_fidelity(acceptance_log, toy):
    t0 = time.perf_counter()
    cfg, params, table = toy
    batch = make_batch([[0, 1, 2, 1], [2, 0]], pad_index=3, max_len=5, targets=[[1, 2, 1, 0], [0, 1]])
    worst = 0.0
    h = 1e-4
    for kind in ("ce", "s2ce"):
        obj = ObjectiveSpec(kind, tau=0.5)
        _, grads = loss_and_gradients(params, None, table, batch, cfg, obj, dict(params.tensors))
        for name, t in params.tensors.items():
            flat, g = t.view(-1), grads[name].reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(batch_loss(params, table, batch, cfg, obj))
                flat[i] = orig - h
                down = float(batch_loss(params, table, batch, cfg, obj))
                flat[i] = orig
                num, ana = (up - down) / (2 * h), float(g[i])
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    dt = time.perf_counter() - t0
    verdict(acceptance_log, 1, worst < 1e-3 and dt < 10, f"max rel err {worst:.2e} (< 1e-3), {dt:.1f}s (< 10s)")


def test_c02_loss_identities(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_id = worst_tv = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 50))
        s = torch.tensor(rng.normal(scale=5, size=n))
        t = int(rng.integers(n))
        onehot = torch.zeros(n, dtype=torch.float64)
        onehot[t] = 1
        worst_id = max(worst_id, abs(float(O.s2ce_loss(s, onehot) - O.ce_loss(s, t))))
        table = torch.tensor(rng.standard_normal((n, 8)))
        table = table / table.norm(dim=1, keepdim=True)
        worst_tv = max(worst_tv, 0.5 * float((O.semantic_targets(table, t, 1e-4) - onehot).abs().sum()))
    dt = time.perf_counter() - t0
    ok = worst_id <= 1e-12 and worst_tv <= 1e-6 and dt < 5
    verdict(acceptance_log, 2, ok, f"one-hot gap {worst_id:.1e} (<= 1e-12), TV {worst_tv:.1e} (<= 1e-6), {dt:.1f}s (< 5s)")


def test_c03_bound_checks(acceptance_log):
    t0 = time.perf_counter()
    soft = verify_soft_target_bound(trials=1000)
    contrast = verify_kl_contrast(trials=1000)
    p1, p2 = concentrated_pair(np.random.default_rng(0), 100, 0.01, 0, 1)
    example = kl(p1, p2)
    dt = time.perf_counter() - t0
    ok = (
        soft.count() == 1000 and soft.violations == 0
        and contrast.passed("ce_lower") == 1000 and contrast.passed("s2ce_upper") == 1000
        and example >= 4.5493 >= ce_contrast_lower_bound(0.01) and dt < 30
    )
    verdict(
        acceptance_log, 3, ok,
        f"soft target {soft.passed()}/1000, lower {contrast.passed('ce_lower')}/1000, "
        f"upper {contrast.passed('s2ce_upper')}/1000, eps=0.01 KL {example:.3f} (>= 4.5493), {dt:.1f}s (< 30s)",
    )


def test_c04_federated_algebra(acceptance_log, tiny_data):
    t0 = time.perf_counter()
    p = init_params(EncoderConfig(dim=8, num_heads=2, num_blocks=2, max_len=6), 0)
    gen = torch.Generator().manual_seed(1)
    p.tensors = {k: v + torch.randn(v.shape, generator=gen) for k, v in p.tensors.items()}
    ident = 0.0
    for n in (1, 2, 3, 5, 7):
        out = aggregate([p.clone() for _ in range(n)], [1.0 / n] * n, p)
        ident = max(ident, max(float((out[k] - p[k]).abs().max()) for k in p.tensors))

    enc = dataclasses.replace(TINY_ENC, aggregate_scope="full")
    init = init_params(enc, 5)
    views = {"m0": tiny_data.views["m0"]}
    cfg = FedConfig(rounds=3, local_epochs=2, lr=0.01, batch_size=16, aggregate_scope="full", seed=4)
    fed = run_federated_pretraining(views, init, enc, cfg)
    solo = fed.global_params.bitwise_equal(train_standalone(init, views["m0"], enc, cfg, epochs=6))

    zeros = p.clone()
    zeros.tensors = {k: torch.zeros_like(v) for k, v in p.tensors.items()}
    mixed = aggregate([zeros, p.clone()], [0.5, 0.5], p)
    untouched = all(torch.equal(mixed[k], p[k]) for k in p.tensors if p.scopes[k] != AGGREGATED)
    dt = time.perf_counter() - t0
    ok = ident <= 1e-12 and solo and untouched and dt < 120
    verdict(acceptance_log, 4, ok, f"identity err {ident:.1e} (<= 1e-12), single-market bitwise {solo}, out-of-scope bitwise {untouched}, {dt:.1f}s")


class _Fixed:
    def __init__(self, rows):
        self.rows = torch.tensor(rows, dtype=torch.float64)

    def scores(self, contexts):
        return self.rows[: len(contexts)]


def test_c05_evaluation_oracle(acceptance_log):
    split = MarketSplit("m", 6, (
        UserSplit("a", (0, 1), 2, 3, frozenset({0, 1, 2, 3})),
        UserSplit("b", (4,), 0, 5, frozenset({4, 0, 5})),
        UserSplit("c", (5, 5), 5, 1, frozenset({5, 1})),
    ))
    rows = [[9.0, 8.0, 7.0, 1.0, 2.0, 1.0], [3.0, 0.0, 0.0, 3.0, 9.0, 3.0], [0.0, 2.0, 2.0, 2.0, 5.0, 7.0]]
    ok = True
    for mode in ("valid", "test"):
        got = evaluate_market(_Fixed(rows), split, mode, (1, 3, 10))
        ranks = []
        for u, r in zip(split.users, rows):
            ctx, tgt = (u.valid_context, u.valid_target) if mode == "valid" else (u.test_context, u.test_target)
            cands = [i for i in range(6) if i == tgt or i not in set(ctx)]
            ranks.append(sorted(cands, key=lambda i: (-r[i], i)).index(tgt) + 1)
        ok &= got.ranks == ranks
        for n in (1, 3, 10):
            ok &= got.hr[n] == sum(k <= n for k in ranks) / 3
            ok &= abs(got.ndcg[n] - sum(1 / math.log2(k + 1) for k in ranks if k <= n) / 3) < 1e-15
    spot = ndcg_at_n(4, 10)
    ok &= abs(spot - 0.430677) < 1e-6 and abs(spot - 1 / math.log2(5)) < 1e-9
    verdict(acceptance_log, 5, bool(ok), f"brute-force ranks/HR/NDCG exact, rank-4 NDCG@10 {spot:.6f}")


# -- determinism -------------------------------------------------------------


def test_c06_pipeline_determinism(acceptance_log, tmp_path):
    raw = yaml.safe_load(DESK.read_text())
    raw["pretrain"]["rounds"] = 3
    cfg = tmp_path / "desk_r3.yaml"
    cfg.write_text(yaml.safe_dump(raw))
    times, outs = [], []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        code = main(["run", "--config", str(cfg), "--out", str(tmp_path / name)])
        times.append(time.perf_counter() - t0)
        assert code == 0
        outs.append(tmp_path / name)
    same = all(
        (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()
        for rel in ("evaluate/metrics.json", "analyze/heterogeneity.csv")
    )
    ok = same and max(times) < 600
    verdict(acceptance_log, 6, ok, f"byte-identical metrics.json and heterogeneity.csv: {same}, runs {times[0]:.0f}s/{times[1]:.0f}s (< 600s)")


# -- directional reproduction (3 seeds, desk scale) --------------------------


@pytest.fixture(scope="module")
def directional():
    base = load_config(DESK)
    out = []
    for seed in SEEDS:
        cfg = dataclasses.replace(base, seed=seed).resolved()
        data = Dataset.from_universe(generate_universe(cfg.data.synthetic))
        out.append(directional_summary(data, cfg.experiment()))
    return out


def mean(xs) -> float:
    return float(np.mean(list(xs)))


def test_c07_heterogeneity_direction(acceptance_log, directional):
    ce, s2 = mean(s.js_ce for s in directional), mean(s.js_s2ce for s in directional)
    verdict(acceptance_log, 7, s2 < ce, f"mean off-diagonal JS s2ce {s2:.4f} < ce {ce:.4f}")


def test_c08_s2ce_beats_ce_pretraining(acceptance_log, directional):
    full, ce = mean(s.ndcg["full"] for s in directional), mean(s.ndcg["wo_s2ce"] for s in directional)
    verdict(acceptance_log, 8, full > ce, f"test NDCG@10 full {full:.4f} > w/o S2CE {ce:.4f}")


def test_c09_federation_helps(acceptance_log, directional):
    full, solo = mean(s.ndcg["full"] for s in directional), mean(s.ndcg["wo_fed"] for s in directional)
    verdict(acceptance_log, 9, full >= solo, f"test NDCG@10 full {full:.4f} >= w/o Fed {solo:.4f}")


def test_c10_no_market_sacrificed(acceptance_log, directional):
    markets = list(directional[0].hr_by_market["full"])
    full = {m: mean(s.hr_by_market["full"][m] for s in directional) for m in markets}
    local = {m: mean(s.hr_by_market["local_ce"][m] for s in directional) for m in markets}
    ok = all(full[m] >= local[m] for m in markets)
    detail = ", ".join(f"{m} {full[m]:.3f}>={local[m]:.3f}" for m in markets)
    verdict(acceptance_log, 10, ok, f"test HR@10 full vs local CE per market: {detail}")


def test_c11_similarity_direction(acceptance_log, directional):
    s2, ce = mean(s.sim_mean["s2ce"] for s in directional), mean(s.sim_mean["ce"] for s in directional)
    std = min(s.sim_std_s2ce for s in directional)
    ok = s2 > ce and std > 0.01
    verdict(acceptance_log, 11, ok, f"mean similarity s2ce {s2:.4f} > ce {ce:.4f}, min s2ce std {std:.4f} (> 0.01)")
