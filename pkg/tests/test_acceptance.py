"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``. Criteria 6, 7, 9 and 10
train desk-scale models and are marked ``slow``.
"""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from mtdqn.agent import ChainMDP, ReplayBuffer, Transition, q_values, select_action, train_step
from mtdqn.fusion import FusionConfig, gates_batch, init_fusion_params, scaled_attention
from mtdqn.harness.config import ExperimentConfig
from mtdqn.harness.experiments import run_one
from mtdqn.harness.gradsuite import gradcheck
from mtdqn.metrics import ConfusionCounts, hit_rate_at_k, mae, mse, ndcg_at_k, precision_recall_f1
from mtdqn.numerics import CosineSchedule, Tensor
from mtdqn.temporal_graph import (
    TgnnConfig,
    init_tgnn_params,
    normalized_propagation,
    sequence_embedding_batch,
    tgcn_layer,
)
from test_agent import make_agent, q_star_by_value_iteration
from test_metrics import oracle_f1, oracle_hit, oracle_mae, oracle_mse, oracle_ndcg
from test_temporal_graph import dense_oracle_layer

SEEDS = range(10)
REQUIRED_WINS = 8


@pytest.fixture
def gate(capsys):
    def report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return report


# --- 1: gradient suite ------------------------------------------------------------

def test_c01_gradient_suite(gate):
    start = time.perf_counter()
    report = gradcheck(points=10)
    elapsed = time.perf_counter() - start
    worst = max(report.cases, key=lambda c: c.worst)
    ok = report.passed and elapsed < 120 and all(c.points >= 10 for c in report.cases)
    gate(1, ok, f"{len(report.cases)} cases x 10 points, worst {worst.name} {worst.worst:.2e} "
                f"(< 1e-5), {elapsed:.1f}s (< 120s)")
    assert ok, report.lines()


# --- 2: normalization -----------------------------------------------------------------

def test_c02_softmax_normalization(gate):
    rng = np.random.default_rng(2)
    n = 10_000
    q, k, v = (Tensor(rng.normal(size=(n, 3, 4)) * 3) for _ in range(3))
    _, att = scaled_attention(q, k, v)
    att_err = float(np.max(np.abs(att.data.sum(axis=-1) - 1.0)))

    tparams = init_tgnn_params(TgnnConfig(widths=(5,), d_g=5, n_windows=6), rng)
    alpha, _ = sequence_embedding_batch(Tensor(rng.normal(size=(n, 6, 5)) * 5), tparams)
    temp_err = float(np.max(np.abs(alpha.data.sum(axis=-1) - 1.0)))

    cfg = FusionConfig(d_v=4, d_t=4, d_a=4, d_model=8, n_heads=2, n_layers=0)
    fparams = init_fusion_params(cfg, rng)
    for name in ("gate.v.W", "gate.t.W", "gate.a.W"):
        fparams.tensors[name] = Tensor(rng.normal(size=fparams[name].shape) * 3)
    gates = gates_batch(Tensor(rng.normal(size=(n, 3, 8)) * 3), fparams)
    gate_err = float(np.max(np.abs(gates.data.sum(axis=1) - 1.0)))

    nonneg = min(att.data.min(), alpha.data.min(), gates.data.min()) >= 0
    worst = max(att_err, temp_err, gate_err)
    ok = worst <= 1e-9 and nonneg
    gate(2, ok, f"1e4 inputs each: attention {att_err:.1e}, temporal {temp_err:.1e}, gates {gate_err:.1e} (<= 1e-9)")
    assert ok


# --- 3: graph oracle ---------------------------------------------------------------------

def test_c03_tgcn_dense_oracle(gate):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        adj = np.where(rng.random((n, n)) < 0.35, rng.uniform(0.1, 2.0, (n, n)), 0.0)
        d_in, d_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        cfg = TgnnConfig(widths=(d_out,), d_g=d_in, reverse_edges=False, self_loops=False)
        params = init_tgnn_params(cfg, rng)
        h = rng.normal(size=(n, d_in))
        got = tgcn_layer(normalized_propagation(adj), Tensor(h), params, 0).data
        ref = dense_oracle_layer(adj, h, params["gcn0.W"].data, params["gcn0.b"].data)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    ok = worst < 1e-10
    gate(3, ok, f"1000 graphs of <= 8 nodes, max |diff| {worst:.1e} (< 1e-10)")
    assert ok


# --- 4: RL oracle ---------------------------------------------------------------------------

def test_c04_chain_mdp(gate):
    start = time.perf_counter()
    q_star = q_star_by_value_iteration(0.9)
    rng = np.random.default_rng(0)
    env = ChainMDP()
    agent = make_agent(seed=0, hidden=(16, 16), sync_every=100, batch_size=32)
    agent.learner.schedule = CosineSchedule(1e-3, 1e-5, 20_000)
    buf = ReplayBuffer(1000)
    steps = 0
    while steps < 20_000:
        s, done = 0, False
        while not done and steps < 20_000:
            a = select_action(q_values(env.encode(s), agent.params), 1.0 if steps < 2000 else 0.3, rng)
            s2, r, done = env.step(s, a)
            buf.push(Transition(env.encode(s), a, r, env.encode(s2), done))
            s = s2
            if train_step(agent, buf, rng) is not None:
                steps += 1
    elapsed = time.perf_counter() - start
    err = max(float(np.max(np.abs(q_values(env.encode(s), agent.params).data - q_star[s]))) for s in range(2))
    ok = err <= 0.05 and elapsed < 60 and abs(q_star[1, 1] - 1) < 1e-12 and abs(q_star[0, 1] - 0.9) < 1e-12
    gate(4, ok, f"{steps} steps, max |Q - Q*| {err:.4f} (<= 0.05), {elapsed:.1f}s (< 60s)")
    assert ok


# --- 5: metric oracles ------------------------------------------------------------------------

def test_c05_metric_oracles(gate):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        pred, actual = rng.random(n) < rng.random(), rng.random(n) < rng.random()
        worst = max(worst, abs(precision_recall_f1(ConfusionCounts.from_predictions(pred, actual)).f1
                               - oracle_f1(pred, actual)))
        m = int(rng.integers(1, 7))
        rels = rng.integers(0, 4, size=m).astype(float).tolist()
        k = int(rng.integers(1, m + 2))
        worst = max(worst, abs(ndcg_at_k(rels, k) - oracle_ndcg(rels, k)))
        y, yh = rng.normal(size=n).tolist(), rng.normal(size=n).tolist()
        worst = max(worst, abs(mse(y, yh) - oracle_mse(y, yh)), abs(mae(y, yh) - oracle_mae(y, yh)))
        n_lists = int(rng.integers(1, 50))
        lists = [rng.permutation(20)[:5].tolist() for _ in range(n_lists)]
        pos = [set(rng.choice(20, size=int(rng.integers(0, 4)), replace=False).tolist()) for _ in range(n_lists)]
        kk = int(rng.integers(1, 6))
        worst = max(worst, abs(hit_rate_at_k(lists, pos, kk).rate - oracle_hit(lists, pos, kk)))
    f1 = precision_recall_f1(ConfusionCounts(tp=2, fp=1, fn=1)).f1
    ndcg = ndcg_at_k([0, 3], 2)
    ok = worst <= 1e-12 and abs(f1 - 2 / 3) <= 1e-12 and abs(ndcg - 0.6309) < 5e-5
    gate(5, ok, f"1000 instances x 5 metrics, max |diff| {worst:.1e} (<= 1e-12); F1 {f1:.6f}, NDCG@2 {ndcg:.4f}")
    assert ok


# --- 6, 7: ablation and baselines over 10 seeds -----------------------------------------------------

@pytest.fixture(scope="module")
def grid():
    start = time.perf_counter()
    rows = {}
    for seed in SEEDS:
        for variant in ("MT-DQN", "-Transformer", "-TGNN", "-DQN", "Concat-Modal", "Vanilla-DQN"):
            cfg = ExperimentConfig().with_variant(variant).with_seed(seed)
            rows[variant, seed] = run_one(cfg).result.metrics
    return rows, time.perf_counter() - start


def _wins(rows, other: str, field: str) -> int:
    return sum(getattr(rows["MT-DQN", s], field) > getattr(rows[other, s], field) for s in SEEDS)


def _mean(rows, variant: str, field: str) -> float:
    return float(np.mean([getattr(rows[variant, s], field) for s in SEEDS]))


@pytest.mark.slow
def test_c06_ablation_direction(gate, grid):
    rows, elapsed = grid
    wins = {v: _wins(rows, v, "mean_return") for v in ("-Transformer", "-TGNN", "-DQN")}
    ok = all(w >= REQUIRED_WINS for w in wins.values()) and elapsed < 7200
    detail = ", ".join(f"vs {v} {w}/10 ({_mean(rows, v, 'mean_return'):.2f})" for v, w in wins.items())
    gate(6, ok, f"MT-DQN return {_mean(rows, 'MT-DQN', 'mean_return'):.2f}: {detail}; "
                f"{elapsed / 60:.1f} min for all six variants (< 120)")
    assert ok


@pytest.mark.slow
def test_c07_baseline_direction(gate, grid):
    rows, _ = grid
    parts, ok = [], True
    for v in ("Vanilla-DQN", "Concat-Modal"):
        wr, wn = _wins(rows, v, "mean_return"), _wins(rows, v, "ndcg5")
        ok &= wr >= REQUIRED_WINS and wn >= REQUIRED_WINS
        parts.append(f"vs {v} return {wr}/10 ndcg@5 {wn}/10")
    gate(7, ok, "; ".join(parts) + f" (MT-DQN ndcg@5 {_mean(rows, 'MT-DQN', 'ndcg5'):.3f}, "
                f"Vanilla {_mean(rows, 'Vanilla-DQN', 'ndcg5'):.3f}, Concat {_mean(rows, 'Concat-Modal', 'ndcg5'):.3f})")
    assert ok


# --- 8: replay discipline -------------------------------------------------------------------------

def test_c08_replay_discipline(gate):
    fifo_ok = True
    for cap in (1, 3, 10):
        buf = ReplayBuffer(cap)
        for i in range(25):
            buf.push(Transition(np.zeros(1), 0, float(i), np.zeros(1), False))
            expected = [float(j) for j in range(max(0, i + 1 - cap), i + 1)]
            fifo_ok &= [t.r for t in buf] == expected
    buf = ReplayBuffer(10)
    for i in range(10):
        buf.push(Transition(np.zeros(1), 0, float(i), np.zeros(1), False))
    rng = np.random.default_rng(8)
    draws = [t.r for _ in range(10_000) for t in buf.sample(10, rng)]
    freq = np.bincount(np.array(draws, dtype=int), minlength=10) / len(draws)
    dev = float(np.max(np.abs(freq - 0.1)))
    ok = fifo_ok and dev <= 0.01 and len(draws) == 100_000
    gate(8, ok, f"FIFO exact: {fifo_ok}; 1e5 draws over 10 items, max |freq - 0.1| {dev:.4f} (<= 0.01)")
    assert ok


# --- 9, 10: CLI training at desk defaults --------------------------------------------------------

@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("desk")
    out = []
    for name in ("a", "b"):
        start = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "mtdqn.harness.cli", "train", "--out", str(base / name)],
                              capture_output=True, text=True)
        out.append((base / name, proc, time.perf_counter() - start))
    return out


@pytest.mark.slow
def test_c09_determinism(gate, desk_runs):
    (a, pa, _), (b, pb, _) = desk_runs
    assert pa.returncode == 0 and pb.returncode == 0, pa.stderr + pb.stderr
    names = sorted(p.name for p in a.iterdir())
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    ok = not differ and sorted(p.name for p in b.iterdir()) == names
    gate(9, ok, f"{len(names)} files compared ({', '.join(names)}); differing: {differ or 'none'}")
    assert ok


@pytest.mark.slow
def test_c10_smoke_train(gate, desk_runs):
    out, proc, elapsed = desk_runs[0]
    assert proc.returncode == 0, proc.stderr
    lines = Path(out / "step_losses.csv").read_text().splitlines()[1:]
    losses = np.array([float(line.split(",")[1]) for line in lines])
    k = len(losses) // 5
    first, last = float(losses[:k].mean()), float(losses[-k:].mean())
    ok = elapsed < 600 and last < first
    gate(10, ok, f"mtdqn train {elapsed:.0f}s (< 600s), {len(losses)} updates, "
                 f"loss first 20% {first:.4f} vs final 20% {last:.4f} (final must be lower)")
    assert ok
