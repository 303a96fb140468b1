"""Acceptance gate: one test per primary criterion, each at its stated tolerance and budget.

Every test records a single PASS/FAIL line (printed and shown in the pytest
terminal summary) before asserting.
"""
import time

import numpy as np

from fedec.cli import parse_config, run
from fedec.datagen import LabeledDataset, PartitionSpec, shard_partition, synth_mixture
from fedec.nncore import Batch, NetworkSpec, ParamVector, constrained_loss, cross_entropy, \
    forward, grad, kl_divergence, smoothed_target, soft_cross_entropy
from fedec.orchestrator import RoundConfig, initial_state, run_experiment, run_round
from fedec.strategies import StrategyKind, inner_update, outer_update_fedavg, \
    outer_update_reptile

from conftest import ACCEPTANCE_LINES, finite_difference

# Ordering-experiment knobs the criterion leaves open. Chosen on tuning seeds
# 100-104 (disjoint from the seeds below) by maximizing FedEC-wo accuracy;
# alpha is FedEC's best of {0.5, 1, 2} on those same tuning seeds.
ORDER_SEPARATION = 2.5
ORDER_INNER_LR = 0.05
ORDER_BATCH = 10
ORDER_OUTER_LR = 0.5
ORDER_ALPHA = 2.0
ORDER_SEEDS = range(5)


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- loss equivalence --------------------------------------------------------------

def test_loss_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        c = int(rng.integers(2, 11))
        cur = rng.dirichlet(np.full(c, rng.uniform(0.2, 3.0)))[None]
        ref = rng.dirichlet(np.full(c, rng.uniform(0.2, 3.0)))[None]
        y = rng.integers(0, c, 1)
        alpha = rng.uniform(0.0, 5.0)
        direct = cross_entropy(cur, y) + alpha * kl_divergence(ref, cur)
        const = alpha * float(np.sum(ref * np.log(np.clip(ref, 1e-12, 1.0))))
        smoothed = (1 + alpha) * soft_cross_entropy(smoothed_target(y, ref, alpha), cur) + const
        worst = max(worst, abs(direct - smoothed))
    elapsed = time.perf_counter() - start
    record("loss-equivalence", worst <= 1e-6 and elapsed < 1.0,
           f"max |diff| {worst:.2e} <= 1e-6 over 1000 tuples, {elapsed:.2f}s < 1s")


# -- gradient oracle ---------------------------------------------------------------

def test_gradient_oracle():
    net = NetworkSpec((2, 16, 3))
    rng = np.random.default_rng(99)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        params = net.init_params(rng) * rng.uniform(0.5, 2.0)
        n = int(rng.integers(1, 9))
        batch = Batch(rng.standard_normal((n, 2)), rng.integers(0, 3, n))
        history = forward(net, net.init_params(rng), batch)
        alpha = float(rng.choice([0.0, rng.uniform(0.0, 5.0)]))

        def loss(flat):
            return constrained_loss(net, ParamVector(flat, params.layout), batch, history, alpha)

        fd = finite_difference(loss, params.values)
        g = grad(net, params, batch, history, alpha).values
        err = np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
        worst = max(worst, err)
    elapsed = time.perf_counter() - start
    record("gradient-oracle", worst <= 1e-4 and elapsed < 10.0,
           f"max relative error {worst:.2e} <= 1e-4 at 100 points, {elapsed:.2f}s < 10s")


# -- partitioner -------------------------------------------------------------------

def test_partitioner_exactness():
    rng = np.random.default_rng(0)
    labels = rng.permutation(np.repeat(np.arange(10), 500))
    ds = LabeledDataset(rng.standard_normal((labels.size, 4)), labels, 10)
    start = time.perf_counter()
    shards, summary = shard_partition(ds, PartitionSpec(100, 2, seed=0), return_summary=True)
    elapsed = time.perf_counter() - start

    allocated = np.bincount(np.concatenate(summary.client_classes), minlength=10)
    used = np.concatenate([np.concatenate([s.train_index, s.test_index]) for s in shards])
    conserved = (len(used) == len(np.unique(used)) == len(ds) - sum(summary.dropped.values())
                 and len(used) == len(ds))
    per_client = all(len(s.train) + len(s.test) == 50 for s in shards)
    ok = (summary.shards_per_class == 20 and (allocated == 20).all() and conserved
          and per_client and elapsed < 1.0)
    record("partitioner-exactness", ok,
           f"shards/class {summary.shards_per_class}, allocations {sorted(set(allocated.tolist()))}, "
           f"{len(used)}/{len(ds)} examples placed once, {elapsed:.3f}s < 1s")


# -- algebraic identities ------------------------------------------------------------

def test_algebraic_identities():
    net = NetworkSpec((4, 12, 3))
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    checks = []

    # aggregation rule alone, on arbitrary parameter stacks
    for m in (1, 2, 5, 17):
        phi = net.init_params(rng)
        adapted = [net.init_params(rng) * rng.uniform(0.1, 3.0) for _ in range(m)]
        checks.append(outer_update_reptile(phi, adapted, 1.0)
                      == outer_update_fedavg([(p, 1.0) for p in adapted]))

    # full trajectories on a federation with equal shard sizes
    ds = synth_mixture(3, 4, 60, 2.0, seed=3)
    shards = shard_partition(ds, PartitionSpec(6, 2, seed=3))
    base = dict(clients=6, sample_rate=0.5, rounds=5, inner_epochs=2, inner_lr=0.05,
                outer_lr=1.0, batch_size=8, seed=11)
    s_rep = initial_state(RoundConfig(strategy=StrategyKind("fedec_wo"), **base), net)
    s_avg = initial_state(RoundConfig(strategy=StrategyKind("fedavg"), **base), net)
    for _ in range(base["rounds"]):
        s_rep, _, _ = run_round(s_rep, RoundConfig(strategy=StrategyKind("fedec_wo"), **base),
                                net, shards)
        s_avg, _, _ = run_round(s_avg, RoundConfig(strategy=StrategyKind("fedavg"), **base),
                                net, shards)
        checks.append(s_rep.phi == s_avg.phi)

    # FedEC with alpha = 0 replays FedEC-wo over a whole run
    base["outer_lr"] = 0.7
    zero = run_experiment(RoundConfig(strategy=StrategyKind("fedec", 0.0), **base), net, shards)
    wo = run_experiment(RoundConfig(strategy=StrategyKind("fedec_wo"), **base), net, shards)
    checks.append(zero.phi == wo.phi)
    checks.append([r.accuracies for r in zero.records] == [r.accuracies for r in wo.records])

    # FedEC without a history model replays FedEC-wo's inner loop
    phi = net.init_params(7)
    for cid, shard in enumerate(shards):
        a = inner_update(StrategyKind("fedec", 2.0), net, phi, shard, None, 2, 0.05, 8,
                         np.random.default_rng([1, cid]))
        b = inner_update(StrategyKind("fedec_wo"), net, phi, shard, None, 2, 0.05, 8,
                         np.random.default_rng([1, cid]))
        checks.append(a.params == b.params and not a.constrained)

    elapsed = time.perf_counter() - start
    record("algebraic-identities", all(checks) and elapsed < 30.0,
           f"{sum(checks)}/{len(checks)} bitwise equalities hold, {elapsed:.2f}s < 30s")


# -- determinism ---------------------------------------------------------------------

def test_determinism(tmp_path):
    start = time.perf_counter()
    flags = {"clients": 20, "classes-per-client": 2, "rounds": 30, "strategy": "fedec",
             "alpha": 1.0, "sample-rate": 0.25}
    csvs = []
    for name in ("first", "second"):
        cfg = parse_config(None, dict(flags, **{"output-dir": tmp_path / name}))
        assert run(cfg) == 0
        csvs.append((tmp_path / name / "metrics.csv").read_bytes())
    same_csv = csvs[0] == csvs[1]

    net = NetworkSpec((16, 32, 5))
    shards = shard_partition(synth_mixture(5, 16, 400, 2.0, seed=0), PartitionSpec(20, 2, seed=0))
    rc = RoundConfig(20, 0.25, 20, 2, 0.05, 1.0, StrategyKind("fedec", 1.0), 20, seed=0)
    serial = run_experiment(rc, net, shards, workers=1)
    parallel = run_experiment(rc, net, shards, workers=4)
    same_runs = (serial.phi == parallel.phi
                 and dict(serial.history) == dict(parallel.history)
                 and [(r.mean_acc, r.mean_loss, r.client_ids) for r in serial.records + [serial.final]]
                 == [(r.mean_acc, r.mean_loss, r.client_ids) for r in parallel.records + [parallel.final]])
    elapsed = time.perf_counter() - start
    record("determinism", same_csv and same_runs and elapsed < 120.0,
           f"metrics CSV byte-identical: {same_csv}, parallel == serial bitwise: {same_runs}, "
           f"{elapsed:.1f}s < 120s")


# -- ordering experiment ----------------------------------------------------------------

def test_ordering_experiment():
    net = NetworkSpec((16, 32, 5))
    start = time.perf_counter()
    acc = {"fedec": [], "fedec_wo": [], "fedec_l2": [], "fedavg": []}
    for seed in ORDER_SEEDS:
        ds = synth_mixture(5, 16, 400, ORDER_SEPARATION, seed=seed)
        shards = shard_partition(ds, PartitionSpec(20, 2, seed=seed))
        for name in acc:
            alpha = ORDER_ALPHA if name in ("fedec", "fedec_l2") else 0.0
            cfg = RoundConfig(20, 0.25, 60, 2, ORDER_INNER_LR, ORDER_OUTER_LR,
                              StrategyKind(name, alpha), ORDER_BATCH, seed=seed)
            acc[name].append(run_experiment(cfg, net, shards).final.mean_acc)
    elapsed = time.perf_counter() - start
    m = {k: float(np.mean(v)) for k, v in acc.items()}
    wins = sum(a >= b for a, b in zip(acc["fedec"], acc["fedec_wo"]))
    gap = min(m["fedec"], m["fedec_wo"]) - m["fedavg"]
    parts = {
        "a": (wins >= 4, f"FedEC >= FedEC-wo in {wins}/5 seeds (need 4)"),
        "b": (gap >= 0.05, f"min(FedEC {m['fedec']:.4f}, FedEC-wo {m['fedec_wo']:.4f}) - "
                           f"FedAvg {m['fedavg']:.4f} = {gap * 100:.2f}pp (need 5)"),
        "c": (m["fedec"] >= m["fedec_l2"],
              f"FedEC {m['fedec']:.4f} vs FedEC-l2 {m['fedec_l2']:.4f} at alpha={ORDER_ALPHA}"),
    }
    for key, (ok, detail) in parts.items():
        line = f"{'PASS' if ok else 'FAIL'} ordering-{key}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
    record("ordering-experiment", all(ok for ok, _ in parts.values()) and elapsed < 600.0,
           f"{sum(ok for ok, _ in parts.values())}/3 sub-criteria, {elapsed:.0f}s < 600s")


# -- history semantics -------------------------------------------------------------------

def test_history_semantics():
    net = NetworkSpec((8, 16, 4))
    shards = shard_partition(synth_mixture(4, 8, 100, 2.0, seed=4), PartitionSpec(20, 2, seed=4))
    start = time.perf_counter()
    checks = []
    for name in ("fedec", "fedec_l2", "fedec_wo", "perfedavg_fo", "fedavg"):
        alpha = 1.0 if name in ("fedec", "fedec_l2") else 0.0
        cfg = RoundConfig(20, 0.25, 12, 2, 0.05, 0.8, StrategyKind(name, alpha), 10, seed=9)
        state = initial_state(cfg, net)
        seen, latest = set(), {}
        for _ in range(cfg.rounds):
            phi_prev, hist_prev = state.phi, state.history
            state, record_, results = run_round(state, cfg, net, shards)
            seen |= set(results)
            # recompute each sampled client's local model from the previous round's phi
            for cid, res in results.items():
                again = inner_update(cfg.strategy, net, phi_prev, shards[cid], hist_prev.get(cid),
                                     cfg.inner_epochs, cfg.inner_lr, cfg.batch_size,
                                     np.random.default_rng([cfg.seed, 2, state.round, cid]))
                checks.append(again.params == res.params)
            latest.update({cid: r.params for cid, r in results.items()})
            checks.append(set(state.history) == seen)
            checks.append(all(state.history[c] == latest[c] for c in seen))
    elapsed = time.perf_counter() - start
    record("history-semantics", all(checks) and elapsed < 30.0,
           f"{sum(checks)}/{len(checks)} checks over 5 strategies x 12 rounds, {elapsed:.2f}s < 30s")
