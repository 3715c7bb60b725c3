"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are printed together at the
end of the pytest run (see conftest.py) and by ``python tests/test_acceptance.py``.
Criterion 7 trains 60 Cora-scale models and takes roughly 25 minutes on one core.
Point FLAGGNN_CORA_DIR at a directory holding edges.txt, features.txt,
labels.txt and split.txt to run it on real files instead of the generated
stand-in.
"""
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from flaggnn.augment import StrategyConfig, Streams, flag_step, pgd_step
from flaggnn.data import load_node_dataset, make_citation_like, make_toy_dataset
from flaggnn.experiments import ExperimentSpec, noise_gaps, read_table, run_experiment
from flaggnn.graph import build_normalized_adjacency, spmm
from flaggnn.nn import backward, forward, grad_check, softmax_cross_entropy
from flaggnn.train import DataSpec, ModelSpec, OptimizerConfig, TrainConfig, train

from conftest import dense_normalized, gcn_instance, node_problem, random_graph

RESULTS = {}


def report(n, title, ok, detail):
    RESULTS[n] = f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    assert ok, RESULTS[n]


def test_c1_gradient_correctness():
    errs = [grad_check(*gcn_instance(seed)) for seed in range(50)]
    worst = max(errs)
    report(1, "gradient correctness", worst <= 1e-5,
           f"max rel err {worst:.2e} over 50 random 2-layer GCNs (tol 1e-5)")


def test_c2_normalization_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        g = random_graph(rng, int(rng.integers(1, 65)))
        s = build_normalized_adjacency(g)
        worst = max(worst, np.max(np.abs(s.to_dense() - dense_normalized(g.to_dense()))))
        h = rng.normal(size=(g.num_nodes, 3))
        worst = max(worst, np.max(np.abs(spmm(s, h) - dense_normalized(g.to_dense()) @ h)))
    report(2, "normalization oracle", worst <= 1e-12, f"max abs diff {worst:.2e} over 200 graphs (tol 1e-12)")


def test_c3_flag_degenerates_to_clean():
    data = make_toy_dataset(seed=0)
    base = TrainConfig(epochs=50, seed=3)

    def trajectory(strategy):
        snaps = []
        train(replace(base, strategy=strategy), data,
              on_epoch=lambda e, m: snaps.append([p.copy() for p in m.parameters()]))
        return snaps

    clean = trajectory(StrategyConfig("clean"))
    flag = trajectory(StrategyConfig("flag", M=1, alpha_l=0.0))
    worst = max(np.max(np.abs(a - b)) for sa, sb in zip(clean, flag) for a, b in zip(sa, sb))
    ok = len(clean) == len(flag) == 50 and worst <= 1e-12
    report(3, "flag(M=1, alpha=0) == clean", ok, f"max param diff {worst:.2e} over 50 epochs (tol 1e-12)")


def test_c4_accumulation_replay():
    worst = 0.0
    for seed in range(20):
        model, x, y, s, split = node_problem(seed, dropout=0.5)
        m = 3 + seed % 3
        cfg = StrategyConfig("flag", M=m, alpha_l=0.01, alpha_u=0.02)
        acc, _, trace = flag_step(model, x, y, s, split, cfg, Streams.from_seed(seed))
        per_step = []
        for delta, masks in zip(trace.deltas[:-1], trace.masks):
            logits, tape = forward(model, x, s, "train", delta=delta, masks=masks)
            _, d = softmax_cross_entropy(logits, y, split.train_mask)
            per_step.append(backward(model, tape, d).d_theta)
        mean = [sum(gs) / m for gs in zip(*per_step)]
        worst = max(worst, max(np.max(np.abs(a - b)) for a, b in zip(acc, mean)))
    report(4, "gradient-accumulation replay", worst <= 1e-12, f"max diff {worst:.2e} over 20 problems (tol 1e-12)")


def test_c5_perturbation_bounds():
    rng = np.random.default_rng(5)
    violations = 0
    for trial in range(1000):
        model, x, y, s, split = node_problem(trial, hidden=4)
        m = int(rng.integers(1, 9))
        a_l, a_u = (float(v) for v in rng.uniform(0, 0.1, 2))
        _, _, trace = flag_step(model, x, y, s, split, StrategyConfig("flag", m, a_l, a_u),
                                Streams.from_seed(trial))
        violations += np.max(np.abs(trace.deltas[-1])) > (m + 1) * max(a_l, a_u)
        eps = float(rng.uniform(0, 0.2))
        _, _, delta = pgd_step(model, x, y, s, split, StrategyConfig("pgd", m, a_l, a_u, epsilon=eps),
                               Streams.from_seed(trial))
        violations += np.max(np.abs(delta)) > eps
    report(5, "perturbation bounds", violations == 0, f"{violations} violations in 1000 flag + 1000 pgd runs")


def test_c6_free_accounting():
    data = make_toy_dataset(seed=0)
    lines, ok = [], True
    for n, m in ((300, 3), (200, 3), (50, 4), (10, 10)):
        clean = train(TrainConfig(epochs=n, eval_every=n), data).counters.forwards
        flag = train(TrainConfig(epochs=n, eval_every=n, free_budget=True,
                                 strategy=StrategyConfig("flag", M=m)), data).counters.forwards
        ok &= abs(flag - clean) <= m
        lines.append(f"N={n},M={m}: {flag} vs {clean}")
    report(6, "free accounting", ok, "; ".join(lines))


def citation_data():
    root = os.environ.get("FLAGGNN_CORA_DIR")
    if root:
        r = Path(root)
        return load_node_dataset(DataSpec(str(r / "edges.txt"), str(r / "features.txt"),
                                          str(r / "labels.txt"), str(r / "split.txt"))), f"files in {root}"
    return make_citation_like(seed=0), "generated Cora-scale stand-in"


def test_c7_noise_crossover(tmp_path):
    import flaggnn.experiments as ex

    data, source = citation_data()
    cfg = TrainConfig(epochs=200, model=ModelSpec("gcn", (16,), 0.5),
                      optimizer=OptimizerConfig("adam", lr=0.01, weight_decay=5e-4),
                      strategy=StrategyConfig("fgsm", M=1, alpha_l=0.01, norm_mode="sign"))
    sigmas = (0.0, 0.5, 1.0)
    # every run shares one dataset, so bypass file loading
    original = ex._dataset_for
    ex._dataset_for = lambda c: data
    start = time.perf_counter()
    try:
        run_experiment(ExperimentSpec("noise-sweep", cfg, tmp_path, seeds=tuple(range(10)), sigmas=sigmas))
    finally:
        ex._dataset_for = original
    minutes = (time.perf_counter() - start) / 60
    rows = read_table(tmp_path / "table.csv")
    gaps = noise_gaps(rows)
    means = {(float(r["sigma"]), r["arm"]): float(r["test_mean"]) for r in rows}
    ok = gaps[0.0] >= 0 and gaps[max(sigmas)] < gaps[0.0] and minutes <= 30
    detail = ", ".join(f"sigma={s:g}: clean {means[(s, 'clean')]:.4f} fgsm {means[(s, 'fgsm')]:.4f} "
                       f"gap {gaps[s]:+.4f}" for s in sigmas)
    report(7, "noise crossover", ok, f"{detail} ({source}, {minutes:.1f} min)")


def test_c8_biased_perturbation():
    # Reaching past the labeled cap needs a non-zero, sign-stable gradient on
    # some unlabeled entry, which rows outside every training node's receptive
    # field never get. So the per-trial cap and step sizes are asserted in
    # every trial, and the reach is asserted over the whole sample.
    rng = np.random.default_rng(8)
    labeled_ok, steps_ok, reached = 0, 0, 0
    for trial in range(500):
        model, x, y, s, split = node_problem(trial, n=12, hidden=4)
        m = int(rng.integers(1, 6))
        a_l = float(rng.uniform(1e-3, 0.05))
        a_u = a_l * float(rng.uniform(1.5, 3.0))
        _, _, trace = flag_step(model, x, y, s, split, StrategyConfig("flag", m, a_l, a_u),
                                Streams.from_seed(trial))
        d = np.abs(trace.deltas[-1])
        bound = (m + 1) * a_l
        labeled_ok += np.max(d[split.labeled_mask]) <= bound
        reached += np.max(d[split.unlabeled_mask]) > bound
        inc = np.abs(np.diff(np.stack(trace.deltas), axis=0))[:, split.unlabeled_mask]
        steps_ok += bool(np.all(np.isclose(inc, a_u, rtol=1e-9, atol=0) | (inc == 0)))
    ok = labeled_ok == 500 and steps_ok == 500 and reached > 0
    report(8, "biased perturbation", ok,
           f"labeled rows within (M+1)*alpha_l in {labeled_ok}/500, unlabeled steps of size alpha_u in "
           f"{steps_ok}/500, unlabeled rows beyond the labeled cap in {reached}/500 trials")


def test_c9_compare_harness(tmp_path):
    cfg = TrainConfig(epochs=30, strategy=StrategyConfig("flag", M=3, alpha_l=0.01))
    data = make_toy_dataset(seed=0)
    import flaggnn.experiments as ex
    original = ex._dataset_for
    ex._dataset_for = lambda c: data
    try:
        run_experiment(ExperimentSpec("compare-strategies", cfg, tmp_path, seeds=(0, 1, 2)))
    finally:
        ex._dataset_for = original
    rows = read_table(tmp_path / "table.csv")
    arms = [r["arm"] for r in rows]
    ms = [int(r["M"]) for r in rows[1:]]
    ok = arms == ["clean", "pgd", "free", "freelb", "flag"] and ms == [8, 8, 3, 3]
    report(9, "strategy comparison harness", ok, f"rows {arms}, M {ms}")


if __name__ == "__main__":
    import tempfile

    only = {int(a) for a in sys.argv[1:]}
    for name, fn in sorted(globals().items()):
        if not name.startswith("test_c") or (only and int(name[6]) not in only):
            continue
        try:
            if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as d:
                    fn(Path(d))
            else:
                fn()
        except AssertionError:
            pass
        print(RESULTS.get(int(name[6]), f"criterion {name[6]} FAIL  crashed"), flush=True)
