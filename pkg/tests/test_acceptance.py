"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import csv
import io
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_RESULTS, random_edges
from dafos.cli import main
from dafos.controller import EarlyStopper, FanoutController
from dafos.graph import (
    DatasetBundle,
    build_csr,
    gen_planted_features,
    gen_preferential_attachment,
    gen_sbm,
    random_splits,
)
from dafos.model import forward
from dafos.sampler import sample_block
from dafos.trainer import DEFAULT_SWEEP_CELLS, TrainConfig, compare, run, sensitivity_sweep
from test_controller import plateau_oracle, stopper_oracle
from test_model import dense_forward, max_fd_relative_error, random_instance
from test_sampler import check_block, star

pytestmark = pytest.mark.acceptance

# Best validation micro-F1 of the fixed-seed SBM run, observed during development.
GOLDEN_SBM_BEST_VAL_F1 = 0.9925
GOLDEN_SBM_BEST_EPOCH = 44


def record(number, passed, elapsed, budget, detail):
    ok = passed and elapsed < budget
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail} ({elapsed:.2f}s, budget {budget:g}s)"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    return ok


def sbm_dataset(seed=17):
    graph, blocks = gen_sbm(2000, 4, 0.02, 0.002, seed=seed)
    features, labels = gen_planted_features(graph, blocks, 16, 1.0, seed=seed + 1)
    return DatasetBundle(graph, features, labels, random_splits(2000, seed=seed + 2))


def pa_dataset(seed=5, homophily=0.7):
    graph, blocks = gen_preferential_attachment(10_000, 3, seed=seed, num_blocks=4, homophily=homophily)
    features, labels = gen_planted_features(graph, blocks, 16, 1.0, seed=seed + 1)
    return DatasetBundle(graph, features, labels, random_splits(10_000, seed=seed + 2))


@pytest.fixture(scope="module")
def sbm():
    return sbm_dataset()


def test_criterion_1_controller_exactness():
    start = time.perf_counter()
    ctrl = FanoutController([10, 15], delta_f=5, epsilon=0.01)
    trajectory = [list(ctrl.fanouts)]
    for loss in [1.0, 0.995, 0.5, 0.495]:
        ctrl.observe_epoch_loss(loss)
        trajectory.append(list(ctrl.fanouts))
    # the first loss only primes the controller; the next three move it
    expected = [[10, 15], [15, 20], [15, 20], [20, 25]]
    trajectory_ok = trajectory[1:] == expected

    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(1000):
        eps = float(10 ** rng.uniform(-4, -1))
        delta_f = int(rng.integers(1, 10))
        init = rng.integers(1, 30, size=int(rng.integers(1, 4))).tolist()
        steps = rng.choice([0.0, 0.5, 1.0, 2.0], size=int(rng.integers(1, 40))) * eps
        losses = np.abs(1.0 + np.cumsum(steps * rng.choice([-1.0, 1.0], size=steps.size))).tolist()
        ctrl = FanoutController(init, delta_f=delta_f, epsilon=eps)
        expect, prev = list(init), None
        for loss in losses:
            ctrl.observe_epoch_loss(loss)
            if plateau_oracle(prev, loss, eps):
                expect = [f + delta_f for f in expect]
            prev = loss
            if ctrl.fanouts != expect:
                mismatches += 1
                break
    elapsed = time.perf_counter() - start
    ok = record(
        1, trajectory_ok and mismatches == 0, elapsed, 1.0,
        f"trajectory {trajectory[1:]}, {mismatches}/1000 random streams disagree with oracle",
    )
    assert ok


def test_criterion_2_early_stop_exactness():
    start = time.perf_counter()
    stopper = EarlyStopper(delta=0.01, window=3)
    stop_at = next(t for t in range(1, 100) if stopper.observe_f1(0.5))
    constant_ok = stop_at == 6

    improving_stops = 0
    rng = np.random.default_rng(2)
    for _ in range(200):
        window = int(rng.integers(1, 20))
        delta = float(rng.uniform(1e-3, 0.05))
        # every step gains at least delta / window, so every window gains >= delta
        steps = delta / window * (1.0 + rng.uniform(0, 1, size=5 * window + 10))
        stream = np.minimum(np.cumsum(steps), 1.0)
        stream = stream[stream < 1.0]
        s = EarlyStopper(delta=delta, window=window)
        improving_stops += any(s.observe_f1(float(f)) for f in stream)

    mismatches = 0
    for _ in range(1000):
        window = int(rng.integers(1, 12))
        delta = float(rng.choice([0.005, 0.01, 0.05]))
        walk = 0.5 + np.cumsum(rng.choice([-0.02, 0.0, 0.004, 0.02], size=int(rng.integers(1, 80))))
        stream = np.clip(walk, 0.0, 1.0).tolist()
        s = EarlyStopper(delta=delta, window=window)
        got = next((t for t, f in enumerate(stream, 1) if s.observe_f1(f)), None)
        mismatches += got != stopper_oracle(stream, delta, window)
    elapsed = time.perf_counter() - start
    ok = record(
        2, constant_ok and improving_stops == 0 and mismatches == 0, elapsed, 1.0,
        f"constant stream stops at {stop_at}, {improving_stops} improving streams stopped, "
        f"{mismatches}/1000 replay mismatches",
    )
    assert ok


def test_criterion_3_sampler_contracts():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    failures = 0
    for _ in range(100):
        n = int(rng.integers(2, 80))
        g = build_csr(random_edges(rng, n, int(rng.integers(0, 400))), n)
        dst = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
        fanout = int(rng.integers(1, 15))
        try:
            check_block(g, sample_block(g, dst, fanout, rng), fanout)
        except AssertionError:
            failures += 1

    d, f, draws = 20, 5, 100_000
    g = star(d)
    sample_rng = np.random.default_rng(2024)
    counts = np.zeros(d + 1, dtype=np.int64)
    for _ in range(draws):
        counts[sample_block(g, [0], f, sample_rng).src_ids[1:]] += 1
    counts = counts[1:]
    p = f / d
    # subsets of fixed size: covariance a (I - J/d) with a = N p (1 - p) d / (d - 1)
    a = draws * p * (1 - p) * d / (d - 1)
    p_value = float(stats.chi2.sf(((counts - draws * p) ** 2).sum() / a, d - 1))
    elapsed = time.perf_counter() - start
    ok = record(
        3, failures == 0 and p_value > 1e-3, elapsed, 30.0,
        f"{failures}/100 graphs violate block contracts, chi-square p={p_value:.3g}",
    )
    assert ok


def test_criterion_4_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        aggregator = "mean" if i % 2 == 0 else "sum"
        blocks, x, params, labels = random_instance(100 + i, aggregator)
        worst = max(worst, max_fd_relative_error(blocks, x, params, labels, aggregator, h=1e-5))
    elapsed = time.perf_counter() - start
    ok = record(4, worst < 1e-4, elapsed, 60.0, f"max relative error {worst:.2e} over 20 instances")
    assert ok


def test_criterion_5_dense_oracle_forward():
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        aggregator = "mean" if i % 2 == 0 else "sum"
        blocks, x, params, _ = random_instance(200 + i, aggregator)
        logits, _ = forward(blocks, x, params, aggregator)
        worst = max(worst, float(np.abs(logits - dense_forward(blocks, x, params.weights, aggregator)).max()))
    elapsed = time.perf_counter() - start
    ok = record(5, worst < 1e-10, elapsed, 10.0, f"max abs diff {worst:.2e} over 20 instances")
    assert ok


@pytest.mark.slow
def test_criterion_6_convergence(sbm):
    start = time.perf_counter()
    report = run(TrainConfig(max_epochs=50, seed=17), sbm)
    elapsed = time.perf_counter() - start
    golden_ok = (
        abs(report.best_val_f1 - GOLDEN_SBM_BEST_VAL_F1) < 1e-12 and report.best_epoch == GOLDEN_SBM_BEST_EPOCH
    )
    ok = record(
        6, report.best_val_f1 >= 0.90 and golden_ok, elapsed, 300.0,
        f"best val micro-F1 {report.best_val_f1:.4f} at epoch {report.best_epoch} "
        f"(golden {GOLDEN_SBM_BEST_VAL_F1} at {GOLDEN_SBM_BEST_EPOCH}), test {report.test_f1:.4f}",
    )
    assert ok


@pytest.mark.slow
def test_criterion_7_speed_trend():
    start = time.perf_counter()
    data = pa_dataset()
    dafos = TrainConfig(policy="dafos", initial_fanouts=(5, 5), max_epochs=30)
    fixed = dafos.replace(policy="fixed", initial_fanouts=(25, 25))
    result = compare(dafos, fixed, data, seeds=[0, 1, 2, 3, 4], target_f1=0.85)
    med = {row.policy: row.time_to_target_ms for row in result.aggregates}
    elapsed = time.perf_counter() - start
    ratio = None if med["dafos"] is None or med["fixed"] is None else med["dafos"] / med["fixed"]
    per_seed = ", ".join(
        f"{r.policy}/{r.seed}={'never' if r.time_to_target_ms is None else f'{r.time_to_target_ms:.0f}'}"
        for r in result.rows
    )
    ok = record(
        7, ratio is not None and ratio <= 0.8, elapsed, 900.0,
        f"median time-to-0.85 dafos {med['dafos']} ms vs fixed {med['fixed']} ms, "
        f"ratio {'n/a' if ratio is None else f'{ratio:.3f}'} ({per_seed})",
    )
    assert ok


def _epochs_before_first_change(report):
    initial = report.epochs[0].fanouts
    for stats_ in report.epochs:
        if stats_.fanouts != initial:
            return stats_.epoch - 1
    return len(report.epochs)


@pytest.mark.slow
def test_criterion_8_sweep_shape(sbm, tmp_path):
    start = time.perf_counter()
    cells = sensitivity_sweep(TrainConfig(seed=17, max_epochs=100), sbm)
    replay_ok = True
    for cell in cells:
        expect, prev = list(cell.report.config["initial_fanouts"]), None
        for e in cell.report.epochs:
            replay_ok &= list(e.fanouts) == expect
            if plateau_oracle(prev, e.avg_train_loss, cell.epsilon):
                expect = [f + cell.delta_f for f in expect]
            prev = e.avg_train_loss
    by_cell = {(c.delta_f, c.epsilon): c for c in cells}
    quiet = _epochs_before_first_change(by_cell[(5, 0.0001)].report)
    busy = _epochs_before_first_change(by_cell[(5, 0.01)].report)
    shape_ok = [(c.delta_f, c.epsilon) for c in cells] == list(DEFAULT_SWEEP_CELLS)
    elapsed = time.perf_counter() - start
    ok = record(
        8, shape_ok and len(cells) == 8 and replay_ok and quiet >= busy, elapsed, 1200.0,
        f"{len(cells)} cells, replay {'ok' if replay_ok else 'MISMATCH'}, "
        f"epochs before first change eps=1e-4: {quiet}, eps=0.01: {busy}",
    )
    assert ok


def _untimed_convergence(path):
    rows = list(csv.reader(io.StringIO(path.read_text())))
    keep = [i for i, name in enumerate(rows[0]) if not name.endswith("_ms")]
    return "\n".join(",".join(row[i] for i in keep) for row in rows)


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path):
    start = time.perf_counter()
    ds = tmp_path / "ds"
    assert main(["gen-data", "--kind", "sbm", "--nodes", "1000", "--out", str(ds), "--seed", "9"]) == 0
    invocations = [
        ["--policy", "dafos", "--fanouts", "4,6", "--delta-f", "3", "--epsilon", "0.05"],
        ["--policy", "fixed", "--fanouts", "8,8", "--window", "5", "--batch-size", "128"],
    ]
    identical, rows = True, 0
    for k, extra in enumerate(invocations):
        texts = []
        for rep in range(2):
            out = tmp_path / f"run{k}_{rep}"
            argv = ["train", "--dataset", str(ds), "--out", str(out), "--max-epochs", "15", "--seed", "11", *extra]
            assert main(argv) == 0
            texts.append(_untimed_convergence(out / "convergence.csv"))
        identical &= texts[0] == texts[1]
        rows += texts[0].count("\n")
    header = texts[0].splitlines()[0]
    elapsed = time.perf_counter() - start
    ok = record(
        9, identical and "fanout_l1" in header, elapsed, 300.0,
        f"repeated train runs {'byte-identical' if identical else 'DIFFER'} over {rows} epoch rows "
        f"(columns {header})",
    )
    assert ok
