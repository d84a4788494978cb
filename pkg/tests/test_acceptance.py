"""One test per acceptance criterion; each records a PASS/FAIL line shown in the terminal summary."""

import logging
import math
import time

import numpy as np
import pytest

from locallearn.config import RunConfig, parse_config, serialize_config
from locallearn.graph import alpha_beta_to_lambdas, counts_to_slices, split_counts
from locallearn.losses import contrastive_loss
from locallearn.autodiff import Tensor
from locallearn.memory import k_sweep, split_peak_ratio, uniform_ratio
from locallearn.study import StudySetup, collapse_checks, e2e_relation, recovery_checks, run_study
from locallearn.train import TrainPlan, metrics_csv, train_simultaneous

import test_config
import test_data
import test_memory
import test_train
from conftest import ACCEPTANCE, random_images
from fdcheck import check_gradients
from gradcases import all_cases


def _record(n: int, ok: bool, detail: str):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _holds(check, *args) -> bool:
    try:
        check(*args)
    except AssertionError:
        return False
    return True


def _fmt(checks: dict) -> str:
    return "; ".join(f"{name}: {'ok' if ok else 'no'} (margin {m:+.3f} vs 2sd {thr:.3f})"
                     for name, (ok, m, thr) in checks.items())


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst, count, bad = 0.0, 0, []
    for name, i, (build, tensors) in all_cases(4, seed=2024):
        err = check_gradients(build, tensors)
        worst = max(worst, err)
        count += 1
        if err >= 1e-4:
            bad.append(f"{name}#{i}")
    secs = time.perf_counter() - t0
    _record(1, count >= 100 and not bad and secs < 60,
            f"{count} cases, worst relative error {worst:.1e}, failing {bad or 'none'}, {secs:.1f}s")


def test_criterion_02_split_counts():
    a, b = split_counts(55, 4), split_counts(55, 16)
    _record(2, a == [13, 14, 14, 14] and b == [3] * 9 + [4] * 7, f"K=4 {a}; K=16 {b}")


def test_criterion_03_contrastive_closed_forms():
    worst = max(abs(contrastive_loss(Tensor(np.tile([[0.6, 0.8]], (n, 1))), np.arange(n) % 2).item()
                    - math.log(n - 1)) for n in range(3, 33))
    rng = np.random.default_rng(3)
    pair = rng.normal(size=(2, 5))
    two = contrastive_loss(Tensor(pair / np.linalg.norm(pair, axis=1, keepdims=True)), np.array([1, 1])).item()
    inv = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 16))
        z = rng.normal(size=(n, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        y = rng.integers(0, 3, n)
        y[1] = y[0]
        base = contrastive_loss(Tensor(z), y).item()
        p = rng.permutation(n)
        inv = max(inv, abs(contrastive_loss(Tensor(z[p]), y[p]).item() - base),
                  abs(contrastive_loss(Tensor(z), rng.permutation(7)[y] * 3 + 11).item() - base))
    _record(3, worst < 1e-10 and two == 0.0 and inv < 1e-10,
            f"ln(N-1) worst {worst:.1e} over N=3..32; N=2 loss {two}; permutation/relabel worst {inv:.1e}")


def test_criterion_04_reduction_identities():
    greedy = _holds(test_train.test_zero_lambda1_linear_head_matches_two_network_greedy_loop, random_images())
    e2e = _holds(test_train.test_single_module_matches_plain_e2e_loop, random_images())
    _record(4, greedy and e2e, f"lambda1=0 linear head == greedy loop over 20 steps: {greedy}; K=1 == E2E loop: {e2e}")


def test_criterion_05_mode_equivalence():
    t0 = time.perf_counter()
    results = {(k, s): _holds(test_train.test_parallel_equals_simultaneous, k, s) for k in (2, 3) for s in (0, 1, 2)}
    secs = time.perf_counter() - t0
    failed = [key for key, ok in results.items() if not ok]
    _record(5, not failed and secs < 120,
            f"K in (2,3) x seeds (0,1,2), 50 steps, max delta <= 1e-10; failing {failed or 'none'}; {secs:.1f}s")


def test_criterion_06_gradient_isolation():
    ok = _holds(test_train.test_later_losses_never_reach_earlier_modules, random_images())
    _record(6, ok, "K=3, 20 steps: gradient induced in earlier modules by later losses is exactly zero every step")


@pytest.fixture(scope="module")
def study():
    logging.getLogger("locallearn.study").setLevel(logging.INFO)
    return run_study(StudySetup())


def _table(result) -> str:
    rows = []
    for m in ("e2e", "greedy", "infopro"):
        runs = [r for r in result.runs if r.method == m]
        ihy = {k: np.mean([r.ihy[k] for r in runs]) for k in result.setup.labels}
        rows.append(f"{m}: err {np.mean([r.final_err for r in runs]):.3f} probe_err "
                    f"{np.mean([r.probe_err for r in runs]):.3f} ihy " + " ".join(f"{k}={v:.3f}" for k, v in ihy.items()))
    return " | ".join(rows)


def test_criterion_07_information_collapse(study):
    checks = collapse_checks(study)
    print(_table(study))
    ok = all(c[0] for c in checks.values()) and study.seconds < 1800
    _record(7, ok, f"{_fmt(checks)}; study {study.seconds / 60:.1f} min")


def test_criterion_08_infopro_recovery(study):
    checks = recovery_checks(study)
    _record(8, all(c[0] for c in checks.values()),
            f"lambdas {study.lambdas} (validation errors {study.selection}); {_fmt(checks)}; "
            f"relative to e2e: {e2e_relation(study)}")


def test_criterion_09_memory_model():
    accounted = all(_holds(test_memory.test_account_equals_measured_peak, cfg) for cfg in test_memory.CONFIGS)
    exact = all(split_peak_ratio([1] * n, counts_to_slices(split_counts(n, k))) == uniform_ratio(n, k)
                == math.ceil(n / k) / n for n in range(1, 65) for k in range(1, n + 1))
    rng = np.random.default_rng(0)
    x, y = rng.uniform(0, 1, (64, 3, 16, 16)), rng.integers(0, 10, 64)
    plan = TrainPlan(template="resnet20", widths=(8, 16, 32), split="balanced", batch_size=64)
    points, crossover = k_sweep(plan, (3, 16, 16), 10, x, y)
    ratios = [p.ratio for p in points]
    stop = len(points) if crossover is None else [p.k for p in points].index(crossover)
    monotone = all(b <= a for a, b in zip(ratios[:stop], ratios[1:stop]))
    curve = ", ".join(f"K={p.k}:{p.ratio:.3f}" for p in points)
    _record(9, accounted and exact and monotone,
            f"account == measured on {len(test_memory.CONFIGS)} configs: {accounted}; ceil(n/K)/n exact for n<=64: "
            f"{exact}; desk ResNet balanced sweep {curve} non-increasing: {monotone}; crossover K: {crossover}")


def test_criterion_10_bound_algebra(study):
    grid = all(alpha_beta_to_lambdas(a, b) == (a * (1 - b), a * b)
               for a in np.linspace(0, 5, 11) for b in np.linspace(0, 1, 11))
    gap = study.gap
    series = ", ".join(f"{v:.3f}" for v in gap.bounds)
    _record(10, grid and gap.shrinks,
            f"alpha/beta grid exact: {grid}; gap series [{series}] first quartile {gap.first_quartile_mean:.3f} "
            f"-> last quartile {gap.last_quartile_mean:.3f}")


def test_criterion_11_io(tmp_path):
    idx = _holds(test_data.test_idx_fixture_exact_values, tmp_path) and _holds(test_data.test_idx_round_trip, tmp_path)
    cfg = parse_config(serialize_config(RunConfig())) == RunConfig() and _holds(test_config.test_config_round_trips_exactly)
    plan = TrainPlan(template="resnet8", widths=(4, 4, 8), k=2, epochs=2, batch_size=16, seed=5)
    a = metrics_csv(train_simultaneous(plan, random_images()).metrics).encode()
    b = metrics_csv(train_simultaneous(plan, random_images()).metrics).encode()
    _record(11, idx and cfg and a == b, f"IDX exact: {idx}; config round-trip: {cfg}; metrics.csv byte-identical: {a == b}")
