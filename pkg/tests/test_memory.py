import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from locallearn.graph import counts_to_slices, split_counts
from locallearn.memory import (account, k_sweep, layer_costs, measure_live_peak, split_peak_ratio,
                               uniform_ratio)
from locallearn.train import TrainPlan, build_model, plan_slices


def _batch(shape, n=8, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n,) + shape), rng.integers(0, classes, n)


CONFIGS = [
    dict(template="mlp", widths=(12, 12, 12), k=1),
    dict(template="mlp", widths=(12, 12, 12), k=3),
    dict(template="resnet8", widths=(4, 4, 8), k=4, variant="contrast"),
    dict(template="resnet8", widths=(4, 4, 8), k=2, lambda1_first=0.0),
    dict(template="resnet14", widths=(4, 8, 8), k=3),
    dict(template="resnet14", widths=(4, 8, 8), k=3, split="balanced"),
]


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"{c['template']}-K{c['k']}")
def test_account_equals_measured_peak(cfg):
    shape = (3, 8, 8)
    plan = TrainPlan(batch_size=8, **cfg)
    x, y = _batch(shape)
    if cfg["template"] == "mlp":
        x = x.reshape(8, -1)
    in_shape = x.shape[1:]
    model = build_model(plan, in_shape, 4)
    slices = plan_slices(plan, model.graph)
    predicted = account(model.graph, slices, 8, include_aux=True, modules=model.modules, image_shape=in_shape)
    assert measure_live_peak(model, x, y) == predicted.peak


def test_measuring_leaves_the_model_untouched():
    plan = TrainPlan(template="resnet8", widths=(4, 4, 8), k=2)
    model = build_model(plan, (3, 8, 8), 4)
    before = [a.copy() for st in model.state() for a in st]
    measure_live_peak(model, *_batch((3, 8, 8)))
    after = [a for st in model.state() for a in st]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_parallel_measurement_is_refused():
    model = build_model(TrainPlan(template="mlp", widths=(4, 4), k=2), (6,), 4)
    with pytest.raises(ValueError, match="simultaneous"):
        measure_live_peak(model, np.zeros((2, 6)), np.zeros(2, int), mode="parallel")


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 64), data=st.data())
def test_uniform_cost_equal_split_ratio(n, data):
    k = data.draw(st.integers(1, n))
    slices = counts_to_slices(split_counts(n, k))
    assert Fraction(max(s.stop - s.start for s in slices), n) == Fraction(math.ceil(n / k), n)
    assert split_peak_ratio([5] * n, slices) == uniform_ratio(n, k)


def test_e2e_peak_is_affine_in_batch_size():
    plan = TrainPlan(template="resnet8", widths=(4, 4, 8), k=3)
    model = build_model(plan, (3, 8, 8), 4)
    slices = plan_slices(plan, model.graph)
    peaks = [account(model.graph, slices, b).e2e_peak for b in (8, 16, 24)]
    assert peaks[2] - peaks[1] == peaks[1] - peaks[0] > 0
    assert peaks[1] < 2 * peaks[0]


def test_local_peak_never_exceeds_e2e_without_aux():
    graph = build_model(TrainPlan(template="resnet20", widths=(4, 8, 8), k=1), (3, 8, 8), 4).graph
    for k in range(1, len(graph) + 1):
        rep = account(graph, counts_to_slices(split_counts(len(graph), k)), 8)
        assert rep.peak <= rep.e2e_peak


def test_layer_costs_scale_with_spatial_size():
    g8 = build_model(TrainPlan(template="resnet8", widths=(4, 4, 8), k=1), (3, 8, 8), 4).graph
    g16 = build_model(TrainPlan(template="resnet8", widths=(4, 4, 8), k=1), (3, 16, 16), 4).graph
    assert all(b > a for a, b in zip(layer_costs(g8, 4), layer_costs(g16, 4)))


def test_k_sweep_is_non_increasing_before_crossover():
    plan = TrainPlan(template="resnet20", widths=(4, 8, 8), batch_size=8, lambda1_first=0.0,
                     lambda1_last=0.0, head="linear")
    x, y = _batch((3, 8, 8))
    points, crossover = k_sweep(plan, (3, 8, 8), 4, x, y)
    ratios = [p.ratio for p in points]
    stop = len(points) if crossover is None else [p.k for p in points].index(crossover)
    assert all(b <= a for a, b in zip(ratios[:stop], ratios[1:stop]))
    assert ratios[0] == 1.0 and ratios[1] < 1.0 and min(ratios) < 0.6


@pytest.mark.parametrize("k", [1, 3])
def test_doubling_batch_doubles_peak_without_batch_coupled_terms(k):
    # no batch norm and no pairwise similarity matrix: every saved tensor has a leading batch axis
    model = build_model(TrainPlan(template="mlp", widths=(12, 12, 12), k=k), (20,), 4)
    rng = np.random.default_rng(0)
    peaks = [measure_live_peak(model, rng.uniform(0, 1, (b, 20)), rng.integers(0, 4, b)) for b in (8, 16)]
    assert peaks[1] == 2 * peaks[0]


def test_contrastive_peak_grows_faster_than_linear():
    model = build_model(TrainPlan(template="mlp", widths=(12, 12, 12), k=3, variant="contrast"), (20,), 4)
    rng = np.random.default_rng(0)
    peaks = [measure_live_peak(model, rng.uniform(0, 1, (b, 20)), rng.integers(0, 4, b)) for b in (8, 16)]
    assert peaks[1] > 2 * peaks[0]
