import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from locallearn.graph import (RESNET_DEPTHS, alpha_beta_to_lambdas, build_local_modules, build_template,
                              counts_to_slices, interpolate_lambdas, mlp, resnet, split_balanced_memory,
                              split_counts)


def test_split_counts_known_layouts():
    assert split_counts(55, 4) == [13, 14, 14, 14]
    assert split_counts(55, 16) == [3] * 9 + [4] * 7
    assert split_counts(16, 8) == [2] * 8


def test_split_counts_partition_exhaustive():
    for n in range(1, 65):
        for k in range(1, n + 1):
            c = split_counts(n, k)
            assert len(c) == k and sum(c) == n
            assert min(c) >= 1 and max(c) - min(c) <= 1
            assert c == sorted(c)


def test_split_counts_rejects_too_many_modules():
    with pytest.raises(ValueError, match="exceeds"):
        split_counts(3, 4)


def _brute_force_balanced(costs, k):
    """Lexicographically earliest boundaries among partitions with the minimal max cost."""
    n = len(costs)
    best, arg = None, None
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = (0,) + cuts + (n,)
        worst = max(sum(costs[a:b]) for a, b in zip(bounds, bounds[1:]))
        if best is None or worst < best:
            best, arg = worst, bounds
    return [slice(a, b) for a, b in zip(arg, arg[1:])]


def test_balanced_tie_breaks_to_earliest_boundary():
    assert split_balanced_memory([4, 4, 1, 1, 1, 1], 2) == [slice(0, 1), slice(1, 6)]


def test_balanced_single_module_covers_everything():
    assert split_balanced_memory([3, 1, 4, 1, 5], 1) == [slice(0, 5)]


@settings(max_examples=150, deadline=None)
@given(costs=st.lists(st.integers(1, 20), min_size=1, max_size=9), data=st.data())
def test_balanced_matches_exhaustive_search(costs, data):
    k = data.draw(st.integers(1, len(costs)))
    assert split_balanced_memory(costs, k) == _brute_force_balanced(costs, k)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 30), data=st.data())
def test_balanced_with_uniform_costs_is_an_equal_split(n, data):
    k = data.draw(st.integers(1, n))
    slices = split_balanced_memory([7] * n, k)
    assert max(s.stop - s.start for s in slices) == max(split_counts(n, k))


def test_interpolate_lambdas():
    assert interpolate_lambdas(0, 1, 1, 0, 4) == [(0, 1), (0.5, 0.5), (1, 0)]
    assert interpolate_lambdas(2, 2, 2, 2, 6) == [(2, 2)] * 5
    assert interpolate_lambdas(0.3, 0.7, 9, 9, 2) == [(0.3, 0.7)]
    with pytest.raises(ValueError):
        interpolate_lambdas(-1, 0, 0, 0, 3)


def test_alpha_beta_grid_is_exact():
    for a in np.linspace(0, 5, 11):
        for b in np.linspace(0, 1, 11):
            l1, l2 = alpha_beta_to_lambdas(a, b)
            assert l1 == a * (1 - b) and l2 == a * b
    assert alpha_beta_to_lambdas(2, 0.25) == (1.5, 0.5)
    with pytest.raises(ValueError, match="beta"):
        alpha_beta_to_lambdas(1, 1.5)


def test_resnet_templates_chain_and_count():
    for name, blocks in RESNET_DEPTHS.items():
        if blocks > 5:
            continue
        g = build_template(name, (3, 16, 16), 10, widths=(4, 8, 8))
        assert len(g) == 1 + 3 * blocks
        assert g.layers[-1].out_shape == (8, 4, 4)
        assert g.head.out_shape == (10,)


def test_resnet110_has_55_basic_layers():
    assert len(resnet(18, widths=(2, 2, 2))) == 55


def test_graph_rejects_broken_chain():
    g = mlp(6, (4, 4), 3)
    from locallearn.graph import LayerGraph
    with pytest.raises(ValueError, match="expects"):
        LayerGraph(g.layers[::-1], g.head, (6,), 3)


def test_local_modules_partition_and_last_has_no_aux():
    g = build_template("resnet8", (3, 16, 16), 10, widths=(4, 8, 8))
    slices = counts_to_slices(split_counts(len(g), 3))
    mods = build_local_modules(g, slices, interpolate_lambdas(1, 1, 0, 1, 3))
    assert sum(len(m.layers) for m in mods[:-1]) + len(mods[-1].layers) - 1 == len(g)
    assert mods[-1].is_last and mods[-1].aux_modules() == []
    assert mods[0].decoder is not None and mods[1].decoder is None
    assert all(m.label_head is not None for m in mods[:-1])


def test_zero_lambda1_builds_no_decoder():
    g = mlp(6, (4, 4, 4), 3)
    mods = build_local_modules(g, counts_to_slices([1, 1, 1]), [(0, 1), (0, 1)], image_shape=(6,))
    assert all(m.decoder is None for m in mods[:-1])
