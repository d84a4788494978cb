import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from locallearn import autodiff as ad
from locallearn.autodiff import Parameter, Tensor

from fdcheck import check_gradients, numeric_grad
from gradcases import CASES, all_cases

GRAD_TOL = 1e-4


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    for i in range(4):
        rng = np.random.default_rng([7, i, sum(map(ord, name))])
        build, tensors = CASES[name](rng)
        assert check_gradients(build, tensors) < GRAD_TOL, f"{name} case {i}"


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 5), d=st.integers(1, 5))
def test_linear_relu_chain_gradient(seed, n, d):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(n, d)), requires_grad=True)
    w1, w2 = Parameter(rng.normal(size=(4, d))), Parameter(rng.normal(size=(2, 4)))
    y = rng.integers(0, 2, n)

    def build():
        h = ad.relu(ad.linear(x, w1))
        return ad.cross_entropy(ad.linear(h, w2), y)
    assert check_gradients(build, [x, w1, w2]) < GRAD_TOL


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.backward(ad.tsum(ad.add(y, y)))
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.scale(x, 2.0))


def test_shape_errors_name_the_op():
    with pytest.raises(ValueError, match=r"matmul: incompatible shapes \(2, 3\) and \(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_no_grad_records_nothing():
    w = Parameter(np.ones((2, 2)))
    with ad.no_grad():
        out = ad.linear(Tensor(np.ones((1, 2))), w)
    assert not out.requires_grad and out._backward is None


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        w = Parameter(np.ones(2))
        seen["req"] = ad.mul(w, w).requires_grad

    with ad.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["req"] is True


def test_detach_cuts_the_tape():
    w = Parameter(np.array([2.0]))
    h = ad.mul(w, w)
    d = ad.detach(h)
    assert not d.requires_grad
    ad.backward(ad.tsum(ad.mul(d, d)))
    np.testing.assert_array_equal(w.grad, [0.0])


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 6, 6))
    grads = []
    for _ in range(2):
        w = Parameter(np.random.default_rng(1).normal(size=(3, 2, 3, 3)))
        ad.backward(ad.tsum(ad.relu(ad.conv2d(Tensor(x), w, stride=2))))
        grads.append(w.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w), stride=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 3, 3))
    for n in range(2):
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_upsample_same_size_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 2, 4, 4))
    np.testing.assert_array_equal(ad.upsample_bilinear(Tensor(x), (4, 4)).data, x)


def test_upsample_preserves_constants():
    out = ad.upsample_bilinear(Tensor(np.full((1, 1, 3, 5), 0.7)), (7, 4)).data
    np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-15)


def test_batch_norm_eval_uses_running_stats():
    x = np.random.default_rng(0).normal(size=(5, 3))
    g, b = Parameter(np.ones(3)), Parameter(np.zeros(3))
    rm, rv = np.array([1.0, 0.0, -1.0]), np.array([4.0, 1.0, 0.25])
    out = ad.batch_norm(Tensor(x), g, b, rm, rv, training=False).data
    np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv + 1e-5))


def test_batch_norm_running_update_uses_unbiased_variance():
    x = np.random.default_rng(0).normal(size=(8, 2))
    rm, rv = np.zeros(2), np.ones(2)
    ad.batch_norm(Tensor(x), Parameter(np.ones(2)), Parameter(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(0, ddof=1))


def test_dropout_mask_is_keyed_and_reproducible():
    a = ad.dropout_mask((100,), 0.5, seed=1, step=3, layer_id=2)
    np.testing.assert_array_equal(a, ad.dropout_mask((100,), 0.5, seed=1, step=3, layer_id=2))
    assert not np.array_equal(a, ad.dropout_mask((100,), 0.5, seed=1, step=4, layer_id=2))
    assert not np.array_equal(a, ad.dropout_mask((100,), 0.5, seed=1, step=3, layer_id=3))
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_sigmoid_never_saturates_to_the_boundary():
    s = ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert 0.0 < s[0] and s[1] < 1.0
    assert np.isfinite(ad.binary_cross_entropy(Tensor(s), np.array([1.0, 0.0])).item())


def test_cross_entropy_matches_scalar_formula():
    rng = np.random.default_rng(1)
    z, y = rng.normal(size=(4, 3)), np.array([0, 2, 1, 2])
    ref = np.mean([-(z[i, y[i]] - np.log(np.exp(z[i]).sum())) for i in range(4)])
    assert ad.cross_entropy(Tensor(z), y).item() == pytest.approx(ref, rel=1e-12)


def test_tracker_counts_and_releases():
    x = Tensor(np.ones((4, 5)), requires_grad=True)
    with ad.track_memory() as tr:
        h = ad.relu(x)            # saves a mask: 20
        e = ad.exp(h)             # saves output: 20
        loss = ad.tsum(e)
        assert tr.live == 40
        ad.backward(loss)
    assert tr.peak == 40 and tr.live == 0


def test_tracker_ignores_parameters():
    w = Parameter(np.ones((3, 4)))
    x = Tensor(np.ones((2, 4)))
    with ad.track_memory() as tr:
        out = ad.linear(x, w)     # keeps x only
        ad.backward(ad.tsum(out))
    assert tr.peak == 8


def test_numeric_grad_oracle_on_known_function():
    a = np.array([1.0, 2.0, -3.0])
    np.testing.assert_allclose(numeric_grad(lambda: float((a ** 3).sum()), a), 3 * a ** 2, rtol=1e-8)


def test_randomised_suite_size():
    assert sum(1 for _ in all_cases(4)) >= 100
