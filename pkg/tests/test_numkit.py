import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relnet import numkit as nk


def reference_conv(x, k, stride):
    # direct nested loops, one output cell at a time
    C, H, W = x.shape
    F, _, kh, kw = k.shape
    oh, ow = (H - kh) // stride + 1, (W - kw) // stride + 1
    out = np.zeros((F, oh, ow))
    for f in range(F):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(C):
                    for a in range(kh):
                        for b in range(kw):
                            acc += x[c, i * stride + a, j * stride + b] * k[f, c, a, b]
                out[f, i, j] = acc
    return out


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nk.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(nk.softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)

    def test_large_logit(self):
        np.testing.assert_allclose(nk.softmax([1000.0, 0.0]), [1.0, 0.0], atol=1e-12)

    def test_empty_raises(self):
        with pytest.raises(nk.DimensionError):
            nk.softmax([])

    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
    def test_is_distribution(self, z):
        q = nk.softmax(z)
        assert np.all(q >= 0)
        assert abs(q.sum() - 1) < 1e-12

    @given(arrays(np.float64, 5, elements=st.floats(-20, 20)), st.floats(-100, 100))
    def test_shift_invariant(self, z, c):
        np.testing.assert_allclose(nk.softmax(z), nk.softmax(z + c), atol=1e-12)

    def test_backward_matches_differences(self, rng):
        z, dq = rng.normal(size=6), rng.normal(size=6)
        analytic = nk.softmax_backward(nk.softmax(z), dq)
        h = 1e-6
        numeric = [(dq @ nk.softmax(z + h * e) - dq @ nk.softmax(z - h * e)) / (2 * h) for e in np.eye(6)]
        np.testing.assert_allclose(analytic, numeric, atol=1e-9)


class TestCrossEntropy:
    def test_certain(self):
        assert nk.cross_entropy([1.0, 0.0], 0) < 1e-11

    def test_uniform4(self):
        assert nk.cross_entropy(np.full(4, 0.25), 2) == pytest.approx(math.log(4), abs=1e-11)

    def test_hand(self):
        assert nk.cross_entropy([0.25, 0.75], 1) == pytest.approx(0.2877, abs=1e-4)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            nk.cross_entropy([0.5, 0.5], 2)
        with pytest.raises(IndexError):
            nk.batch_cross_entropy(np.full((2, 2), 0.5), np.array([0, -1]))

    def test_batch_backward(self, rng):
        q = nk.softmax(rng.normal(size=(4, 3)))
        t = np.array([0, 2, 1, 1])
        dq = nk.batch_cross_entropy_backward(q, t, 0.5)
        h = 1e-7
        for i in range(4):
            for j in range(3):
                e = np.zeros_like(q)
                e[i, j] = h
                num = 0.5 * (nk.batch_cross_entropy(q + e, t).sum() - nk.batch_cross_entropy(q - e, t).sum()) / (2 * h)
                assert dq[i, j] == pytest.approx(num, rel=1e-6, abs=1e-9)


class TestAffineRelu:
    def test_identity(self):
        np.testing.assert_array_equal(nk.affine([1.0, 2.0, 3.0], np.eye(3), np.zeros(3)), [1, 2, 3])

    def test_bias_only(self):
        np.testing.assert_array_equal(nk.affine([4.0, 5.0, 6.0], np.zeros((2, 3)), np.array([5.0, 7.0])), [5, 7])

    def test_hand(self):
        W = np.array([[1.0, 1.0], [1.0, -1.0]])
        np.testing.assert_array_equal(nk.affine([3.0, 4.0], W, np.zeros(2)), [7, -1])

    def test_shape_mismatch(self):
        with pytest.raises(nk.DimensionError):
            nk.affine(np.ones(3), np.ones((2, 4)), np.zeros(2))

    def test_batch_rows(self, rng):
        x, W, b = rng.normal(size=(5, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
        batched = nk.affine(x, W, b)
        for i in range(5):
            np.testing.assert_allclose(batched[i], W @ x[i] + b, atol=1e-14)

    def test_backward(self, rng):
        x, W, dy = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=(4, 2))
        dx, dW, db = nk.affine_backward(x, W, dy)
        np.testing.assert_allclose(dx, dy @ W)
        np.testing.assert_allclose(dW, dy.T @ x)
        np.testing.assert_allclose(db, dy.sum(0))

    def test_relu(self):
        np.testing.assert_array_equal(nk.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
        np.testing.assert_array_equal(nk.relu(-np.ones(4)), np.zeros(4))
        x = np.array([0.5, 3.0])
        np.testing.assert_array_equal(nk.relu(x), x)

    @given(arrays(np.float64, 6, elements=st.floats(-1e6, 1e6)))
    def test_relu_idempotent(self, x):
        np.testing.assert_array_equal(nk.relu(nk.relu(x)), nk.relu(x))

    def test_logistic_bounds(self):
        assert nk.logistic(0.0) == 0.5
        assert 0.0 <= nk.logistic(-800.0) < 1e-300
        assert nk.logistic(40.0) < 1.0


class TestConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 6, 7))
        np.testing.assert_array_equal(nk.conv2d(x, np.ones((1, 1, 1, 1))), x)

    def test_sum_kernel(self):
        out = nk.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 2, 2)))
        assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4.0

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_against_loops(self, rng, stride):
        x, k = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(nk.conv2d(x, k, stride=stride), reference_conv(x, k, stride), atol=1e-12)

    def test_batched_and_bias(self, rng):
        x, k, b = rng.normal(size=(3, 2, 8, 8)), rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
        out = nk.conv2d(x, k, b, stride=2)
        for i in range(3):
            np.testing.assert_allclose(out[i], reference_conv(x[i], k, 2) + b[:, None, None], atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(nk.DimensionError):
            nk.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))

    def test_backward_matches_differences(self, rng):
        x, k = rng.normal(size=(2, 2, 7, 7)), rng.normal(size=(3, 2, 3, 3))
        probe = rng.normal(size=nk.conv2d(x, k, stride=2).shape)
        dx, dk, db = nk.conv2d_backward(x, k, probe, stride=2)
        h = 1e-6
        for arr, grad in ((x, dx), (k, dk)):
            for idx in [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(10)]:
                orig = arr[idx]
                arr[idx] = orig + h
                fp = np.sum(probe * nk.conv2d(x, k, stride=2))
                arr[idx] = orig - h
                fm = np.sum(probe * nk.conv2d(x, k, stride=2))
                arr[idx] = orig
                assert grad[idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-8)
        np.testing.assert_allclose(db, probe.sum(axis=(0, 2, 3)))


class TestSgd:
    def test_single_step(self):
        store = nk.ParamStore()
        store.add("w", np.array([1.0]))
        store.grads["w"][:] = 2.0
        nk.sgd_step(store, 0.1)
        assert store["w"][0] == pytest.approx(0.8, abs=1e-15)
        assert store.grads["w"][0] == 0.0

    def test_zero_gradient(self):
        store = nk.ParamStore()
        store.add("w", np.array([1.5, -2.0]))
        nk.sgd_step(store, 0.3)
        np.testing.assert_array_equal(store["w"], [1.5, -2.0])

    def test_two_steps(self):
        store = nk.ParamStore()
        store.add("w", np.array([1.0]))
        for _ in range(2):
            store.grads["w"][:] = 0.5
            nk.sgd_step(store, 0.1)
        assert store["w"][0] == pytest.approx(1.0 - 2 * 0.1 * 0.5, abs=1e-15)

    def test_frozen_untouched(self):
        store = nk.ParamStore()
        store.add("w", np.array([1.0]), frozen=True)
        store.grads["w"][:] = 3.0
        nk.sgd_step(store, 0.1)
        assert store["w"][0] == 1.0

    def test_weight_decay(self):
        store = nk.ParamStore()
        store.add("w", np.array([2.0]))
        nk.sgd_step(store, 0.1, weight_decay=0.5)
        assert store["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    @pytest.mark.parametrize("lr", [0.0, -0.1])
    def test_bad_rate(self, lr):
        store = nk.ParamStore()
        store.add("w", np.zeros(1))
        with pytest.raises(nk.ConfigurationError):
            nk.sgd_step(store, lr)


class TestFiniteDiff:
    def test_quadratic(self, rng):
        store = nk.ParamStore()
        store.add("theta", rng.normal(size=(3, 4)))
        store.grads["theta"][...] = store["theta"]
        report = nk.finite_diff_check(lambda s: 0.5 * np.sum(s["theta"] ** 2), store, h=1e-5, tol=1e-8)
        assert report["theta"].passed
        assert report["theta"].checked == 12

    def test_softmax_cross_entropy(self, rng):
        store = nk.ParamStore()
        store.add("z", rng.normal(size=7))

        def loss(s):
            return nk.cross_entropy(nk.softmax(s["z"]), 3)

        q = nk.softmax(store["z"])
        store.grads["z"][...] = q - np.eye(7)[3]
        report = nk.finite_diff_check(loss, store, h=1e-5, tol=1e-5)
        assert report["z"].max_rel_error < 1e-5

    def test_detects_wrong_gradient(self, rng):
        store = nk.ParamStore()
        store.add("theta", rng.normal(size=4))
        store.grads["theta"][...] = 2 * store["theta"]
        report = nk.finite_diff_check(lambda s: 0.5 * np.sum(s["theta"] ** 2), store)
        assert not report["theta"].passed

    def test_bad_step(self):
        store = nk.ParamStore()
        store.add("w", np.zeros(1))
        with pytest.raises(nk.ConfigurationError):
            nk.finite_diff_check(lambda s: 0.0, store, h=1.0)
