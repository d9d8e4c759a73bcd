import numpy as np
import pytest

from apgcn import nn


def central_diff(f, x, h=1e-5):
    """Numerical gradient of scalar f at x, coordinate by coordinate."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f()
        flat[j] = orig - h
        fm = f()
        flat[j] = orig
        gflat[j] = (fp - fm) / (2 * h)
    return g


def rel_err(num, ana):
    denom = max(np.abs(num).max(), np.abs(ana).max(), 1e-10)
    return np.abs(num - ana).max() / denom


class TestAffine:
    def test_identity_input(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = nn.affine_forward(np.eye(2), w, np.zeros(2))
        np.testing.assert_array_equal(out, w)

    def test_bias_broadcast(self):
        out = nn.affine_forward(np.zeros((3, 2)), np.ones((2, 2)),
                                np.array([5.0, 6.0]))
        np.testing.assert_array_equal(out, np.tile([5.0, 6.0], (3, 1)))

    def test_matches_triple_loop_oracle(self, rng):
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        naive = np.zeros((4, 2))
        for i in range(4):
            for j in range(2):
                acc = b[j]
                for k in range(3):
                    acc += x[i, k] * w[k, j]
                naive[i, j] = acc
        np.testing.assert_allclose(nn.affine_forward(x, w, b), naive, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            nn.affine_forward(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(2))

    def test_backward_zero_upstream(self):
        dx, dw, db = nn.affine_backward(np.zeros((3, 2)), np.zeros((3, 4)),
                                        np.zeros((4, 2)))
        assert not dx.any() and not dw.any() and not db.any()

    def test_backward_scalar_chain_rule(self):
        dx, dw, db = nn.affine_backward(np.array([[1.0]]), np.array([[2.0]]),
                                        np.array([[3.0]]))
        assert dx[0, 0] == 3.0 and dw[0, 0] == 2.0 and db[0] == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        x, w, b = r.normal(size=(5, 4)), r.normal(size=(4, 3)), r.normal(size=3)
        upstream = r.normal(size=(5, 3))

        def loss():
            return float((nn.affine_forward(x, w, b) * upstream).sum())

        dx, dw, db = nn.affine_backward(upstream, x, w)
        assert rel_err(central_diff(loss, x), dx) < 1e-6
        assert rel_err(central_diff(loss, w), dw) < 1e-6
        assert rel_err(central_diff(loss, b), db) < 1e-6


class TestElementwise:
    def test_fixed_points(self):
        assert nn.sigmoid(np.array(0.0)) == 0.5
        assert nn.relu(np.array(-3.0)) == 0.0

    def test_sigmoid_stable_extremes(self):
        assert nn.sigmoid(np.array(-1000.0)) == 0.0
        assert nn.sigmoid(np.array(1000.0)) == 1.0

    def test_relu_backward_finite_differences(self, rng):
        x = rng.normal(size=(6, 4))
        x[np.abs(x) < 1e-3] += 0.1          # stay away from the kink
        upstream = rng.normal(size=(6, 4))

        def loss():
            return float((nn.relu(x) * upstream).sum())

        assert rel_err(central_diff(loss, x), nn.relu_backward(upstream, x)) < 1e-6

    def test_sigmoid_backward_finite_differences(self, rng):
        x = rng.normal(size=(6, 4))
        upstream = rng.normal(size=(6, 4))

        def loss():
            return float((nn.sigmoid(x) * upstream).sum())

        ana = nn.sigmoid_backward(upstream, nn.sigmoid(x))
        assert rel_err(central_diff(loss, x), ana) < 1e-6


class TestDropout:
    def test_rate_zero_identity(self, rng):
        x = rng.normal(size=(4, 4))
        out, mask = nn.dropout_forward(x, 0.0, rng)
        assert out is x and mask is None
        np.testing.assert_array_equal(nn.dropout_backward(x, mask), x)

    def test_eval_mode_identity(self, rng):
        x = rng.normal(size=(4, 4))
        out, mask = nn.dropout_forward(x, 0.5, rng, train=False)
        assert out is x and mask is None

    def test_expectation_recovers_input(self, rng):
        x = rng.random((2, 3)) + 0.5
        rate = 0.4
        n_draws = 10000
        acc = np.zeros_like(x)
        for _ in range(n_draws):
            out, _ = nn.dropout_forward(x, rate, rng)
            acc += out
        mean = acc / n_draws
        se = x / (1 - rate) * np.sqrt(rate * (1 - rate) / n_draws)
        assert np.all(np.abs(mean - x) < 3 * se)

    def test_backward_replays_mask(self, rng):
        x = rng.normal(size=(5, 5))
        _, mask = nn.dropout_forward(x, 0.5, rng)
        upstream = rng.normal(size=(5, 5))
        np.testing.assert_array_equal(nn.dropout_backward(upstream, mask),
                                      upstream * mask)

    def test_rate_validation(self, rng):
        with pytest.raises(ValueError, match="rate"):
            nn.dropout_forward(np.zeros(3), 1.0, rng)


class TestSoftmaxCrossEntropy:
    def test_uniform_softmax(self):
        loss, _ = nn.softmax_cross_entropy(np.zeros((1, 2)), np.array([0]),
                                           np.array([0]))
        assert loss == pytest.approx(np.log(2), abs=1e-12)

    def test_stabilized_no_overflow(self):
        loss, dlogits = nn.softmax_cross_entropy(np.array([[1000.0, 0.0]]),
                                                 np.array([0]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(dlogits))

    def test_shift_invariance(self, rng):
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, 6)
        mask = np.array([0, 2, 5])
        base, _ = nn.softmax_cross_entropy(logits, labels, mask)
        shifted, _ = nn.softmax_cross_entropy(logits + 123.456, labels, mask)
        assert abs(base - shifted) < 1e-9

    def test_dlogits_zero_outside_mask(self, rng):
        logits = rng.normal(size=(6, 3))
        _, dlogits = nn.softmax_cross_entropy(logits, rng.integers(0, 3, 6),
                                              np.array([1, 4]))
        assert not dlogits[[0, 2, 3, 5]].any()

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        logits = r.normal(size=(8, 3))
        labels = r.integers(0, 3, 8)
        mask = np.array([0, 1, 3, 6, 7])

        def loss():
            return nn.softmax_cross_entropy(logits, labels, mask)[0]

        _, dlogits = nn.softmax_cross_entropy(logits, labels, mask)
        assert rel_err(central_diff(loss, logits), dlogits) < 1e-6

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="empty mask"):
            nn.softmax_cross_entropy(np.zeros((2, 2)), np.array([0, 1]),
                                     np.array([], dtype=int))

    def test_nan_logits(self):
        with pytest.raises(ValueError, match="non-finite"):
            nn.softmax_cross_entropy(np.array([[np.nan, 0.0]]), np.array([0]),
                                     np.array([0]))


class TestAdam:
    def test_zero_grad_zero_moments_fixed_point(self):
        p = nn.ParamTensor(np.ones((2, 2)))
        nn.adam_step(p, lr=0.1)
        np.testing.assert_array_equal(p.value, np.ones((2, 2)))

    def test_first_step_closed_form(self):
        # constant unit gradient: bias correction gives update lr/(1 + eps)
        p = nn.ParamTensor(np.zeros(4))
        p.grad[...] = 1.0
        nn.adam_step(p, lr=0.01)
        expected = -0.01 * 1.0 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.value, expected, rtol=1e-12)

    def test_decay_only_step_opposes_value(self):
        p = nn.ParamTensor(np.array([2.0, -3.0]), l2=0.008)
        nn.adam_step(p, lr=0.01)
        # effective gradient is 0.016 * value, so the step has opposite sign
        assert p.value[0] < 2.0 and p.value[1] > -3.0

    def test_weight_decay_effective_gradient(self):
        p = nn.ParamTensor(np.array([5.0]), l2=0.008)
        nn.adam_step(p, lr=0.01)
        # first-moment buffer saw g = 2 * 0.008 * 5 = 0.08
        assert p.adam_m[0] == pytest.approx(0.1 * 0.016 * 5.0, rel=1e-12)

    def test_nonfinite_gradient_rejected(self):
        p = nn.ParamTensor(np.zeros(2))
        p.grad[...] = np.inf
        with pytest.raises(nn.DivergenceError):
            nn.adam_step(p, lr=0.01)

    def test_step_counter_and_moments(self, rng):
        p = nn.ParamTensor(rng.normal(size=3))
        for t in range(1, 4):
            p.grad[...] = rng.normal(size=3)
            nn.adam_step(p, lr=0.001)
            assert p.step_count == t
