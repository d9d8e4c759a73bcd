import numpy as np
import pytest

from apgcn import nn
from apgcn.graph import build_operator, propagate
from apgcn.model import (HaltingConfig, ModelParams, SeedFeatures,
                         adaptive_forward, halting_probability,
                         halting_schedule, penalized_loss, penalty_coefficient,
                         propagate_fixed, seed_embeddings, seed_forward)
from conftest import random_graph


def logit(p):
    return float(np.log(p / (1 - p)))


def make_setup(n=15, seed=0, dtype=np.float64, hidden=8):
    g = random_graph(n, p=0.25, seed=seed)
    op = build_operator(g).astype(dtype)
    params = ModelParams.init(np.random.default_rng(seed + 1), g.d_features,
                              g.n_classes, hidden=hidden, dtype=dtype)
    return g, op, params


def constant_halt(params, h):
    """Rig the halting unit to emit the same value for every state."""
    params.halt_w.value[...] = 0.0
    params.halt_b.value[...] = logit(h)


def forward_seeds(g, op, params, cfg):
    z0 = seed_embeddings(g, params, mode="eval")
    return adaptive_forward(op, z0, params, cfg, train=False)


class TestScheduleOracle:
    def test_matches_scalar_reference(self, rng):
        # independent per-node loop over random halting sequences
        for _ in range(200):
            t = rng.integers(1, 8)
            h = rng.random((t, 5)) * 0.5
            eps = float(rng.uniform(0.01, 0.3))
            steps, rem = halting_schedule(h, eps, t)
            for i in range(5):
                cum, k = 0.0, None
                for kk in range(t):
                    if cum + h[kk, i] >= 1 - eps:
                        k = kk + 1
                        break
                    cum += h[kk, i]
                if k is None:
                    k = t
                    cum = h[:t - 1, i].sum()
                assert steps[i] == k
                assert rem[i] == pytest.approx(1.0 - cum, abs=1e-12)

    def test_monotone_in_epsilon(self, rng):
        # same halting values, larger epsilon never increases any step count
        for _ in range(1000):
            h = rng.random((10, 4)) * rng.uniform(0.05, 0.4)
            eps = np.sort(rng.uniform(0.005, 0.5, size=3))
            ks = [halting_schedule(h, e, 10)[0] for e in eps]
            assert np.all(ks[1] <= ks[0]) and np.all(ks[2] <= ks[1])


class TestHaltingProbability:
    def test_neutral_unit_is_half(self):
        _, _, params = make_setup()
        constant_halt(params, 0.5)
        assert halting_probability(np.array([3.0, -2.0, 1.0]), params) == 0.5

    def test_saturation(self):
        _, _, params = make_setup()
        params.halt_w.value[...] = 0.0
        params.halt_b.value[...] = 20.0
        assert halting_probability(np.zeros(3), params) > 0.999999

    def test_matches_scalar_oracle(self, rng):
        _, _, params = make_setup()
        params.halt_w.value[...] = rng.normal(size=params.halt_w.value.shape)
        params.halt_b.value[...] = rng.normal()
        z = rng.normal(size=params.halt_w.value.shape)
        expected = 1.0 / (1.0 + np.exp(-(z @ params.halt_w.value
                                         + params.halt_b.value[0])))
        assert halting_probability(z, params) == pytest.approx(expected, abs=1e-12)


class TestAdaptiveForward:
    def test_immediate_halt(self):
        g, op, params = make_setup()
        constant_halt(params, 0.995)          # h >= 1 - eps at the first step
        cfg = HaltingConfig(max_steps=10, epsilon=0.01)
        combined, trace = forward_seeds(g, op, params, cfg)
        assert np.all(trace.steps == 1)
        np.testing.assert_array_equal(trace.remainder, np.ones(g.n_nodes))
        np.testing.assert_array_equal(trace.weights[0], np.ones(g.n_nodes))
        np.testing.assert_allclose(combined, trace.states[1], atol=1e-12)

    def test_hand_case_two_steps(self):
        # constant halting value 0.6: stop at step 2 with remainder 0.4
        g, op, params = make_setup()
        constant_halt(params, 0.6)
        cfg = HaltingConfig(max_steps=10, epsilon=0.01)
        combined, trace = forward_seeds(g, op, params, cfg)
        assert np.all(trace.steps == 2)
        np.testing.assert_allclose(trace.remainder, 0.4, atol=1e-9)
        np.testing.assert_allclose(trace.weights[0], 0.6, atol=1e-9)
        np.testing.assert_allclose(trace.weights[1], 0.4, atol=1e-9)
        np.testing.assert_allclose(trace.cost, 2.4, atol=1e-9)
        z0, z1, z2 = trace.states
        expected = 0.5 * (0.6 * z1 + 0.4 * z0 + 0.4 * z2 + 0.6 * z1)
        np.testing.assert_allclose(combined, expected, atol=1e-9)

    def test_hand_case_cap_reached(self):
        # constant 0.05 never reaches the threshold within 10 steps
        g, op, params = make_setup()
        constant_halt(params, 0.05)
        cfg = HaltingConfig(max_steps=10, epsilon=0.01)
        _, trace = forward_seeds(g, op, params, cfg)
        assert np.all(trace.steps == 10)
        np.testing.assert_allclose(trace.remainder, 1 - 9 * 0.05, atol=1e-9)
        np.testing.assert_allclose(trace.cost, 10.55, atol=1e-9)

    @pytest.mark.parametrize("seed", range(8))
    def test_trace_invariants(self, seed):
        g, op, params = make_setup(seed=seed)
        r = np.random.default_rng(seed)
        params.halt_w.value[...] = r.normal(0, 2, size=params.halt_w.value.shape)
        params.halt_b.value[...] = r.normal(0, 1)
        cfg = HaltingConfig(max_steps=7, epsilon=0.02)
        _, trace = forward_seeds(g, op, params, cfg)

        assert np.all(trace.steps >= 1) and np.all(trace.steps <= cfg.max_steps)
        assert np.all(trace.remainder > 0) and np.all(trace.remainder <= 1)
        cost = trace.cost
        assert np.all(cost > trace.steps) and np.all(cost <= trace.steps + 1)
        # weights sum to one per node
        np.testing.assert_allclose(trace.weights.sum(axis=0), 1.0, atol=1e-9)
        # schedule consistent with the pure reference on the recorded values
        steps, rem = halting_schedule(trace.halt_values, cfg.epsilon,
                                      cfg.max_steps)
        np.testing.assert_array_equal(steps, trace.steps)
        np.testing.assert_allclose(rem, trace.remainder, atol=1e-12)

    def test_single_step_cap_forces_first_state(self):
        g, op, params = make_setup(seed=3)
        r = np.random.default_rng(0)
        params.halt_w.value[...] = r.normal(size=params.halt_w.value.shape)
        cfg = HaltingConfig(max_steps=1, epsilon=0.01)
        combined, trace = forward_seeds(g, op, params, cfg)
        z0 = seed_embeddings(g, params, mode="eval")
        np.testing.assert_allclose(combined, propagate(op, z0), atol=1e-12)
        assert np.all(trace.steps == 1)

    def test_saturated_unit_equals_one_step_propagation(self):
        g, op, params = make_setup(seed=4)
        params.halt_b.value[...] = 20.0
        cfg = HaltingConfig(max_steps=10, epsilon=0.01)
        combined, trace = forward_seeds(g, op, params, cfg)
        assert np.all(trace.steps == 1)
        z0 = seed_embeddings(g, params, mode="eval")
        np.testing.assert_allclose(combined, propagate_fixed(op, z0, 1),
                                   atol=1e-12)

    def test_train_mode_deterministic_given_seed(self):
        g, op, params = make_setup(seed=5, dtype=np.float32)
        cfg = HaltingConfig(max_steps=5, epsilon=0.01)
        feats = SeedFeatures(g.features, dtype=np.float32)

        def run():
            r = np.random.default_rng(77)
            z0, _ = seed_forward(feats, params, train=True, dropout=0.5, rng=r)
            return adaptive_forward(op, z0, params, cfg, train=True, rng=r,
                                    edge_dropout=0.5)

        c1, t1 = run()
        c2, t2 = run()
        np.testing.assert_array_equal(c1, c2)
        np.testing.assert_array_equal(t1.steps, t2.steps)
        np.testing.assert_array_equal(t1.halt_values, t2.halt_values)

    def test_literal_mode_runs_and_differs(self):
        g, op, params = make_setup(seed=6)
        constant_halt(params, 0.3)
        act, _ = forward_seeds(g, op, params, HaltingConfig(max_steps=8))
        lit, trace = forward_seeds(g, op, params,
                                   HaltingConfig(max_steps=8, p_mode="literal"))
        assert np.any(np.abs(act - lit) > 1e-9)
        # cumulative-sum weights exceed the halting value on non-final steps
        assert trace.weights[0, 0] > 0.3


class TestSeedEmbeddings:
    def test_zero_features_zero_biases(self):
        g, op, params = make_setup(seed=7)
        feats = SeedFeatures(np.zeros_like(g.features), dtype=params.dtype)
        z0, _ = seed_forward(feats, params, train=False, dropout=0.0, rng=None)
        np.testing.assert_array_equal(z0, np.zeros_like(z0))

    def test_eval_deterministic(self):
        g, _, params = make_setup(seed=8)
        a = seed_embeddings(g, params, mode="eval")
        b = seed_embeddings(g, params, mode="eval")
        np.testing.assert_array_equal(a, b)

    def test_matches_dense_composition(self):
        g, _, params = make_setup(seed=9)
        z0 = seed_embeddings(g, params, mode="eval")
        hidden = nn.relu(nn.affine_forward(g.features, params.w1.value,
                                           params.b1.value))
        expected = nn.affine_forward(hidden, params.w2.value, params.b2.value)
        np.testing.assert_allclose(z0, expected, atol=1e-10)

    def test_train_mode_uses_dropout(self):
        g, _, params = make_setup(seed=10)
        a = seed_embeddings(g, params, mode="train",
                            rng=np.random.default_rng(1), dropout=0.5)
        b = seed_embeddings(g, params, mode="eval")
        assert np.any(np.abs(a - b) > 1e-12)


class TestPenalizedLoss:
    def test_alpha_zero_equals_cross_entropy(self):
        g, op, params = make_setup(seed=11)
        cfg = HaltingConfig(max_steps=5, alpha=0.0)
        combined, trace = forward_seeds(g, op, params, cfg)
        mask = np.arange(0, g.n_nodes, 3)
        ce, _ = nn.softmax_cross_entropy(combined, g.labels, mask)
        assert penalized_loss(combined, g.labels, mask, trace, cfg) == ce

    @pytest.mark.parametrize("mode", ["per_train_node", "total"])
    def test_immediate_halt_cost(self, mode):
        # every node stops at step 1 with full remainder: cost 2 per node
        g, op, params = make_setup(seed=12)
        constant_halt(params, 0.999)
        cfg = HaltingConfig(max_steps=5, alpha=0.001, penalty_mode=mode)
        combined, trace = forward_seeds(g, op, params, cfg)
        mask = np.arange(g.n_nodes)
        ce, _ = nn.softmax_cross_entropy(combined, g.labels, mask)
        coef = penalty_coefficient(cfg, len(mask))
        expected = ce + coef * 2.0 * g.n_nodes
        got = penalized_loss(combined, g.labels, mask, trace, cfg)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_matches_trace_recomputation(self, rng):
        g, op, params = make_setup(seed=13)
        params.halt_w.value[...] = rng.normal(size=params.halt_w.value.shape)
        cfg = HaltingConfig(max_steps=6, alpha=0.07)
        combined, trace = forward_seeds(g, op, params, cfg)
        mask = np.arange(1, g.n_nodes, 2)
        ce, _ = nn.softmax_cross_entropy(combined, g.labels, mask)
        recomputed = ce + (cfg.alpha / len(mask)) * float(
            (trace.steps + trace.remainder).sum())
        got = penalized_loss(combined, g.labels, mask, trace, cfg)
        assert got == pytest.approx(recomputed, abs=1e-9)


class TestPropagateFixed:
    def test_zero_steps_identity(self, rng):
        _, op, _ = make_setup(seed=14)
        z = rng.normal(size=(op.n_nodes, 3))
        assert propagate_fixed(op, z, 0) is z

    def test_one_step_matches_propagate(self, rng):
        _, op, _ = make_setup(seed=15)
        z = rng.normal(size=(op.n_nodes, 3))
        np.testing.assert_array_equal(propagate_fixed(op, z, 1),
                                      propagate(op, z))

    def test_three_steps_equals_chaining(self, rng):
        _, op, _ = make_setup(seed=16)
        z = rng.normal(size=(op.n_nodes, 3))
        chained = propagate(op, propagate(op, propagate(op, z)))
        np.testing.assert_allclose(propagate_fixed(op, z, 3), chained,
                                   atol=1e-12)

    def test_negative_rejected(self):
        _, op, _ = make_setup(seed=17)
        with pytest.raises(ValueError):
            propagate_fixed(op, np.zeros((op.n_nodes, 2)), -1)
