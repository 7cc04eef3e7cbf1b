import json

import numpy as np
from django.test import SimpleTestCase
from scipy import special

from lab.exceptions import UsageError
from lab.services.controllers import (
    FuncDynParams,
    NormBounds,
    PolicyNet,
    funcdyn_threshold,
    calibrate_funcdyn,
    policynet_labels,
    policynet_train,
    recalibrate_threshold,
    route_fixed,
    route_funcdyn,
    route_policynet,
)
from lab.services.econ import CLOUD, EDGE, CostParams, LatencyParams, TokenParams, step_cost, step_latency
from lab.services.net_model import BAD, GOOD, MBIT, MID, MS, REGIMES, NetworkState


def calibration_rows(rng, n, edge_wrong, lam=10.0):
    """Counterfactual rows over independent uniform link states with default economics"""
    latency, cost, norm = LatencyParams(), CostParams(), NormBounds()
    cloud_tokens = TokenParams().cloud_tokens(2)
    rows = []
    for _ in range(n):
        state = NetworkState(rtt=rng.uniform(20, 130) * MS, bw=rng.uniform(5, 200) * MBIT)
        score = rng.normal(0.0, 1.5)
        q_edge = 0.0 if rng.uniform() < edge_wrong(score) else 1.0
        c_edge = step_cost(step_latency(EDGE, latency, state), 0, cost)
        c_cloud = step_cost(step_latency(CLOUD, latency, state), cloud_tokens, cost)
        rows.append((score, q_edge - lam * c_edge, 1.0 - lam * c_cloud,
                     norm.normalize(state.rtt, 'rtt'), norm.normalize(state.bw, 'bw'), 0.5, 1.0 - q_edge))
    return np.array(rows)


class FixedThresholdTests(SimpleTestCase):

    def test_edge_at_or_above_threshold(self):
        self.assertEqual(route_fixed(1.0, 1.0).choice, EDGE)
        self.assertEqual(route_fixed(1.5, 1.0).choice, EDGE)
        self.assertEqual(route_fixed(0.99, 1.0).choice, CLOUD)
        self.assertEqual(route_fixed(-1e9, float('-inf')).choice, EDGE)
        self.assertEqual(route_fixed(1e9, float('inf')).choice, CLOUD)

    def test_decision_survives_monotone_rescaling(self):
        rng = np.random.default_rng(5)
        transforms = (np.exp, lambda x: 3.0 * x - 7.0, np.arctan, lambda x: x ** 3)
        for s, tau in rng.normal(0.0, 2.0, size=(500, 2)):
            expected = route_fixed(s, tau).choice
            for transform in transforms:
                self.assertEqual(route_fixed(transform(s), transform(tau)).choice, expected)
            self.assertEqual(route_fixed(tau, tau).choice, EDGE)


class NormBoundsTests(SimpleTestCase):

    def test_normalize_clips_to_unit_interval(self):
        norm = NormBounds()
        self.assertAlmostEqual(norm.normalize(75 * MS, 'rtt'), 0.5)
        self.assertEqual(norm.normalize(500 * MS, 'rtt'), 1.0)
        self.assertEqual(norm.normalize(1 * MBIT, 'bw'), 0.0)

    def test_bounds_must_be_ordered(self):
        with self.assertRaises(UsageError):
            NormBounds(score=(1.0, 1.0))


class FuncDynTests(SimpleTestCase):

    def test_threshold_formula(self):
        params = FuncDynParams(tau0=4.0, a_rtt=1.0, b_bw=0.5, g_hist=0.5)
        state = NetworkState(rtt=75 * MS, bw=102.5 * MBIT)
        # rtt_norm = 0.5, bw_norm = 0.5
        self.assertAlmostEqual(funcdyn_threshold(params, state, 0.6), 4.0 - 0.5 + 0.25 - 0.3)

    def test_threshold_moves_with_the_link(self):
        params = FuncDynParams()
        good = NetworkState(rtt=20 * MS, bw=200 * MBIT)
        bad = NetworkState(rtt=130 * MS, bw=5 * MBIT)
        self.assertGreater(funcdyn_threshold(params, good, 0.5), funcdyn_threshold(params, bad, 0.5))
        decision = route_funcdyn(3.0, params, bad, 0.5)
        self.assertEqual(decision.choice, EDGE)
        self.assertAlmostEqual(decision.threshold, 4.0 - 1.0 - 0.25)

    def test_threshold_is_monotone_in_each_input(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            a, b, g = rng.uniform(0.01, 3.0, size=3)
            params = FuncDynParams(tau0=rng.normal(0.0, 3.0), a_rtt=a, b_bw=b, g_hist=g)
            rtt = rng.uniform(20, 120) * MS
            bw = rng.uniform(5, 190) * MBIT
            q_hat = rng.uniform(0.0, 0.9)
            base = funcdyn_threshold(params, NetworkState(rtt=rtt, bw=bw), q_hat)
            self.assertLess(funcdyn_threshold(params, NetworkState(rtt=rtt + 5 * MS, bw=bw), q_hat), base)
            self.assertGreater(funcdyn_threshold(params, NetworkState(rtt=rtt, bw=bw + 5 * MBIT), q_hat), base)
            self.assertLess(funcdyn_threshold(params, NetworkState(rtt=rtt, bw=bw), q_hat + 0.1), base)

    def test_negative_coefficients_rejected(self):
        with self.assertRaises(UsageError):
            FuncDynParams(a_rtt=-1.0)

    def test_calibration_with_too_few_records_keeps_coefficients(self):
        rows = np.array([(float(i), 0.0, 1.0, 0.5, 0.5, 0.5, 1.0) for i in range(10)])
        with self.assertLogs('lab.services.controllers', level='WARNING'):
            fitted = calibrate_funcdyn(rows, FuncDynParams())
        self.assertEqual((fitted.a_rtt, fitted.b_bw), (1.0, 0.5))

    def test_calibration_keeps_coefficients_when_the_cloud_gain_rises_with_the_score(self):
        rows = calibration_rows(np.random.default_rng(3), 500, edge_wrong=lambda s: special.expit(2.0 * s))
        with self.assertLogs('lab.services.controllers', level='WARNING'):
            fitted = calibrate_funcdyn(rows, FuncDynParams())
        self.assertEqual((fitted.a_rtt, fitted.b_bw), (1.0, 0.5))

    def test_calibration_makes_the_threshold_follow_the_link(self):
        rows = calibration_rows(np.random.default_rng(0), 4000, edge_wrong=lambda s: special.expit(-2.0 * s))
        fitted = calibrate_funcdyn(rows, FuncDynParams())
        self.assertGreater(fitted.a_rtt, 0.0)
        self.assertGreater(fitted.b_bw, 0.0)
        self.assertTrue(np.isfinite(fitted.tau0))
        good, mid, bad = (funcdyn_threshold(fitted, REGIMES[name].midpoint, 0.5) for name in (GOOD, MID, BAD))
        self.assertGreater(good, mid)
        self.assertGreater(mid, bad)


class RecalibrationTests(SimpleTestCase):

    def test_identity_when_scores_do_not_change(self):
        scores = np.arange(10.0)
        self.assertAlmostEqual(recalibrate_threshold(scores, scores, 4.0), 4.0)

    def test_acceptance_share_is_preserved(self):
        old = np.arange(10.0)
        new = 2.0 * old + 3.0
        tau = recalibrate_threshold(old, new, 4.0)
        self.assertEqual(np.mean(new >= tau), np.mean(old >= 4.0))

    def test_thresholds_outside_the_sample_shift_with_the_edges(self):
        old = np.arange(10.0)
        new = old + 3.0
        self.assertAlmostEqual(recalibrate_threshold(old, new, -2.0), 1.0)
        self.assertAlmostEqual(recalibrate_threshold(old, new, 12.0), 15.0)

    def test_mismatched_samples(self):
        with self.assertRaises(UsageError):
            recalibrate_threshold([1.0, 2.0], [1.0], 1.5)


class PolicyNetTests(SimpleTestCase):

    def test_default_architecture(self):
        self.assertEqual(PolicyNet().parameter_count, 4 * 50 + 50 + 50 * 50 + 50 + 50 + 1)
        with self.assertRaises(UsageError):
            PolicyNet(widths=(3, 10, 1))
        with self.assertRaises(UsageError):
            PolicyNet(activation='relu6')

    def test_gradients_match_finite_differences(self):
        net = PolicyNet(widths=(4, 5, 3, 1), seed=2)
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, size=(8, 4))
        y = rng.integers(0, 2, size=8).astype(float)
        _, grad_w, grad_b = net.loss_and_gradients(x, y)
        h = 1e-6
        for layer in range(len(net.weights)):
            for index in np.ndindex(net.weights[layer].shape):
                plus, minus = net.copy(), net.copy()
                plus.weights[layer][index] += h
                minus.weights[layer][index] -= h
                numeric = (plus.loss_and_gradients(x, y)[0] - minus.loss_and_gradients(x, y)[0]) / (2 * h)
                self.assertAlmostEqual(numeric, grad_w[layer][index], delta=1e-7)
            for i in range(net.biases[layer].size):
                plus, minus = net.copy(), net.copy()
                plus.biases[layer][i] += h
                minus.biases[layer][i] -= h
                numeric = (plus.loss_and_gradients(x, y)[0] - minus.loss_and_gradients(x, y)[0]) / (2 * h)
                self.assertAlmostEqual(numeric, grad_b[layer][i], delta=1e-7)

    def test_half_probability_routes_to_edge(self):
        net = PolicyNet(widths=(4, 3, 1))
        net.weights[-1][:] = 0.0
        state = NetworkState(rtt=50 * MS, bw=50 * MBIT)
        decision = route_policynet(net, state, 1.0, 0.5)
        self.assertEqual(decision.threshold, 0.5)
        self.assertEqual(decision.choice, EDGE)
        net.biases[-1][:] = 1.0
        self.assertEqual(route_policynet(net, state, 1.0, 0.5).choice, CLOUD)

    def test_checkpoint_restores_identical_predictions(self):
        net = PolicyNet(widths=(4, 6, 1), norm=NormBounds(score=(-2.0, 3.0)), seed=4)
        restored = PolicyNet.from_checkpoint(json.loads(json.dumps(net.to_checkpoint())))
        x = np.random.default_rng(5).uniform(0, 1, size=(5, 4))
        np.testing.assert_array_equal(restored.predict(x), net.predict(x))
        self.assertEqual(restored.norm, net.norm)
        with self.assertRaises(UsageError):
            PolicyNet.from_checkpoint({'format': 'other'})

    def test_labels_prefer_edge_on_ties(self):
        paired = [(1.0, 0.0, 1.0, 0.0), (0.0, 0.0, 1.0, 0.01), (1.0, 0.0, 1.0, 0.01)]
        self.assertEqual(policynet_labels(paired, lam=10.0), [0, 1, 0])
        with self.assertRaises(UsageError):
            policynet_labels([], lam=10.0)

    def test_training_learns_a_score_rule(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(0, 1, size=(200, 4))
        y = (x[:, 2] < 0.5).astype(int)
        result = policynet_train(PolicyNet(widths=(4, 8, 1), seed=1), x, y, lr=0.5, epochs=100, batch=20)
        self.assertFalse(result.degenerate)
        self.assertLess(result.losses[-1], result.losses[0])
        accuracy = np.mean((result.net.predict(x) > 0.5) == y.astype(bool))
        self.assertGreater(accuracy, 0.9)

    def test_single_class_dataset_warns(self):
        x = np.random.default_rng(7).uniform(0, 1, size=(10, 4))
        with self.assertLogs('lab.services.controllers', level='WARNING'):
            result = policynet_train(PolicyNet(widths=(4, 3, 1)), x, np.zeros(10), epochs=2)
        self.assertTrue(result.degenerate)
        with self.assertRaises(UsageError):
            policynet_train(PolicyNet(widths=(4, 3, 1)), x, np.full(10, 2))
