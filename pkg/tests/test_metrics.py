import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from divdistill.metrics import (NllCurve, PredictionBatch, accuracy, brier, calibration_bins, dee, ece,
                                ensemble_logits, ensemble_nll_curve, fit_temperature, metric_block, nll,
                                predictive_entropy, temperature_nll)


def softmax(z, tau=1.0):
    e = np.exp((z - z.max(axis=-1, keepdims=True)) / tau)
    return e / e.sum(axis=-1, keepdims=True)


def random_batch(rng, n=30, K=4, scale=2.0):
    return PredictionBatch(softmax(rng.normal(size=(n, K)) * scale), np.eye(K)[rng.integers(0, K, n)])


class TestPredictionBatch:
    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            PredictionBatch([[0.5, 0.6]], [[1.0, 0.0]])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            PredictionBatch([[0.5, 0.5]], [[1.0, 0.0, 0.0]])


class TestPointMetrics:
    def test_accuracy(self, rng):
        assert accuracy(PredictionBatch(np.eye(3), np.eye(3))) == 1.0
        # uniform rows tie-break to class 0
        assert accuracy(PredictionBatch(np.full((4, 3), 1 / 3), np.tile([1.0, 0, 0], (4, 1)))) == 1.0
        b = random_batch(rng)
        oracle = sum(max(range(4), key=lambda k: b.probs[n, k]) == list(b.labels[n]).index(1.0)
                     for n in range(30)) / 30
        assert accuracy(b) == oracle

    def test_nll(self, rng):
        assert nll(PredictionBatch(np.eye(3), np.eye(3))) == 0.0
        uniform = PredictionBatch(np.full((5, 10), 0.1), np.eye(10)[:5])
        assert abs(nll(uniform) - math.log(10)) <= 1e-12
        b = random_batch(rng)
        oracle = -sum(math.log(b.probs[n, int(np.argmax(b.labels[n]))]) for n in range(30)) / 30
        np.testing.assert_allclose(nll(b), oracle, rtol=0, atol=1e-12)

    def test_nll_clamp(self):
        assert nll(PredictionBatch([[0.0, 1.0]], [[1.0, 0.0]])) == pytest.approx(-math.log(1e-300))

    def test_brier(self, rng):
        assert brier(PredictionBatch(np.eye(3), np.eye(3))) == 0.0
        assert brier(PredictionBatch([[0.5, 0.5]], [[0.0, 1.0]])) == 0.25
        b = random_batch(rng)
        oracle = sum(sum((b.probs[n, k] - b.labels[n, k]) ** 2 for k in range(4)) / 4 for n in range(30)) / 30
        np.testing.assert_allclose(brier(b), oracle, rtol=0, atol=1e-14)

    @given(arrays(np.float64, (6, 3), elements=st.floats(-10, 10)), st.integers(0, 2))
    def test_ranges(self, z, k):
        b = PredictionBatch(softmax(z), np.eye(3)[np.full(6, k)])
        assert 0 <= ece(b) <= 1
        assert 0 <= brier(b) <= 2 / 3 + 1e-12
        assert nll(b) >= 0


class TestEce:
    def test_hand_case(self):
        probs = np.array([[0.9, 0.05, 0.03, 0.02],
                          [0.1, 0.8, 0.05, 0.05],
                          [0.6, 0.2, 0.1, 0.1],
                          [0.25, 0.3, 0.25, 0.2]])
        labels = np.eye(4)[[0, 0, 0, 0]]  # correct, wrong, correct, wrong
        # bin (0.5, 1]: |2/3 - 2.3/3| * 3/4 = 0.075; bin (0, 0.5]: |0 - 0.3| * 1/4 = 0.075
        np.testing.assert_allclose(ece(PredictionBatch(probs, labels), num_bins=2), 0.15, rtol=0, atol=1e-15)

    def test_perfect_confident(self):
        assert ece(PredictionBatch(np.eye(4), np.eye(4))) == 0.0

    def test_single_bin(self, rng):
        b = random_batch(rng)
        np.testing.assert_allclose(ece(b, 1), abs(accuracy(b) - b.probs.max(1).mean()), atol=1e-14)

    def test_bin_edges_are_right_closed(self):
        b = PredictionBatch([[0.5, 0.5], [1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(calibration_bins(b, 2)["count"], [1, 1])

    def test_invalid_bins(self, rng):
        with pytest.raises(ValueError):
            ece(random_batch(rng), 0)


class TestEntropyAndEnsemble:
    def test_entropy(self):
        assert predictive_entropy([0.0, 1.0, 0.0]) == 0.0
        np.testing.assert_allclose(predictive_entropy(np.full(4, 0.25)), math.log(4), atol=1e-15)
        np.testing.assert_allclose(predictive_entropy([0.5, 0.25, 0.25]), 1.039721, atol=1e-6)

    def test_ensemble_logits(self, rng):
        p = softmax(rng.normal(size=(3, 5, 4)))
        np.testing.assert_allclose(ensemble_logits(p[:1]), np.log(p[0]), atol=1e-15)
        z = ensemble_logits(p)
        oracle = np.log((p[0] + p[1] + p[2]) / 3)
        np.testing.assert_allclose(z, oracle, atol=1e-14)
        np.testing.assert_allclose(softmax(z), p.mean(axis=0), atol=1e-12)

    def test_ensemble_logits_shape(self):
        with pytest.raises(ValueError):
            ensemble_logits(np.ones((3, 4)))


class TestTemperature:
    @staticmethod
    def grid_oracle(logits, labels):
        grid = np.linspace(0.05, 5.0, 1000)
        return grid[int(np.argmin([temperature_nll(logits, labels, t) for t in grid]))]

    def test_matches_dense_grid(self, rng):
        for scale in (0.3, 1.0, 3.0, 8.0):
            y_idx = rng.integers(0, 4, 200)
            logits = rng.normal(size=(200, 4)) + 1.5 * np.eye(4)[y_idx]
            logits *= scale
            labels = np.eye(4)[y_idx]
            tau = fit_temperature(logits, labels)
            assert abs(tau - self.grid_oracle(logits, labels)) < 0.01
            assert temperature_nll(logits, labels, tau) <= temperature_nll(logits, labels, 1.0) + 1e-9

    def test_scaling_consistency(self, rng):
        y_idx = rng.integers(0, 3, 300)
        logits = rng.normal(size=(300, 3)) + np.eye(3)[y_idx]
        labels = np.eye(3)[y_idx]
        base = fit_temperature(logits, labels)
        np.testing.assert_allclose(fit_temperature(2 * logits, labels), 2 * base, atol=0.01)

    def test_confident_correct_hits_lower_bound(self):
        tau = fit_temperature(np.array([[3.0, 0.0]]), np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(tau, 0.05, atol=1e-4)

    def test_calibrated_metric_block(self, rng):
        b = random_batch(rng, n=50)
        logits = np.log(b.probs)
        block = metric_block(logits, b.labels, 1.0)
        assert set(block) == {"acc", "nll", "brier", "ece", "entropy_mean"}
        np.testing.assert_allclose(block["nll"], nll(b), atol=1e-12)


class TestDee:
    curve = NllCurve([(1, 0.30), (2, 0.20), (3, 0.16)])

    def test_cases(self):
        assert dee(0.30, self.curve) == 1.0
        assert dee(0.25, self.curve) == 1.5
        assert dee(0.40, self.curve) == 1.0
        assert dee(0.10, self.curve) == math.inf
        assert dee(0.16, self.curve) == 3.0

    def test_two_point_case(self):
        assert dee(0.25, NllCurve([(1, 0.30), (2, 0.20)])) == 1.5

    def test_monotone_nonincreasing(self):
        values = [dee(v, self.curve) for v in np.linspace(0.35, 0.15, 200)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_non_monotone_warns(self):
        with pytest.warns(UserWarning):
            value = dee(0.18, NllCurve([(1, 0.30), (2, 0.20), (3, 0.22), (4, 0.15)]))
        np.testing.assert_allclose(value, 3 + 0.02 / 0.05)

    @pytest.mark.parametrize("points", [[(1, 0.3)], [(2, 0.3), (1, 0.2)], [(0, 0.3), (1, 0.2)]])
    def test_invalid_curve(self, points):
        with pytest.raises(ValueError):
            NllCurve(points)

    def test_nll_curve(self, rng):
        M, n = 4, 60
        y = np.eye(3)[rng.integers(0, 3, n)]
        logits = rng.normal(size=(M, n, 3)) + 2 * y
        curve = ensemble_nll_curve(logits, y, logits, y, calibrated=False, rng=rng)
        assert [s for s, _ in curve.points] == [1, 2, 3, 4]
        full = temperature_nll(ensemble_logits(softmax(logits)), y, 1.0)
        np.testing.assert_allclose(curve.points[-1][1], full, atol=1e-14)
        singles = np.mean([temperature_nll(logits[j], y, 1.0) for j in range(M)])
        assert curve.points[-1][1] < singles

    def test_nll_curve_subset_average(self):
        # with 3 subsets per size, a fixed rng gives an average of exactly those subsets
        rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
        y = np.eye(2)[[0, 1, 0, 1]]
        logits = np.random.default_rng(0).normal(size=(3, 4, 2))
        curve = ensemble_nll_curve(logits, y, logits, y, calibrated=False, rng=rng_a)
        for _ in range(3):
            rng_b.choice(3, size=1, replace=False)
        subsets = [np.sort(rng_b.choice(3, size=2, replace=False)) for _ in range(3)]
        expected = np.mean([temperature_nll(ensemble_logits(softmax(logits)[s]), y, 1.0) for s in subsets])
        np.testing.assert_allclose(curve.points[1][1], expected, atol=1e-14)
