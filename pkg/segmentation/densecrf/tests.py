import itertools
import math
import unittest

import numpy as np

from segmentation.densecrf import (
    CrfParams,
    PixelFeatures,
    UnaryField,
    crf_refine,
    exact_energy,
    kernel_matrix,
    mean_field_inference,
    pairwise_weight,
    unary_from_probability,
)
from segmentation.exceptions import ConfigError, PreconditionError, ShapeError
from segmentation.maps import BinaryMask, ProbabilityMap


def kernel_oracle(pi, pj, ci, cj, params):
    dp2 = sum((a - b) ** 2 for a, b in zip(pi, pj))
    di2 = sum((a - b) ** 2 for a, b in zip(ci, cj))
    return params.omega1 * math.exp(
        -dp2 / (2 * params.sigma_alpha**2) - di2 / (2 * params.sigma_beta**2)
    ) + params.omega2 * math.exp(-dp2 / (2 * params.sigma_gamma**2))


def mean_field_oracle(unary, features, params):
    """Straight-loop synchronous mean field."""
    n = len(unary)
    pos, col, mu = features.positions.tolist(), features.colors.tolist(), params.compatibility

    def normalize(costs):
        e = [math.exp(-c) for c in costs]
        return [v / sum(e) for v in e]

    q = [normalize(unary[i]) for i in range(n)]
    for _ in range(params.iterations):
        new_q = []
        for i in range(n):
            costs = []
            for label in range(2):
                message = 0.0
                for j in range(n):
                    if j == i:
                        continue
                    k = kernel_oracle(pos[i], pos[j], col[i], col[j], params)
                    message += k * sum(mu[label][other] * q[j][other] for other in range(2))
                costs.append(unary[i][label] + message)
            new_q.append(normalize(costs))
        q = new_q
    return np.array(q)


def grid_features(h, w, rng):
    return PixelFeatures.from_image(rng.uniform(0, 255, size=(h, w, 3)))


def two_pixel(colors=((100, 100, 100), (100, 100, 100))):
    return PixelFeatures([[0, 0], [1, 0]], colors, (1, 2))


class UnaryTest(unittest.TestCase):
    def test_one_half_is_symmetric(self):
        u = unary_from_probability(ProbabilityMap([[0.5]])).values[0]
        self.assertAlmostEqual(u[0], math.log(2.0), places=15)
        self.assertAlmostEqual(u[1], math.log(2.0), places=15)

    def test_clamp_bounds_confident_pixels(self):
        u = unary_from_probability(ProbabilityMap([[1.0, 0.0]])).values
        self.assertAlmostEqual(u[0, 0], -math.log(1e-6), places=9)
        self.assertAlmostEqual(u[1, 1], -math.log(1e-6), places=9)
        self.assertLess(u[0, 1], 1e-5)
        self.assertTrue(np.isfinite(u).all())

    def test_point_nine(self):
        u = unary_from_probability(ProbabilityMap([[0.9]])).values[0]
        self.assertAlmostEqual(u[0], -math.log(0.1), places=13)
        self.assertAlmostEqual(u[1], -math.log(0.9), places=15)


class PairwiseWeightTest(unittest.TestCase):
    def test_coincident_features(self):
        features = PixelFeatures([[1, 1], [1, 1]], [[9, 9, 9], [9, 9, 9]])
        self.assertEqual(pairwise_weight(0, 1, features, CrfParams()), 8.0)

    def test_zero_weights(self):
        features = grid_features(3, 3, np.random.default_rng(0))
        params = CrfParams(omega1=0.0, omega2=0.0)
        for i, j in itertools.permutations(range(9), 2):
            self.assertEqual(pairwise_weight(i, j, features, params), 0.0)

    def test_three_pixel_offset(self):
        features = PixelFeatures([[0, 0], [3, 0]], [[50, 60, 70], [50, 60, 70]])
        expected = 3 * math.exp(-0.5) + 5 * math.exp(-0.5)
        self.assertAlmostEqual(pairwise_weight(0, 1, features, CrfParams()), expected, places=14)

    def test_self_pair_rejected(self):
        with self.assertRaises(PreconditionError):
            pairwise_weight(2, 2, grid_features(2, 2, np.random.default_rng(1)), CrfParams())

    def test_symmetric_and_monotone(self):
        rng = np.random.default_rng(2)
        features = grid_features(4, 4, rng)
        k = kernel_matrix(features, CrfParams())
        np.testing.assert_array_equal(k, k.T)
        np.testing.assert_array_equal(np.diag(k), np.zeros(16))

        params = CrfParams()
        near = PixelFeatures([[0, 0], [1, 0], [2, 0], [5, 0]], [[10, 10, 10]] * 4)
        weights = [pairwise_weight(0, j, near, params) for j in (1, 2, 3)]
        self.assertEqual(weights, sorted(weights, reverse=True))
        colors = PixelFeatures([[0, 0]] * 4, [[0, 0, 0], [10, 0, 0], [40, 0, 0], [200, 0, 0]])
        weights = [pairwise_weight(0, j, colors, params) for j in (1, 2, 3)]
        self.assertEqual(weights, sorted(weights, reverse=True))

    def test_invalid_params(self):
        with self.assertRaises(ConfigError) as ctx:
            CrfParams(sigma_alpha=0.0, omega2=-1.0, iterations=0)
        self.assertEqual(len(ctx.exception.issues), 3)

    def test_callable_compatibility_is_tabulated(self):
        params = CrfParams(compatibility=lambda a, b: 2.0 * abs(a - b))
        np.testing.assert_array_equal(params.compatibility, [[0.0, 2.0], [2.0, 0.0]])


class MeanFieldTest(unittest.TestCase):
    def test_zero_coupling_is_unary_softmax(self):
        rng = np.random.default_rng(3)
        unary = UnaryField(rng.uniform(0, 4, size=(20, 2)), (4, 5))
        field = mean_field_inference(
            unary, grid_features(4, 5, rng), CrfParams(omega1=0.0, omega2=0.0, iterations=7)
        )
        e = np.exp(-unary.values)
        np.testing.assert_allclose(field.q, e / e.sum(axis=1, keepdims=True), atol=1e-12)

    def test_two_pixel_against_oracle(self):
        unary = UnaryField([[0.6, 0.5], [0.5, 0.6]])
        params = CrfParams(omega1=4.0, omega2=6.0, iterations=10)
        field = mean_field_inference(unary, two_pixel(), params)
        expected = mean_field_oracle(unary.values.tolist(), two_pixel(), params)
        np.testing.assert_allclose(field.q, expected, atol=1e-10, rtol=0)

    def test_random_instances_against_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            h, w = int(rng.integers(1, 4)), int(rng.integers(1, 5))
            features = grid_features(h, w, rng)
            unary = UnaryField(rng.uniform(0, 5, size=(h * w, 2)))
            compatibility = None
            if rng.uniform() < 0.3:
                compatibility = rng.uniform(0, 2, size=(2, 2))
            params = CrfParams(
                omega1=rng.uniform(0, 5),
                omega2=rng.uniform(0, 5),
                sigma_alpha=rng.uniform(0.5, 5),
                sigma_beta=rng.uniform(10, 100),
                sigma_gamma=rng.uniform(0.5, 5),
                iterations=int(rng.integers(1, 7)),
                compatibility=compatibility,
            )
            field = mean_field_inference(unary, features, params)
            expected = mean_field_oracle(unary.values.tolist(), features, params)
            np.testing.assert_allclose(field.q, expected, atol=1e-10, rtol=0)
            np.testing.assert_allclose(field.q.sum(axis=1), 1.0, atol=1e-9)

    def test_rows_normalized_after_every_iteration(self):
        rng = np.random.default_rng(5)
        features = grid_features(5, 5, rng)
        unary = UnaryField(rng.uniform(0, 3, size=(25, 2)))
        for iterations in range(1, 6):
            q = mean_field_inference(unary, features, CrfParams(iterations=iterations)).q
            np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-9)
            self.assertTrue(((q >= 0) & (q <= 1)).all())

    def test_window_matches_naive_when_covering_image(self):
        rng = np.random.default_rng(6)
        features = grid_features(6, 7, rng)
        unary = UnaryField(rng.uniform(0, 3, size=(42, 2)), (6, 7))
        naive = mean_field_inference(unary, features, CrfParams())
        windowed = mean_field_inference(unary, features, CrfParams(window_radius=10))
        np.testing.assert_allclose(windowed.q, naive.q, atol=1e-6)

    def test_window_needs_grid(self):
        features = PixelFeatures([[0, 0], [1, 0]], [[0, 0, 0], [0, 0, 0]])
        with self.assertRaises(PreconditionError):
            mean_field_inference(UnaryField(np.zeros((2, 2))), features, CrfParams(window_radius=2))

    def test_pixel_count_mismatch(self):
        with self.assertRaises(ShapeError):
            mean_field_inference(UnaryField(np.zeros((3, 2))), two_pixel(), CrfParams())

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        features = grid_features(5, 4, rng)
        unary = UnaryField(rng.uniform(0, 3, size=(20, 2)))
        a = mean_field_inference(unary, features, CrfParams()).q
        b = mean_field_inference(unary, features, CrfParams()).q
        np.testing.assert_array_equal(a, b)


class ExactEnergyTest(unittest.TestCase):
    def test_uniform_labeling_is_unary_sum(self):
        rng = np.random.default_rng(8)
        features = grid_features(3, 4, rng)
        unary = UnaryField(rng.uniform(0, 3, size=(12, 2)))
        for label in (0, 1):
            mask = BinaryMask(np.full((3, 4), label))
            self.assertAlmostEqual(
                exact_energy(mask, unary, features, CrfParams()),
                unary.values[:, label].sum(),
                places=12,
            )

    def test_two_pixel_hand_expansion(self):
        features = two_pixel(((10, 20, 30), (40, 50, 60)))
        unary = UnaryField([[0.3, 1.2], [0.7, 0.4]])
        params = CrfParams()
        k = kernel_oracle((0, 0), (1, 0), (10, 20, 30), (40, 50, 60), params)
        hand = {
            (0, 0): 0.3 + 0.7,
            (0, 1): 0.3 + 0.4 + k,
            (1, 0): 1.2 + 0.7 + k,
            (1, 1): 1.2 + 0.4,
        }
        for labels, expected in hand.items():
            energy = exact_energy(np.array(labels), unary, features, params)
            self.assertAlmostEqual(energy, expected, places=12)

    def test_zero_coupling(self):
        rng = np.random.default_rng(9)
        features = grid_features(2, 3, rng)
        unary = UnaryField(rng.uniform(0, 3, size=(6, 2)))
        params = CrfParams(omega1=0.0, omega2=0.0)
        for bits in itertools.product((0, 1), repeat=6):
            expected = unary.values[np.arange(6), bits].sum()
            self.assertAlmostEqual(exact_energy(np.array(bits), unary, features, params), expected)


def two_region_instance(rng):
    truth = np.zeros((8, 8))
    truth[:, 4:] = 1.0
    image = np.where(truth[None] > 0, 0.75, 0.25) + rng.normal(0, 0.03, size=(3, 8, 8))
    prob = np.clip(np.where(truth > 0, 0.7, 0.3) + rng.normal(0, 0.25, size=(8, 8)), 0.01, 0.99)
    return ProbabilityMap(prob), np.clip(image, 0, 1)


class CrfRefineTest(unittest.TestCase):
    def test_zero_coupling_is_identity(self):
        rng = np.random.default_rng(10)
        prob = ProbabilityMap(rng.uniform(0.01, 0.99, size=(5, 6)))
        out = crf_refine(prob, rng.uniform(size=(3, 5, 6)), CrfParams(omega1=0.0, omega2=0.0))
        np.testing.assert_allclose(out.values, prob.values, atol=1e-9)

    def test_uniform_input_stays_one_half(self):
        out = crf_refine(ProbabilityMap(np.full((6, 6), 0.5)), np.full((3, 6, 6), 0.4), CrfParams())
        np.testing.assert_allclose(out.values, np.full((6, 6), 0.5), atol=1e-12)

    def test_window_path_uniform_input(self):
        params = CrfParams(window_radius=2)
        out = crf_refine(ProbabilityMap(np.full((6, 6), 0.5)), np.full((3, 6, 6), 0.4), params)
        np.testing.assert_array_equal(out.values, np.full((6, 6), 0.5))

    def test_size_mismatch(self):
        with self.assertRaises(ShapeError):
            crf_refine(ProbabilityMap(np.full((4, 4), 0.5)), np.zeros((3, 4, 5)), CrfParams())

    def test_refinement_lowers_energy(self):
        rng = np.random.default_rng(11)
        params = CrfParams()
        wins = 0
        for _ in range(20):
            prob, image = two_region_instance(rng)
            features = PixelFeatures.from_image(np.moveaxis(image, 0, -1) * 255.0)
            unary = unary_from_probability(prob)
            refined = crf_refine(prob, image, params)

            before = exact_energy(BinaryMask(prob.values > 0.5), unary, features, params)
            after = exact_energy(BinaryMask(refined.values > 0.5), unary, features, params)
            wins += after <= before
        self.assertGreaterEqual(wins, 18)


if __name__ == "__main__":
    unittest.main()
