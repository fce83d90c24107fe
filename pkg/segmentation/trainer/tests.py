import math
import os
import tempfile
import unittest

import numpy as np

from lesionseg.settings import SLOW_TESTS
from segmentation.autodiff import ConvSpec, Tape, Tensor, conv2d, sigmoid
from segmentation.exceptions import ConfigError, DivergenceError, PreconditionError, ShapeError
from segmentation.maps import ProbabilityMap
from segmentation.network import BackboneConfig, build_network
from segmentation.trainer import (
    SgdConfig,
    TrainSample,
    TrainState,
    cross_entropy_loss,
    fit,
    sgd_step,
)


def blob_sample(size, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    cy, cx = size / 2 + rng.uniform(-size / 8, size / 8, size=2)
    ay, ax = rng.uniform(size / 6, size / 3, size=2)
    truth = (((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0).astype(float)
    background = 0.2 + 0.1 * rng.uniform(size=(3, size, size))
    color = rng.uniform(0.7, 1.0, size=3)[:, None, None]
    image = np.where(truth[None] > 0, color, background)
    return TrainSample(image, truth, stem=f"blob{seed}")


class CrossEntropyTest(unittest.TestCase):
    def test_perfect_prediction(self):
        y = (np.random.default_rng(0).uniform(size=(4, 4)) > 0.5).astype(float)
        loss = cross_entropy_loss(Tensor(y), y).item()
        self.assertGreaterEqual(loss, 0.0)
        self.assertLessEqual(loss, 1e-9)

    def test_one_half_everywhere(self):
        y = (np.random.default_rng(1).uniform(size=(6, 5)) > 0.5).astype(float)
        loss = cross_entropy_loss(ProbabilityMap(np.full((6, 5), 0.5)), y).item()
        self.assertAlmostEqual(loss, 30 * math.log(2.0), places=12)

    def test_single_pixel(self):
        loss = cross_entropy_loss(Tensor([[0.9]]), np.array([[1.0]])).item()
        self.assertAlmostEqual(loss, -math.log(0.9), places=14)

    def test_size_mismatch(self):
        with self.assertRaises(ShapeError):
            cross_entropy_loss(Tensor(np.full((1, 1, 4, 4), 0.5)), np.zeros((4, 5)))

    def test_gradient_wrt_logits_is_p_minus_y(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.normal(scale=3.0, size=(1, 1, 5, 5)), requires_grad=True)
        y = (rng.uniform(size=(5, 5)) > 0.4).astype(float)
        with Tape() as tape:
            prob = sigmoid(logits)
            loss = cross_entropy_loss(prob, y)
        tape.backward(loss)
        expected = 1.0 / (1.0 + np.exp(-logits.data[0, 0])) - y
        np.testing.assert_allclose(logits.grad[0, 0], expected, atol=1e-8)


class SgdStepTest(unittest.TestCase):
    def state_for(self, value):
        return TrainState.start({"w": Tensor([value], requires_grad=True)})

    def test_one_step(self):
        state = self.state_for(1.0)
        config = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step(state, {"w": np.array([0.5])}, config)
        self.assertAlmostEqual(state.velocity["w"][0], -0.05, places=15)
        self.assertAlmostEqual(state.params["w"].data[0], 0.95, places=15)

    def test_two_steps(self):
        state = self.state_for(1.0)
        config = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step(state, {"w": np.array([0.5])}, config)
        sgd_step(state, {"w": np.array([0.5])}, config)
        self.assertAlmostEqual(state.velocity["w"][0], -0.095, places=15)
        self.assertAlmostEqual(state.params["w"].data[0], 0.855, places=15)

    def test_decay_only(self):
        state = self.state_for(1.0)
        config = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0005)
        sgd_step(state, {"w": np.array([0.0])}, config)
        self.assertAlmostEqual(state.params["w"].data[0], 0.99995, places=15)

    def test_biases_can_skip_decay(self):
        state = TrainState.start(
            {"l.weight": Tensor([1.0], requires_grad=True), "l.bias": Tensor([1.0], requires_grad=True)}
        )
        config = SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.5, decay_biases=False)
        sgd_step(state, {"l.weight": np.zeros(1), "l.bias": np.zeros(1)}, config)
        self.assertAlmostEqual(state.params["l.weight"].data[0], 0.95)
        self.assertEqual(state.params["l.bias"].data[0], 1.0)

    def test_shape_mismatch(self):
        state = self.state_for(1.0)
        with self.assertRaises(ShapeError):
            sgd_step(state, {"w": np.zeros(2)}, SgdConfig())

    def test_missing_gradient(self):
        with self.assertRaises(PreconditionError):
            sgd_step(self.state_for(1.0), {}, SgdConfig())

    def test_invalid_config(self):
        with self.assertRaises(ConfigError) as ctx:
            SgdConfig(learning_rate=0.0, momentum=1.0, weight_decay=-1.0)
        self.assertEqual(len(ctx.exception.issues), 3)

    def test_presets(self):
        self.assertEqual(SgdConfig.full().learning_rate, 1e-8)
        self.assertEqual(SgdConfig.full().momentum, 0.9)
        self.assertEqual(SgdConfig.full().weight_decay, 0.0005)

    def test_small_step_reduces_toy_loss(self):
        rng = np.random.default_rng(3)
        image = Tensor(rng.uniform(size=(1, 3, 4, 4)))
        truth = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        start = {"k": rng.normal(size=(1, 3, 3, 3)), "b": np.array([0.2])}

        def loss_of(params):
            prob = sigmoid(conv2d(image, ConvSpec(params["k"], padding=1), params["b"]))
            return cross_entropy_loss(prob, truth)

        for lr in (1e-3, 1e-4):
            params = {name: Tensor(v.copy(), requires_grad=True) for name, v in start.items()}
            with Tape() as tape:
                before = loss_of(params)
            tape.backward(before)
            state = TrainState.start(params)
            config = SgdConfig(learning_rate=lr, momentum=0.0, weight_decay=0.0)
            sgd_step(state, {n: t.grad for n, t in params.items()}, config)
            self.assertLess(loss_of(params).item(), before.item())


class FitTest(unittest.TestCase):
    net_config = BackboneConfig.desk((32, 32))

    def test_zero_iterations_returns_initial_params(self):
        initial = build_network(self.net_config, seed=4)
        state = fit([blob_sample(32, 0)], SgdConfig(iterations=0), self.net_config, initial)
        self.assertTrue(state.params.equals(initial))
        self.assertEqual(state.iteration, 0)

    def test_empty_samples(self):
        with self.assertRaises(PreconditionError):
            fit([], SgdConfig(iterations=1), self.net_config)

    def test_loss_history_and_log(self):
        samples = [blob_sample(32, s) for s in range(3)]
        with tempfile.TemporaryDirectory() as tmp:
            log_path = os.path.join(tmp, "train.log")
            state = fit(samples, SgdConfig(iterations=5), self.net_config, log_path=log_path)
            with open(log_path) as f:
                lines = f.read().splitlines()

        self.assertEqual(state.iteration, 5)
        self.assertEqual(len(lines), 5)
        first_iter, first_loss = lines[0].split("\t")
        self.assertEqual(first_iter, "1")
        self.assertEqual(float(first_loss), state.loss_history[0])
        self.assertTrue(all(loss >= 0 for loss in state.loss_history))

    def test_bit_reproducible(self):
        samples = [blob_sample(32, s) for s in range(2)]
        config = SgdConfig(iterations=4, seed=9)
        a = fit(samples, config, self.net_config)
        b = fit(samples, config, self.net_config)
        self.assertEqual(a.loss_history, b.loss_history)
        self.assertTrue(a.params.equals(b.params))

    def test_loss_decreases_on_one_sample(self):
        state = fit([blob_sample(32, 5)], SgdConfig(iterations=40, seed=1), self.net_config)
        self.assertLess(np.mean(state.loss_history[-5:]), state.loss_history[0])

    def test_aux_loss_adds_fused_terms(self):
        sample = [blob_sample(32, 6)]
        plain = fit(sample, SgdConfig(iterations=1), self.net_config)
        aux = fit(sample, SgdConfig(iterations=1, aux_loss=True), self.net_config)
        self.assertGreater(aux.loss_history[0], plain.loss_history[0])

    def test_divergence_guard_names_first_bad_iteration(self):
        with tempfile.TemporaryDirectory() as tmp:
            log_path = os.path.join(tmp, "train.log")
            with np.errstate(all="ignore"), self.assertRaises(DivergenceError) as ctx:
                config = SgdConfig(learning_rate=1e300, iterations=10)
                fit([blob_sample(32, 7)], config, self.net_config, log_path=log_path)
            with open(log_path) as f:
                logged = [float(line.split("\t")[1]) for line in f.read().splitlines()]

        self.assertEqual(ctx.exception.iteration, len(logged) + 1)
        self.assertTrue(all(math.isfinite(loss) for loss in logged))

    def test_overflowing_first_step_diverges_at_once(self):
        with np.errstate(all="ignore"), self.assertRaises(DivergenceError) as ctx:
            config = SgdConfig(learning_rate=1e308, iterations=10)
            fit([blob_sample(32, 7)], config, self.net_config)
        self.assertEqual(ctx.exception.iteration, 1)

    def test_sample_validation(self):
        with self.assertRaises(ShapeError):
            TrainSample(np.zeros((3, 8, 8)), np.zeros((8, 9)))
        with self.assertRaises(PreconditionError):
            TrainSample(np.zeros((3, 8, 8)), np.full((8, 8), 2.0))


@unittest.skipUnless(SLOW_TESTS, "set LESIONSEG_SLOW_TESTS=true")
class DeskTrainingAcceptanceTest(unittest.TestCase):
    def test_loss_drops_to_a_tenth(self):
        samples = [blob_sample(64, s) for s in range(4)]
        for seed in (0, 1, 2):
            state = fit(samples, SgdConfig.desk(iterations=500, seed=seed), BackboneConfig.desk((64, 64)))
            initial = np.mean(state.loss_history[:4])
            final = np.mean(state.loss_history[-4:])
            self.assertLessEqual(final, 0.1 * initial, f"seed {seed}")


if __name__ == "__main__":
    unittest.main()
