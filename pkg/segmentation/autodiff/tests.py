import math
import threading
import unittest
import warnings

import numpy as np

from segmentation.autodiff import (
    ConvSpec,
    Tape,
    Tensor,
    backward,
    concat_channels,
    conv2d,
    finite_difference_check,
    gradient_check_report,
    max_pool2d,
    relu,
    sigmoid,
    slice_channels,
    sum_all,
    upsample_bilinear,
)
from segmentation.exceptions import GradientCheckError, PreconditionError, ShapeError


def naive_conv(x, k, b, stride=1, padding=0, dilation=1):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    out_w = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, out_h, out_w))
    for bi in range(n):
        for oc in range(o):
            for y in range(out_h):
                for x_ in range(out_w):
                    acc = b[oc]
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (
                                    k[oc, ic, i, j]
                                    * xp[bi, ic, y * stride + i * dilation, x_ * stride + j * dilation]
                                )
                    out[bi, oc, y, x_] = acc
    return out


def bilinear_at(img, out_h, out_w):
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for r in range(out_h):
        for c in range(out_w):
            sy = r * (h - 1) / (out_h - 1) if out_h > 1 else 0.0
            sx = c * (w - 1) / (out_w - 1) if out_w > 1 else 0.0
            y0, x0 = min(int(math.floor(sy)), h - 1), min(int(math.floor(sx)), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[r, c] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


def numeric_grad(fn, x, eps=1e-5):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = fn(x)
        flat[i] = orig - eps
        minus = fn(x)
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2 * eps)
    return grad


def max_rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


class Conv2dTest(unittest.TestCase):
    def test_identity_case(self):
        x = Tensor([[[[5.0]]]])
        out = conv2d(x, ConvSpec(Tensor(np.ones((1, 1, 1, 1)))), Tensor([0.0]))
        self.assertEqual(out.data.tolist(), [[[[5.0]]]])

    def test_sum_of_nine_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, ConvSpec(Tensor(np.ones((1, 1, 3, 3)))), Tensor([0.0]))
        self.assertEqual(out.shape, (1, 1, 1, 1))
        self.assertEqual(out.data[0, 0, 0, 0], 9.0)

    def test_dilated_impulse_matches_naive(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        k = np.ones((1, 1, 3, 3))
        out = conv2d(Tensor(x), ConvSpec(Tensor(k), dilation=2), Tensor([0.0]))
        expected = naive_conv(x, k, [0.0], dilation=2)
        self.assertEqual(out.shape, (1, 1, 1, 1))
        np.testing.assert_array_equal(out.data, expected)

    def test_random_configurations_match_naive(self):
        rng = np.random.default_rng(3)
        for stride, padding, dilation in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 3)]:
            x = rng.normal(size=(2, 3, 9, 8))
            k = rng.normal(size=(4, 3, 3, 3))
            b = rng.normal(size=4)
            spec = ConvSpec(Tensor(k), stride=stride, padding=padding, dilation=dilation)
            out = conv2d(Tensor(x), spec, Tensor(b))
            np.testing.assert_allclose(
                out.data, naive_conv(x, k, b, stride, padding, dilation), atol=1e-12
            )

    def test_identity_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 3, 6, 5))
        k = np.eye(3).reshape(3, 3, 1, 1)
        out = conv2d(Tensor(x), ConvSpec(Tensor(k)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_linear_in_input(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(2, 1, 2, 7, 7))
        spec = ConvSpec(Tensor(rng.normal(size=(3, 2, 3, 3))), padding=1, dilation=2)
        zero = Tensor(np.zeros(3))
        lhs = conv2d(Tensor(2.5 * x - 1.5 * y), spec, zero).data
        rhs = 2.5 * conv2d(Tensor(x), spec, zero).data - 1.5 * conv2d(Tensor(y), spec, zero).data
        self.assertLessEqual(np.max(np.abs(lhs - rhs)), 1e-10)

    def test_channel_mismatch_names_dimension(self):
        spec = ConvSpec(Tensor(np.ones((1, 2, 3, 3))))
        with self.assertRaises(ShapeError) as ctx:
            conv2d(Tensor(np.ones((1, 3, 5, 5))), spec, Tensor([0.0]))
        self.assertEqual(ctx.exception.dimension, "in_channels")

    def test_bias_length_checked(self):
        spec = ConvSpec(Tensor(np.ones((2, 1, 1, 1))))
        with self.assertRaises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), spec, Tensor([0.0]))

    def test_non_positive_output_size(self):
        spec = ConvSpec(Tensor(np.ones((1, 1, 3, 3))))
        with self.assertRaises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), spec, Tensor([0.0]))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        weights = rng.normal(size=(1, 3, 3, 3))

        def value(xv, kv, bv):
            spec = ConvSpec(Tensor(kv), stride=2, padding=2, dilation=2)
            return float((conv2d(Tensor(xv), spec, Tensor(bv)).data * weights).sum())

        tx, tk, tb = (Tensor(v, requires_grad=True) for v in (x, k, b))
        with Tape():
            out = conv2d(tx, ConvSpec(tk, stride=2, padding=2, dilation=2), tb)
            loss = sum_all(out * weights)
        backward(loss)

        self.assertLessEqual(max_rel_err(tx.grad, numeric_grad(lambda v: value(v, k, b), x)), 1e-6)
        self.assertLessEqual(max_rel_err(tk.grad, numeric_grad(lambda v: value(x, v, b), k)), 1e-6)
        self.assertLessEqual(max_rel_err(tb.grad, numeric_grad(lambda v: value(x, k, v), b)), 1e-6)


class MaxPoolTest(unittest.TestCase):
    def test_window_max(self):
        out = max_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        self.assertEqual(out.data.tolist(), [[[[4.0]]]])

    def test_constant_stays_constant(self):
        out = max_pool2d(Tensor(np.full((1, 2, 6, 4), 1.25)))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 2), 1.25))

    def test_random_matches_window_oracle(self):
        x = np.random.default_rng(5).normal(size=(1, 1, 4, 4))
        out = max_pool2d(Tensor(x)).data
        for r in range(2):
            for c in range(2):
                self.assertEqual(out[0, 0, r, c], x[0, 0, 2 * r : 2 * r + 2, 2 * c : 2 * c + 2].max())
        self.assertTrue((out <= x.max()).all() and (out >= x.min()).all())

    def test_ties_route_to_first_cell(self):
        x = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
        with Tape():
            loss = sum_all(max_pool2d(x))
        backward(loss)
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_odd_size_rejected(self):
        with self.assertRaises(ShapeError):
            max_pool2d(Tensor(np.ones((1, 1, 3, 4))))


class UpsampleTest(unittest.TestCase):
    def test_constant_preserved(self):
        out = upsample_bilinear(Tensor(np.full((1, 1, 2, 2), 3.0)), 4, 4)
        np.testing.assert_allclose(out.data, np.full((1, 1, 4, 4), 3.0), atol=1e-15)

    def test_same_size_is_bitwise_identity(self):
        x = np.random.default_rng(2).normal(size=(1, 2, 5, 3))
        out = upsample_bilinear(Tensor(x), 5, 3)
        np.testing.assert_array_equal(out.data, x)

    def test_matches_scalar_formula(self):
        img = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = upsample_bilinear(Tensor(img[None, None]), 3, 3).data[0, 0]
        np.testing.assert_allclose(out, bilinear_at(img, 3, 3), atol=1e-15)
        self.assertAlmostEqual(out[1, 1], 0.5)

    def test_corners_map_exactly(self):
        img = np.random.default_rng(4).normal(size=(3, 4))
        out = upsample_bilinear(Tensor(img[None, None]), 7, 9).data[0, 0]
        self.assertEqual(out[0, 0], img[0, 0])
        self.assertEqual(out[-1, -1], img[-1, -1])
        np.testing.assert_allclose(out, bilinear_at(img, 7, 9), atol=1e-14)

    def test_zero_target_rejected(self):
        with self.assertRaises(PreconditionError):
            upsample_bilinear(Tensor(np.ones((1, 1, 2, 2))), 0, 4)

    def test_gradient(self):
        x = np.random.default_rng(6).normal(size=(1, 1, 3, 4))
        weights = np.random.default_rng(7).normal(size=(1, 1, 5, 6))
        tx = Tensor(x, requires_grad=True)
        with Tape():
            loss = sum_all(upsample_bilinear(tx, 5, 6) * weights)
        backward(loss)
        numeric = numeric_grad(
            lambda v: float((upsample_bilinear(Tensor(v), 5, 6).data * weights).sum()), x
        )
        self.assertLessEqual(max_rel_err(tx.grad, numeric), 1e-6)


class ConcatTest(unittest.TestCase):
    def test_definition_and_slices(self):
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(2, 1, 1, 2, 2))
        out = concat_channels(Tensor(a), Tensor(b))
        self.assertEqual(out.shape, (1, 2, 2, 2))
        np.testing.assert_array_equal(slice_channels(out, 0, 1).data, a)
        np.testing.assert_array_equal(slice_channels(out, 1, 2).data, b)

    def test_gradient_of_sum_is_ones(self):
        a = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        with Tape():
            loss = sum_all(concat_channels(a, b))
        backward(loss)
        np.testing.assert_array_equal(a.grad, np.ones(a.shape))
        np.testing.assert_array_equal(b.grad, np.ones(b.shape))

    def test_spatial_mismatch(self):
        with self.assertRaises(ShapeError) as ctx:
            concat_channels(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 3))))
        self.assertEqual(ctx.exception.dimension, "width")


class ElementwiseTest(unittest.TestCase):
    def test_relu(self):
        self.assertEqual(relu(Tensor([-1.0, 2.0])).data.tolist(), [0.0, 2.0])

    def test_relu_subgradient_at_zero(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        with Tape():
            loss = sum_all(relu(x))
        backward(loss)
        self.assertEqual(x.grad.tolist(), [0.0, 1.0])

    def test_sigmoid(self):
        self.assertEqual(sigmoid(Tensor(0.0)).item(), 0.5)
        self.assertAlmostEqual(sigmoid(Tensor(2.0)).item(), 1.0 / (1.0 + math.exp(-2.0)), places=15)


class BackwardTest(unittest.TestCase):
    def test_linear(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        with Tape():
            loss = sum_all(x)
        backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((1, 1, 2, 2)))

    def test_square(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        with Tape():
            loss = sum_all(x * x)
        backward(loss)
        np.testing.assert_array_equal(x.grad, [[2.0, 4.0], [6.0, 8.0]])

    def test_loss_is_rank_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = -sum_all(x * x)
        self.assertEqual(loss.shape, ())
        with warnings.catch_warnings():
            warnings.simplefilter("error", DeprecationWarning)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [-2.0, -4.0])

    def test_repeated_calls_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = sum_all(x * 3.0)
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            out = x * 2.0
        with self.assertRaises(PreconditionError):
            backward(out)

    def test_detached_gets_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = sum_all(x.detach() * 2.0)
        backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_two_layer_net_against_finite_differences(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        params = {
            "k1": Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True),
            "b1": Tensor(rng.normal(size=3), requires_grad=True),
            "k2": Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True),
            "b2": Tensor(rng.normal(size=1), requires_grad=True),
        }

        def objective(p):
            hidden = relu(conv2d(x, ConvSpec(p["k1"], padding=1), p["b1"]))
            out = conv2d(hidden, ConvSpec(p["k2"], padding=1, dilation=2), p["b2"])
            return sum_all(sigmoid(out))

        self.assertLessEqual(finite_difference_check(objective, params, 1e-5), 1e-4)

    def test_tapes_are_thread_local(self):
        errors = []

        def work(seed):
            try:
                x = Tensor(np.full(3, float(seed)), requires_grad=True)
                with Tape() as tape:
                    loss = sum_all(x * x)
                tape.backward(loss)
                np.testing.assert_array_equal(x.grad, np.full(3, 2.0 * seed))
            except AssertionError as exc:
                errors.append(exc)

        threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.assertEqual(errors, [])


class FiniteDifferenceCheckTest(unittest.TestCase):
    def test_quadratic_is_exact(self):
        params = {"w": Tensor([1.7], requires_grad=True)}
        err = finite_difference_check(lambda p: sum_all(p["w"] * p["w"] * 3.0), params, 1e-5)
        self.assertLessEqual(err, 1e-9)

    def test_one_layer_cross_entropy(self):
        rng = np.random.default_rng(12)
        image = Tensor(rng.uniform(size=(1, 3, 4, 4)))
        truth = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(float)
        params = {
            "k": Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True),
            "b": Tensor([0.1], requires_grad=True),
        }

        def objective(p):
            from segmentation.autodiff import log

            prob = sigmoid(conv2d(image, ConvSpec(p["k"], padding=1), p["b"]))
            return -sum_all(truth * log(prob) + (1.0 - truth) * log(1.0 - prob))

        self.assertLessEqual(finite_difference_check(objective, params, 1e-5), 1e-4)

    def test_zero_epsilon_rejected(self):
        params = {"w": Tensor([1.0], requires_grad=True)}
        with self.assertRaises(PreconditionError):
            finite_difference_check(lambda p: sum_all(p["w"]), params, 0.0)

    def test_steps_across_a_relu_kink_are_skipped(self):
        params = {"w": Tensor([3e-6, 0.5], requires_grad=True)}

        def objective(p):
            return sum_all(relu(p["w"]))

        report = gradient_check_report(objective, params, 1e-5)
        self.assertEqual(report.skipped["w"], 1)
        self.assertEqual(report.checked["w"], 1)
        self.assertLessEqual(report.worst, 1e-9)

        resampled = gradient_check_report(objective, params, 1e-5, max_coords_per_tensor=1)
        self.assertEqual((resampled.checked["w"], resampled.skipped["w"]), (1, 1))
        np.testing.assert_array_equal(params["w"].data, [3e-6, 0.5])

    def test_non_deterministic_detected(self):
        params = {"w": Tensor([1.0], requires_grad=True)}
        calls = {"n": 0}

        def flaky(p):
            calls["n"] += 1
            return sum_all(p["w"] * float(calls["n"]))

        with self.assertRaises(GradientCheckError):
            finite_difference_check(flaky, params, 1e-5)
