import os
import tempfile
import time
import unittest

import numpy as np

from lesionseg.settings import SLOW_TESTS
from segmentation.autodiff import Tape, Tensor, clamp, gradient_check_report, log, sum_all
from segmentation.exceptions import CheckpointError, ConfigError, PreconditionError, ShapeError
from segmentation.network import (
    BackboneConfig,
    aggregate_final,
    backbone_forward,
    build_network,
    csm_forward,
    forward,
    from_bytes,
    fuse_path,
    infer_probability_map,
    layer_shapes,
    load_checkpoint,
    path_forward,
    save_checkpoint,
    side_branch_forward,
    to_bytes,
    zero_network,
)


def conv_oracle(x, w, b, pad=0, dil=1):
    """Tap-by-tap convolution of a (C, H, W) array."""
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out_h = x.shape[1] + 2 * pad - dil * (k - 1)
    out_w = x.shape[2] + 2 * pad - dil * (k - 1)
    out = np.zeros((w.shape[0], out_h, out_w)) + b[:, None, None]
    for i in range(k):
        for j in range(k):
            window = xp[:, i * dil : i * dil + out_h, j * dil : j * dil + out_w]
            out += np.einsum("oc,chw->ohw", w[:, :, i, j], window)
    return out


def pool_oracle(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def upsample_oracle(img, out_h, out_w):
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for r in range(out_h):
        for c in range(out_w):
            sy = r * (h - 1) / (out_h - 1) if out_h > 1 and h > 1 else 0.0
            sx = c * (w - 1) / (out_w - 1) if out_w > 1 and w > 1 else 0.0
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[r, c] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


def relu(x):
    return np.maximum(x, 0.0)


def layer(params, name):
    return params[name].weight.data, params[name].bias.data


def scripted_forward(params, image):
    """Straight-line forward pass of a (3, H, W) image, returns the probability map."""
    config = params.config
    h, w = image.shape[1:]
    taps = {}
    x = image
    for stage, convs in enumerate(config.convs_per_stage, start=1):
        for k in range(1, convs + 1):
            x = relu(conv_oracle(x, *layer(params, f"conv{stage}_{k}"), pad=1))
            taps[f"conv{stage}_{k}"] = x
        x = pool_oracle(x)

    branches = []
    for i, tap in ((1, "conv3_1"), (2, "conv4_1"), (3, "conv5_1")):
        y = relu(conv_oracle(taps[tap], *layer(params, f"branch{i}_conv1"), pad=1))
        y = relu(conv_oracle(y, *layer(params, f"branch{i}_conv2"), pad=1))
        y = conv_oracle(y, *layer(params, f"branch{i}_score"))
        branches.append(upsample_oracle(y[0], h, w))

    paths = []
    for i, (ra, rb) in enumerate(config.path_rates, start=1):
        total = 0.0
        for comp, rate in (("a", ra), ("b", rb)):
            y = relu(conv_oracle(x, *layer(params, f"csm{i}_{comp}_dilated"), pad=rate, dil=rate))
            total = total + relu(conv_oracle(y, *layer(params, f"csm{i}_{comp}_pointwise")))
        y = conv_oracle(total, *layer(params, f"path{i}_score"))
        paths.append(upsample_oracle(y[0], h, w))

    fused = []
    for i in (1, 2, 3):
        wt, b = layer(params, f"fuse{i}")
        fused.append(wt[0, 0, 0, 0] * paths[i - 1] + wt[0, 1, 0, 0] * branches[i - 1] + b[0])

    wt, b = layer(params, "final")
    logits = sum(wt[0, i, 0, 0] * fused[i] for i in range(3)) + b[0]
    return 1.0 / (1.0 + np.exp(-logits))


def positive_copy(params):
    return params.map_layers(lambda name, l: (np.abs(l.weight.data), np.zeros_like(l.bias.data)))


def support_box(values):
    rows, cols = np.nonzero(np.abs(values) > 0)
    return rows.max() - rows.min() + 1, cols.max() - cols.min() + 1


def random_image(size, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(size=(1, 3, size, size)))


class BuildNetworkTest(unittest.TestCase):
    def test_desk_preset_under_budget(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=0)
        count = params.parameter_count()
        expected = sum(int(np.prod(s.weight_shape)) + s.out_channels for s in layer_shapes(params.config))
        self.assertEqual(count, expected)
        self.assertLess(count, 500_000)

    def test_full_preset_has_vgg16_inventory(self):
        shapes = {s.name: s for s in layer_shapes(BackboneConfig.full())}
        backbone = [s for s in shapes.values() if s.kind == "backbone"]
        self.assertEqual(len(backbone), 13)
        self.assertEqual(shapes["conv1_1"].weight_shape, (64, 3, 3, 3))
        self.assertEqual(shapes["conv3_3"].weight_shape, (256, 256, 3, 3))
        self.assertEqual(shapes["conv5_3"].weight_shape, (512, 512, 3, 3))
        self.assertEqual(shapes["branch1_conv1"].weight_shape, (256, 256, 3, 3))

    def test_input_size_not_divisible_by_32(self):
        with self.assertRaises(ConfigError):
            BackboneConfig.desk((100, 100))

    def test_topology_audit(self):
        inventory = build_network(BackboneConfig.desk((64, 64)), seed=1).inventory()
        self.assertEqual(
            inventory,
            {
                "backbone_conv": 10,
                "pool": 5,
                "side_branch": 3,
                "csm_block": 3,
                "path_head": 3,
                "fusion": 3,
                "aggregation": 1,
            },
        )
        mean = build_network(BackboneConfig.desk((64, 64), aggregation="mean"), seed=1).inventory()
        self.assertEqual(mean["aggregation"], 0)
        self.assertEqual(mean["pool"], 5)

    def test_seed_determines_parameters(self):
        config = BackboneConfig.desk((64, 64))
        a, b, c = build_network(config, 5), build_network(config, 5), build_network(config, 6)
        self.assertTrue(a.equals(b))
        self.assertFalse(a.equals(c))

    def test_fusion_layers_start_balanced(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=0)
        np.testing.assert_array_equal(params["fuse2"].weight.data.ravel(), [0.5, 0.5])
        np.testing.assert_array_equal(params["final"].weight.data.ravel(), [1 / 3] * 3)

    def test_unknown_layer(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=0)
        with self.assertRaises(PreconditionError):
            params["conv6_1"]


class BackboneTest(unittest.TestCase):
    def test_224_input_gives_7x7_pool5(self):
        params = build_network(BackboneConfig.desk(), seed=0)
        taps = backbone_forward(params, random_image(224))
        self.assertEqual(taps["pool5"].shape[2:], (7, 7))
        self.assertEqual(taps["conv3_1"].shape[2:], (56, 56))
        self.assertEqual(taps["conv5_1"].shape[2:], (14, 14))

    def test_64_input_gives_2x2_pool5(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=0)
        self.assertEqual(backbone_forward(params, random_image(64))["pool5"].shape, (1, 32, 2, 2))

    def test_zero_image_zero_weights(self):
        params = zero_network(BackboneConfig.desk((64, 64)))
        taps = backbone_forward(params, Tensor(np.zeros((1, 3, 64, 64))))
        for tap in taps.values():
            self.assertFalse(tap.data.any())

    def test_wrong_shapes_rejected(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=0)
        with self.assertRaises(ShapeError):
            backbone_forward(params, Tensor(np.zeros((1, 1, 64, 64))))
        with self.assertRaises(ShapeError):
            backbone_forward(params, Tensor(np.zeros((1, 3, 48, 64))))
        with self.assertRaises(ShapeError):
            backbone_forward(params, Tensor(np.zeros((2, 3, 64, 64))))


class SideBranchTest(unittest.TestCase):
    def setUp(self):
        self.params = build_network(BackboneConfig.desk((64, 64)), seed=3)

    def test_zero_weights(self):
        params = zero_network(self.params.config)
        tap = Tensor(np.random.default_rng(0).normal(size=(1, 32, 16, 16)))
        self.assertFalse(side_branch_forward(params, tap, 1, (64, 64)).data.any())

    def test_out_size_honored(self):
        for size in (4, 8, 16):
            tap = Tensor(np.ones((1, 32, size, size)))
            out = side_branch_forward(self.params, tap, 2, (64, 48))
            self.assertEqual(out.shape, (1, 1, 64, 48))

    def test_matches_sequential_oracle(self):
        tap = np.random.default_rng(1).normal(size=(32, 8, 8))
        out = side_branch_forward(self.params, Tensor(tap[None]), 3, (32, 32)).data[0, 0]

        y = relu(conv_oracle(tap, *layer(self.params, "branch3_conv1"), pad=1))
        y = relu(conv_oracle(y, *layer(self.params, "branch3_conv2"), pad=1))
        y = conv_oracle(y, *layer(self.params, "branch3_score"))
        np.testing.assert_allclose(out, upsample_oracle(y[0], 32, 32), rtol=1e-10, atol=1e-12)

    def test_index_out_of_range(self):
        with self.assertRaises(PreconditionError):
            side_branch_forward(self.params, Tensor(np.ones((1, 32, 4, 4))), 4, (8, 8))


class CsmTest(unittest.TestCase):
    def test_zero_components(self):
        params = zero_network(BackboneConfig.desk((64, 64)))
        x = Tensor(np.random.default_rng(0).normal(size=(1, 32, 5, 5)))
        self.assertFalse(csm_forward(params, x, 1).data.any())

    def test_swapping_components_is_symmetric(self):
        config = BackboneConfig.desk((64, 64), path_rates=((2, 2), (1, 1), (3, 3)))
        params = build_network(config, seed=4)

        def swap(name, l):
            if name.startswith("csm") and name[5] in "ab":
                other = name[:5] + ("b" if name[5] == "a" else "a") + name[6:]
                return params[other].weight.data, params[other].bias.data
            return l.weight.data, l.bias.data

        swapped = params.map_layers(swap)
        x = Tensor(np.random.default_rng(2).normal(size=(1, 32, 6, 6)))
        for block in (1, 2, 3):
            np.testing.assert_array_equal(
                csm_forward(params, x, block).data, csm_forward(swapped, x, block).data
            )

    def test_impulse_footprints(self):
        params = positive_copy(build_network(BackboneConfig.desk((64, 64)), seed=5))
        x = np.zeros((32, 9, 9))
        x[:, 4, 4] = 1.0

        for silent, rate, side in (("b", 1, 3), ("a", 2, 5)):
            muted = params.map_layers(
                lambda name, l: (
                    l.weight.data * 0.0 if name.startswith(f"csm1_{silent}") else l.weight.data,
                    l.bias.data,
                )
            )
            out = csm_forward(muted, Tensor(x[None]), 1).data[0]
            self.assertEqual(support_box(out.sum(axis=0)), (side, side))

            live = "a" if silent == "b" else "b"
            y = relu(conv_oracle(x, *layer(muted, f"csm1_{live}_dilated"), pad=rate, dil=rate))
            expected = relu(conv_oracle(y, *layer(muted, f"csm1_{live}_pointwise")))
            np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)

    def test_channel_mismatch(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=0)
        with self.assertRaises(ShapeError):
            csm_forward(params, Tensor(np.ones((1, 16, 4, 4))), 2)


class PathTest(unittest.TestCase):
    def test_zero_weights(self):
        params = zero_network(BackboneConfig.desk((64, 64)))
        pool5 = Tensor(np.random.default_rng(0).normal(size=(1, 32, 2, 2)))
        for i in (1, 2, 3):
            self.assertFalse(path_forward(params, pool5, i, (64, 64)).data.any())

    def test_out_size_honored(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=0)
        pool5 = Tensor(np.ones((1, 32, 2, 2)))
        for i in (1, 2, 3):
            self.assertEqual(path_forward(params, pool5, i, (64, 32)).shape, (1, 1, 64, 32))

    def test_impulse_support_grows_with_dilation(self):
        params = positive_copy(build_network(BackboneConfig.desk((64, 64)), seed=6))
        pool5 = np.zeros((1, 32, 19, 19))
        pool5[0, :, 9, 9] = 1.0
        boxes = [
            support_box(path_forward(params, Tensor(pool5), i, (19, 19)).data[0, 0])
            for i in (1, 2, 3)
        ]
        self.assertEqual(boxes, [(5, 5), (9, 9), (17, 17)])

    def test_index_out_of_range(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=0)
        with self.assertRaises(PreconditionError):
            path_forward(params, Tensor(np.ones((1, 32, 2, 2))), 0, (64, 64))


class FusionTest(unittest.TestCase):
    def setUp(self):
        self.params = build_network(BackboneConfig.desk((64, 64)), seed=7)
        self.rng = np.random.default_rng(8)

    def with_layer(self, name, weight, bias):
        return self.params.map_layers(
            lambda n, l: (np.reshape(weight, l.weight.shape), np.array([bias]))
            if n == name
            else (l.weight.data, l.bias.data)
        )

    def test_balanced_weights_keep_common_map(self):
        m = Tensor(self.rng.normal(size=(1, 1, 8, 8)))
        out = fuse_path(self.params, m, m, 1)
        np.testing.assert_array_equal(out.data, m.data)

    def test_projection(self):
        params = self.with_layer("fuse2", [1.0, 0.0], 0.0)
        p, b = (Tensor(v) for v in self.rng.normal(size=(2, 1, 1, 8, 8)))
        np.testing.assert_array_equal(fuse_path(params, p, b, 2).data, p.data)

    def test_affine_pointwise(self):
        w1, w2, bias = self.rng.normal(size=3)
        params = self.with_layer("fuse3", [w1, w2], bias)
        p, b = self.rng.normal(size=(2, 1, 1, 6, 7))
        out = fuse_path(params, Tensor(p), Tensor(b), 3).data
        np.testing.assert_allclose(out, w1 * p + w2 * b + bias, rtol=1e-12, atol=1e-12)

    def test_affine_in_inputs(self):
        w1, w2 = self.rng.normal(size=2)
        params = self.with_layer("fuse1", [w1, w2], 0.0)
        p, b, p2, b2 = self.rng.normal(size=(4, 1, 1, 5, 5))
        alpha = 1.7
        lhs = fuse_path(params, Tensor(alpha * p + p2), Tensor(alpha * b + b2), 1).data
        rhs = alpha * fuse_path(params, Tensor(p), Tensor(b), 1).data + fuse_path(
            params, Tensor(p2), Tensor(b2), 1
        ).data
        self.assertLessEqual(np.max(np.abs(lhs - rhs)), 1e-10)

    def test_size_mismatch(self):
        with self.assertRaises(ShapeError):
            fuse_path(self.params, Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 4, 5))), 1)


class AggregateTest(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(9)
        self.maps = [Tensor(v) for v in self.rng.normal(size=(3, 1, 1, 6, 6))]

    def test_mean_mode_is_idempotent(self):
        params = build_network(BackboneConfig.desk((64, 64), aggregation="mean"), seed=0)
        m = self.maps[0]
        np.testing.assert_allclose(aggregate_final(params, m, m, m).data, m.data, rtol=1e-15)

    def test_learned_thirds_equal_mean(self):
        learned = build_network(BackboneConfig.desk((64, 64)), seed=0)
        mean = build_network(BackboneConfig.desk((64, 64), aggregation="mean"), seed=0)
        np.testing.assert_allclose(
            aggregate_final(learned, *self.maps).data,
            aggregate_final(mean, *self.maps).data,
            atol=1e-14,
        )

    def test_learned_random_weights(self):
        w = self.rng.normal(size=3)
        bias = self.rng.normal()
        params = build_network(BackboneConfig.desk((64, 64)), seed=0).map_layers(
            lambda n, l: (w.reshape(1, 3, 1, 1), np.array([bias]))
            if n == "final"
            else (l.weight.data, l.bias.data)
        )
        expected = sum(w[i] * self.maps[i].data for i in range(3)) + bias
        np.testing.assert_allclose(aggregate_final(params, *self.maps).data, expected, atol=1e-12)

    def test_size_mismatch(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=0)
        with self.assertRaises(ShapeError):
            aggregate_final(params, self.maps[0], self.maps[1], Tensor(np.ones((1, 1, 6, 5))))


class InferenceTest(unittest.TestCase):
    def test_zero_params_give_one_half(self):
        params = zero_network(BackboneConfig.desk((64, 64)))
        prob = infer_probability_map(params, random_image(64))
        np.testing.assert_array_equal(prob.values, np.full((64, 64), 0.5))

    def test_deterministic(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=2)
        image = random_image(64, seed=3)
        a = infer_probability_map(params, image).values
        b = infer_probability_map(params, image).values
        np.testing.assert_array_equal(a, b)
        self.assertTrue(((a > 0) & (a < 1)).all())

    def test_all_maps_share_input_size(self):
        params = build_network(BackboneConfig.desk((64, 96)), seed=2)
        image = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 96)))
        outputs = forward(params, image)
        for m in outputs.paths + outputs.branches + outputs.fused + [outputs.final_logits]:
            self.assertEqual(m.shape, (1, 1, 64, 96))

    def test_reloaded_checkpoint_matches_scripted_forward(self):
        params = build_network(BackboneConfig.desk((64, 64)), seed=11)
        image = np.random.default_rng(12).uniform(size=(3, 64, 64))
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(params, os.path.join(tmp, "net.lseg"))
            reloaded = load_checkpoint(path)

        original = infer_probability_map(params, image).values
        restored = infer_probability_map(reloaded, image).values
        np.testing.assert_array_equal(original, restored)
        np.testing.assert_allclose(restored, scripted_forward(reloaded, image), atol=1e-10)

    def test_desk_inference_latency(self):
        params = build_network(BackboneConfig.desk(), seed=0)
        image = random_image(224)
        start = time.perf_counter()
        prob = infer_probability_map(params, image)
        self.assertLessEqual(time.perf_counter() - start, 5.0)
        self.assertEqual(prob.shape, (224, 224))


class CheckpointTest(unittest.TestCase):
    def setUp(self):
        self.params = build_network(BackboneConfig.desk((64, 64), aggregation="learned"), seed=13)

    def test_round_trip_is_bit_exact(self):
        blob = to_bytes(self.params)
        self.assertTrue(from_bytes(blob).equals(self.params))
        self.assertEqual(to_bytes(from_bytes(blob)), blob)

    def test_header(self):
        blob = to_bytes(self.params)
        self.assertEqual(blob[:4], b"LSEG")
        self.assertEqual(int.from_bytes(blob[4:6], "little"), 1)

    def test_bad_magic(self):
        with self.assertRaises(CheckpointError):
            from_bytes(b"XXXX" + to_bytes(self.params)[4:])

    def test_truncated(self):
        with self.assertRaises(CheckpointError):
            from_bytes(to_bytes(self.params)[:-3])

    def test_unsupported_version(self):
        blob = bytearray(to_bytes(self.params))
        blob[4] = 9
        with self.assertRaises(CheckpointError):
            from_bytes(bytes(blob))


def cross_entropy(prob, truth):
    p = clamp(prob, 1e-12, 1.0 - 1e-12)
    return -sum_all(truth * log(p) + (1.0 - truth) * log(1.0 - p))


class EndToEndGradientTest(unittest.TestCase):
    def run_check(self, max_coords):
        params = build_network(BackboneConfig.desk((64, 64)), seed=21)
        image = random_image(64, seed=22)
        yy, xx = np.mgrid[:64, :64]
        truth = (((yy - 30) / 18.0) ** 2 + ((xx - 34) / 14.0) ** 2 <= 1.0).astype(float)[None, None]

        def objective(p):
            return cross_entropy(forward(p, image).probability, truth)

        return gradient_check_report(objective, params, 1e-5, max_coords_per_tensor=max_coords)

    def test_every_parameter_tensor_sampled(self):
        report = self.run_check(2)
        self.assertLessEqual(report.worst, 1e-4)
        unchecked = [name for name, n in report.checked.items() if n == 0]
        self.assertEqual(unchecked, [])

    @unittest.skipUnless(SLOW_TESTS, "set LESIONSEG_SLOW_TESTS=true")
    def test_every_parameter_tensor_wide(self):
        self.assertLessEqual(self.run_check(25).worst, 1e-4)


if __name__ == "__main__":
    unittest.main()
