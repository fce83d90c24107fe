import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from analytics import imaging, plots
from analytics.dataset import (
    ELLIPSES_CSV,
    DatasetIndex,
    generate_synthetic_dataset,
    truth_name,
)
from analytics.metrics import MetricsReport, dice, evaluate_dataset, jaccard
from segmentation.exceptions import (
    DatasetError,
    ImageDecodeError,
    PreconditionError,
    ShapeError,
)
from segmentation.maps import BinaryMask, ProbabilityMap


def bilinear_oracle(values, out_h, out_w):
    """Per-coordinate align-corners bilinear formula."""
    h, w = values.shape

    def source(o, n_in, n_out):
        if n_in == 1 or n_out == 1:
            return 0, 0.0
        s = o * (n_in - 1) / (n_out - 1)
        i = min(int(math.floor(s)), n_in - 2)
        return i, s - i

    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        y0, fy = source(oy, h, out_h)
        y1 = min(y0 + 1, h - 1)
        for ox in range(out_w):
            x0, fx = source(ox, w, out_w)
            x1 = min(x0 + 1, w - 1)
            out[oy, ox] = (
                (1 - fy) * (1 - fx) * values[y0, x0]
                + (1 - fy) * fx * values[y0, x1]
                + fy * (1 - fx) * values[y1, x0]
                + fy * fx * values[y1, x1]
            )
    return out


def flat_mask(shape, start, stop):
    bits = np.zeros(shape[0] * shape[1], dtype=bool)
    bits[start:stop] = True
    return BinaryMask(bits.reshape(shape))


class TempDirTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()


class ImageIoTest(TempDirTestCase):
    def test_load_image_scales_bytes(self):
        pixels = np.array(
            [[[0, 128, 255], [10, 20, 30]], [[200, 100, 50], [1, 2, 3]]], dtype=np.uint8
        )
        path = self.tmp / "tiny.png"
        Image.fromarray(pixels).save(path)

        image = imaging.load_image(path)
        self.assertEqual(image.shape, (3, 2, 2))
        np.testing.assert_array_equal(image, pixels.transpose(2, 0, 1) / 255.0)

    def test_grayscale_input_becomes_rgb(self):
        path = self.tmp / "gray.png"
        Image.fromarray(np.full((3, 4), 51, dtype=np.uint8)).save(path)
        image = imaging.load_image(path)
        self.assertEqual(image.shape, (3, 3, 4))
        np.testing.assert_allclose(image, 0.2)

    def test_mask_round_trip(self):
        rng = np.random.default_rng(0)
        mask = BinaryMask(rng.uniform(size=(13, 17)) < 0.4)
        path = imaging.save_mask(self.tmp / "m_segmentation.png", mask)
        self.assertEqual(imaging.load_mask(path), mask)
        stored = np.asarray(Image.open(path))
        self.assertEqual(stored.dtype, np.uint8)
        self.assertTrue(set(np.unique(stored)) <= {0, 255})

    def test_truncated_file_names_path(self):
        path = self.tmp / "broken.png"
        Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8)).save(path)
        path.write_bytes(path.read_bytes()[:40])
        with self.assertRaises(ImageDecodeError) as ctx:
            imaging.load_image(path)
        self.assertEqual(ctx.exception.path, str(path))
        self.assertIsInstance(ctx.exception, DatasetError)

    def test_non_binary_truth_is_rejected(self):
        path = self.tmp / "gray_segmentation.png"
        Image.fromarray(np.array([[0, 128], [255, 0]], dtype=np.uint8)).save(path)
        with self.assertRaises(ImageDecodeError):
            imaging.load_mask(path)

    def test_probability_map_is_quantized(self):
        values = np.array([[0.0, 0.5, 1.0], [0.1, 0.9, 0.333]])
        path = imaging.save_probability_map(self.tmp / "p_prob.png", ProbabilityMap(values))
        loaded = imaging.load_probability_map(path)
        np.testing.assert_array_equal(loaded.values, np.rint(values * 255) / 255)

    def test_overlay_tints_only_mask(self):
        image = np.full((3, 4, 4), 0.5)
        mask = BinaryMask(np.eye(4, dtype=bool))
        out = imaging.overlay(image, mask)
        self.assertEqual(out.shape, (4, 4, 3))
        np.testing.assert_array_equal(out[~mask.bits], 128)
        self.assertFalse((out[mask.bits] == 128).all())
        with self.assertRaises(ShapeError):
            imaging.overlay(image, BinaryMask.empty(3, 4))


class ResizeTest(unittest.TestCase):
    def test_nearest_replicates_pixels(self):
        mask = BinaryMask(np.array([[1, 0], [0, 1]], dtype=bool))
        grown = imaging.resize(mask, 4, 4)
        want = np.kron(mask.bits, np.ones((2, 2), dtype=bool))
        np.testing.assert_array_equal(grown.bits, want)

    def test_own_size_is_identity(self):
        rng = np.random.default_rng(1)
        prob = ProbabilityMap(rng.uniform(size=(7, 5)), source_size=(70, 50))
        same = imaging.resize(prob, 7, 5)
        np.testing.assert_array_equal(same.values, prob.values)
        self.assertEqual(same.source_size, (70, 50))
        image = rng.uniform(size=(3, 6, 6))
        np.testing.assert_array_equal(imaging.resize(image, 6, 6, "nearest"), image)

    def test_bilinear_matches_formula(self):
        rng = np.random.default_rng(2)
        values = rng.uniform(size=(3, 3))
        out = imaging.resize(ProbabilityMap(values), 5, 5)
        np.testing.assert_allclose(out.values, bilinear_oracle(values, 5, 5), atol=1e-15)
        for shape, target in (((4, 7), (9, 3)), ((1, 5), (3, 8)), ((6, 6), (2, 2))):
            values = rng.uniform(size=shape)
            got = imaging.resize(values, *target)
            np.testing.assert_allclose(got, bilinear_oracle(values, *target), atol=1e-14)

    def test_image_channels_resized_independently(self):
        rng = np.random.default_rng(3)
        image = rng.uniform(size=(3, 5, 4))
        out = imaging.resize(image, 8, 8)
        self.assertEqual(out.shape, (3, 8, 8))
        for c in range(3):
            np.testing.assert_allclose(out[c], bilinear_oracle(image[c], 8, 8), atol=1e-14)

    def test_invalid_targets(self):
        mask = BinaryMask.empty(4, 4)
        with self.assertRaises(PreconditionError):
            imaging.resize(mask, 0, 4)
        with self.assertRaises(PreconditionError):
            imaging.resize(mask, 4, 4, "bilinear")
        with self.assertRaises(PreconditionError):
            imaging.resize(np.zeros((4, 4)), 2, 2, "bicubic")


class MetricsTest(unittest.TestCase):
    def test_identity_and_disjoint(self):
        a = flat_mask((10, 10), 0, 30)
        b = flat_mask((10, 10), 40, 60)
        self.assertEqual(jaccard(a, a), 1.0)
        self.assertEqual(jaccard(a, b), 0.0)
        self.assertEqual(dice(a, b), 0.0)

    def test_third_overlap(self):
        pred = flat_mask((15, 10), 0, 100)
        truth = flat_mask((15, 10), 50, 150)
        self.assertAlmostEqual(jaccard(pred, truth), 1 / 3, places=15)
        self.assertAlmostEqual(dice(pred, truth), 0.5, places=15)

    def test_both_empty_agree(self):
        empty = BinaryMask.empty(4, 4)
        self.assertEqual(jaccard(empty, empty), 1.0)
        self.assertEqual(dice(empty, empty), 1.0)

    def test_symmetry_and_dice_relation(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            a = BinaryMask(rng.uniform(size=(9, 11)) < rng.uniform(0, 0.6))
            b = BinaryMask(rng.uniform(size=(9, 11)) < rng.uniform(0, 0.6))
            j = jaccard(a, b)
            self.assertEqual(j, jaccard(b, a))
            self.assertLessEqual(abs(dice(a, b) - 2 * j / (1 + j)), 1e-12)
            self.assertTrue(0.0 <= j <= 1.0)

    def test_size_mismatch(self):
        with self.assertRaises(ShapeError):
            jaccard(BinaryMask.empty(4, 4), BinaryMask.empty(4, 5))

    def test_report_csv_and_thresholded_mean(self):
        report = MetricsReport.from_scores(
            {
                "b": {"jaccard": 0.5, "dice": 2 / 3},
                "a": {"jaccard": 1.0, "dice": 1.0},
                "c": {"jaccard": 0.75, "dice": 6 / 7},
            }
        )
        self.assertEqual(report.count, 3)
        self.assertAlmostEqual(report.mean_jaccard, 0.75)
        self.assertAlmostEqual(report.thresholded_mean, 1.75 / 3)

        lines = report.to_csv().splitlines()
        self.assertEqual(lines[0], "stem,jaccard,dice")
        self.assertEqual([line.split(",")[0] for line in lines[1:4]], ["a", "b", "c"])
        self.assertEqual(lines[1], "a,1.0,1.0")
        self.assertEqual(lines[-1], "count,3,")
        self.assertTrue(lines[-2].startswith("thresholded_mean,"))
        self.assertTrue(lines[-3].startswith("mean,0.75,"))
        self.assertIn("thresholded mean", report.to_table())


class EvaluateDatasetTest(TempDirTestCase):
    def write(self, directory, stem, mask):
        directory.mkdir(exist_ok=True)
        imaging.save_mask(directory / truth_name(stem), mask)

    def test_identical_predictions_score_one(self):
        rng = np.random.default_rng(5)
        for i in range(3):
            mask = BinaryMask(rng.uniform(size=(8, 8)) < 0.5)
            self.write(self.tmp / "truth", f"img{i}", mask)
            self.write(self.tmp / "pred", f"img{i}", mask)
        report = evaluate_dataset(self.tmp / "pred", self.tmp / "truth", workers=2)
        self.assertEqual(report.mean_jaccard, 1.0)
        self.assertEqual(report.count, 3)

    def test_mean_is_average_of_known_overlaps(self):
        cases = {"x": (0, 100, 50, 150), "y": (0, 40, 0, 40), "z": (0, 10, 20, 30)}
        want = []
        for stem, (p0, p1, t0, t1) in cases.items():
            self.write(self.tmp / "pred", stem, flat_mask((15, 10), p0, p1))
            self.write(self.tmp / "truth", stem, flat_mask((15, 10), t0, t1))
            inter = max(0, min(p1, t1) - max(p0, t0))
            want.append(inter / ((p1 - p0) + (t1 - t0) - inter))
        report = evaluate_dataset(self.tmp / "pred", self.tmp / "truth")
        self.assertAlmostEqual(report.mean_jaccard, sum(want) / 3, places=15)
        self.assertEqual(list(report.frame.index), ["x", "y", "z"])

    def test_empty_prediction_dir(self):
        (self.tmp / "pred").mkdir()
        with self.assertRaises(DatasetError):
            evaluate_dataset(self.tmp / "pred", self.tmp)

    def test_missing_truth_lists_stems(self):
        self.write(self.tmp / "pred", "seen", BinaryMask.empty(4, 4))
        self.write(self.tmp / "pred", "lost", BinaryMask.empty(4, 4))
        self.write(self.tmp / "truth", "seen", BinaryMask.empty(4, 4))
        with self.assertRaises(DatasetError) as ctx:
            evaluate_dataset(self.tmp / "pred", self.tmp / "truth")
        self.assertEqual(ctx.exception.stems, ["lost"])


class DatasetTest(TempDirTestCase):
    def test_synthetic_masks_match_ellipses(self):
        index = generate_synthetic_dataset(4, 64, seed=12, out_dir=self.tmp)
        self.assertEqual(len(index), 4)
        index.require_truth()

        shapes = pd.read_csv(self.tmp / ELLIPSES_CSV, float_precision="round_trip")
        for row in shapes.itertuples():
            mask = imaging.load_mask(self.tmp / truth_name(row.stem))
            c, s = math.cos(row.angle), math.sin(row.angle)
            for y in range(64):
                for x in range(64):
                    dx, dy = x - row.cx, y - row.cy
                    u = (dx * c + dy * s) / row.a
                    v = (-dx * s + dy * c) / row.b
                    self.assertEqual(mask.bits[y, x], u * u + v * v <= 1.0)
            image = imaging.load_image(self.tmp / f"{row.stem}.png")
            self.assertGreater(image[:, mask.bits].mean(), image[:, ~mask.bits].mean())

    def test_same_seed_gives_identical_files(self):
        generate_synthetic_dataset(3, 32, seed=7, out_dir=self.tmp / "a")
        generate_synthetic_dataset(3, 32, seed=7, out_dir=self.tmp / "b")
        names = sorted(p.name for p in (self.tmp / "a").iterdir())
        self.assertEqual(names, sorted(p.name for p in (self.tmp / "b").iterdir()))
        for name in names:
            self.assertEqual((self.tmp / "a" / name).read_bytes(), (self.tmp / "b" / name).read_bytes())

    def test_invalid_arguments(self):
        with self.assertRaises(PreconditionError):
            generate_synthetic_dataset(0, 64, seed=0, out_dir=self.tmp)
        with self.assertRaises(PreconditionError):
            generate_synthetic_dataset(2, 48, seed=0, out_dir=self.tmp)

    def test_scan_pairs_by_stem(self):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        Image.fromarray(rgb).save(self.tmp / "ISIC_0000000.jpg")
        Image.fromarray(rgb).save(self.tmp / "ISIC_0000001.png")
        imaging.save_mask(self.tmp / "ISIC_0000000_segmentation.png", BinaryMask.empty(4, 4))
        imaging.save_mask(self.tmp / "ISIC_0000001_prob.png", BinaryMask.empty(4, 4))
        (self.tmp / "notes.txt").write_text("ignored")

        index = DatasetIndex.scan(self.tmp)
        self.assertEqual(index.stems, ["ISIC_0000000", "ISIC_0000001"])
        pairs = dict((stem, truth) for stem, _, truth in index.pairs())
        self.assertTrue(pairs["ISIC_0000000"].endswith("ISIC_0000000_segmentation.png"))
        self.assertIsNone(pairs["ISIC_0000001"])
        with self.assertRaises(DatasetError) as ctx:
            index.require_truth()
        self.assertEqual(ctx.exception.stems, ["ISIC_0000001"])

    def test_duplicate_stems_are_rejected(self):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        Image.fromarray(rgb).save(self.tmp / "dup.png")
        Image.fromarray(rgb).save(self.tmp / "dup.jpg")
        with self.assertRaises(DatasetError) as ctx:
            DatasetIndex.scan(self.tmp)
        self.assertEqual(ctx.exception.stems, ["dup"])


class PlotsTest(TempDirTestCase):
    def test_loss_chart(self):
        fig = plots.loss_chart([3.0, 2.0, 1.5])
        self.assertEqual(list(fig.data[0].y), [3.0, 2.0, 1.5])
        self.assertEqual(list(fig.data[0].x), [1, 2, 3])
        path = plots.write_loss_chart([1.0, 0.5], self.tmp / "loss.html")
        self.assertTrue(Path(path).read_text().lstrip().startswith("<html>"))

    def test_jaccard_chart(self):
        report = MetricsReport.from_scores({"a": {"jaccard": 0.9, "dice": 0.947}})
        fig = plots.jaccard_chart(report)
        self.assertEqual(list(fig.data[0].x), ["a"])
        plots.write_jaccard_chart(report, self.tmp / "jaccard.html")
        self.assertTrue((self.tmp / "jaccard.html").is_file())
