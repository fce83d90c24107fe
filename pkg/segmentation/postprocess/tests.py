import math
import unittest
from fractions import Fraction

import numpy as np

from segmentation.exceptions import PreconditionError
from segmentation.maps import BinaryMask, ProbabilityMap
from segmentation.postprocess import (
    StructuringElement,
    close,
    connected_components,
    dilate,
    erode,
    fill_holes,
    label_components,
    morphology,
    otsu_threshold,
    postprocess_pipeline,
    select_primary_region,
)


def all_4x4_masks() -> np.ndarray:
    idx = np.arange(1 << 16)
    return ((idx[:, None] >> np.arange(16)) & 1).astype(bool).reshape(-1, 4, 4)


def dilate_oracle(masks, r):
    """Batched set definition: some SE offset inside the image hits foreground."""
    _, h, w = masks.shape
    out = np.zeros_like(masks)
    for y in range(h):
        for x in range(w):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[:, y, x] |= masks[:, yy, xx]
    return out


def erode_oracle(masks, r):
    """Batched set definition: every SE offset inside the image hits foreground."""
    _, h, w = masks.shape
    out = masks.copy()
    for y in range(h):
        for x in range(w):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[:, y, x] &= masks[:, yy, xx]
    return out


def fill_oracle(masks):
    """Batched flood fill of background from the border, 4-connected."""
    background = ~masks
    border = np.zeros(masks.shape[1:], dtype=bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    reach = background & border
    while True:
        grown = reach.copy()
        grown[:, 1:, :] |= reach[:, :-1, :]
        grown[:, :-1, :] |= reach[:, 1:, :]
        grown[:, :, 1:] |= reach[:, :, :-1]
        grown[:, :, :-1] |= reach[:, :, 1:]
        grown &= background
        if np.array_equal(grown, reach):
            break
        reach = grown
    return masks | (background & ~reach)


def component_ids_oracle(masks):
    """Batched 8-connected labels by min-raster-index propagation.

    A component's minimum raster index is its first pixel in raster order, so
    ranking the roots gives ids in first-occurrence order.
    """
    n, h, w = masks.shape
    big = h * w
    label = np.where(masks, np.arange(big).reshape(h, w), big)
    while True:
        padded = np.pad(label, ((0, 0), (1, 1), (1, 1)), constant_values=big)
        best = label.copy()
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                best = np.minimum(best, padded[:, dy : dy + h, dx : dx + w])
        best = np.where(masks, best, big)
        if np.array_equal(best, label):
            break
        label = best
    flat = label.reshape(n, big)
    is_root = masks.reshape(n, big) & (flat == np.arange(big))
    rank = np.cumsum(is_root, axis=1)
    ids = np.take_along_axis(rank, np.minimum(flat, big - 1), axis=1)
    return np.where(masks.reshape(n, big), ids, 0).reshape(n, h, w)


def union_find_components(bits):
    h, w = bits.shape
    parent = list(range(h * w))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for y in range(h):
        for x in range(w):
            if not bits[y, x]:
                continue
            for dy, dx in ((0, 1), (1, -1), (1, 0), (1, 1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and bits[yy, xx]:
                    a, b = find(y * w + x), find(yy * w + xx)
                    if a != b:
                        parent[max(a, b)] = min(a, b)

    groups = {}
    for y in range(h):
        for x in range(w):
            if bits[y, x]:
                groups.setdefault(find(y * w + x), []).append((x, y))
    # dict insertion order is first raster occurrence
    return list(groups.values())


def flood_fill_holes(bits):
    h, w = bits.shape
    seen = np.zeros_like(bits)
    stack = [
        (y, x)
        for y in range(h)
        for x in range(w)
        if (y in (0, h - 1) or x in (0, w - 1)) and not bits[y, x]
    ]
    for y, x in stack:
        seen[y, x] = True
    while stack:
        y, x = stack.pop()
        for yy, xx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= yy < h and 0 <= xx < w and not bits[yy, xx] and not seen[yy, xx]:
                seen[yy, xx] = True
                stack.append((yy, xx))
    return ~seen


def otsu_oracle(values):
    """Scan all 256 candidate thresholds with exact rational arithmetic."""
    flat = [float(v) for v in values.ravel()]
    bins = [min(255, max(0, math.ceil(v * 256) - 1)) for v in flat]
    n = len(bins)
    best_k, best_var = None, None
    for k in range(255):
        low = [b for b in bins if b <= k]
        high = [b for b in bins if b > k]
        if not low or not high:
            continue
        diff = Fraction(sum(low), len(low)) - Fraction(sum(high), len(high))
        var = Fraction(len(low) * len(high), n * n) * diff * diff
        if best_var is None or var > best_var:
            best_k, best_var = k, var
    if best_k is None:
        return max(flat), np.zeros(values.shape, dtype=bool)
    threshold = (best_k + 1) / 256
    return threshold, values > threshold


def rect_mask(h, w, top, left, bottom, right):
    bits = np.zeros((h, w), dtype=bool)
    bits[top:bottom, left:right] = True
    return bits


class OtsuThresholdTest(unittest.TestCase):
    def test_two_levels_are_separated(self):
        values = np.array([[0.1] * 5, [0.9] * 5])
        threshold, mask = otsu_threshold(ProbabilityMap(values))
        self.assertGreater(threshold, 0.1)
        self.assertLess(threshold, 0.9)
        np.testing.assert_array_equal(mask.bits, values > 0.5)

    def test_constant_map_is_all_background(self):
        threshold, mask = otsu_threshold(ProbabilityMap(np.full((6, 7), 0.37)))
        self.assertEqual(threshold, 0.37)
        self.assertEqual(mask.area, 0)
        self.assertEqual(mask.shape, (6, 7))

    def test_values_sharing_a_bin_are_degenerate(self):
        values = np.array([[0.5, 0.5 - 1e-9], [0.499, 0.4999]])
        threshold, mask = otsu_threshold(ProbabilityMap(values))
        self.assertEqual(mask.area, 0)
        self.assertEqual(threshold, 0.5)

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(11)
        for case in range(1000):
            h, w = rng.integers(1, 11, size=2)
            if case % 3 == 0:
                values = rng.choice([0.0, 0.02, 0.3, 0.31, 0.8, 1.0], size=(h, w))
            else:
                values = rng.uniform(size=(h, w)) ** rng.uniform(0.3, 3.0)
            threshold, mask = otsu_threshold(ProbabilityMap(values))
            want_threshold, want_bits = otsu_oracle(values)
            self.assertEqual(threshold, want_threshold, msg=f"case {case}")
            np.testing.assert_array_equal(mask.bits, want_bits, err_msg=f"case {case}")


class MorphologyTest(unittest.TestCase):
    se = StructuringElement(1)

    def test_point_dilates_to_block_and_closes_to_itself(self):
        point = BinaryMask(rect_mask(5, 5, 2, 2, 3, 3))
        grown = dilate(point, self.se)
        np.testing.assert_array_equal(grown.bits, rect_mask(5, 5, 1, 1, 4, 4))
        self.assertEqual(erode(grown, self.se), point)
        self.assertEqual(close(point, self.se), point)

    def test_full_mask_is_fixed_point_of_close(self):
        full = BinaryMask(np.ones((6, 4), dtype=bool))
        self.assertEqual(close(full, self.se), full)
        self.assertEqual(erode(full, StructuringElement(3)), full)

    def test_close_fills_one_pixel_gap(self):
        bits = np.zeros((5, 5), dtype=bool)
        bits[2, 1] = bits[2, 3] = True
        closed = close(BinaryMask(bits), self.se)
        self.assertTrue(closed.bits[2, 2])
        want = erode_oracle(dilate_oracle(bits[None], 1), 1)[0]
        np.testing.assert_array_equal(closed.bits, want)

    def test_dispatch(self):
        mask = BinaryMask(rect_mask(7, 7, 2, 2, 5, 4))
        self.assertEqual(morphology(mask, self.se, "dilate"), dilate(mask, self.se))
        self.assertEqual(morphology(mask, self.se, "erode"), erode(mask, self.se))
        self.assertEqual(morphology(mask, self.se, "close"), close(mask, self.se))
        with self.assertRaises(PreconditionError):
            morphology(mask, self.se, "open")

    def test_radius_must_be_positive(self):
        with self.assertRaises(PreconditionError):
            StructuringElement(0)

    def test_unit_radius_matches_set_definition(self):
        rng = np.random.default_rng(4)
        density = rng.uniform(0.05, 0.7, size=(1000, 1, 1))
        batch = rng.uniform(size=(1000, 16, 16)) < density
        want_dilate = dilate_oracle(batch, 1)
        want_erode = erode_oracle(batch, 1)
        want_close = erode_oracle(want_dilate, 1)
        for i, bits in enumerate(batch):
            mask = BinaryMask(bits)
            np.testing.assert_array_equal(dilate(mask, self.se).bits, want_dilate[i], err_msg=f"mask {i}")
            np.testing.assert_array_equal(erode(mask, self.se).bits, want_erode[i], err_msg=f"mask {i}")
            np.testing.assert_array_equal(close(mask, self.se).bits, want_close[i], err_msg=f"mask {i}")

    def test_larger_radius_matches_set_definition(self):
        rng = np.random.default_rng(5)
        batch = rng.uniform(size=(200, 12, 16)) < 0.2
        for r in (2, 3):
            se = StructuringElement(r)
            want_dilate = dilate_oracle(batch, r)
            want_erode = erode_oracle(batch, r)
            for i, bits in enumerate(batch):
                mask = BinaryMask(bits)
                np.testing.assert_array_equal(dilate(mask, se).bits, want_dilate[i])
                np.testing.assert_array_equal(erode(mask, se).bits, want_erode[i])

    def test_order_properties_on_random_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            density = rng.uniform(0.05, 0.7)
            bits = rng.uniform(size=(16, 16)) < density
            larger = bits | (rng.uniform(size=(16, 16)) < 0.1)
            mask, bigger = BinaryMask(bits), BinaryMask(larger)
            d, e, c = dilate(mask, self.se), erode(mask, self.se), close(mask, self.se)

            self.assertTrue((d.bits >= bits).all())
            self.assertTrue((e.bits <= bits).all())
            self.assertTrue((dilate(bigger, self.se).bits >= d.bits).all())
            self.assertTrue((erode(bigger, self.se).bits >= e.bits).all())
            self.assertTrue((c.bits >= bits).all())
            self.assertEqual(close(c, self.se), c)


class FillHolesTest(unittest.TestCase):
    def test_ring_center_is_filled(self):
        ring = np.ones((5, 5), dtype=bool)
        ring[2, 2] = False
        np.testing.assert_array_equal(fill_holes(BinaryMask(ring)).bits, np.ones((5, 5), dtype=bool))

    def test_mask_without_holes_is_unchanged(self):
        bits = rect_mask(8, 8, 0, 0, 3, 8) | rect_mask(8, 8, 5, 2, 7, 5)
        self.assertEqual(fill_holes(BinaryMask(bits)), BinaryMask(bits))

    def test_diagonal_leak_is_still_a_hole(self):
        # 4-connected background cannot escape through a diagonal gap
        bits = np.array(
            [
                [0, 0, 0, 0, 0],
                [0, 1, 1, 0, 0],
                [0, 1, 0, 1, 0],
                [0, 0, 1, 1, 0],
                [0, 0, 0, 0, 0],
            ],
            dtype=bool,
        )
        self.assertTrue(fill_holes(BinaryMask(bits)).bits[2, 2])

    def test_matches_flood_fill(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            bits = rng.uniform(size=(16, 16)) < rng.uniform(0.2, 0.8)
            filled = fill_holes(BinaryMask(bits))
            np.testing.assert_array_equal(filled.bits, flood_fill_holes(bits))
            self.assertTrue((filled.bits >= bits).all())


class ConnectedComponentsTest(unittest.TestCase):
    def test_empty_mask(self):
        self.assertEqual(connected_components(BinaryMask.empty(4, 4)), [])

    def test_diagonal_pixels_are_one_component(self):
        bits = np.zeros((3, 3), dtype=bool)
        bits[0, 0] = bits[1, 1] = True
        stats = connected_components(BinaryMask(bits))
        self.assertEqual(len(stats), 1)
        self.assertEqual(stats[0].area, 2)
        self.assertEqual(stats[0].centroid, (0.5, 0.5))

    def test_ids_follow_raster_order(self):
        # scipy may number the U's right arm before it meets the left arm
        bits = np.array(
            [
                [1, 0, 1, 0, 0],
                [1, 0, 1, 0, 1],
                [1, 1, 1, 0, 0],
            ],
            dtype=bool,
        )
        labels, stats = label_components(BinaryMask(bits))
        self.assertEqual([s.id for s in stats], [1, 2])
        self.assertEqual(labels[0, 0], 1)
        self.assertEqual(labels[1, 4], 2)
        self.assertEqual([s.area for s in stats], [7, 1])

    def test_distance_is_normalized(self):
        corner = BinaryMask(rect_mask(5, 9, 0, 0, 1, 1))
        center = BinaryMask(rect_mask(5, 9, 2, 4, 3, 5))
        self.assertAlmostEqual(connected_components(corner)[0].distance, 1.0)
        self.assertEqual(connected_components(center)[0].distance, 0.0)
        self.assertEqual(connected_components(BinaryMask(np.ones((1, 1))))[0].distance, 0.0)

    def test_matches_union_find(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            bits = rng.uniform(size=(16, 16)) < rng.uniform(0.1, 0.7)
            mask = BinaryMask(bits)
            stats = connected_components(mask)
            groups = union_find_components(bits)
            self.assertEqual(len(stats), len(groups))
            self.assertEqual(sum(s.area for s in stats), mask.area)
            for component, pixels in zip(stats, groups):
                self.assertEqual(component.area, len(pixels))
                self.assertAlmostEqual(component.centroid[0], np.mean([p[0] for p in pixels]))
                self.assertAlmostEqual(component.centroid[1], np.mean([p[1] for p in pixels]))
                self.assertGreaterEqual(component.distance, 0.0)
                self.assertLessEqual(component.distance, 1.0)

    def test_mask_caches_components(self):
        mask = BinaryMask(rect_mask(6, 6, 1, 1, 3, 3))
        self.assertIs(mask.components, mask.components)
        self.assertEqual(mask.components[0].area, 4)


class SelectPrimaryRegionTest(unittest.TestCase):
    def test_single_component_is_unchanged(self):
        mask = BinaryMask(rect_mask(10, 10, 0, 0, 3, 2))
        self.assertEqual(select_primary_region(mask), mask)

    def test_empty_mask(self):
        self.assertEqual(select_primary_region(BinaryMask.empty(5, 3)), BinaryMask.empty(5, 3))

    def test_corner_speck_is_removed(self):
        blob = rect_mask(32, 32, 11, 11, 21, 21)
        speck = np.zeros((32, 32), dtype=bool)
        speck[0, 0] = speck[0, 1] = speck[1, 0] = True
        kept = select_primary_region(BinaryMask(blob | speck))
        np.testing.assert_array_equal(kept.bits, blob)

    def test_centered_small_region_beats_large_corner_region(self):
        corner = rect_mask(41, 41, 0, 0, 4, 4)
        center = rect_mask(41, 41, 19, 19, 22, 22)
        kept = select_primary_region(BinaryMask(corner | center))
        np.testing.assert_array_equal(kept.bits, center)

    def test_tie_keeps_smaller_id(self):
        left = rect_mask(5, 9, 2, 1, 3, 2)
        right = rect_mask(5, 9, 2, 7, 3, 8)
        kept = select_primary_region(BinaryMask(left | right))
        np.testing.assert_array_equal(kept.bits, left)

    def test_matches_score_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(300):
            bits = rng.uniform(size=(12, 15)) < rng.uniform(0.05, 0.5)
            kept = select_primary_region(BinaryMask(bits))
            groups = union_find_components(bits)
            self.assertTrue((kept.bits <= bits).all())
            if not groups:
                self.assertEqual(kept.area, 0)
                continue
            cx, cy, half = 7.0, 5.5, math.hypot(7.0, 5.5)
            scores = []
            for pixels in groups:
                x = sum(p[0] for p in pixels) / len(pixels)
                y = sum(p[1] for p in pixels) / len(pixels)
                scores.append(len(pixels) * (1 - math.hypot(x - cx, y - cy) / half))
            best = max(scores)
            winners = [i for i, s in enumerate(scores) if math.isclose(s, best, rel_tol=1e-12)]
            if len(winners) > 1 and not all(scores[i] == best for i in winners):
                continue
            want = np.zeros_like(bits)
            for x, y in groups[winners[0]]:
                want[y, x] = True
            np.testing.assert_array_equal(kept.bits, want)


class Exhaustive4x4Test(unittest.TestCase):
    def test_every_stage_matches_set_definitions(self):
        masks = all_4x4_masks()
        se = StructuringElement(1)
        want_dilate = dilate_oracle(masks, 1)
        want_erode = erode_oracle(masks, 1)
        want_close = erode_oracle(want_dilate, 1)
        want_fill = fill_oracle(masks)
        want_ids = component_ids_oracle(masks)

        for i, bits in enumerate(masks):
            mask = BinaryMask(bits)
            self.assertTrue(np.array_equal(dilate(mask, se).bits, want_dilate[i]), i)
            self.assertTrue(np.array_equal(erode(mask, se).bits, want_erode[i]), i)
            self.assertTrue(np.array_equal(close(mask, se).bits, want_close[i]), i)
            self.assertTrue(np.array_equal(fill_holes(mask).bits, want_fill[i]), i)
            labels, _ = label_components(mask)
            self.assertTrue(np.array_equal(labels, want_ids[i]), i)

    def test_close_is_idempotent_on_all_masks(self):
        masks = all_4x4_masks()
        closed = erode_oracle(dilate_oracle(masks, 1), 1)
        again = erode_oracle(dilate_oracle(closed, 1), 1)
        np.testing.assert_array_equal(closed, again)


class PostprocessPipelineTest(unittest.TestCase):
    def test_clean_blob_is_recovered(self):
        blob = rect_mask(32, 32, 10, 9, 22, 23)
        prob = ProbabilityMap(np.where(blob, 0.9, 0.05))
        mask = postprocess_pipeline(prob)
        np.testing.assert_array_equal(mask.bits, blob)
        self.assertEqual(len(mask.components), 1)

    def test_constant_half_map_is_empty(self):
        mask = postprocess_pipeline(ProbabilityMap(np.full((16, 16), 0.5)))
        self.assertEqual(mask.area, 0)

    def test_far_speckle_is_dropped(self):
        blob = rect_mask(32, 32, 10, 9, 22, 23)
        values = np.where(blob, 0.95, 0.05)
        for y, x in ((0, 0), (0, 31), (31, 0), (31, 31), (0, 16), (30, 3)):
            values[y, x] = 0.8
        mask = postprocess_pipeline(ProbabilityMap(values))
        np.testing.assert_array_equal(mask.bits, blob)

    def test_hole_inside_blob_is_filled(self):
        blob = rect_mask(24, 24, 6, 6, 18, 18)
        values = np.where(blob, 0.9, 0.1)
        values[10:14, 10:14] = 0.1
        mask = postprocess_pipeline(ProbabilityMap(values), se_radius=1)
        np.testing.assert_array_equal(mask.bits, blob)

    def test_output_has_at_most_one_component(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            prob = ProbabilityMap(rng.uniform(size=(20, 24)))
            mask = postprocess_pipeline(prob, se_radius=int(rng.integers(1, 3)))
            self.assertLessEqual(len(mask.components), 1)
