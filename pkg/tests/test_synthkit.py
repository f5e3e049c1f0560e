import unittest

import numpy as np

from tileforge.evaluation import evaluate, merge_tile_detections
from tileforge.geometry import BBox
from tileforge.storage import child_seeds
from tileforge.synthkit import SynthSpec, blade_polygon, generate_dataset, generate_synthetic_scan, oracle_detector
from tileforge.tiler import GridCount, plan_tiles, project_annotations_to_tile

SMALL = SynthSpec(width=200, height=240, defect_count=2)


class SynthSpecTestCase(unittest.TestCase):
    def test_rejects_bad_settings(self):
        with self.assertRaises(ValueError):
            SynthSpec(width=16)
        with self.assertRaises(ValueError):
            SynthSpec(positive_fraction=1.5)
        with self.assertRaises(ValueError):
            SynthSpec(defect_level=250)

    def test_blade_fits_the_scan(self):
        polygon = blade_polygon(SynthSpec())
        self.assertTrue((polygon[:, 0] >= 0).all() and (polygon[:, 0] < 960).all())
        self.assertTrue((polygon[:, 1] >= 0).all() and (polygon[:, 1] < 1200).all())


class ScanTestCase(unittest.TestCase):
    def test_same_seed_same_scan(self):
        a_img, a_boxes = generate_synthetic_scan(SMALL, seed=5)
        b_img, b_boxes = generate_synthetic_scan(SMALL, seed=5)
        self.assertTrue(np.array_equal(a_img, b_img))
        self.assertEqual(a_boxes, b_boxes)

    def test_negative_scan_has_two_levels(self):
        img, boxes = generate_synthetic_scan(SynthSpec(width=200, height=240, defect_count=0), seed=1)
        self.assertEqual(boxes, [])
        self.assertEqual(set(np.unique(img).tolist()), {20, 200})

    def test_defect_pixels_lie_in_their_boxes(self):
        for seed in range(20):
            img, boxes = generate_synthetic_scan(SMALL, seed=seed)
            inside = np.zeros(img.shape, dtype=bool)
            for b in boxes:
                self.assertTrue(BBox(0, 0, 200, 240).contains(b))
                inside[int(b.y1):int(b.y2), int(b.x1):int(b.x2)] = True
            self.assertFalse(((img == 110) & ~inside).any())
            for b in boxes:
                patch = img[int(b.y1):int(b.y2), int(b.x1):int(b.x2)]
                self.assertTrue((patch == 110).any(axis=0).all())
                self.assertTrue((patch == 110).any(axis=1).all())

    def test_mean_defect_size(self):
        sizes = []
        for _, _, boxes in generate_dataset(SMALL, 500):
            sizes.extend((b.width, b.height) for b in boxes)
        mean_w, mean_h = np.mean(sizes, axis=0)
        self.assertAlmostEqual(mean_w / 14.0, 1.0, delta=0.05)
        self.assertAlmostEqual(mean_h / 18.0, 1.0, delta=0.05)

    def test_dataset_names_and_seeds(self):
        names = [name for name, _, _ in generate_dataset(SMALL, 3)]
        self.assertEqual(names, ["scan_0000", "scan_0001", "scan_0002"])
        self.assertEqual(child_seeds(7, 4), child_seeds(7, 4))
        self.assertEqual(len(set(child_seeds(7, 50))), 50)


class OracleTestCase(unittest.TestCase):
    def setUp(self):
        self.gts = [BBox(10, 10, 24, 28), BBox(50, 60, 63, 80)]
        self.frame = BBox(0, 0, 100, 100)

    def test_identity(self):
        dets = oracle_detector(self.gts, seed=1, image_id="a")
        self.assertEqual([d.box for d in dets], self.gts)
        self.assertTrue(all(0.6 <= d.score <= 1.0 for d in dets))

    def test_drop_everything(self):
        self.assertEqual(oracle_detector(self.gts, drop_rate=1.0, seed=1), [])

    def test_deterministic(self):
        first = oracle_detector(self.gts, jitter=2, drop_rate=0.3, fp_rate=0.5, seed=9, bounds=self.frame)
        second = oracle_detector(self.gts, jitter=2, drop_rate=0.3, fp_rate=0.5, seed=9, bounds=self.frame)
        self.assertEqual(first, second)

    def test_false_positives_score_low_and_stay_in_bounds(self):
        bounds = BBox(0, 0, 100, 100)
        dets = oracle_detector([], fp_rate=1.0, seed=3, bounds=bounds)
        for seed in range(30):
            dets += oracle_detector(self.gts, drop_rate=1.0, fp_rate=1.0, seed=seed, bounds=bounds)
        self.assertTrue(dets)
        for d in dets:
            self.assertLess(d.score, 0.6)
            self.assertTrue(bounds.contains(d.box))

    def test_false_positives_need_bounds(self):
        with self.assertRaises(ValueError):
            oracle_detector(self.gts, fp_rate=1.0, seed=0)
        self.assertEqual(len(oracle_detector(self.gts, fp_rate=0.0, seed=0)), 2)

    def test_false_positives_never_touch_ground_truth(self):
        for seed in range(100):
            dets = oracle_detector(self.gts, drop_rate=1.0, fp_rate=1.0, seed=seed, bounds=self.frame)
            for d in dets:
                for gt in self.gts:
                    self.assertIsNone(d.box.intersection(gt))

    def test_single_defect_is_not_recovered_by_false_positives(self):
        gt = BBox(10, 10, 24, 28)
        gts, dets = {}, {}
        for k in range(200):
            key = f"img_{k:03d}"
            gts[key] = [(gt, "defect")]
            dets[key] = oracle_detector([gt], drop_rate=1.0, fp_rate=1.0, seed=k, image_id=key,
                                        bounds=BBox(0, 0, 400, 500))
        self.assertTrue(any(dets.values()))
        report = evaluate(gts, dets)
        self.assertEqual(report.tp, 0)
        self.assertEqual(report.map, 0.0)
        self.assertEqual(report.accuracy, 0.0)

    def test_labels_must_match_boxes(self):
        with self.assertRaises(ValueError):
            oracle_detector(self.gts, labels=["defect"])
        dets = oracle_detector(self.gts, labels=["crack", "pore"])
        self.assertEqual([d.label for d in dets], ["crack", "pore"])


class FixedPointTestCase(unittest.TestCase):
    def test_perfect_detector_through_tiling(self):
        spec = SynthSpec(width=200, height=240, positive_fraction=0.7, seed=4)
        gts, tile_dets, tiles = {}, [], {}
        for name, img, boxes in generate_dataset(spec, 12):
            gts[name] = [(b, "defect") for b in boxes]
            plan = plan_tiles(200, 240, 100, 120, GridCount(3, 3), source_id=name, scale=2)
            for tile in plan.tiles:
                tiles[tile.name] = tile
                local = project_annotations_to_tile(boxes, tile)
                tile_dets += oracle_detector(local, seed=tile.row * 3 + tile.col, image_id=tile.name)

        merged = merge_tile_detections(tile_dets, tiles, {})
        dets = {}
        for d in merged:
            dets.setdefault(d.image_id, []).append(d)
        report = evaluate(gts, dets)
        self.assertTrue(any(gts.values()))
        self.assertAlmostEqual(report.map, 1.0, places=12)
        self.assertEqual(report.accuracy, 1.0)
        self.assertEqual(report.fp, 0)


if __name__ == "__main__":
    unittest.main()
