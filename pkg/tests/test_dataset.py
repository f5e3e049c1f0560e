import os
import tempfile
import unittest

import numpy as np

from tileforge.dataset import (Annotation, AnnotationRecord, Manifest, assign_folds, balance_negatives,
                               balance_within_splits, dataset_statistics, default_group_id, grouped_kfold,
                               grouped_train_val_split, load_manifest, normalized_area_histogram,
                               read_annotations_csv, split_table, write_annotations_csv)
from tileforge.errors import MalformedLine, NoPositives, TooFewGroups
from tileforge.geometry import BBox
from tileforge.storage import child_seeds


def make_manifest(n_pos, n_neg, prefix="img"):
    records = [AnnotationRecord(f"{prefix}_p{i}.png", [Annotation(BBox(0, 0, 14, 18), "defect")])
               for i in range(n_pos)]
    records += [AnnotationRecord(f"{prefix}_n{i}.png") for i in range(n_neg)]
    return Manifest(records)


def tiled_manifest(n_sources, tiles_per_source=25, seed=0):
    """Tile-level manifest: one group per source image, about a third of tiles positive"""
    rng = np.random.default_rng(seed)
    records = []
    for s in range(n_sources):
        for t in range(tiles_per_source):
            path = f"src{s:03d}_r{t // 5}_c{t % 5}.png"
            boxes = [Annotation(BBox(10, 10, 24, 28), "defect")] if rng.random() < 0.35 else []
            records.append(AnnotationRecord(path, boxes))
    return Manifest(records)


class AnnotationsCsvTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "annotations.csv")

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, text):
        with open(self.path, "w", encoding="utf-8") as f:
            f.write(text)

    def test_positive_and_negative_lines(self):
        self._write("# tileforge\nimage_path,x1,y1,x2,y2,class\n"
                    "a_r0_c0.png,100,120,114,138,defect\n\nb_r1_c2.png,,,,,\n")
        m = read_annotations_csv(self.path)
        a, b = m.records
        self.assertEqual((a.group_id, b.group_id), ("a", "b"))
        self.assertEqual(len(a.boxes), 1)
        self.assertEqual((a.boxes[0].box.width, a.boxes[0].box.height), (14, 18))
        self.assertEqual(a.boxes[0].label, "defect")
        self.assertFalse(b.is_positive)

    def test_repeated_images_accumulate_boxes(self):
        self._write("a.png,0,0,5,5,defect\na.png,10,10,15,15,defect\n")
        (record,) = read_annotations_csv(self.path).records
        self.assertEqual(len(record.boxes), 2)

    def test_inverted_box_is_malformed(self):
        self._write("a.png,0,0,5,5,defect\nc.png,50,50,40,60,defect\n")
        with self.assertRaises(MalformedLine) as ctx:
            read_annotations_csv(self.path)
        self.assertEqual(ctx.exception.line_no, 2)
        self.assertIn("annotations.csv:2", str(ctx.exception))

    def test_wrong_field_count_and_partial_boxes(self):
        self._write("a.png,0,0,5\n")
        with self.assertRaises(MalformedLine):
            read_annotations_csv(self.path)
        self._write("a.png,0,,5,5,defect\n")
        with self.assertRaises(MalformedLine):
            read_annotations_csv(self.path)
        self._write("a.png,zero,0,5,5,defect\n")
        with self.assertRaises(MalformedLine):
            read_annotations_csv(self.path)

    def test_group_column_round_trip(self):
        m = Manifest([
            AnnotationRecord("x_r0_c0.png", [Annotation(BBox(1.5, 2, 3, 4.25), "defect")], "blade7"),
            AnnotationRecord("y.png", [], "blade7"),
        ])
        write_annotations_csv(m, self.path, seed=4)
        again = read_annotations_csv(self.path)
        self.assertEqual([r.group_id for r in again.records], ["blade7", "blade7"])
        self.assertEqual(again.records[0].boxes, m.records[0].boxes)

    def test_load_manifest_from_json_keeps_splits(self):
        m = assign_folds(tiled_manifest(6, 2), k=3, seed=1)
        json_path = os.path.join(self.tmp.name, "manifest.json")
        m.save(json_path)
        again = load_manifest(json_path)
        self.assertEqual(again.assignments, m.assignments)
        self.assertEqual([r.image_path for r in again.records], [r.image_path for r in m.records])

    def test_default_group_strips_tile_suffix(self):
        self.assertEqual(default_group_id("/data/tiles/blade_12_r3_c4.png"), "blade_12")
        self.assertEqual(default_group_id("blade_12.png"), "blade_12")


class BalanceTestCase(unittest.TestCase):
    def test_ratio_rounds_half_up(self):
        balanced = balance_negatives(make_manifest(363, 600), 1.1, seed=0)
        self.assertEqual(len(balanced.positives()), 363)
        self.assertEqual(len(balanced.negatives()), 399)

    def test_insufficient_negatives(self):
        with self.assertLogs("tileforge.dataset", level="WARNING"):
            balanced = balance_negatives(make_manifest(10, 5), 1.1, seed=0)
        self.assertEqual(len(balanced.negatives()), 5)
        self.assertAlmostEqual(balanced.meta["balance"]["achieved_ratio"], 0.5)

    def test_ratio_zero_keeps_only_positives(self):
        balanced = balance_negatives(make_manifest(4, 9), 0, seed=0)
        self.assertEqual(len(balanced.records), 4)

    def test_reproducible_and_order_preserving(self):
        m = make_manifest(20, 80)
        first = balance_negatives(m, 1.1, seed=9)
        second = balance_negatives(m, 1.1, seed=9)
        self.assertEqual([r.image_path for r in first.records], [r.image_path for r in second.records])
        index = {r.image_path: i for i, r in enumerate(m.records)}
        positions = [index[r.image_path] for r in first.records]
        self.assertEqual(positions, sorted(positions))

    def test_needs_positives(self):
        with self.assertRaises(NoPositives):
            balance_negatives(make_manifest(0, 5), 1.1, seed=0)


class SplitTestCase(unittest.TestCase):
    def _groups_per_fold(self, folds):
        return [set(f.groups()) for f in folds]

    def test_six_groups_three_folds(self):
        folds = grouped_kfold(tiled_manifest(6, 3), k=3, seed=2)
        self.assertEqual([len(g) for g in self._groups_per_fold(folds)], [2, 2, 2])

    def test_remainder_groups(self):
        folds = grouped_kfold(tiled_manifest(7, 3), k=3, seed=2)
        self.assertEqual(sorted(len(g) for g in self._groups_per_fold(folds)), [2, 2, 3])

    def test_folds_never_share_groups(self):
        for seed in range(5):
            groups = self._groups_per_fold(grouped_kfold(tiled_manifest(11, 4, seed), k=3, seed=seed))
            for i in range(3):
                for j in range(i + 1, 3):
                    self.assertFalse(groups[i] & groups[j])

    def test_too_few_groups(self):
        with self.assertRaises(TooFewGroups):
            grouped_kfold(tiled_manifest(2, 3), k=3, seed=0)
        with self.assertRaises(ValueError):
            assign_folds(tiled_manifest(4, 3), k=1, seed=0)

    def test_split_integrity_at_scale(self):
        m = tiled_manifest(200, 25, seed=8)
        folded = assign_folds(m, k=3, seed=8)
        folds = [folded.subset(i) for i in range(3)]
        group_counts = [len(f.groups()) for f in folds]
        self.assertLessEqual(max(group_counts) - min(group_counts), 1)
        seen = {}
        for i, fold in enumerate(folds):
            for record in fold.records:
                self.assertEqual(seen.setdefault(record.group_id, i), i)

        balanced = balance_within_splits(folded, 1.1, seed=8)
        for i in range(3):
            part = balanced.subset(i)
            n_pos, n_neg = len(part.positives()), len(part.negatives())
            self.assertEqual(n_neg, int(np.floor(1.1 * n_pos + 0.5)))
        self.assertEqual(len(balanced.positives()), len(m.positives()))

    def test_each_split_is_balanced_with_its_own_child_seed(self):
        folded = assign_folds(tiled_manifest(30, 10, seed=2), k=3, seed=2)
        balanced = balance_within_splits(folded, 0.5, seed=4)
        for label, child_seed in zip(folded.split_labels(), child_seeds(4, 3)):
            alone = balance_negatives(folded.subset(label), 0.5, child_seed)
            self.assertEqual([r.image_path for r in balanced.subset(label).records],
                             [r.image_path for r in alone.records])

    def test_assignment_is_reproducible(self):
        m = tiled_manifest(30, 2)
        self.assertEqual(assign_folds(m, 3, seed=5).assignments, assign_folds(m, 3, seed=5).assignments)

    def test_train_validation_split(self):
        split = grouped_train_val_split(tiled_manifest(10, 4), val_fraction=0.3, seed=1)
        val = split.subset("validation")
        train = split.subset("train")
        self.assertEqual(len(val.groups()), 3)
        self.assertEqual(len(train.groups()), 7)
        self.assertFalse(set(val.groups()) & set(train.groups()))

    def test_split_table(self):
        m = assign_folds(tiled_manifest(6, 5, seed=3), k=3, seed=3)
        table = split_table(m)
        self.assertEqual(list(table.columns), ["Set", "Positive", "Negative", "Total"])
        self.assertEqual(int(table["Total"].sum()), 30)
        self.assertTrue((table["Positive"] + table["Negative"] == table["Total"]).all())


class HistogramTestCase(unittest.TestCase):
    def _single(self, w, h):
        return Manifest([AnnotationRecord("a.png", [Annotation(BBox(0, 0, w, h), "defect")])])

    def test_small_defect_sample(self):
        hist = normalized_area_histogram(self._single(14, 18), 1024)
        self.assertEqual(hist.samples, [252 / 1024])
        self.assertEqual(hist.total, 1)
        self.assertEqual(hist.fraction_below_one, 1.0)

    def test_reference_sized_box(self):
        hist = normalized_area_histogram(self._single(32, 32), 1024)
        self.assertEqual(hist.samples, [1.0])
        self.assertEqual(hist.fraction_below_one, 0.0)

    def test_upscaling_quadruples_area(self):
        hist = normalized_area_histogram(self._single(14, 18), 1024, scale=2)
        self.assertAlmostEqual(hist.samples[0], 1008 / 1024)

    def test_out_of_range_samples_land_in_end_bins(self):
        hist = normalized_area_histogram(self._single(100, 100), 1024, bin_edges=[0, 1, 2])
        self.assertEqual(hist.counts, [0, 1])

    def test_invalid_reference(self):
        with self.assertRaises(ValueError):
            normalized_area_histogram(self._single(3, 3), 0)

    def test_statistics(self):
        m = make_manifest(3, 2)
        m.records[0].boxes.append(Annotation(BBox(0, 0, 40, 40), "defect"))
        stats = dataset_statistics(m)
        self.assertEqual((stats.n_images, stats.n_positive, stats.n_negative, stats.n_boxes), (5, 3, 2, 4))
        self.assertAlmostEqual(stats.mean_box_w, (14 * 3 + 40) / 4)
        self.assertAlmostEqual(stats.fraction_below_reference, 0.75)


if __name__ == "__main__":
    unittest.main()
