import io
import json
import os
import shutil
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np

os.environ["TILEFORGE_ENV"] = "test"

from tileforge import __version__  # noqa: E402
from tileforge.cli import dispatch  # noqa: E402
from tileforge.dataset import load_manifest  # noqa: E402
from tileforge.evaluation import read_detections_csv  # noqa: E402
from tileforge.geometry import BBox  # noqa: E402
from tileforge.storage import image_key, load_json, write_png  # noqa: E402


def run(*argv):
    """Invoke the CLI in-process; returns (exit code, stdout, stderr)"""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = dispatch([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, name, text):
        path = self.root / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_unknown_flag_is_a_usage_error(self):
        code, _, err = run("evaluate", "--bogus-flag")
        self.assertEqual(code, 2)
        self.assertIn("usage:", err)

    def test_version(self):
        code, out, _ = run("--version")
        self.assertEqual(code, 0)
        self.assertIn(__version__, out)

    def test_default_tiling_of_a_full_scan(self):
        write_png(str(self.root / "blade.png"), np.zeros((1900, 1500), dtype=np.uint8))
        code, out, _ = run("tile", "--image", self.root / "blade.png", "--out-dir", self.root / "tiles",
                           "--scale", "1", "--json")
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)["tiles"], 25)
        (plan,) = load_json(str(self.root / "tiles" / "plans.json"))["plans"]
        self.assertEqual(sorted({t["offset_x"] for t in plan["tiles"]}), [0, 250, 500, 750, 1000])
        self.assertEqual(sorted({t["offset_y"] for t in plan["tiles"]}), [0, 325, 650, 975, 1300])
        self.assertTrue((self.root / "tiles" / "blade_r4_c4.png").exists())

    def test_evaluate_perfect_detections(self):
        annotations = self._write("annotations.csv", "a.png,10,10,24,28,defect\nb.png,,,,,\n")
        detections = self._write("detections.csv", "images/a.png,10,10,24,28,defect,0.9\n")
        report = self.root / "report.json"
        code, out, _ = run("evaluate", "--annotations", annotations, "--detections", detections,
                           "--out", report, "--json", "--seed", "5")
        self.assertEqual(code, 0)
        summary = json.loads(out)
        self.assertEqual(summary["accuracy"], 1.0)
        self.assertEqual(summary["map"], 1.0)
        self.assertEqual(summary["tool_version"], __version__)
        self.assertEqual(summary["seed"], 5)
        self.assertEqual(summary["command"], "evaluate")
        self.assertEqual(load_json(str(report))["tool_version"], __version__)

    def test_malformed_line_is_reported_with_location(self):
        annotations = self._write("annotations.csv", "a.png,10,10,24,28,defect\na.png,40,10,24,28,defect\n")
        detections = self._write("detections.csv", "")
        code, _, err = run("evaluate", "--annotations", annotations, "--detections", detections,
                           "--out", self.root / "report.json")
        self.assertEqual(code, 1)
        self.assertIn("error:", err)
        self.assertIn("annotations.csv:2", err)
        self.assertFalse((self.root / "report.json").exists())

    def test_missing_input(self):
        code, _, err = run("stats", "--annotations", self.root / "nowhere.csv")
        self.assertEqual(code, 1)
        self.assertIn("error:", err)

    def test_crop_writes_a_box_next_to_each_crop(self):
        scan = np.zeros((80, 100), dtype=np.uint8)
        scan[20:50, 30:70] = 200
        write_png(str(self.root / "part.png"), scan)
        code, _, err = run("crop", "--image", self.root / "part.png", "--out-dir", self.root / "crops",
                           "--margin", "0")
        self.assertEqual(code, 0, err)
        sidecar = load_json(str(self.root / "crops" / "part.json"))
        self.assertEqual(sidecar["crop_box"], [30, 20, 70, 50])
        (entry,) = load_json(str(self.root / "crops" / "crops.json"))["crops"]
        self.assertEqual(entry["crop_box"], sidecar["crop_box"])
        self.assertTrue((self.root / "crops" / "part.png").exists())

    def test_anchor_search_on_the_validation_split(self):
        lines = "".join(f"part_{k}.png,10,10,{24 + k},{28 + k % 3},defect\n" for k in range(10))
        annotations = self._write("annotations.csv", lines)
        split = self.root / "split.json"
        code, _, err = run("split", "--annotations", annotations, "--out", split, "--val-fraction", "0.3")
        self.assertEqual(code, 0, err)
        anchors = self.root / "anchors.json"
        code, out, err = run("optimize-anchors", "--annotations", split, "--out", anchors, "--fold", "validation",
                             "--max-generations", "3", "--json")
        self.assertEqual(code, 0, err)
        self.assertEqual(json.loads(out)["boxes"], 3)
        self.assertEqual(load_json(str(anchors))["fold"], "validation")
        code, _, err = run("optimize-anchors", "--annotations", split, "--out", anchors, "--fold", "1")
        self.assertEqual(code, 1)
        self.assertIn("not found", err)

    def test_malformed_tile_plans_are_reported(self):
        detections = self._write("dets.csv", "a_r0_c0.png,0,0,5,5,defect,0.9\n")
        plans = self._write("plans.json", json.dumps({"plans": [{"source_w": 10, "tiles": []}]}))
        code, _, err = run("merge", "--detections", detections, "--plans", plans, "--out", self.root / "out.csv")
        self.assertEqual(code, 1)
        self.assertIn("error:", err)
        self.assertIn("plans.json", err)
        self.assertIn("grid", err)
        for text in ("{}", "[1, 2]", '{"plans": 3}', "{not json"):
            self._write("plans.json", text)
            code, _, err = run("merge", "--detections", detections, "--plans", plans,
                               "--out", self.root / "out.csv")
            self.assertEqual(code, 1, text)
            self.assertIn("plans.json", err)
        self.assertFalse((self.root / "out.csv").exists())

    def test_malformed_manifest_is_reported(self):
        for document in ({"records": [{"boxes": []}]},
                         {"records": [{"image_path": "a.png", "boxes": [{"box": [5, 5, 1, 1], "class": "d"}]}]},
                         {"records": ["a.png"]}):
            manifest = self._write("manifest.json", json.dumps(document))
            code, _, err = run("stats", "--annotations", manifest)
            self.assertEqual(code, 1, document)
            self.assertIn("error:", err)
            self.assertIn("manifest.json", err)


class PipelineTestCase(unittest.TestCase):
    """synth -> crop -> tile -> split -> oracle-detect -> merge -> evaluate"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name) / "run"

    def tearDown(self):
        self.tmp.cleanup()

    def _step(self, *argv):
        code, out, err = run(*argv, "--json", "--seed", "3")
        self.assertEqual(code, 0, err)
        return json.loads(out)

    def _pipeline(self, drop_rate=0.0, fp_rate=0.0):
        d = self.root
        synth = self._step("synth", "--out-dir", d / "scans", "--count", "12", "--size", "320x400",
                           "--positive-fraction", "0.7")
        self._step("crop", "--image", d / "scans", "--out-dir", d / "crops",
                   "--annotations", d / "scans" / "annotations.csv")
        tiled = self._step("tile", "--image", d / "crops", "--out-dir", d / "tiles", "--grid", "3x3",
                           "--tile", "160x200", "--scale", "2", "--annotations", d / "crops" / "annotations.csv")
        self.assertEqual(tiled["tiles"], 12 * 9)
        split = self._step("split", "--annotations", d / "tiles" / "tiles.csv", "--out", d / "split.json",
                           "--k", "3")
        self.assertEqual(split["groups"], 12)
        self._step("oracle-detect", "--annotations", d / "tiles" / "tiles.csv", "--out", d / "tile_dets.csv",
                   "--drop-rate", drop_rate, "--fp-rate", fp_rate)
        self._step("merge", "--detections", d / "tile_dets.csv", "--plans", d / "tiles" / "plans.json",
                   "--out", d / "dets.csv")
        summary = self._step("evaluate", "--annotations", d / "crops" / "annotations.csv",
                             "--detections", d / "dets.csv", "--manifest", d / "split.json",
                             "--out", d / "report.json")
        return synth, summary, load_json(str(d / "report.json"))

    def _snapshot(self):
        files = {}
        for path in sorted(self.root.rglob("*")):
            if path.is_file():
                files[str(path.relative_to(self.root))] = path.read_bytes()
        return files

    def test_perfect_detector_is_a_fixed_point(self):
        synth, summary, report = self._pipeline()
        self.assertGreater(synth["positives"], 0)
        self.assertAlmostEqual(summary["map"], 1.0, places=12)
        self.assertEqual(summary["accuracy"], 1.0)
        self.assertEqual(summary["fp"], 0)
        self.assertEqual(sorted(report["folds"]), ["0", "1", "2"])
        self.assertEqual(report["cross_validation"]["mean_accuracy"], 1.0)
        self.assertEqual(sum(len(fold["per_image"]) for fold in report["folds"].values()), 12)

    def test_missed_defects_are_explained(self):
        synth, summary, report = self._pipeline(drop_rate=1.0)
        self.assertLess(summary["accuracy"], 1.0)
        self.assertEqual(summary["map"], 0.0)
        incorrect = [v for v in report["per_image"] if not v["correct"]]
        self.assertEqual(len(incorrect), synth["positives"])
        for verdict in incorrect:
            self.assertEqual(verdict["failed"], ["count", "union_iou"])

    def test_false_positives_do_not_rescue_dropped_defects(self):
        _, summary, report = self._pipeline(drop_rate=1.0, fp_rate=1.0)
        self.assertEqual(summary["tp"], 0)
        self.assertEqual(summary["map"], 0.0)
        self.assertGreater(summary["fp"], 0)
        tiles = {image_key(r.image_path): r for r in load_manifest(str(self.root / "tiles" / "tiles.csv")).records}
        frame = BBox(0, 0, 320, 400)
        for d in read_detections_csv(str(self.root / "tile_dets.csv")):
            self.assertTrue(frame.contains(d.box), d)
            for a in tiles[image_key(d.image_id)].boxes:
                self.assertIsNone(d.box.intersection(a.box))
        for verdict in report["per_image"]:
            if not verdict["correct"]:
                self.assertTrue(verdict["failed"])

    def test_partial_misses_name_the_failed_condition(self):
        d = self.root
        self._step("synth", "--out-dir", d / "scans", "--count", "50", "--size", "320x400")
        self._step("oracle-detect", "--annotations", d / "scans" / "annotations.csv", "--out", d / "dets.csv",
                   "--drop-rate", "0.6", "--fp-rate", "0.1")
        summary = self._step("evaluate", "--annotations", d / "scans" / "annotations.csv",
                             "--detections", d / "dets.csv", "--out", d / "report.json")
        self.assertLess(summary["accuracy"], 1.0)
        self.assertGreater(summary["accuracy"], 0.0)
        incorrect = [v for v in load_json(str(d / "report.json"))["per_image"] if not v["correct"]]
        self.assertTrue(incorrect)
        for verdict in incorrect:
            self.assertTrue(set(verdict["failed"]) <= {"count", "union_iou"})
            self.assertTrue(verdict["failed"], verdict)

    def test_reruns_are_bit_identical(self):
        def run_all():
            self._pipeline(drop_rate=0.4, fp_rate=0.2)
            d = self.root
            self._step("balance", "--annotations", d / "split.json", "--out", d / "balanced.json")
            self._step("optimize-anchors", "--annotations", d / "split.json", "--out", d / "anchors.json",
                       "--gt-scale", "2", "--max-generations", "5")

        run_all()
        first = self._snapshot()
        self.assertIn("balanced.json", first)
        self.assertIn("anchors.json", first)
        shutil.rmtree(self.root)
        run_all()
        self.assertEqual(self._snapshot(), first)


if __name__ == "__main__":
    unittest.main()
