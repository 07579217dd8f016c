"""End-to-end tests for the command-line pipelines.

A small noiseless scene with rendered edge maps is built once per module
and shared; the individual tests only read its outputs.  Determinism and
ablation tests run their own pipelines in separate directories.
"""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from quadricmap.cli import run
from quadricmap.config import RunConfig, config_hash, load_config, parse_config
from quadricmap.dataio import load_map

WS_CONFIG = """\
n_objects = 3
n_frames = 12
bbox_noise = 0.0
render_edges = true
use_symmetry = true
"""


def _read_report(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["object_id", "label", "iou", "rot_deg"]
    body = [r for r in rows[1:] if r[0] != "mean"]
    mean = [r for r in rows[1:] if r[0] == "mean"]
    assert len(mean) == 1
    return body, mean[0]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    cfg = root / "run.cfg"
    cfg.write_text(WS_CONFIG)
    data = root / "data"
    paths = {
        "root": root, "cfg": cfg, "data": data,
        "init": root / "init.json", "slam": root / "slam.json",
        "report": root / "report.csv", "ply": root / "view.ply",
        "sweep": root / "sweep.csv",
    }
    steps = [
        ["synth", "--config", str(cfg), "--out", str(data)],
        ["init", "--data", str(data), "--config", str(cfg),
         "--out", str(paths["init"])],
        ["slam", "--data", str(data), "--config", str(cfg),
         "--out", str(paths["slam"])],
        ["eval", "--est", str(paths["slam"]), "--gt", str(data / "gt.json"),
         "--config", str(cfg), "--out", str(paths["report"])],
        ["export", "--map", str(paths["slam"]), "--config", str(cfg),
         "--out", str(paths["ply"])],
        ["sweep-yaw", "--data", str(data), "--config", str(cfg),
         "--object", "0", "--out", str(paths["sweep"])],
    ]
    for argv in steps:
        assert run(argv) == 0, argv[0]
    return paths


class TestSynthOutputs:
    def test_dataset_files(self, ws):
        for name in ("trajectory.txt", "detections.txt", "scales.txt",
                     "calib.txt", "frame_index.txt", "gt.json",
                     "manifest.json"):
            assert (ws["data"] / name).exists(), name

    def test_edge_maps_named_by_object_and_frame(self, ws):
        names = sorted(p.name for p in ws["data"].glob("edges_*.pgm"))
        assert names == ["edges_obj0_frame0000.pgm",
                         "edges_obj1_frame0000.pgm",
                         "edges_obj2_frame0000.pgm"]

    def test_ground_truth_is_a_valid_map(self, ws):
        gt = load_map(ws["data"] / "gt.json")
        assert sorted(gt.objects) == [0, 1, 2]
        assert len(gt.trajectory) == 12
        assert gt.metadata["command"] == "synth"
        assert len(gt.metadata["config_hash"]) == 12


class TestMappingOutputs:
    def test_init_metadata(self, ws):
        doc = load_map(ws["init"])
        assert sorted(doc.objects) == [0, 1, 2]
        assert doc.metadata["observations"] == {"0": 12, "1": 12, "2": 12}
        assert "solver" not in doc.metadata

    def test_slam_metadata(self, ws):
        doc = load_map(ws["slam"])
        assert doc.metadata["refined"] == [0, 1, 2]
        solver = doc.metadata["solver"]
        assert solver["converged"] is True
        assert solver["final_cost"] <= solver["initial_cost"]

    def test_noiseless_slam_recovers_scene(self, ws):
        body, mean = _read_report(ws["report"])
        assert len(body) == 3
        for row in body:
            assert float(row[2]) >= 0.99
            assert float(row[3]) <= 0.1
        assert float(mean[2]) >= 0.99
        assert float(mean[3]) <= 0.1

    def test_manifest_contents(self, ws):
        payload = json.loads((ws["root"] / "slam.manifest.json").read_text())
        assert sorted(payload) == ["command", "config_hash", "seed",
                                   "versions"]
        assert payload["command"] == "slam"
        assert payload["seed"] == 0
        assert payload["config_hash"] == config_hash(load_config(ws["cfg"]))
        assert sorted(payload["versions"]) == ["numpy", "python",
                                               "quadricmap", "scipy"]

    def test_csv_manifest_renames_suffix(self, ws):
        assert (ws["root"] / "report.manifest.json").exists()


class TestEval:
    def test_self_evaluation_is_exact(self, ws, tmp_path):
        out = tmp_path / "self.csv"
        gt = ws["data"] / "gt.json"
        assert run(["eval", "--est", str(gt), "--gt", str(gt),
                    "--out", str(out)]) == 0
        body, mean = _read_report(out)
        for row in body:
            assert float(row[2]) == 1.0
            assert float(row[3]) == 0.0
        assert float(mean[2]) == 1.0

    def test_missing_object_is_skipped(self, ws, tmp_path, capsys):
        doc = json.loads((ws["data"] / "gt.json").read_text())
        doc["objects"] = [o for o in doc["objects"] if o["id"] != 2]
        est = tmp_path / "partial.json"
        est.write_text(json.dumps(doc))
        out = tmp_path / "partial.csv"
        assert run(["eval", "--est", str(est),
                    "--gt", str(ws["data"] / "gt.json"),
                    "--out", str(out)]) == 0
        assert "skipped object 2" in capsys.readouterr().err
        body, _ = _read_report(out)
        assert [r[0] for r in body] == ["0", "1"]

    def test_malformed_observation_counts(self, ws, tmp_path, capsys):
        doc = json.loads(ws["init"].read_text())
        doc["metadata"]["observations"] = {"0": "plenty"}
        est = tmp_path / "bad.json"
        est.write_text(json.dumps(doc))
        rc = run(["eval", "--est", str(est),
                  "--gt", str(ws["data"] / "gt.json"),
                  "--out", str(tmp_path / "bad.csv")])
        assert rc == 2
        assert "malformed observation counts" in capsys.readouterr().err


class TestSweepAndExport:
    def test_sweep_csv_shape(self, ws):
        with open(ws["sweep"], newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["yaw_deg", "cost_gray", "cost_2dt", "cost_3dt"]
        assert len(rows) == 1 + 61
        yaws = [float(r[0]) for r in rows[1:]]
        assert yaws[0] == -30.0 and yaws[-1] == 30.0
        costs = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        assert np.all(np.isfinite(costs))
        assert np.all(costs >= 0.0)

    def test_sweep_requires_edge_map(self, ws, tmp_path, capsys):
        bare = tmp_path / "bare"
        cfg = tmp_path / "bare.cfg"
        cfg.write_text("n_objects = 2\nn_frames = 4\n")
        assert run(["synth", "--config", str(cfg), "--out", str(bare)]) == 0
        rc = run(["sweep-yaw", "--data", str(bare), "--config", str(cfg),
                  "--object", "0", "--out", str(tmp_path / "s.csv")])
        assert rc == 2
        assert "no edge map" in capsys.readouterr().err

    def test_unknown_object_id(self, ws, tmp_path, capsys):
        rc = run(["sweep-yaw", "--data", str(ws["data"]),
                  "--config", str(ws["cfg"]), "--object", "99",
                  "--out", str(tmp_path / "s.csv")])
        assert rc == 2
        assert "object 99" in capsys.readouterr().err

    def test_ply_export(self, ws):
        text = ws["ply"].read_text()
        assert text.startswith("ply\nformat ascii 1.0\n")
        assert "element vertex" in text
        assert "element edge" in text


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert run(["bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert run([]) == 1

    def test_missing_required_argument(self, capsys):
        assert run(["synth"]) == 1

    def test_help_exits_zero(self, capsys):
        assert run(["--help"]) == 0
        out = capsys.readouterr().out
        assert "synth" in out and "sweep-yaw" in out

    def test_subcommand_help(self, capsys):
        assert run(["slam", "--help"]) == 0

    def test_missing_dataset(self, tmp_path, capsys):
        rc = run(["slam", "--data", str(tmp_path / "nope"),
                  "--out", str(tmp_path / "m.json")])
        assert rc == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_missing_eval_inputs(self, tmp_path, capsys):
        rc = run(["eval", "--est", str(tmp_path / "a.json"),
                  "--gt", str(tmp_path / "b.json"),
                  "--out", str(tmp_path / "r.csv")])
        assert rc == 2

    def test_bad_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp_speed = 9\n")
        rc = run(["synth", "--config", str(cfg),
                  "--out", str(tmp_path / "d")])
        assert rc == 2
        assert "unknown key" in capsys.readouterr().err

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "quadricmap.cli", "--help"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert "quadricmap" in proc.stdout


class TestPrintConfig:
    def test_prints_effective_config(self, tmp_path, capsys):
        out = tmp_path / "never"
        assert run(["synth", "--print-config", "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert parse_config(printed) == RunConfig()
        assert not out.exists()

    def test_reflects_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 11\nuse_symmetry = true\n")
        assert run(["synth", "--config", str(cfg), "--print-config",
                    "--out", str(tmp_path / "never")]) == 0
        parsed = parse_config(capsys.readouterr().out)
        assert parsed.seed == 11
        assert parsed.use_symmetry is True


class TestDeterminism:
    def test_repeat_runs_are_bitwise_identical(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 5\nn_objects = 3\nn_frames = 10\n")
        outputs = {}
        for tag in ("a", "b"):
            d = tmp_path / tag
            data = d / "data"
            assert run(["synth", "--config", str(cfg),
                        "--out", str(data)]) == 0
            assert run(["slam", "--data", str(data), "--config", str(cfg),
                        "--out", str(d / "map.json")]) == 0
            assert run(["eval", "--est", str(d / "map.json"),
                        "--gt", str(data / "gt.json"), "--config", str(cfg),
                        "--out", str(d / "report.csv")]) == 0
            outputs[tag] = (
                (data / "gt.json").read_bytes(),
                (data / "detections.txt").read_bytes(),
                (d / "map.json").read_bytes(),
                (d / "report.csv").read_bytes(),
            )
        assert outputs["a"] == outputs["b"]


class TestAblations:
    def test_scale_table_toggle_changes_initialization(self, ws, tmp_path):
        cfg = tmp_path / "nossc.cfg"
        cfg.write_text(WS_CONFIG + "use_ssc = false\n")
        out = tmp_path / "init_nossc.json"
        assert run(["init", "--data", str(ws["data"]), "--config", str(cfg),
                    "--out", str(out)]) == 0
        with_table = load_map(ws["init"])
        without = load_map(out)
        gaps = [np.abs(with_table.objects[i].half_axes
                       - without.objects[i].half_axes).max()
                for i in sorted(with_table.objects)]
        assert max(gaps) > 1e-6

    def test_symmetry_toggle_controls_refinement(self, ws, tmp_path):
        cfg = tmp_path / "nosym.cfg"
        cfg.write_text(WS_CONFIG.replace("use_symmetry = true",
                                         "use_symmetry = false"))
        out = tmp_path / "slam_nosym.json"
        assert run(["slam", "--data", str(ws["data"]), "--config", str(cfg),
                    "--out", str(out)]) == 0
        assert "refined" not in load_map(out).metadata
        assert load_map(ws["slam"]).metadata["refined"] == [0, 1, 2]
