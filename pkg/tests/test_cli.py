import csv
import json
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from eventcalib.cli import main
from eventcalib.config import reference_text
from eventcalib.report import parse_text
from eventcalib.simulator import GroundTruth

SIM_ARGS = ["--windows", "24", "--seed", "3", "--trajectory-seed", "2"]


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(d / "ev.bin"), *SIM_ARGS]) == 0
    return d / "ev.bin", d / "ev.truth.json"


@pytest.fixture(scope="module")
def calibrated(sim, tmp_path_factory):
    events, _ = sim
    out = tmp_path_factory.mktemp("cal") / "report.json"
    code = main(["calibrate", "--events", str(events), "--out", str(out), "--override", "clustering.eps_s=0.016"])
    assert code == 0
    return out


def test_calibrate_writes_report_and_stats(calibrated, capsys):
    doc = json.loads(calibrated.read_text())
    assert doc["schema_version"] == 1
    assert doc["config"]["clustering.eps_s"] == 0.016
    stats = json.loads(calibrated.with_name("report.stats.json").read_text())
    assert stats["possible_detections"] == 24
    assert doc["N"] == stats["successful_detections"] >= 20
    assert abs(doc["intrinsics"]["fx"] - 350) < 5


def test_calibrate_summary_printed(sim, tmp_path, capsys):
    events, _ = sim
    assert main(["calibrate", "--events", str(events), "--out", str(tmp_path / "r.json")]) == 0
    out = capsys.readouterr().out
    assert "zeta_r" in out and "success rate" in out and "fx fy" in out


def test_outputs_are_reproducible(sim, tmp_path):
    events, _ = sim
    for name in ("a", "b"):
        assert main(["calibrate", "--events", str(events), "--out", str(tmp_path / f"{name}.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.stats.json").read_bytes() == (tmp_path / "b.stats.json").read_bytes()


def test_config_file_and_override_precedence(sim, tmp_path):
    events, _ = sim
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("clustering.eps_s = 0.017\ngrid.delta_max = 6\n")
    out = tmp_path / "r.json"
    assert main(["calibrate", "--events", str(events), "--out", str(out), "--config", str(cfg), "--override", "grid.delta_max=7"]) == 0
    echo = json.loads(out.read_text())["config"]
    assert echo["clustering.eps_s"] == 0.017 and echo["grid.delta_max"] == 7


def test_missing_events_file(tmp_path, capsys):
    assert main(["calibrate", "--events", str(tmp_path / "none.csv"), "--out", str(tmp_path / "r.json")]) == 3
    assert "not found" in capsys.readouterr().err


def test_bad_override_key(sim, tmp_path, capsys):
    events, _ = sim
    assert main(["calibrate", "--events", str(events), "--out", str(tmp_path / "r.json"), "--override", "foo.bar=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_missing_argument_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["calibrate", "--events", "x.csv"])
    assert err.value.code == 2


def test_infeasible(sim, tmp_path):
    events, _ = sim
    out = tmp_path / "r.json"
    assert main(["calibrate", "--events", str(events), "--out", str(out), "--override", "calibration.min_views=40"]) == 4
    assert not out.exists()
    assert json.loads((tmp_path / "r.stats.json").read_text())["possible_detections"] == 24


def test_malformed_events(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,three,1\n")
    assert main(["detect", "--events", str(bad), "--out", str(tmp_path / "d.csv")]) == 3


def test_detect(sim, tmp_path, capsys):
    events, truth = sim
    out = tmp_path / "d.csv"
    assert main(["detect", "--events", str(events), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    gt = {w.t1: w.centers for w in GroundTruth.load(truth).windows}
    err = np.array([math.hypot(float(r["u_px"]) - c[0], float(r["v_px"]) - c[1]) for r in rows
                    for c in [gt[int(r["t_ref_us"])][int(r["point"])]]])
    assert len(err) == 24 * 44
    # every point is matched to its own circle (neighbours are ~10 px apart) and localized sub-pixel
    assert err.max() < 3.0 and math.sqrt(np.mean(err**2)) < 0.3
    assert "detections" in capsys.readouterr().out


def test_report_round_trip(calibrated, tmp_path, capsys):
    assert main(["report", str(calibrated), "--out-dir", str(tmp_path)]) == 0
    values = parse_text(capsys.readouterr().out)
    doc = json.loads(calibrated.read_text())
    for k in ("fx", "fy", "u0", "v0", "f_mean"):
        assert values[k] == doc["intrinsics"][k]
    for k in ("k1", "k2", "k3", "p1", "p2"):
        assert values[k] == doc["distortion"][k]
    assert values["zeta_r"] == doc["zeta_r"] and values["N"] == doc["N"]
    res = list(csv.DictReader((tmp_path / "report.residuals.csv").open()))
    assert len(res) == doc["N"] * 44
    r = np.array([[float(x["du_px"]), float(x["dv_px"])] for x in res])
    assert math.sqrt(np.mean(np.sum(r**2, axis=1))) == pytest.approx(doc["zeta_r"], rel=1e-12)
    assert not (tmp_path / "report.poses.csv").exists()


def test_report_pose_table_matches_independent_computation(calibrated, sim, tmp_path, capsys):
    _, truth = sim
    assert main(["report", str(calibrated), "--truth", str(truth), "--out-dir", str(tmp_path)]) == 0
    assert "pose comparison" in capsys.readouterr().out
    doc = json.loads(calibrated.read_text())
    gt = json.loads(truth.read_text())
    by_t = {w["t1"]: w["pose"] for w in gt["windows"]}
    rows = list(csv.DictReader((tmp_path / "report.poses.csv").open()))
    assert len(rows) == doc["N"]
    for row, view in zip(rows, doc["views"]):
        p = by_t[view["t_ref"]]
        dt = np.linalg.norm(np.subtract(view["translation"], p["translation"]))
        rel = Rotation.from_rotvec(view["rotation"]).inv() * Rotation.from_rotvec(p["rotation"])
        assert float(row["translation_error_mm"]) == pytest.approx(dt, rel=1e-9, abs=1e-9)
        assert float(row["rotation_error_deg"]) == pytest.approx(np.degrees(rel.magnitude()), abs=1e-6)


def test_report_missing_sidecar(calibrated, tmp_path, capsys):
    assert main(["report", str(calibrated), "--truth", str(tmp_path / "none.json"), "--out-dir", str(tmp_path)]) == 0
    captured = capsys.readouterr()
    assert "pose comparison" not in captured.out and "not found" in captured.err


def test_report_schema_mismatch(calibrated, tmp_path):
    doc = json.loads(calibrated.read_text())
    doc["schema_version"] = 99
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["report", str(bad)]) != 0
    bad.write_text("not json")
    assert main(["report", str(bad)]) != 0


def test_simulate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        assert main(["simulate", "--out", str(tmp_path / name / "ev.csv"), "--windows", "3", "--seed", "9"]) == 0
    for f in ("ev.csv", "ev.truth.json", "ev.truth.labels.npy"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_default_scenario_window_count(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "ev.bin")]) == 0
    gt = GroundTruth.load(tmp_path / "ev.truth.json")
    assert gt.min_events >= 4000
    assert sum(w.visible for w in gt.windows) >= 40


def test_simulate_out_of_frame_warns(tmp_path, capsys):
    traj = tmp_path / "traj.csv"
    traj.write_text("t_us,rx,ry,rz,tx,ty,tz\n0,0,0,0,-130,-60,330\n200000,0,0,0,300,-60,330\n".replace("t_us,rx,ry,rz,tx,ty,tz\n", "# t_us,rx,ry,rz,tx,ty,tz\n"))
    assert main(["simulate", "--out", str(tmp_path / "ev.bin"), "--trajectory", str(traj), "--min-events", "2000"]) == 0
    assert "not fully in frame" in capsys.readouterr().err
    gt = GroundTruth.load(tmp_path / "ev.truth.json")
    assert any(w.visible for w in gt.windows) and not all(w.visible for w in gt.windows)


def test_simulate_bad_pattern(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "ev.bin"), "--pattern", "4.5", "11", "24"]) == 2


def test_help_lists_config_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["calibrate", "--help"])
    out = capsys.readouterr().out
    for line in reference_text().splitlines():
        assert line in out
