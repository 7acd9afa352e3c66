import io
import json
import subprocess
import sys

import numpy as np
import pytest

from fragtrack.cli import EXIT_CONFIG, EXIT_FATAL, EXIT_OK, emit_report, main


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(d), "--n", "4", "--frames", "400", "--seed", "7"]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def tracked(synth_dir, tmp_path_factory):
    outs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"run{k}")
        assert main(["track", "--config", str(synth_dir / "run.json"), "--out", str(out)]) == EXIT_OK
        outs.append(out)
    return outs


def test_synth_writes_artifacts(synth_dir):
    for name in ("blobs.jsonl.gz", "ground_truth.json", "synth_config.json", "run.json"):
        assert (synth_dir / name).exists()
    run = json.loads((synth_dir / "run.json").read_text())
    assert run["n_individuals"] == 4 and run["input"] == "blobs.jsonl.gz"


def test_track_easy_video(tracked):
    s = json.loads((tracked[0] / "summary.json").read_text())
    assert s["estimated_accuracy"] >= 0.99
    for name in ("trajectories.csv", "trajectories_wo_gaps.csv", "cascade_log.jsonl", "identities.npz"):
        assert (tracked[0] / name).exists()


def test_track_is_deterministic(tracked):
    a, b = tracked
    assert (a / "trajectories.csv").read_bytes() == (b / "trajectories.csv").read_bytes()
    sa = json.loads((a / "summary.json").read_text())
    sb = json.loads((b / "summary.json").read_text())
    sa.pop("timings", None), sb.pop("timings", None)
    assert sa == sb


def test_report_with_ground_truth(tracked, synth_dir):
    buf = io.StringIO()
    s = emit_report(str(tracked[0]), str(synth_dir / "ground_truth.json"), stream=buf)
    text = buf.getvalue()
    assert "protocol used" in text and "protocol1" in text
    for key in ("accuracy (cascade)", "non-identified", "misidentified"):
        assert key in text
    assert s["validation"]["accuracy"] >= 0.99


def test_report_degraded_banner(tmp_path):
    (tmp_path / "summary.json").write_text(json.dumps({
        "estimated_accuracy": 0.4, "protocol_used": "degraded", "coverage": 0.6, "v_max": 1.0,
        "warnings": ["low"], "attempt_coverages": [0.6, 0.55, 0.4]}))
    buf = io.StringIO()
    emit_report(str(tmp_path), stream=buf)
    assert "WARNING: degraded run" in buf.getvalue()
    assert "0.6000, 0.5500, 0.4000" in buf.getvalue()


def test_report_missing_run(tmp_path):
    assert main(["report", "--run", str(tmp_path)]) == EXIT_FATAL


def test_missing_n_individuals_exits_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1}))
    assert main(["track", "--config", str(tmp_path / "c.json")]) == EXIT_CONFIG
    assert "n_individuals" in capsys.readouterr().err
    assert main(["validate", "--config", str(tmp_path / "c.json")]) == EXIT_CONFIG


def test_schema_error_has_key_path(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"n_individuals": 3, "cascade": {"protocol2_success": "x"}}))
    assert main(["validate", "--config", str(tmp_path / "c.json")]) == EXIT_CONFIG
    assert "cascade/protocol2_success" in capsys.readouterr().err


def test_validate_ok(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"n_individuals": 3}))
    assert main(["validate", "--config", str(tmp_path / "c.json")]) == EXIT_OK


def test_no_complete_frame_is_fatal(synth_dir, tmp_path):
    cfg = json.loads((synth_dir / "run.json").read_text())
    cfg["n_individuals"] = 9
    cfg["input"] = str(synth_dir / "blobs.jsonl.gz")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["track", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == EXIT_FATAL


def test_infeasible_synth(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "1"]) == EXIT_CONFIG


def test_pgm_frames_track(tmp_path):
    d = tmp_path / "v"
    assert main(["synth", "--out", str(d), "--n", "3", "--frames", "150", "--seed", "2", "--format", "pgm"]) == EXIT_OK
    assert len(list((d / "frames").iterdir())) == 150
    assert main(["track", "--config", str(d / "run.json"), "--out", str(tmp_path / "o")]) == EXIT_OK
    ids = np.load(tmp_path / "o" / "identities.npz")
    assert int(ids["n_frames"]) == 150


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "fragtrack.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "track" in r.stdout
