import csv
import json

import numpy as np
import pytest

from conftest import (
    DETECT_COMMAND,
    HEADLINE_CONDITIONS,
    lidc_document,
    make_volume,
    nodule,
    phantom_inputs,
    roi,
    session,
    square,
    headline_cohort,
)
from noduleqa.annotations import read_consensus_csv, write_consensus_csv
from noduleqa.cli import main
from noduleqa.detections import write_detections
from noduleqa.pipeline import load_config
from noduleqa.volume_io import write_volume


def _manifest(path):
    return json.loads(path.read_text())


def _csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_degrade_two_cases(tmp_path):
    cfg = phantom_inputs(tmp_path / "in")
    out = tmp_path / "out"
    assert main(["degrade", "--config", str(cfg), "--out", str(out)]) == 0
    vols = sorted(p.relative_to(out).as_posix() for p in out.rglob("*.nii.gz"))
    assert len(vols) == 10
    assert "thick_5mm/P01.nii.gz" in vols
    m = _manifest(out / "manifest.json")
    assert m["seed"] == 20250116 and m["excluded"] == []
    by_cond = {(e["case_id"], e["condition_id"]): e["parameters"] for e in m["degrade"]}
    assert by_cond[("P00", "dose_25")]["sigma_hu"] == 50.0
    assert by_cond[("P00", "thick_3mm")]["window_slices"] == 2
    assert by_cond[("P00", "thick_3mm")]["effective_thickness_mm"] == 2.5


def test_degrade_rerun_identical_checksums(tmp_path):
    cfg = phantom_inputs(tmp_path / "in")
    for name in ("a", "b"):
        assert main(["degrade", "--config", str(cfg), "--out", str(tmp_path / name), "--jobs", "2"]) == 0
    sums = [
        {(e["case_id"], e["condition_id"]): e["output_sha256"] for e in _manifest(tmp_path / n / "manifest.json")["degrade"]}
        for n in ("a", "b")
    ]
    assert sums[0] == sums[1] and len(sums[0]) == 10


def test_seed_changes_noise(tmp_path):
    cfg = phantom_inputs(tmp_path / "in", n_cases=1)
    main(["degrade", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["degrade", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "7"])
    sha = [{e["condition_id"]: e["output_sha256"] for e in _manifest(tmp_path / n / "manifest.json")["degrade"]}
           for n in ("a", "b")]
    assert sha[0]["baseline"] == sha[1]["baseline"]
    assert sha[0]["dose_25"] != sha[1]["dose_25"]


def test_five_slice_volume_excluded(tmp_path):
    vols = tmp_path / "vols"
    vols.mkdir()
    write_volume(make_volume((8, 8, 20)), vols / "good.nii.gz")
    write_volume(make_volume((8, 8, 5)), vols / "short.nii.gz")
    out = tmp_path / "out"
    assert main(["degrade", "--input-dir", str(vols), "--out", str(out)]) == 0
    m = _manifest(out / "manifest.json")
    assert [e["case_id"] for e in m["excluded"]] == ["short"]
    assert "5 slices" in m["excluded"][0]["reasons"][0]
    assert {e["case_id"] for e in m["degrade"]} == {"good"}
    assert not (out / "baseline" / "short.nii.gz").exists()


def test_degrade_without_inputs_is_usage_error(tmp_path):
    assert main(["degrade", "--out", str(tmp_path)]) == 1


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["degrade", "--bogus"])
    assert exc.value.code == 1


def test_degrade_dry_run_writes_nothing(tmp_path, capsys):
    cfg = phantom_inputs(tmp_path / "in", n_cases=1)
    out = tmp_path / "out"
    assert main(["degrade", "--config", str(cfg), "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()
    plan = json.loads(capsys.readouterr().out)
    assert len(plan["degrade"]) == 5


# -- consensus -----------------------------------------------------------------

def _xml_inputs(tmp_path):
    cfg = phantom_inputs(tmp_path / "in", n_cases=1)
    xml_dir = tmp_path / "xml"
    xml_dir.mkdir()
    # z = -5.0 is slice 12 of the phantom grid
    sessions = [session([nodule("A", [roi(-5.0, square(20, 16))])]) for _ in range(4)]
    sessions[0] = session([nodule("A", [roi(-5.0, square(20, 16))]), nodule("B", [roi(-5.0, square(5, 5))])])
    (xml_dir / "P00.xml").write_text(lidc_document(sessions))
    return cfg.parent / "volumes", xml_dir


def test_consensus_cli(tmp_path):
    vols, xml_dir = _xml_inputs(tmp_path)
    out3, out1 = tmp_path / "c3.csv", tmp_path / "c1.csv"
    assert main(["consensus", "--xml-dir", str(xml_dir), "--volumes", str(vols), "--out", str(out3)]) == 0
    assert main(["consensus", "--xml-dir", str(xml_dir), "--volumes", str(vols), "--out", str(out1),
                 "--min-readers", "1"]) == 0
    three, one = read_consensus_csv(out3)["P00"], read_consensus_csv(out1)["P00"]
    assert len(three) == 1 and three[0].reader_count == 4
    # square(20, 16) on the (-14, -14) origin grid
    assert three[0].centroid_world == pytest.approx((0.0, -2.8, -5.0))
    assert len(one) >= len(three) and len(one) == 2


def test_malformed_xml_names_file(tmp_path, caplog):
    vols, xml_dir = _xml_inputs(tmp_path)
    (xml_dir / "P00.xml").write_text("<LidcReadMessage><readingSession>")
    assert main(["consensus", "--xml-dir", str(xml_dir), "--volumes", str(vols)]) == 2
    assert "P00.xml" in caplog.text


# -- evaluate / sweep ------------------------------------------------------------

@pytest.fixture
def headline_files(tmp_path):
    nodules, dets = headline_cohort()
    write_consensus_csv([n for c in sorted(nodules) for n in nodules[c]], tmp_path / "consensus.csv")
    write_detections(dets, tmp_path / "detections.csv")
    return tmp_path / "consensus.csv", tmp_path / "detections.csv"


def test_evaluate_headline_cohort(headline_files, tmp_path, capsys):
    cons, dets = headline_files
    out = tmp_path / "report"
    assert main(["evaluate", "--consensus", str(cons), "--detections", str(dets), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    for pct in ("45.2%", "41.3%", "42.1%", "26.2%"):
        assert pct in text
    assert "5mm Thick: -19 pp from baseline (-42% relative)." in text
    rows = _csv_rows(out / "sensitivity_by_condition.csv")
    assert [r["condition_id"] for r in rows] == list(HEADLINE_CONDITIONS)
    assert [r["detected"] for r in rows] == ["57", "52", "53", "52", "33"]


def test_evaluate_threshold_monotone(headline_files, tmp_path):
    cons, dets = headline_files
    got = {}
    for t in ("0.1", "0.9"):
        out = tmp_path / t
        assert main(["evaluate", "--consensus", str(cons), "--detections", str(dets), "--out", str(out),
                     "--threshold", t]) == 0
        got[t] = {r["condition_id"]: int(r["detected"]) for r in _csv_rows(out / "sensitivity_by_condition.csv")}
    assert all(got["0.9"][c] <= got["0.1"][c] for c in HEADLINE_CONDITIONS)
    assert got["0.9"]["baseline"] < got["0.1"]["baseline"]


def test_sweep_cli(headline_files, tmp_path):
    cons, dets = headline_files
    out = tmp_path / "sweep"
    assert main(["sweep", "--consensus", str(cons), "--detections", str(dets), "--out", str(out),
                 "--thresholds", "0.2,0.5,0.8"]) == 0
    rows = _csv_rows(out / "threshold_sweep.csv")
    assert [r["threshold"] for r in rows[:3]] == ["0.2", "0.5", "0.8"]
    assert (out / "threshold_sweep.svg").exists()


def test_evaluate_unknown_case_is_data_error(headline_files, tmp_path):
    cons, _ = headline_files
    bad = tmp_path / "bad.csv"
    bad.write_text("case_id,condition_id,frame,x,y,z,confidence\nZZ,baseline,world,0,0,0,0.5\n")
    assert main(["evaluate", "--consensus", str(cons), "--detections", str(bad), "--out", str(tmp_path / "r")]) == 2


# -- run -------------------------------------------------------------------------

def test_run_phantom_closed_loop(tmp_path, capsys):
    cfg = phantom_inputs(tmp_path / "in")
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    rows = _csv_rows(out / "report" / "sensitivity_by_condition.csv")
    assert len(rows) == 5
    det = {r["condition_id"]: (int(r["detected"]), int(r["total"])) for r in rows}
    assert det["baseline"] == (4, 4)
    assert det["thick_5mm"][0] < det["baseline"][0]
    m = _manifest(out / "manifest.json")
    assert {r["status"] for r in m["model_runs"]} == {"ok"}
    assert m["absent_cells"] == []
    assert m["detection_diagnostics"]["baseline"]["out_of_volume"] == 0
    assert "Baseline" in capsys.readouterr().out


def test_run_missing_model_command(tmp_path):
    cfg = phantom_inputs(tmp_path / "in", n_cases=1)
    cfg.write_text(cfg.read_text().split("model:")[0])
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 1
    assert not out.exists()


def test_run_failing_model_exit_3(tmp_path):
    cfg = phantom_inputs(tmp_path / "in", n_cases=1)
    out = tmp_path / "run"
    rc = main(["run", "--config", str(cfg), "--out", str(out),
               "--model-command", "{python} -c 'import sys; sys.exit(4)' {input_dir} {output}"])
    assert rc == 3
    m = _manifest(out / "manifest.json")
    assert {r["status"] for r in m["model_runs"]} == {"failed"}
    # no model output anywhere: every cell absent, never counted as a miss
    assert len(m["absent_cells"]) == 5


def test_run_dry_run_writes_nothing(tmp_path, capsys):
    cfg = phantom_inputs(tmp_path / "in", n_cases=1)
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()
    plan = json.loads(capsys.readouterr().out)
    assert plan["dry_run"] is True and len(plan["degrade"]) == 5
    assert [r["status"] for r in plan["model_runs"]] == ["planned"] * 5


def test_phantom_and_detect_commands(tmp_path):
    spec = tmp_path / "case1.yaml"
    spec.write_text(
        "dims: [40, 40, 32]\nspacing: [0.7, 0.7, 1.25]\n"
        "nodules:\n  - {center_world: [14, 14, 20], radius_mm: 4, contrast_hu: 400}\n"
    )
    out = tmp_path / "ph"
    assert main(["phantom", str(spec), "--out-dir", str(out)]) == 0
    assert (out / "case1.nii.gz").exists()
    truth = read_consensus_csv(out / "consensus.csv")["case1"]
    assert truth[0].centroid_world == (14.0, 14.0, 20.0)
    (tmp_path / "vols").mkdir()
    (out / "case1.nii.gz").rename(tmp_path / "vols" / "case1.nii.gz")
    assert main(["detect", "--input-dir", str(tmp_path / "vols"), "--output", str(tmp_path / "d.csv"),
                 "--condition", "baseline"]) == 0
    rows = _csv_rows(tmp_path / "d.csv")
    assert len(rows) == 1 and rows[0]["case_id"] == "case1"
    assert np.linalg.norm([float(rows[0][k]) - v for k, v in zip("xyz", (14, 14, 20))]) < 2.0


def test_config_overrides_and_env(tmp_path, monkeypatch):
    cfg = phantom_inputs(tmp_path / "in", n_cases=1)
    monkeypatch.setenv("NODULEQA_OUTPUT_ROOT", str(tmp_path / "envroot"))
    c = load_config(cfg, {"seed": 5, "threshold": 0.3})
    assert c.seed == 5 and c.threshold == 0.3
    assert c.output_root == tmp_path / "envroot"
    assert c.model_command == DETECT_COMMAND
    assert set(c.cases) == {"P00"}


def test_bad_schema_version(tmp_path):
    cfg = phantom_inputs(tmp_path / "in", n_cases=1)
    cfg.write_text("schema_version: 9\n")
    assert main(["degrade", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
