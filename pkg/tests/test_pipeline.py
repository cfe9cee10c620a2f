import json
from dataclasses import replace

import pytest

from contourpan import pipeline
from contourpan.pipeline import (
    TABLE_COLUMNS,
    PipelineConfig,
    parse_grid,
    run_ablation,
    run_synthetic,
    strip_timings,
)
from contourpan.raster import ValidationError
from contourpan.synth import SceneSpec

SMALL = PipelineConfig(scene=SceneSpec(height=96, width=160, n_instances=3), n_scenes=3)


def test_zero_noise_report_is_perfect():
    rep = run_synthetic(SMALL)
    s = rep["metrics"]["summary"]
    assert s["PQ"] == s["SQ"] == s["RQ"] == s["mIoU"] == s["AP"] == 1.0
    assert rep["config"] == SMALL.to_json()
    assert [sc["seed"] for sc in rep["scenes"]] == [0, 1, 2]
    assert set(rep["scenes"][0]["timings"]) == {"derive_ms", "refine_ms", "panoptic_ms"}


def test_no_refine_unchanged_on_clean_inputs():
    a = run_synthetic(SMALL)["metrics"]
    b = run_synthetic(replace(SMALL, refine_enabled=False))["metrics"]
    assert a == b


def test_artifacts_written(tmp_path):
    run_synthetic(replace(SMALL, n_scenes=1), out_dir=tmp_path)
    names = {p.name for p in (tmp_path / "scene_00000").iterdir()}
    assert {"semantic_probs.stf", "contours.stf", "offsets.stf", "labels.stf", "instances.stf",
            "instances_derived.stf", "panoptic.stf", "gt_panoptic.stf", "records.json",
            "confidences.json"} <= names
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["metrics"]["summary"]["PQ"] == 1.0


def test_threads_do_not_change_results(tmp_path):
    a = run_synthetic(SMALL, out_dir=tmp_path / "a", threads=1)
    b = run_synthetic(SMALL, out_dir=tmp_path / "b", threads=3)
    assert strip_timings(a) == strip_timings(b)
    for f in sorted((tmp_path / "a").rglob("*.stf")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_strip_timings_nested():
    assert strip_timings({"a": 1, "timings": 2, "b": [{"timings": 3, "c": 4}]}) == {"a": 1, "b": [{"c": 4}]}


def test_config_json_round_trip(tmp_path):
    cfg = replace(SMALL, refine_enabled=False, n_scenes=7)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert PipelineConfig.load(path) == cfg
    with pytest.raises(ValidationError):
        PipelineConfig.from_json({"bogus": 1})
    with pytest.raises(ValidationError):
        PipelineConfig.from_json({"refine": {"epsilon": 3}})


def test_default_threads_from_env(monkeypatch):
    monkeypatch.setenv("CONTOURPAN_THREADS", "4")
    assert pipeline.default_threads() == 4
    monkeypatch.setenv("CONTOURPAN_THREADS", "junk")
    assert pipeline.default_threads() == 1


@pytest.mark.parametrize(
    "axis, grid, expected",
    [
        ("min_area", ["1", "100", "300", "500"], [1, 100, 300, 500]),
        ("dilation_rate", [1, 2, 3], [1, 2, 3]),
        ("refine_flags", ["off", "split", "split+merge"], ["off", "split", "split+merge"]),
        ("loss_combo", ["wbce", "wbce+huber", "wbce+huber+nms"], ["wbce", "wbce+huber", "wbce+huber+nms"]),
    ],
)
def test_parse_grid(axis, grid, expected):
    assert parse_grid(axis, grid) == expected


@pytest.mark.parametrize(
    "axis, grid",
    [("min_area", ["1", "x"]), ("min_area", ["-3"]), ("refine_flags", ["merge"]),
     ("loss_combo", ["dice"]), ("speed", ["1"]), ("min_area", [])],
)
def test_invalid_grid_fails_before_any_run(axis, grid, monkeypatch):
    calls = []
    monkeypatch.setattr(pipeline, "run_synthetic", lambda *a, **k: calls.append(a))
    with pytest.raises(ValidationError):
        run_ablation(axis, grid, SMALL)
    assert calls == []


def test_ablation_rows():
    rows = run_ablation("refine_flags", ["off", "split", "split+merge"], replace(SMALL, n_scenes=2))
    assert [r["value"] for r in rows] == ["off", "split", "split+merge"]
    for r in rows:
        assert set(TABLE_COLUMNS) <= set(r)


def test_ablation_is_deterministic():
    cfg = replace(SMALL, n_scenes=2, scene=replace(SMALL.scene, contour_break_prob=0.3))
    assert run_ablation("min_area", [1, 300], cfg) == run_ablation("min_area", [1, 300], cfg)


def test_loss_combo_rows_carry_losses():
    rows = run_ablation("loss_combo", ["wbce", "wbce+huber+nms"], replace(SMALL, n_scenes=1))
    assert rows[0]["contour_loss"] < rows[1]["contour_loss"]
    assert rows[0]["PQ"] == rows[1]["PQ"]


def test_write_table(tmp_path):
    rows = [{"axis": "min_area", "value": 1, **{c: 1.0 for c in TABLE_COLUMNS}}]
    pipeline.write_table(rows, tmp_path / "t.csv", tmp_path / "t.json")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "axis,value," + ",".join(TABLE_COLUMNS)
    assert json.loads((tmp_path / "t.json").read_text())["rows"] == rows
