import json

import numpy as np
import pytest
from click.testing import CliRunner

from canonvote.cli import main

RECIPE = {
    "scenes": 2,
    "floor_extent": [6.0, 6.0],
    "clearance": 0.5,
    "background_points": 200,
    "classes": [
        {
            "name": "crate",
            "count": [1, 2],
            "scale_range": [[0.3, 0.4], [0.3, 0.45], [0.3, 0.4]],
            "points": [600, 700],
        }
    ],
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workspace(tmp_path, runner):
    recipe = tmp_path / "recipe.json"
    recipe.write_text(json.dumps(RECIPE))
    scenes = tmp_path / "scenes"
    result = runner.invoke(main, ["scene-gen", "--recipe", str(recipe),
                                  "--out", str(scenes), "--seed", "5"])
    assert result.exit_code == 0, result.output
    return tmp_path, recipe, scenes


def test_scene_gen_outputs(workspace):
    _, _, scenes = workspace
    plys = sorted(scenes.glob("scene_*.ply"))
    jsons = sorted(scenes.glob("scene_*.json"))
    assert len(plys) == 2 and len(jsons) == 2
    manifest = json.loads((scenes / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 2
    assert manifest["scenes"][0]["cloud"] == "scene_0000.ply"


def test_scene_gen_deterministic(tmp_path, runner):
    recipe = tmp_path / "recipe.json"
    recipe.write_text(json.dumps(RECIPE))
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = runner.invoke(main, ["scene-gen", "--recipe", str(recipe),
                                      "--out", str(out), "--seed", "9"])
        assert result.exit_code == 0, result.output
        outputs.append((out / "scene_0000.ply").read_bytes())
    assert outputs[0] == outputs[1]


def test_predict_detect_eval_flow(workspace, runner):
    tmp_path, _, scenes = workspace
    dets_dir = tmp_path / "dets"
    dets_dir.mkdir()
    for stem in ("scene_0000", "scene_0001"):
        field = tmp_path / f"{stem}.field.jsonl"
        result = runner.invoke(main, [
            "predict-oracle", str(scenes / f"{stem}.json"), str(scenes / f"{stem}.ply"),
            "--out", str(field),
        ])
        assert result.exit_code == 0, result.output
        result = runner.invoke(main, [
            "detect", str(scenes / f"{stem}.ply"), str(field),
            "--out", str(dets_dir / f"{stem}.detections.json"),
            "--scene", str(scenes / f"{stem}.json"),
        ])
        assert result.exit_code == 0, result.output
        assert (dets_dir / f"{stem}.detections.json.config.json").exists()

    report = tmp_path / "report.json"
    result = runner.invoke(main, [
        "eval", "--scenes", str(scenes), "--detections", str(dets_dir),
        "--out", str(report),
    ])
    assert result.exit_code == 0, result.output
    data = json.loads(report.read_text())
    assert data["map"]["0.5"] == pytest.approx(1.0)


def test_detect_deterministic_across_jobs(workspace, runner):
    tmp_path, _, scenes = workspace
    field = tmp_path / "f.jsonl"
    result = runner.invoke(main, [
        "predict-oracle", str(scenes / "scene_0000.json"), str(scenes / "scene_0000.ply"),
        "--out", str(field), "--canonical-sigma", "0.05", "--seed", "3",
    ])
    assert result.exit_code == 0, result.output
    payloads = []
    for jobs in ("1", "2", "1"):
        out = tmp_path / f"d{len(payloads)}.json"
        result = runner.invoke(main, [
            "detect", str(scenes / "scene_0000.ply"), str(field),
            "--out", str(out), "--jobs", jobs,
        ])
        assert result.exit_code == 0, result.output
        payloads.append(out.read_bytes())
    assert payloads[0] == payloads[1] == payloads[2]


def test_detect_empty_field_scene(tmp_path, runner):
    # A field with all-zero objectness yields an empty detections array.
    recipe = tmp_path / "recipe.json"
    recipe.write_text(json.dumps(RECIPE))
    scenes = tmp_path / "s"
    result = runner.invoke(main, ["scene-gen", "--recipe", str(recipe),
                                  "--out", str(scenes), "--seed", "2"])
    assert result.exit_code == 0, result.output
    from canonvote import NoiseModel, load_scene, oracle_field, save_field_jsonl
    from canonvote.gridvote import PredictionField
    scene, cloud = load_scene(scenes / "scene_0000.json", scenes / "scene_0000.ply")
    field = oracle_field(scene, cloud, NoiseModel())
    silenced = PredictionField(
        p_tilde=field.p_tilde, scale=field.scale,
        objectness=np.zeros(cloud.n), class_scores=field.class_scores,
    )
    path = tmp_path / "silent.jsonl"
    save_field_jsonl(path, silenced)
    out = tmp_path / "out.json"
    result = runner.invoke(main, [
        "detect", str(scenes / "scene_0000.ply"), str(path), "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    assert json.loads(out.read_text()) == []


def test_detect_export_grid_flag(workspace, runner):
    tmp_path, _, scenes = workspace
    field = tmp_path / "f.jsonl"
    runner.invoke(main, [
        "predict-oracle", str(scenes / "scene_0000.json"), str(scenes / "scene_0000.ply"),
        "--out", str(field),
    ])
    out = tmp_path / "d.json"
    grid_ply = tmp_path / "votes.ply"
    result = runner.invoke(main, [
        "detect", str(scenes / "scene_0000.ply"), str(field),
        "--out", str(out), "--export-grid", str(grid_ply),
    ])
    assert result.exit_code == 0, result.output
    assert grid_ply.exists()
    from canonvote.ply import read_point_cloud
    positions, props = read_point_cloud(grid_ply)
    assert "vote" in props and len(positions) > 0


def test_export_grid_command(workspace, runner):
    tmp_path, _, scenes = workspace
    field = tmp_path / "f.jsonl"
    runner.invoke(main, [
        "predict-oracle", str(scenes / "scene_0000.json"), str(scenes / "scene_0000.ply"),
        "--out", str(field),
    ])
    out = tmp_path / "g.ply"
    result = runner.invoke(main, [
        "export-grid", str(scenes / "scene_0000.ply"), str(field), "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    assert out.exists()


def test_malformed_ply_exits_2(tmp_path, runner):
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"not a ply\n")
    field = tmp_path / "f.jsonl"
    field.write_text('{"p_tilde": [0,0,0], "scale": [1,1,1], "objectness": 1.0, "class_scores": [1.0]}\n')
    result = runner.invoke(main, ["detect", str(bad), str(field), "--out",
                                  str(tmp_path / "o.json")])
    assert result.exit_code == 2
    assert "byte offset" in result.output


def test_bad_config_exits_3(workspace, runner):
    tmp_path, _, scenes = workspace
    field = tmp_path / "f.jsonl"
    runner.invoke(main, [
        "predict-oracle", str(scenes / "scene_0000.json"), str(scenes / "scene_0000.ply"),
        "--out", str(field),
    ])
    result = runner.invoke(main, [
        "detect", str(scenes / "scene_0000.ply"), str(field),
        "--out", str(tmp_path / "o.json"), "--tau", "-0.5",
    ])
    assert result.exit_code == 3
    assert "tau" in result.output


def test_field_cloud_mismatch_exits_2(workspace, runner):
    tmp_path, _, scenes = workspace
    field = tmp_path / "f.jsonl"
    field.write_text('{"p_tilde": [0,0,0], "scale": [1,1,1], "objectness": 1.0, "class_scores": [1.0]}\n')
    result = runner.invoke(main, [
        "detect", str(scenes / "scene_0000.ply"), str(field),
        "--out", str(tmp_path / "o.json"),
    ])
    assert result.exit_code == 2


def test_ablate_csv_schema(tmp_path, runner):
    recipe = tmp_path / "recipe.json"
    small = dict(RECIPE)
    small["scenes"] = 1
    small["scatter_points"] = 100
    recipe.write_text(json.dumps(small))
    out = tmp_path / "ablation.csv"
    result = runner.invoke(main, [
        "ablate", "--recipe", str(recipe), "--out", str(out),
        "--seeds", "2", "--scenes-per-seed", "1",
    ])
    assert result.exit_code == 0, result.output
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "variant,map50_mean,map50_std,n_seeds"
    variants = [line.split(",")[0] for line in lines[1:]]
    assert variants == ["full", "direct_voting", "no_backprojection", "no_objectness"]


def test_bench_smoke(runner):
    result = runner.invoke(main, ["bench", "--n", "3000", "--k", "24", "--tau", "0.1"])
    assert result.exit_code == 0, result.output
    assert "linearity ratio" in result.output
    assert "points/s" in result.output


def test_config_file_with_override(workspace, runner):
    tmp_path, _, scenes = workspace
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"tau": 0.08, "delta": 45.0}))
    field = tmp_path / "f.jsonl"
    runner.invoke(main, [
        "predict-oracle", str(scenes / "scene_0000.json"), str(scenes / "scene_0000.ply"),
        "--out", str(field),
    ])
    out = tmp_path / "d.json"
    result = runner.invoke(main, [
        "detect", str(scenes / "scene_0000.ply"), str(field),
        "--out", str(out), "--config", str(cfg), "--delta", "50.0",
    ])
    assert result.exit_code == 0, result.output
    echo = json.loads((tmp_path / "d.json.config.json").read_text())
    assert echo["tau"] == 0.08
    assert echo["delta"] == 50.0

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"delta": 60.0, "mystery": 1}))
    result = runner.invoke(main, [
        "detect", str(scenes / "scene_0000.ply"), str(field),
        "--out", str(out), "--config", str(bad),
    ])
    assert result.exit_code == 3
