import json
from pathlib import Path

import pytest

from toponav.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from toponav.config import validate_config
from toponav.pipeline import run_pipeline

TINY = Path(__file__).parent.parent / "configs" / "tiny.json"


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    run_pipeline(validate_config(TINY), out)
    return out


def call(capsys, *argv):
    rc = main([str(a) for a in argv])
    return rc, capsys.readouterr()


def test_scene_gen_and_segment(capsys, tmp_path):
    scene = tmp_path / "s.json"
    rc, _ = call(capsys, "scene", "gen", "--rooms", 2, "--size", "40x40", "--seed", 3, "--out", scene)
    assert rc == EXIT_OK and set(json.loads(scene.read_text())) == {
        "version", "name", "resolution", "width", "height", "cells"}
    rc, cap = call(capsys, "segment", "--scene", scene, "--points", 40, "--out", tmp_path / "g.json")
    assert rc == EXIT_OK and (tmp_path / "g.json").exists()


def test_config_validate(capsys):
    rc, cap = call(capsys, "config", "validate", TINY)
    assert rc == EXIT_OK and json.loads(cap.out)["seed"] == 7


def test_config_error_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scenes": {}, "policy": {"lr": -1}}))
    rc, cap = call(capsys, "config", "validate", bad)
    assert rc == EXIT_CONFIG and "scenes" in cap.err


def test_negative_seed_rejected(capsys):
    rc, cap = call(capsys, "--seed", -1, "config", "validate", TINY)
    assert rc == EXIT_CONFIG and "seed" in cap.err


def test_usage_error(capsys):
    rc, _ = call(capsys, "scene", "gen", "--size", "banana")
    assert rc == 2


def test_missing_artifact_is_stage_error(capsys, tmp_path):
    rc, cap = call(capsys, "segment", "--scene", tmp_path / "missing.json")
    assert rc == EXIT_STAGE and "missing.json" in cap.err


def test_rollout_and_nav(capsys, run_dir, tmp_path):
    scene = run_dir / "scenes" / "bench-empty.json"
    models = run_dir / "models"
    rc, cap = call(capsys, "policy", "rollout", "--scene", scene, "--models", models, "--start", "1.0,1.0,0",
                   "--duration", 1.0, "--out", tmp_path / "roll.jsonl")
    assert rc == EXIT_OK and len((tmp_path / "roll.jsonl").read_text().splitlines()) == 10
    rc, cap = call(capsys, "nav", "run", "--scene", scene, "--map", run_dir / "maps" / "bench-empty.json",
                   "--models", models, "--start", "1.0,1.0", "--goal", "3.0,3.0", "--max-seconds", 10,
                   "--log", tmp_path / "nav.jsonl")
    assert rc == EXIT_OK
    result = json.loads(cap.out)
    assert {"success", "reason", "duration"} <= set(result)


def test_map_build(capsys, run_dir, tmp_path):
    rc, _ = call(capsys, "map", "build", "--scene", run_dir / "scenes/bench-empty.json",
                 "--gmm", run_dir / "gmm/bench-empty.json", "--fx", run_dir / "models/fx_loc.json",
                 "--pd", run_dir / "models/pd.json", "--min-per-room", 2, "--out", tmp_path / "m.json")
    assert rc == EXIT_OK and json.loads((tmp_path / "m.json").read_text())["version"] == 1


def test_adapt_passage(capsys, run_dir):
    rc, cap = call(capsys, "adapt", "passage", "--config", "D", "--data", run_dir / "data/real_collection.jsonl",
                   "--pd", run_dir / "models/pd.json", "--epochs", 1)
    assert rc == EXIT_OK and "accuracy" in json.loads(cap.out)
    rc, cap = call(capsys, "adapt", "passage", "--config", "C", "--data", run_dir / "data/real_collection.jsonl")
    assert rc == EXIT_STAGE


def test_bench_run(capsys, run_dir, tmp_path):
    suite = {"models": str(run_dir / "models"), "seed": 1, "nav": {"max_seconds": 10.0},
             "scenes": [{"scene": str(run_dir / "scenes/bench-empty.json"), "gmm": str(run_dir / "gmm/bench-empty.json"),
                         "map": str(run_dir / "maps/bench-empty.json"), "episodes": 1, "seed": 2}]}
    (tmp_path / "suite.json").write_text(json.dumps(suite))
    rc, _ = call(capsys, "bench", "run", "--suite", tmp_path / "suite.json", "--out", tmp_path / "bench")
    assert rc == EXIT_OK
    for f in ("metrics.csv", "per-episode.csv", "report.md"):
        assert (tmp_path / "bench" / f).exists()


def test_pipeline_verb_skips_cached(capsys, run_dir):
    rc, cap = call(capsys, "pipeline", "all", "--config", TINY, "--out", run_dir)
    assert rc == EXIT_OK
    assert set(json.loads(cap.out).values()) == {"skipped"}
