import json
import shutil
from pathlib import Path

import pytest

from toponav.config import validate_config
from toponav.pipeline import STAGE_NAMES, StageError, load_models, run_pipeline

TINY = Path(__file__).parent.parent / "configs" / "tiny.json"


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    status = run_pipeline(validate_config(TINY), out)
    return out, status


def test_all_stages_ran_and_outputs_exist(tiny_run):
    out, status = tiny_run
    assert list(status) == STAGE_NAMES and set(status.values()) == {"ran"}
    for rel in ["metrics.csv", "config.resolved.json", "models/fx_loc.json", "models/pd.json", "models/policy.json",
                "models/fx_t.json", "maps/bench-empty.json", "bench/sim/per-episode.csv", "adapt/finetune.csv",
                "logs/policy.log"]:
        assert (out / rel).exists(), rel
    suites = {line.split(",")[0] for line in (out / "metrics.csv").read_text().splitlines()[1:]}
    assert suites == {"sim", "map-dense", "map-sparse", "real"}


def test_rerun_skips_everything(tiny_run):
    out, _ = tiny_run
    status = run_pipeline(validate_config(TINY), out)
    assert set(status.values()) == {"skipped"}


def test_deleted_artifact_reruns_only_its_stage(tiny_run):
    out, _ = tiny_run
    before = (out / "metrics.csv").read_bytes()
    (out / "models/policy.json").unlink()
    status = run_pipeline(validate_config(TINY), out)
    assert status["policy"] == "ran"
    assert [s for s, v in status.items() if v == "ran"] == ["policy"]
    assert (out / "metrics.csv").read_bytes() == before


def test_config_change_invalidates_downstream(tiny_run, tmp_path):
    out, _ = tiny_run
    work = tmp_path / "w"
    shutil.copytree(out, work)
    d = json.loads(TINY.read_text())
    d["nav"]["max_seconds"] = 30.0
    status = run_pipeline(validate_config(d, base=TINY.parent), work)
    ran = {s for s, v in status.items() if v == "ran"}
    # summary reruns only if a bench output actually changed
    assert {"bench_sim", "bench_sparse", "bench_real"} <= ran
    assert not ran & {"scenes", "segment", "perception", "expert", "policy"}


def test_only_restricts_to_upstream(tmp_path):
    status = run_pipeline(validate_config(TINY), tmp_path, only=["segment"])
    assert set(status) == {"scenes", "segment"}


def test_stage_error_names_stage(tmp_path):
    bad = tmp_path / "broken-scene.json"
    bad.write_text("{not json")
    d = json.loads(TINY.read_text())
    d["scenes"]["real"] = {"name": "real", "file": str(bad)}
    with pytest.raises(StageError) as err:
        run_pipeline(validate_config(d), tmp_path / "out")
    assert err.value.stage == "scenes"
    assert Path(err.value.log_path).exists()


def test_load_models(tiny_run, tmp_path):
    out, _ = tiny_run
    models = load_models(out / "models")
    assert models.policy.d_u_ == models.fx_loc.n_output + models.fx_pass.n_output
    with pytest.raises(FileNotFoundError, match="policy.json"):
        shutil.copy(out / "models/pd.json", tmp_path / "pd.json")
        shutil.copy(out / "models/fx_loc.json", tmp_path / "fx_loc.json")
        load_models(tmp_path)
