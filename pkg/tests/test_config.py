import json

import pytest

from toponav.config import SECTIONS, ConfigError, validate_config

MINIMAL = {"scenes": {"train": [{"name": "t"}], "bench": [{"name": "b"}], "real": {"name": "r"}}}


def test_defaults_filled():
    cfg = validate_config(MINIMAL)
    for section, schema in SECTIONS.items():
        assert set(cfg[section]) == set(schema)
    assert cfg["policy"]["alpha"] == 10.0 and cfg["policy"]["lam"] == 0.1
    assert cfg["scenes"]["train"][0]["n_rooms"] == 4


def test_paper_profile():
    cfg = validate_config({**MINIMAL, "profile": "paper"})
    assert cfg["policy"]["hidden_size"] == 500 and cfg["policy"]["lr"] == 1e-4


def test_explicit_value_beats_profile():
    cfg = validate_config({**MINIMAL, "profile": "paper", "policy": {"hidden_size": 12}})
    assert cfg["policy"]["hidden_size"] == 12


def test_negative_lr_names_field():
    with pytest.raises(ConfigError) as err:
        validate_config({**MINIMAL, "policy": {"lr": -1e-3}})
    assert err.value.path == "policy.lr"


@pytest.mark.parametrize("bad, path", [
    ({"nope": 1}, "nope"),
    ({"policy": {"bogus": 1}}, "policy.bogus"),
    ({"version": 2}, "version"),
    ({"profile": "huge"}, "profile"),
    ({"seed": -1}, "seed"),
    ({"policy": {"hidden_size": "big"}}, "policy.hidden_size"),
    ({"map": {"sparse_scene": "missing"}}, "map.sparse_scene"),
])
def test_rejections(bad, path):
    with pytest.raises(ConfigError) as err:
        validate_config({**MINIMAL, **bad})
    assert err.value.path == path


def test_dangling_scene_file(tmp_path):
    d = json.loads(json.dumps(MINIMAL))
    d["scenes"]["real"]["file"] = "nowhere.json"
    with pytest.raises(ConfigError, match="dangling"):
        validate_config(d, base=tmp_path)


def test_duplicate_scene_names():
    d = json.loads(json.dumps(MINIMAL))
    d["scenes"]["bench"][0]["name"] = "t"
    with pytest.raises(ConfigError, match="duplicate"):
        validate_config(d)


def test_idempotent(tmp_path):
    cfg = validate_config(MINIMAL)
    again = validate_config(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict() and again.digest() == cfg.digest()
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert validate_config(p).to_dict() == cfg.to_dict()


def test_section_digest_is_local():
    a = validate_config(MINIMAL)
    b = validate_config({**MINIMAL, "nav": {"episodes_per_scene": 3}})
    assert a.digest("policy") == b.digest("policy")
    assert a.digest("nav") != b.digest("nav")


def test_shipped_configs_validate():
    from pathlib import Path
    for p in sorted((Path(__file__).parent.parent / "configs").glob("*.json")):
        validate_config(p)


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        validate_config("/no/such/config.json")
