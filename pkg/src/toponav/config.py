"""Versioned JSON pipeline configuration with schema checks and named default profiles.

Two default profiles exist: ``desk`` (small, fast settings used by the
shipped configs) and ``paper`` (the published hyperparameters where they
translate to this substrate). Values given explicitly always win.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1
PROFILES = ("desk", "paper")
_UNSET = object()


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class F:
    """One schema field: type, desk default, optional paper default and range."""

    kind: type
    default: Any
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False
    paper: Any = _UNSET
    choices: tuple | None = None


SCENE_FIELDS = {
    "name": F(str, None),
    "n_rooms": F(int, 4, lo=1, hi=16),
    "size": F(list, [64, 64]),
    "clutter": F(float, 0.0, lo=0.0, hi=0.5),
    "seed": F(int, 0, lo=0),
    "file": F(str, None),
}

SECTIONS = {
    "segmentation": {
        "n_train_points": F(int, 100, lo=10),
    },
    "perception": {
        "window": F(int, 9, lo=1, hi=63),
        "hidden": F(int, 64, lo=1),
        "positions_per_scene": F(int, 120, lo=3),
        "room_epochs": F(int, 150, lo=0),
        "room_lr": F(float, 1e-3, lo=0.0, lo_open=True, hi=1.0, paper=1e-4),
        "room_batch_size": F(int, 20, lo=1),
        "smoothing": F(float, 0.1, lo=0.0, hi=0.99),
        "shift_augment": F(int, 6, lo=0, hi=32),
        "sources_per_room": F(int, 10, lo=1),
        "targets_per_source": F(int, 10, lo=1),
        "passage_epochs": F(int, 20, lo=0),
        "passage_lr": F(float, 1e-3, lo=0.0, lo_open=True, hi=1.0, paper=1e-4),
        "passage_batch_size": F(int, 32, lo=1),
    },
    "expert": {
        "trajectories_per_scene": F(int, 40, lo=1),
    },
    "policy": {
        "hidden_size": F(int, 64, lo=1, paper=500),
        "head_hidden": F(int, 32, lo=1),
        "fm_hidden": F(int, 64, lo=1),
        "alpha": F(float, 10.0, lo=0.0),
        "lam": F(float, 0.1, lo=0.0),
        "lr": F(float, 1e-3, lo=0.0, lo_open=True, hi=1.0, paper=1e-4),
        "pretrain_epochs": F(int, 10, lo=0, paper=100),
        "joint_epochs": F(int, 80, lo=0, paper=900),
        "batch_size": F(int, 50, lo=1),
        "test_fraction": F(float, 0.2, lo=0.0, hi=0.9),
    },
    "map": {
        "min_per_room": F(int, 3, lo=1),
        "spacing_min": F(float, 0.8, lo=0.0),
        "connect_radius": F(float, 2.5, lo=0.0, lo_open=True),
        "density": F(float, 0.35, lo=0.0),
        "sparse_keep": F(float, 0.5, lo=0.0, lo_open=True, hi=1.0),
        "sparse_scene": F(str, None),
    },
    "nav": {
        "episodes_per_scene": F(int, 20, lo=1, paper=25),
        "segment_seconds": F(float, 5.0, lo=0.0, lo_open=True),
        "segments_per_waypoint": F(int, 12, lo=1),
        "sweep_increment_deg": F(float, 20.0, lo=0.0, lo_open=True, hi=180.0),
        "max_seconds": F(float, 300.0, lo=0.0, lo_open=True),
        "goal_threshold": F(float, 0.95, lo=0.0, lo_open=True, hi=1.0),
        "success_radius": F(float, 1.5, lo=0.0, lo_open=True),
        "reorient_each_segment": F(bool, False),
    },
    "adaptation": {
        "n_sim": F(int, 1500, lo=1),
        "n_real": F(int, 1500, lo=1),
        "epochs": F(int, 40, lo=1),
        "batch_size": F(int, 50, lo=1),
        "resample_every": F(int, 20, lo=1),
        "pool_size": F(int, 500, lo=1),
        "disc_steps": F(int, 1, lo=1),
        "lr": F(float, 1e-4, lo=0.0, lo_open=True, hi=1.0),
        "disc_lr": F(float, 1e-3, lo=0.0, lo_open=True, hi=1.0),
        "n_positions": F(int, 20, lo=2),
        "test_fraction": F(float, 0.3, lo=0.0, lo_open=True, hi=0.9),
        "finetune_epochs": F(int, 10, lo=0),
        "finetune_batch_size": F(int, 5, lo=1),
        "finetune_lr": F(float, 1e-3, lo=0.0, lo_open=True, hi=1.0),
        "probe_queries": F(int, 200, lo=1),
    },
    "domain": {
        "name": F(str, "REAL"),
        "noise_sigma": F(float, 0.05, lo=0.0),
        "gain_amplitude": F(float, 0.3, lo=0.0, hi=0.99),
        "gain_wavelength": F(float, 3.0, lo=0.0, lo_open=True),
        "gamma": F(float, 1.5, lo=0.0, lo_open=True),
        "dropout_p": F(float, 0.02, lo=0.0, hi=1.0),
    },
}

TOP_LEVEL = {"version", "profile", "seed", "scenes"} | set(SECTIONS)


def _check_value(path: str, f: F, value):
    if value is None:
        return None
    if f.kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if f.kind is int and isinstance(value, float) and value.is_integer():
        value = int(value)
    if not isinstance(value, f.kind) or (f.kind in (int, float) and isinstance(value, bool)):
        raise ConfigError(path, f"expected {f.kind.__name__}, got {type(value).__name__}")
    if f.kind is float and not math.isfinite(value):
        raise ConfigError(path, "must be finite")
    if f.lo is not None and (value < f.lo or (f.lo_open and value == f.lo)):
        raise ConfigError(path, f"must be {'>' if f.lo_open else '>='} {f.lo}, got {value}")
    if f.hi is not None and value > f.hi:
        raise ConfigError(path, f"must be <= {f.hi}, got {value}")
    if f.choices is not None and value not in f.choices:
        raise ConfigError(path, f"must be one of {f.choices}")
    return value


def _fill(path: str, schema: dict, given: dict, profile: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(path, "expected an object")
    for key in given:
        if key not in schema:
            raise ConfigError(f"{path}.{key}", "unknown key")
    out = {}
    for key, f in schema.items():
        if key in given:
            out[key] = _check_value(f"{path}.{key}", f, given[key])
        elif profile == "paper" and f.paper is not _UNSET:
            out[key] = copy.deepcopy(f.paper)
        else:
            out[key] = copy.deepcopy(f.default)
    return out


def _scene(path: str, given: dict, base: Path | None) -> dict:
    s = _fill(path, SCENE_FIELDS, given, "desk")
    if not s["name"]:
        raise ConfigError(f"{path}.name", "required")
    size = s["size"]
    if len(size) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) and 8 <= v <= 1024 for v in size):
        raise ConfigError(f"{path}.size", "expected two integers in [8, 1024]")
    if s["file"] is not None:
        p = Path(s["file"])
        if not p.is_absolute() and base is not None:
            p = base / p
        if not p.exists():
            raise ConfigError(f"{path}.file", f"dangling path {s['file']!r}")
        s["file"] = str(p.resolve())
    return s


def _scenes(given, base):
    if not isinstance(given, dict):
        raise ConfigError("scenes", "expected an object with train, bench and real")
    for key in given:
        if key not in ("train", "bench", "real"):
            raise ConfigError(f"scenes.{key}", "unknown key")
    out = {}
    for key in ("train", "bench"):
        items = given.get(key)
        if not isinstance(items, list) or not items:
            raise ConfigError(f"scenes.{key}", "expected a non-empty list of scene specs")
        out[key] = [_scene(f"scenes.{key}[{i}]", s, base) for i, s in enumerate(items)]
    if "real" not in given:
        raise ConfigError("scenes.real", "required")
    out["real"] = _scene("scenes.real", given["real"], base)
    names = [s["name"] for s in out["train"] + out["bench"]] + [out["real"]["name"]]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError("scenes", f"duplicate scene names {dupes}")
    return out


class PipelineConfig:
    """A fully resolved configuration; sections are plain dicts."""

    def __init__(self, data: dict):
        self.data = data

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def digest(self, *sections) -> str:
        """Content hash of the named sections (all of them when none given)."""
        keys = sections or tuple(sorted(self.data))
        blob = json.dumps({k: self.data[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def scene_spec(self, name: str) -> dict:
        for s in self.data["scenes"]["train"] + self.data["scenes"]["bench"] + [self.data["scenes"]["real"]]:
            if s["name"] == name:
                return s
        raise KeyError(name)


def validate_config(source, base: Path | None = None) -> PipelineConfig:
    """Schema-check ``source`` (path, JSON text or dict) and fill every default."""
    if isinstance(source, (str, Path)) and not str(source).lstrip().startswith("{"):
        path = Path(source)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError("<file>", f"config file {str(path)!r} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        base = path.parent if base is None else base
    elif isinstance(source, str):
        try:
            raw = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError("<text>", f"invalid JSON: {exc}") from None
    else:
        raw = copy.deepcopy(source)
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a JSON object")
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(key, "unknown key")
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("version", f"unsupported schema version {version!r}")
    profile = raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError("profile", f"must be one of {PROFILES}")
    seed = _check_value("seed", F(int, 0, lo=0), raw.get("seed", 0))
    if "scenes" not in raw:
        raise ConfigError("scenes", "required")
    data = {"version": SCHEMA_VERSION, "profile": profile, "seed": seed, "scenes": _scenes(raw["scenes"], base)}
    for name, schema in SECTIONS.items():
        data[name] = _fill(name, schema, raw.get(name, {}), profile)
    sparse = data["map"]["sparse_scene"]
    bench_names = [s["name"] for s in data["scenes"]["bench"]]
    if sparse is not None and sparse not in bench_names:
        raise ConfigError("map.sparse_scene", f"{sparse!r} is not a bench scene")
    if data["adaptation"]["n_positions"] * 18 < 4:
        raise ConfigError("adaptation.n_positions", "too few positions")
    return PipelineConfig(data)


def nav_config(cfg: PipelineConfig):
    from .runtime import NavConfig

    n = cfg["nav"]
    return NavConfig(segment_seconds=n["segment_seconds"], segments_per_waypoint=n["segments_per_waypoint"],
                     sweep_increment=math.radians(n["sweep_increment_deg"]), max_seconds=n["max_seconds"],
                     goal_threshold=n["goal_threshold"], success_radius=n["success_radius"],
                     reorient_each_segment=n["reorient_each_segment"])


def domain_params(cfg: PipelineConfig):
    from .sim import DomainParams

    return DomainParams(**cfg["domain"])
