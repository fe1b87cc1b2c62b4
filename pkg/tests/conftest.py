"""Shared fixtures: hand-built scenes and small, quickly trained models."""

from __future__ import annotations

import numpy as np
import pytest

from toponav.perception import (RayFeatureExtractor, build_passage_dataset, build_room_dataset,
                                train_passage_detector, train_room_classifier)
from toponav.policy import LocalPolicy
from toponav.segmentation import segment_scene
from toponav.sim import NO_ROOM, Scene, generate_scene


def box_scene(width: int = 40, height: int = 40, wall_col: int | None = None, door=None, name: str = "box",
              resolution: float = 0.1) -> Scene:
    """Rectangular room bounded by walls; optional vertical interior wall with a door gap ``(row0, row1)``."""
    occ = np.zeros((height, width), dtype=bool)
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True
    room = np.zeros((height, width), dtype=np.int64)
    if wall_col is not None:
        occ[:, wall_col] = True
        if door is not None:
            occ[door[0]:door[1], wall_col] = False
        room[:, wall_col + 1:] = 1
    room[occ] = NO_ROOM
    tex = np.linspace(0.1, 0.9, width)[None, :].repeat(height, axis=0)
    return Scene(occ, tex, room, resolution, name)


@pytest.fixture(scope="session")
def two_room_scene() -> Scene:
    return generate_scene(2, (40, 40), 0.0, 3, name="two-room")


@pytest.fixture(scope="session")
def four_room_scene() -> Scene:
    return generate_scene(4, (64, 64), 0.05, 1, name="four-room")


@pytest.fixture(scope="session")
def trained_models(two_room_scene):
    """Quickly trained (not accurate) localisation trunk, passage detector and policy."""
    gmm, _ = segment_scene(two_room_scene, 60, 0)
    train, test = build_room_dataset([two_room_scene], [gmm], 12, seed=0)
    fx0 = RayFeatureExtractor(window=5, hidden=16, random_state=0).fit()
    fx, *_ = train_room_classifier(train, test, epochs=2, seed=0, lr=1e-3, extractor=fx0)
    passage = build_passage_dataset([two_room_scene], [gmm], 4, 6, seed=1)
    pd, _ = train_passage_detector(passage, passage[:10], epochs=2, seed=0, lr=1e-3)
    d_u = fx.n_output + pd.extractor_.n_output
    policy = LocalPolicy(hidden_size=8, head_hidden=8, fm_hidden=8, random_state=0).init(d_u)
    return {"scene": two_room_scene, "gmm": gmm, "fx": fx, "pd": pd, "policy": policy}


def rel_err(a, b) -> float:
    """Norm-relative error between two gradient tensors."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def numeric_grad(f, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to array ``p`` (modified in place)."""
    g = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = p[i]
        p[i] = old + h
        fp = f()
        p[i] = old - h
        fm = f()
        p[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
