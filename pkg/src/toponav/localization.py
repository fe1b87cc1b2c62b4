"""Discrete localisation by descriptor retrieval against the map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .perception import Descriptor, RayFeatureExtractor, extract_descriptor
from .sim import RayObservation
from .topo_map import MapView

DEFAULT_GOAL_THRESHOLD = 0.95


@dataclass(frozen=True)
class LocalizationResult:
    node: int
    score: float
    runner_up: int | None
    runner_up_score: float

    @property
    def margin(self) -> float:
        return self.score - self.runner_up_score


def _values(desc) -> np.ndarray:
    return np.asarray(desc.values if isinstance(desc, Descriptor) else desc, dtype=float)


def node_scores(view: MapView, query) -> np.ndarray:
    """Per-node similarity: best dot product over the node's heading descriptors."""
    q = _values(query)
    return np.max(view.descriptors @ q, axis=1)


def localize(view: MapView, query) -> LocalizationResult:
    """Most similar node; ties go to the lowest node id."""
    if len(view) == 0:
        raise ValueError("cannot localise against an empty map")
    scores = node_scores(view, query)
    best = int(np.argmax(scores))
    ids = view.node_ids
    if len(ids) == 1:
        return LocalizationResult(ids[0], float(scores[0]), None, -1.0)
    rest = scores.copy()
    rest[best] = -np.inf
    second = int(np.argmax(rest))
    return LocalizationResult(ids[best], float(scores[best]), ids[second], float(scores[second]))


def localize_goal(view: MapView, goal_obs: RayObservation, fx: RayFeatureExtractor) -> int:
    return localize(view, extract_descriptor(fx, goal_obs)).node


def goal_reached_check(current, goal, threshold: float = DEFAULT_GOAL_THRESHOLD) -> bool:
    return float(_values(current) @ _values(goal)) >= threshold
