"""Shortest navigable paths on the topological map."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple

from .topo_map import MapView


@dataclass(frozen=True)
class Plan:
    nodes: tuple
    weight: float
    next_angle: float | None

    @property
    def found(self) -> bool:
        return len(self.nodes) > 0


NO_PATH = Plan((), math.inf, None)


class Waypoint(NamedTuple):
    node: int
    angle: float | None
    arrived: bool


def shortest_path(view: MapView, src: int, dst: int) -> Plan:
    """Dijkstra over directed edges.

    Labels are ordered by (total weight, hop count, node sequence), so equal
    weight paths resolve to fewer hops and then the lexicographically smaller
    sequence. Returns ``NO_PATH`` when ``dst`` is unreachable.
    """
    if src not in view or dst not in view:
        raise KeyError(f"unknown node id {src if src not in view else dst}")
    if src == dst:
        return Plan((src,), 0.0, None)
    heap = [(0.0, 0, (src,))]
    settled = set()
    while heap:
        w, hops, path = heapq.heappop(heap)
        u = path[-1]
        if u in settled:
            continue
        settled.add(u)
        if u == dst:
            first = view.edge(path[0], path[1])
            return Plan(path, w, first[2])
        for v, ew, _ in view.out_edges(u):
            if v not in settled:
                heapq.heappush(heap, (w + ew, hops + 1, path + (v,)))
    return NO_PATH


def next_waypoint(view: MapView, current: int, goal: int) -> Waypoint | None:
    """Local goal node and the bearing of the edge leading to it; ``None`` if no path."""
    if current == goal:
        return Waypoint(goal, None, True)
    plan = shortest_path(view, current, goal)
    if not plan.found:
        return None
    return Waypoint(plan.nodes[1], plan.next_angle, False)
