"""Directed topological map: nodes are descriptor bundles, edges carry -log passage probability."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .perception import (HEADINGS, P_CLAMP, PassageDetector, RayFeatureExtractor, heading_angles,
                         observe_headings, passage_probabilities)
from .segmentation import GmmModel, assign_label, assign_labels
from .sim import SIM, DomainParams, Scene, sample_free_position, wrap_angle

log = logging.getLogger(__name__)

MAP_FORMAT_VERSION = 1
W_MIN = -math.log(1.0 - P_CLAMP)
W_MAX = -math.log(P_CLAMP)


class DisconnectedMapError(ValueError):
    def __init__(self, components):
        self.components = components
        super().__init__(f"topological map is disconnected: {len(components)} components "
                         f"{[sorted(c) for c in components]}")


@dataclass
class TopoNode:
    id: int
    position: np.ndarray      # evaluation/visualisation only
    descriptors: np.ndarray   # (18, D), headings 0, 20, ..., 340 degrees

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        if self.descriptors.shape[0] != HEADINGS:
            raise ValueError(f"node {self.id} needs {HEADINGS} descriptors, got {self.descriptors.shape[0]}")


@dataclass(frozen=True)
class TopoEdge:
    src: int
    dst: int
    weight: float
    abs_angle: float

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError("self-loops are not allowed")
        if not (W_MIN - 1e-12 <= self.weight <= W_MAX + 1e-12):
            raise ValueError(f"edge weight {self.weight} outside [{W_MIN}, {W_MAX}]")


@dataclass
class TopoMap:
    nodes: list
    edges: dict = field(default_factory=dict)   # src -> list[TopoEdge] sorted by dst
    scene: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = sorted(self.nodes, key=lambda n: n.id)
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        known = set(ids)
        for src, out in self.edges.items():
            for e in out:
                if e.src != src or e.src not in known or e.dst not in known:
                    raise ValueError(f"edge {e.src}->{e.dst} references unknown nodes")
        self.edges = {src: sorted(out, key=lambda e: e.dst) for src, out in sorted(self.edges.items())}

    @property
    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def node(self, node_id: int) -> TopoNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def edge_list(self) -> list[TopoEdge]:
        return [e for out in self.edges.values() for e in out]

    def edge(self, src: int, dst: int) -> TopoEdge | None:
        for e in self.edges.get(src, []):
            if e.dst == dst:
                return e
        return None

    def weak_components(self) -> list[set]:
        parent = {i: i for i in self.node_ids}

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for e in self.edge_list():
            a, b = find(e.src), find(e.dst)
            if a != b:
                parent[max(a, b)] = min(a, b)
        comps: dict[int, set] = {}
        for i in self.node_ids:
            comps.setdefault(find(i), set()).add(i)
        return sorted(comps.values(), key=min)

    def is_connected(self) -> bool:
        return len(self.weak_components()) <= 1

    def view(self) -> "MapView":
        return MapView(self)

    # persistence

    def to_dict(self) -> dict:
        return {
            "version": MAP_FORMAT_VERSION,
            "scene": self.scene,
            "metadata": self.metadata,
            "nodes": [{"id": n.id, "position": n.position.tolist(), "descriptors": n.descriptors.tolist()}
                      for n in self.nodes],
            "edges": [{"src": e.src, "dst": e.dst, "weight": e.weight, "abs_angle": e.abs_angle}
                      for e in self.edge_list()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TopoMap":
        if d.get("version") != MAP_FORMAT_VERSION:
            raise ValueError(f"unsupported map format version {d.get('version')!r}")
        nodes = [TopoNode(n["id"], n["position"], n["descriptors"]) for n in d["nodes"]]
        edges: dict[int, list] = {}
        for e in d["edges"]:
            edges.setdefault(e["src"], []).append(TopoEdge(e["src"], e["dst"], e["weight"], e["abs_angle"]))
        return cls(nodes, edges, d.get("scene", ""), d.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TopoMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


class MapView:
    """Read-only, position-free view of a map for the decision modules.

    Only node ids, heading descriptors and directed edges are reachable from
    here; node positions are not copied.
    """

    __slots__ = ("_ids", "_index", "_descriptors", "_edges")

    def __init__(self, topo: TopoMap):
        self._ids = tuple(topo.node_ids)
        self._index = {i: k for k, i in enumerate(self._ids)}
        desc = np.stack([n.descriptors for n in topo.nodes]) if topo.nodes else np.zeros((0, HEADINGS, 0))
        desc.setflags(write=False)
        self._descriptors = desc
        self._edges = {src: tuple((e.dst, e.weight, e.abs_angle) for e in out) for src, out in topo.edges.items()}

    @property
    def node_ids(self) -> tuple:
        return self._ids

    @property
    def descriptors(self) -> np.ndarray:
        """``(n_nodes, 18, D)`` in node-id order."""
        return self._descriptors

    def __len__(self):
        return len(self._ids)

    def __contains__(self, node_id):
        return node_id in self._index

    def out_edges(self, node_id: int) -> tuple:
        """``(dst, weight, abs_angle)`` triples sorted by dst."""
        return self._edges.get(node_id, ())

    def edge(self, src: int, dst: int):
        for d, w, a in self.out_edges(src):
            if d == dst:
                return d, w, a
        return None


# construction


def sample_node_positions(scene: Scene, gmm: GmmModel, min_per_room: int = 3, seed: int = 0,
                          spacing_min: float = 0.8, min_clearance: float = 0.2,
                          density: float = 0.0, max_attempts: int = 20_000) -> np.ndarray:
    """Rejection-sample node positions with a per-cluster minimum and spacing.

    Each GMM cluster gets ``max(min_per_room, ceil(density * area))`` nodes,
    where area is the free area assigned to that cluster.
    """
    if min_per_room < 1:
        raise ValueError("min_per_room must be >= 1")
    rng = np.random.default_rng(seed)
    rows, cols = np.nonzero(~scene.occ)
    centers = np.column_stack([cols + 0.5, rows + 0.5]) * scene.resolution
    cell_area = scene.resolution ** 2
    areas = np.bincount(assign_labels(gmm, centers), minlength=gmm.n_components) * cell_area
    chosen: list[np.ndarray] = []
    for cluster in range(gmm.n_components):
        target = max(min_per_room, int(math.ceil(density * areas[cluster])))
        have = 0
        attempts = 0
        while have < target:
            attempts += 1
            if attempts > max_attempts:
                raise ValueError(f"cluster {cluster} of {scene.name}: only {have}/{target} nodes "
                                 f"with spacing {spacing_min} m")
            try:
                p = sample_free_position(scene, rng, min_clearance, max_attempts=1000)
            except ValueError:
                continue
            if assign_label(gmm, p) != cluster:
                continue
            if chosen and np.min(np.linalg.norm(np.array(chosen) - p, axis=1)) < spacing_min:
                continue
            chosen.append(p)
            have += 1
    return np.array(chosen)


def closest_heading(bearing: float, n: int = HEADINGS) -> int:
    """Index of the stored heading with the smallest angular distance to ``bearing`` (lowest on ties)."""
    diffs = np.abs(wrap_angle(heading_angles(n) - bearing))
    return int(np.argmin(diffs))


def _edges_from(positions, pass_prob, pairs):
    edges: dict[int, list] = {}
    for i, j in pairs:
        d = positions[j] - positions[i]
        bearing = math.atan2(d[1], d[0])
        p = float(pass_prob[i][closest_heading(bearing)])
        edges.setdefault(i, []).append(TopoEdge(i, j, -math.log(p), bearing))
    return edges


def build_map(scene: Scene, positions, fx: RayFeatureExtractor, pd: PassageDetector,
              domain: DomainParams = SIM, connect_radius: float = 2.5, seed: int = 0,
              validate: bool = True, ids=None) -> TopoMap:
    """Render 18 headings per node, embed them and connect nodes closer than ``connect_radius``.

    Raises
    ------
    DisconnectedMapError
        If ``validate`` and the resulting graph is not weakly connected.
    """
    positions = np.asarray(positions, dtype=float)
    ids = list(range(len(positions))) if ids is None else list(ids)
    rng = np.random.default_rng(seed)
    nodes, pass_prob = [], {}
    for nid, p in zip(ids, positions):
        obs = observe_headings(scene, p, domain, rng)
        nodes.append(TopoNode(nid, p, fx.transform(obs)))
        pass_prob[nid] = passage_probabilities(pd, obs)
    pos = dict(zip(ids, positions))
    pairs = [(i, j) for i in ids for j in ids
             if i != j and np.linalg.norm(pos[i] - pos[j]) < connect_radius]
    topo = TopoMap(nodes, _edges_from(pos, pass_prob, pairs), scene.name,
                   {"seed": seed, "domain": domain.name, "connect_radius": connect_radius,
                    "fx": fx.digest(), "pd": pd.digest()})
    if validate:
        comps = topo.weak_components()
        if len(comps) > 1:
            raise DisconnectedMapError(comps)
    return topo


def build_map_from_dataset(collected, adjacency, pd: PassageDetector, fx: RayFeatureExtractor,
                           scene_name: str = "", validate: bool = False) -> TopoMap:
    """Map from a per-position 18-heading collection and an explicit adjacency.

    ``collected`` maps position id -> ``(position, observations)`` where
    ``observations`` lists the 18 heading observations in order 0..340 deg.
    Each undirected adjacency pair yields both directed edges.
    """
    nodes, pass_prob, pos = [], {}, {}
    for pid in sorted(collected):
        p, obs = collected[pid]
        if len(obs) != HEADINGS or any(o is None for o in obs):
            raise ValueError(f"position {pid} is missing heading observations")
        nodes.append(TopoNode(pid, p, fx.transform(obs)))
        pass_prob[pid] = passage_probabilities(pd, obs)
        pos[pid] = np.asarray(p, dtype=float)
    pairs = []
    for a, b in adjacency:
        if a not in pos or b not in pos:
            raise ValueError(f"adjacency ({a}, {b}) references an unknown position")
        pairs += [(a, b), (b, a)]
    topo = TopoMap(nodes, _edges_from(pos, pass_prob, sorted(set(pairs))), scene_name,
                   {"domain": "dataset", "fx": fx.digest(), "pd": pd.digest()})
    if validate and not topo.is_connected():
        raise DisconnectedMapError(topo.weak_components())
    return topo


def radius_adjacency(positions: dict, radius: float) -> list[tuple[int, int]]:
    ids = sorted(positions)
    return [(a, b) for k, a in enumerate(ids) for b in ids[k + 1:]
            if np.linalg.norm(np.asarray(positions[a]) - np.asarray(positions[b])) < radius]


def sparsify_map(topo: TopoMap, keep_fraction: float, seed: int = 0) -> TopoMap:
    """Drop a random subset of nodes (and their edges); the result may be disconnected."""
    rng = np.random.default_rng(seed)
    n_keep = max(2, int(round(keep_fraction * len(topo.nodes))))
    keep = set(int(i) for i in rng.choice(topo.node_ids, size=n_keep, replace=False))
    nodes = [n for n in topo.nodes if n.id in keep]
    edges = {src: [e for e in out if e.dst in keep] for src, out in topo.edges.items() if src in keep}
    return TopoMap(nodes, {k: v for k, v in edges.items() if v}, topo.scene,
                   {**topo.metadata, "sparsified": keep_fraction})
