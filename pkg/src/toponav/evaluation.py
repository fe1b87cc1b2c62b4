"""Episode sampling, navigation metrics and benchmark reports."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .runtime import EpisodeResult, NavConfig, NavModels, run_episode
from .segmentation import GmmModel, assign_label
from .sim import AGENT_RADIUS, SIM, DomainParams, Pose, Scene, clearance_many, observe, sample_free_position
from .topo_map import TopoMap


@dataclass(frozen=True)
class EpisodeSpec:
    scene: str
    index: int
    start: Pose
    goal: tuple
    goal_heading: float
    shortest: float

    def to_dict(self) -> dict:
        return {"scene": self.scene, "index": self.index, "start": [self.start.x, self.start.y, self.start.theta], "goal": list(self.goal),
                "goal_heading": self.goal_heading, "shortest": self.shortest}

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSpec":
        return cls(d["scene"], d["index"], Pose(*d["start"]), tuple(d["goal"]), d["goal_heading"], d["shortest"])


@dataclass
class MetricsReport:
    sr: float
    spl: float
    rc: float
    aadc: float
    ad: float
    n_episodes: int
    per_scene: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"SR": self.sr, "SPL": self.spl, "RC": self.rc, "AADC": self.aadc, "AD": self.ad,
                "episodes": self.n_episodes}


# ground-truth shortest paths


class GridDistances:
    """Shortest path lengths over free cells that fit the agent, 8-connected.

    Diagonal moves need both adjacent orthogonal cells free so the path never
    cuts an obstacle corner.
    """

    def __init__(self, scene: Scene, radius: float = AGENT_RADIUS):
        self.scene = scene
        rows, cols = np.nonzero(~scene.occ)
        centers = np.column_stack([cols + 0.5, rows + 0.5]) * scene.resolution
        ok = clearance_many(scene, centers) >= radius - 1e-9 if len(rows) else np.zeros(0, bool)
        self.free = np.zeros(scene.occ.shape, dtype=bool)
        self.free[rows[ok], cols[ok]] = True
        self.index = -np.ones(scene.occ.shape, dtype=int)
        fr, fc = np.nonzero(self.free)
        self.index[fr, fc] = np.arange(len(fr))
        self.cells = np.column_stack([fr, fc])
        src, dst, w = [], [], []
        h, wd = scene.occ.shape
        for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
            r2, c2 = fr + dr, fc + dc
            inside = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < wd)
            r1, c1, r2, c2 = fr[inside], fc[inside], r2[inside], c2[inside]
            ok = self.free[r2, c2]
            if dr and dc:
                ok &= self.free[r1 + dr, c1] & self.free[r1, c1 + dc]
            src.append(self.index[r1[ok], c1[ok]])
            dst.append(self.index[r2[ok], c2[ok]])
            w.append(np.full(ok.sum(), math.hypot(dr, dc) * scene.resolution))
        n = len(fr)
        self.graph = coo_matrix((np.concatenate(w), (np.concatenate(src), np.concatenate(dst))), shape=(n, n)).tocsr()

    def _node(self, p) -> int:
        """Index of ``p``'s cell, or of the nearest feasible cell in its 3x3 neighbourhood."""
        r, c = self.scene.cell_of(*p)
        best, best_d = -1, math.inf
        for dr in (0, -1, 1):
            for dc in (0, -1, 1):
                rr, cc = r + dr, c + dc
                h, w = self.index.shape
                if not (0 <= rr < h and 0 <= cc < w) or self.index[rr, cc] < 0:
                    continue
                d = math.dist(p, self.scene.cell_center(rr, cc))
                if d < best_d:
                    best, best_d = int(self.index[rr, cc]), d
        if best < 0:
            raise ValueError(f"position {tuple(np.round(p, 3))} is not in agent-feasible free space")
        return best

    def from_point(self, p) -> np.ndarray:
        """Distances from ``p``'s cell to every feasible cell, as a grid (inf where unreachable)."""
        d = dijkstra(self.graph, directed=False, indices=self._node(p))
        out = np.full(self.scene.occ.shape, np.inf)
        out[self.cells[:, 0], self.cells[:, 1]] = d
        return out

    def distance(self, p, q) -> float:
        d = dijkstra(self.graph, directed=False, indices=self._node(p))
        return float(d[self._node(q)])


def grid_shortest_path(scene: Scene, p, q) -> float:
    return GridDistances(scene).distance(p, q)


# episodes


def sample_episodes(scene: Scene, gmm: GmmModel, n: int, seed: int = 0, min_separation: float = 2.5,
                    min_clearance: float = 0.3, max_attempts: int = 5000) -> list[EpisodeSpec]:
    """Start/goal pairs in different clusters, at least ``min_separation`` apart and reachable."""
    if gmm.n_components < 2:
        raise ValueError("episodes need a scene segmented into at least two clusters")
    rng = np.random.default_rng(seed)
    grid = GridDistances(scene)
    out = []
    for _ in range(max_attempts):
        if len(out) == n:
            break
        a = sample_free_position(scene, rng, min_clearance)
        b = sample_free_position(scene, rng, min_clearance)
        start_heading, goal_heading = rng.uniform(-math.pi, math.pi, size=2)
        if math.dist(a, b) < min_separation or assign_label(gmm, a) == assign_label(gmm, b):
            continue
        d = grid.distance(a, b)
        if not math.isfinite(d):
            continue
        out.append(EpisodeSpec(scene.name, len(out), Pose(a[0], a[1], start_heading), (float(b[0]), float(b[1])),
                               float(goal_heading), d))
    if len(out) < n:
        raise ValueError(f"only {len(out)} of {n} episodes could be sampled in {scene.name}")
    return out


# metrics


def compute_metrics(results) -> MetricsReport:
    """SR, SPL, RC, AADC and AD over ``results``, plus a per-scene breakdown."""
    results = list(results)
    if not results:
        raise ValueError("no episode results")
    report = _fold(results)
    scenes = sorted({r.scene for r in results})
    if len(scenes) > 1:
        report.per_scene = {s: _fold([r for r in results if r.scene == s]) for s in scenes}
    elif scenes:
        report.per_scene = {scenes[0]: _fold(results)}
    return report


def spl_term(r: EpisodeResult) -> float:
    if not r.success:
        return 0.0
    longest = max(r.shortest, r.navigated)
    return 1.0 if longest == 0 else r.shortest / longest


def _fold(results) -> MetricsReport:
    n = len(results)
    succ = [r for r in results if r.success]
    sr = len(succ) / n
    spl = sum(spl_term(r) for r in results) / n
    rc = sum(r.contact_seconds > 0 for r in succ) / len(succ) if succ else 0.0
    aadc = sum(r.contact_seconds for r in succ) / len(succ) if succ else 0.0
    ad = sum(r.duration for r in results) / n
    return MetricsReport(sr, spl, rc, aadc, ad, n)


# benchmark


@dataclass
class BenchScene:
    scene: Scene
    topo_map: TopoMap
    episodes: list


def _run_one(args):
    scene, topo_map, models, spec, cfg, seed, domain = args
    rng = np.random.default_rng([seed, spec.index, 7])
    goal_obs = observe(scene, Pose(spec.goal[0], spec.goal[1], spec.goal_heading), domain, rng)
    res = run_episode(scene, topo_map, models, spec.start, goal_obs, cfg, seed=int(rng.integers(2**31)),
                      goal_position=spec.goal, shortest=spec.shortest, domain=domain)
    res.episode = spec.index
    return res


def run_benchmark(bench_scenes, models: NavModels, cfg: NavConfig = NavConfig(), seed: int = 0, jobs: int = 1,
                  domain: DomainParams = SIM, out_dir=None) -> tuple[MetricsReport, list]:
    """Run every episode of every scene; optionally write CSVs and a markdown table."""
    tasks = []
    for bs in bench_scenes:
        if bs.topo_map is None:
            raise FileNotFoundError(f"missing map for scene {bs.scene.name}")
        for spec in bs.episodes:
            tasks.append((bs.scene, bs.topo_map, models, spec, cfg, seed, domain))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    report = compute_metrics(results)
    if out_dir is not None:
        write_report(out_dir, report, results)
    return report, results


METRIC_COLUMNS = ["scene", "SR", "SPL", "RC", "AADC", "AD", "episodes"]
EPISODE_COLUMNS = ["scene", "episode", "success", "reason", "shortest", "navigated", "contact_seconds",
                   "duration", "steps", "goal_node"]


def write_report(out_dir, report: MetricsReport, results) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, METRIC_COLUMNS)
        w.writeheader()
        for name, r in report.per_scene.items():
            w.writerow({"scene": name, **_rounded(r.row())})
        w.writerow({"scene": "ALL", **_rounded(report.row())})
    with open(out / "per-episode.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, EPISODE_COLUMNS)
        w.writeheader()
        for r in results:
            d = asdict(r)
            w.writerow({k: (round(d[k], 6) if isinstance(d[k], float) else d[k]) for k in EPISODE_COLUMNS})
    lines = ["| Scene | SR | SPL | RC | AADC (s) | AD (s) | Episodes |",
             "|---|---|---|---|---|---|---|"]
    for name, r in list(report.per_scene.items()) + [("**all**", report)]:
        lines.append(f"| {name} | {r.sr:.2f} | {r.spl:.2f} | {r.rc:.2f} | {r.aadc:.1f} | {r.ad:.1f} | {r.n_episodes} |")
    (out / "report.md").write_text("\n".join(lines) + "\n")


def _rounded(row: dict) -> dict:
    return {k: (round(v, 6) if isinstance(v, float) else v) for k, v in row.items()}
