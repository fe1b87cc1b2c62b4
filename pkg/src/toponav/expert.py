"""Scripted expert: A* on an inflated grid tracked by pure pursuit."""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .sim import (AGENT_RADIUS, DT, SIM, V_MAX, W_MAX, DomainParams, Pose, RayObservation, Scene, VelocityCommand,
                  clearance, clearance_many, observe, step, wrap_angle)

log = logging.getLogger(__name__)

INFLATION = 0.25
LOOKAHEAD = 0.5
GOAL_TOLERANCE = 0.3
SMOOTH_MARGIN = 0.35
SAFETY_MARGIN = 0.05
MAX_OVERRIDES = 20


class NoGridPathError(ValueError):
    pass


@dataclass
class ExpertTrajectory:
    """Observations ``obs[0..N]`` and commands ``cmds[0..N-1]`` at 10 Hz."""

    scene: str
    observations: list = field(default_factory=list)
    commands: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    contacts: list = field(default_factory=list)

    def __len__(self):
        return len(self.commands)

    def to_dict(self) -> dict:
        return {"scene": self.scene,
                "steps": [{"t": round(k * DT, 10),
                           "depths": o.depths.tolist(), "textures": o.textures.tolist(), "domain": o.domain,
                           "pose": [p.x, p.y, p.theta],
                           "cmd": None if k >= len(self.commands) else [self.commands[k].v, self.commands[k].w]}
                          for k, (o, p) in enumerate(zip(self.observations, self.poses))]}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertTrajectory":
        traj = cls(d["scene"])
        for s in d["steps"]:
            traj.observations.append(RayObservation(s["depths"], s["textures"], s["domain"]))
            traj.poses.append(Pose(*s["pose"]))
            if s["cmd"] is not None:
                traj.commands.append(VelocityCommand(*s["cmd"]))
        return traj


def traversable_mask(scene: Scene, margin: float = INFLATION) -> np.ndarray:
    rows, cols = np.nonzero(~scene.occ)
    centers = np.column_stack([cols + 0.5, rows + 0.5]) * scene.resolution
    mask = np.zeros(scene.occ.shape, dtype=bool)
    clear = np.zeros(scene.occ.shape)
    c = clearance_many(scene, centers)
    clear[rows, cols] = c
    mask[rows, cols] = c >= margin
    return mask, clear


_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _nearest_cell(mask, row, col):
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        raise NoGridPathError("no traversable cells")
    k = int(np.argmin((rows - row) ** 2 + (cols - col) ** 2))
    return int(rows[k]), int(cols[k])


def astar(scene: Scene, start, goal, margin: float = INFLATION, comfort: float = 0.8,
          penalty: float = 8.0) -> list[np.ndarray]:
    """8-connected A* over cells with clearance >= ``margin``.

    Step cost is length times ``1 + penalty * max(0, comfort - clearance) / comfort``,
    which keeps the path away from walls where room allows.
    """
    mask, clear = traversable_mask(scene, margin)
    res = scene.resolution
    s = _nearest_cell(mask, *scene.cell_of(*start))
    g = _nearest_cell(mask, *scene.cell_of(*goal))
    cost_mult = 1.0 + penalty * np.maximum(0.0, comfort - clear) / comfort

    def h(c):
        return res * math.hypot(c[0] - g[0], c[1] - g[1])

    best = {s: 0.0}
    parent = {s: None}
    heap = [(h(s), 0.0, s)]
    while heap:
        _, gc, cur = heapq.heappop(heap)
        if cur == g:
            break
        if gc > best[cur]:
            continue
        for dr, dc in _NEIGHBOURS:
            nr, nc = cur[0] + dr, cur[1] + dc
            if not mask[nr, nc]:
                continue
            if dr and dc and not (mask[cur[0] + dr, cur[1]] and mask[cur[0], cur[1] + dc]):
                continue
            step_len = res * (math.sqrt(2) if dr and dc else 1.0)
            ng = gc + step_len * cost_mult[nr, nc]
            if ng < best.get((nr, nc), math.inf):
                best[(nr, nc)] = ng
                parent[(nr, nc)] = cur
                heapq.heappush(heap, (ng + h((nr, nc)), ng, (nr, nc)))
    else:
        raise NoGridPathError(f"no grid path from {tuple(np.round(start, 2))} to {tuple(np.round(goal, 2))}")
    cells = []
    cur = g
    while cur is not None:
        cells.append(cur)
        cur = parent[cur]
    cells.reverse()
    path = [np.asarray(start, float)] + [np.array(scene.cell_center(r, c)) for r, c in cells]
    path.append(np.asarray(goal, float))
    return path


def _segment_clearance(scene: Scene, a, b, spacing: float = 0.05) -> float:
    n = max(2, int(np.ceil(np.linalg.norm(b - a) / spacing)) + 1)
    return float(clearance_many(scene, np.linspace(a, b, n)).min())


def shortcut_path(scene: Scene, path, margin: float = SMOOTH_MARGIN) -> list[np.ndarray]:
    """Greedy line-of-sight pruning: skip vertices while the chord keeps ``margin`` clearance.

    The first and last legs (to the exact start and goal) are always kept.
    """
    path = [np.asarray(p, float) for p in path]
    if len(path) <= 3:
        return path
    out = [path[0], path[1]]
    i = 1
    last = len(path) - 2
    while i < last:
        j = last
        while j > i + 1 and _segment_clearance(scene, path[i], path[j]) < margin:
            j -= 1
        out.append(path[j])
        i = j
    out.append(path[-1])
    return out


class PurePursuit:
    """Tracks a polyline with a fixed lookahead; emits clamped (v, w)."""

    def __init__(self, path, lookahead: float = LOOKAHEAD):
        self.path = np.asarray(path, dtype=float)
        seg = np.diff(self.path, axis=0)
        self.cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])
        self.lookahead = lookahead
        self._s = 0.0

    def _project(self, p):
        best_s, best_d = self._s, math.inf
        for i in range(len(self.path) - 1):
            if self.cum[i + 1] < self._s - 1e-9:
                continue
            a, b = self.path[i], self.path[i + 1]
            ab = b - a
            L2 = float(ab @ ab)
            t = 0.0 if L2 == 0 else float(np.clip((p - a) @ ab / L2, 0.0, 1.0))
            d = float(np.linalg.norm(a + t * ab - p))
            if d < best_d - 1e-12:
                best_d, best_s = d, self.cum[i] + t * math.sqrt(L2)
            if self.cum[i] > self._s + 2.0:
                break
        self._s = max(self._s, best_s)
        return self._s

    def point_at(self, s):
        s = min(s, self.cum[-1])
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self.path) - 2)
        seg = self.cum[i + 1] - self.cum[i]
        t = 0.0 if seg == 0 else (s - self.cum[i]) / seg
        return self.path[i] + t * (self.path[i + 1] - self.path[i])

    def command(self, pose: Pose) -> VelocityCommand:
        p = np.array([pose.x, pose.y])
        s = self._project(p)
        target = self.point_at(s + self.lookahead)
        d = target - p
        alpha = wrap_angle(math.atan2(d[1], d[0]) - pose.theta)
        remaining = np.linalg.norm(self.path[-1] - p)
        if abs(alpha) > math.pi / 3:
            return VelocityCommand(0.0, math.copysign(W_MAX, alpha))
        v = V_MAX * min(1.0, max(0.0, (math.pi / 3 - abs(alpha)) / (math.pi / 6)))
        v = min(v, max(0.1, remaining))
        w = 2.0 * max(v, 0.2) * math.sin(alpha) / self.lookahead
        return VelocityCommand(v, w)

    def initial_heading(self) -> float:
        d = self.point_at(self.lookahead) - self.path[0]
        return math.atan2(d[1], d[0])


def _safe(scene: Scene, pose: Pose, cmd: VelocityCommand) -> VelocityCommand:
    """Turn in place instead of moving when the next step would nearly graze a wall."""
    if cmd.v == 0.0:
        return cmd
    nxt, contact = step(scene, pose, cmd)
    if not contact and clearance(scene, nxt.x, nxt.y) >= AGENT_RADIUS + SAFETY_MARGIN:
        return cmd
    if clearance(scene, nxt.x, nxt.y) >= clearance(scene, pose.x, pose.y) and not contact:
        return cmd
    return VelocityCommand(0.0, math.copysign(W_MAX, cmd.w) if cmd.w else W_MAX)


def expert_drive(scene: Scene, start: Pose, goal, seed: int = 0, domain: DomainParams = SIM,
                 timeout: float | None = None, rng=None) -> ExpertTrajectory | None:
    """Drive from ``start`` to ``goal`` with the scripted expert, recording at 10 Hz.

    Returns ``None`` (and logs why) if the goal is not reached before
    ``timeout`` seconds. Raises :class:`NoGridPathError` if A* finds no path.
    """
    goal = np.asarray(goal, dtype=float)
    traj = ExpertTrajectory(scene.name)
    rng = np.random.default_rng(seed) if rng is None else rng
    pose = start
    traj.observations.append(observe(scene, pose, domain, rng))
    traj.poses.append(pose)
    if np.linalg.norm(goal - pose.xy) <= GOAL_TOLERANCE:
        return traj
    path = shortcut_path(scene, astar(scene, pose.xy, goal))
    tracker = PurePursuit(path)
    length = tracker.cum[-1]
    timeout = timeout if timeout is not None else 20.0 + 4.0 * length / V_MAX
    n_max = int(round(timeout / DT))
    overrides = 0
    for _ in range(n_max):
        raw = tracker.command(pose)
        cmd = _safe(scene, pose, raw)
        # the safety filter can livelock against pure pursuit in tight gaps; after a
        # run of overrides pass the tracker command through (step still blocks walls)
        overrides = overrides + 1 if cmd != raw else 0
        if overrides > MAX_OVERRIDES:
            cmd, overrides = raw, 0
        pose, contact = step(scene, pose, cmd)
        traj.commands.append(cmd)
        traj.contacts.append(contact)
        traj.observations.append(observe(scene, pose, domain, rng))
        traj.poses.append(pose)
        if np.linalg.norm(goal - pose.xy) <= GOAL_TOLERANCE:
            return traj
    log.info("expert timed out after %.1f s (%s -> %s) in %s", timeout, start, goal, scene.name)
    return None


def collect_expert_trajectories(scene: Scene, n: int, seed: int = 0, min_distance: float = 2.0,
                                heading_noise: float = math.radians(20), min_clearance: float = 0.3):
    """Random start/goal pairs; the start heading roughly faces the planned path."""
    from .sim import sample_free_position

    rng = np.random.default_rng(seed)
    out = []
    attempts = 0
    while len(out) < n and attempts < 20 * n:
        attempts += 1
        a = sample_free_position(scene, rng, min_clearance)
        b = sample_free_position(scene, rng, min_clearance)
        if np.linalg.norm(a - b) < min_distance:
            continue
        try:
            path = shortcut_path(scene, astar(scene, a, b))
        except NoGridPathError:
            continue
        heading = PurePursuit(path).initial_heading() + rng.uniform(-heading_noise, heading_noise)
        traj = expert_drive(scene, Pose(a[0], a[1], heading), b, rng=rng)
        if traj is not None:
            out.append(traj)
    return out
