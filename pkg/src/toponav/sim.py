"""Deterministic 2D differential-drive world.

Scenes are occupancy grids with per-cell texture and room ground truth. The
agent is a disc driven by unicycle kinematics and perceives the world through
a fan of ray casts returning depth and wall texture. Two rendering domains are
provided: ``SIM`` (noiseless) and ``REAL`` (noise, lighting gain, texture warp
and dropout).
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

N_RAYS = 64
FOV = math.pi / 2
MAX_RANGE = 5.0
RESOLUTION = 0.1
AGENT_RADIUS = 0.18
SUBSTEP = 0.02
DT = 0.1
V_MAX = 0.5
W_MAX = 0.5
NO_ROOM = -1
WALL_CELLS = 2  # interior walls: one painted face per room
SCENE_FORMAT_VERSION = 1


def wrap_angle(theta):
    """Wrap an angle (or array of angles) into [-pi, pi)."""
    if np.ndim(theta):
        return (np.asarray(theta) + math.pi) % (2 * math.pi) - math.pi
    wrapped = (theta + math.pi) % (2 * math.pi) - math.pi
    # float modulo can land exactly on +pi for tiny negative inputs
    return float(wrapped) if wrapped < math.pi else -math.pi


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class VelocityCommand:
    """Linear/angular velocity pair, clamped to the actuator ranges."""

    v: float = 0.0
    w: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "v", float(np.clip(self.v, 0.0, V_MAX)))
        object.__setattr__(self, "w", float(np.clip(self.w, -W_MAX, W_MAX)))


@dataclass(frozen=True)
class DomainParams:
    """Rendering domain. The defaults describe the identity (SIM) domain.

    Attributes
    ----------
    noise_sigma : float
        Standard deviation of additive depth noise, meters.
    gain_amplitude, gain_wavelength : float
        Multiplicative texture field ``1 + a sin(2 pi x / l) sin(2 pi y / l)``
        evaluated at the hit point.
    gamma : float
        Texture warp exponent, ``t -> t ** gamma``.
    dropout_p : float
        Per-ray probability of an invalid reading (max range, texture 0).
    """

    name: str = "SIM"
    noise_sigma: float = 0.0
    gain_amplitude: float = 0.0
    gain_wavelength: float = 3.0
    gamma: float = 1.0
    dropout_p: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (self.noise_sigma == 0.0 and self.gain_amplitude == 0.0
                and self.gamma == 1.0 and self.dropout_p == 0.0)

    def gain(self, x, y):
        if self.gain_amplitude == 0.0:
            return np.ones_like(np.asarray(x, dtype=float))
        k = 2 * math.pi / self.gain_wavelength
        return 1.0 + self.gain_amplitude * np.sin(k * x) * np.sin(k * y)

    def warp(self, tex):
        return np.clip(tex, 0.0, 1.0) ** self.gamma

    def to_dict(self) -> dict:
        return dict(name=self.name, noise_sigma=self.noise_sigma,
                    gain_amplitude=self.gain_amplitude,
                    gain_wavelength=self.gain_wavelength, gamma=self.gamma,
                    dropout_p=self.dropout_p)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainParams":
        return cls(**d)


SIM = DomainParams()
REAL = DomainParams(name="REAL", noise_sigma=0.05, gain_amplitude=0.3,
                    gain_wavelength=3.0, gamma=1.5, dropout_p=0.02)


@dataclass(frozen=True)
class RayObservation:
    depths: np.ndarray
    textures: np.ndarray
    domain: str = "SIM"

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=float)
        t = np.asarray(self.textures, dtype=float)
        if d.shape != t.shape or d.ndim != 1:
            raise ValueError(f"depths {d.shape} and textures {t.shape} must be equal-length vectors")
        object.__setattr__(self, "depths", d)
        object.__setattr__(self, "textures", t)

    @property
    def n_rays(self) -> int:
        return self.depths.shape[0]

    def to_vector(self) -> np.ndarray:
        """Flat ``(2R,)`` layout: depths followed by textures."""
        return np.concatenate([self.depths, self.textures])

    @classmethod
    def from_vector(cls, vec, domain: str = "SIM") -> "RayObservation":
        vec = np.asarray(vec, dtype=float)
        r = vec.shape[0] // 2
        return cls(vec[:r], vec[r:], domain)


class Scene:
    """Immutable occupancy grid with texture and room ground truth.

    Cell ``(row, col)`` covers ``x in [col*res, (col+1)*res)`` and
    ``y in [row*res, (row+1)*res)``.
    """

    def __init__(self, occ, tex, room, resolution: float = RESOLUTION, name: str = "scene"):
        occ = np.array(occ, dtype=bool)
        tex = np.array(tex, dtype=float)
        room = np.array(room, dtype=np.int64)
        if occ.ndim != 2 or tex.shape != occ.shape or room.shape != occ.shape:
            raise ValueError("occ, tex and room must be 2D arrays of identical shape")
        h, w = occ.shape
        if w < 8 or h < 8:
            raise ValueError(f"scene must be at least 8x8 cells, got {w}x{h}")
        if not (occ[0].all() and occ[-1].all() and occ[:, 0].all() and occ[:, -1].all()):
            raise ValueError("boundary cells must be occupied")
        if (room[~occ] == NO_ROOM).any():
            raise ValueError("every free cell needs a room id")
        if occ.all():
            raise ValueError("scene has no free space")
        for a in (occ, tex, room):
            a.setflags(write=False)
        self.occ, self.tex, self.room = occ, tex, room
        self.resolution = float(resolution)
        self.name = name

    @property
    def height(self) -> int:
        return self.occ.shape[0]

    @property
    def width(self) -> int:
        return self.occ.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return self.width * self.resolution, self.height * self.resolution

    @cached_property
    def room_ids(self) -> np.ndarray:
        return np.unique(self.room[~self.occ])

    @property
    def n_rooms(self) -> int:
        return len(self.room_ids)

    @cached_property
    def _occ_u8(self) -> np.ndarray:
        return np.ascontiguousarray(self.occ, dtype=np.uint8)

    @cached_property
    def _occupied_tree(self) -> cKDTree:
        rows, cols = np.nonzero(self.occ)
        centers = np.column_stack([(cols + 0.5), (rows + 0.5)]) * self.resolution
        return cKDTree(centers)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(y / self.resolution)), int(math.floor(x / self.resolution))

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (col + 0.5) * self.resolution, (row + 0.5) * self.resolution

    def in_bounds(self, x: float, y: float) -> bool:
        w, h = self.extent
        return 0.0 <= x < w and 0.0 <= y < h

    def is_occupied(self, x: float, y: float) -> bool:
        if not self.in_bounds(x, y):
            return True
        r, c = self.cell_of(x, y)
        return bool(self.occ[r, c])

    def room_at(self, x: float, y: float) -> int:
        r, c = self.cell_of(x, y)
        return int(self.room[r, c])

    def free_components(self) -> int:
        """Number of 4-connected components of free cells."""
        return len(_components(~self.occ))

    def is_connected(self) -> bool:
        return self.free_components() == 1

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.name == other.name and self.resolution == other.resolution
                and np.array_equal(self.occ, other.occ)
                and np.array_equal(self.tex, other.tex)
                and np.array_equal(self.room, other.room))

    def __hash__(self):
        return hash((self.name, self.occ.tobytes()))

    def __repr__(self):
        return f"Scene(name={self.name!r}, {self.width}x{self.height}, rooms={self.n_rooms})"

    # persistence

    def to_dict(self) -> dict:
        return {
            "version": SCENE_FORMAT_VERSION,
            "name": self.name,
            "resolution": self.resolution,
            "width": self.width,
            "height": self.height,
            "cells": {
                "occ": self.occ.astype(int).ravel().tolist(),
                "tex": self.tex.ravel().tolist(),
                "room": self.room.ravel().tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        if d.get("version") != SCENE_FORMAT_VERSION:
            raise ValueError(f"unsupported scene format version {d.get('version')!r}")
        shape = (d["height"], d["width"])
        cells = d["cells"]
        return cls(np.reshape(cells["occ"], shape).astype(bool),
                   np.reshape(cells["tex"], shape),
                   np.reshape(cells["room"], shape),
                   resolution=d["resolution"], name=d["name"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _components(free: np.ndarray) -> list[np.ndarray]:
    """4-connected components of a boolean mask, as arrays of flat indices."""
    h, w = free.shape
    seen = np.zeros_like(free, dtype=bool)
    comps = []
    for start in zip(*np.nonzero(free)):
        if seen[start]:
            continue
        seen[start] = True
        queue = deque([start])
        members = []
        while queue:
            r, c = queue.popleft()
            members.append(r * w + c)
            for rr, cc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
                if 0 <= rr < h and 0 <= cc < w and free[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    queue.append((rr, cc))
        comps.append(np.array(members))
    return comps


# scene generation


@dataclass
class _Room:
    r0: int
    c0: int
    r1: int  # inclusive
    c1: int

    @property
    def rows(self):
        return self.r1 - self.r0 + 1

    @property
    def cols(self):
        return self.c1 - self.c0 + 1


def generate_scene(n_rooms: int, size=(64, 64), clutter: float = 0.0, seed: int = 0,
                   resolution: float = RESOLUTION, door_width: float = 1.0,
                   min_room: float = 1.4, name: str | None = None) -> Scene:
    """Build a connected scene of axis-aligned rooms joined by door gaps.

    Rooms come from a binary space partition of the interior: the largest room
    is split along its longer side by a one-cell wall holding a single door.
    ``clutter`` is the fraction of free room cells turned into small square
    obstacles; placements that would disconnect free space are rejected.

    Raises
    ------
    ValueError
        If the requested rooms do not fit at ``min_room`` side length.
    """
    if n_rooms < 1:
        raise ValueError("n_rooms must be >= 1")
    if not 0.0 <= clutter <= 1.0:
        raise ValueError("clutter must be in [0, 1]")
    width, height = size
    rng = np.random.default_rng(seed)
    occ = np.ones((height, width), dtype=bool)
    occ[1:-1, 1:-1] = False
    door_cells = max(1, int(round(door_width / resolution)))
    min_side = max(int(round(min_room / resolution)), door_cells + 2)
    if width - 2 < min_side or height - 2 < min_side:
        raise ValueError(f"scene {width}x{height} too small for a {min_side}-cell room")

    rooms = [_Room(1, 1, height - 2, width - 2)]
    doors: list[tuple[np.ndarray, np.ndarray]] = []
    while len(rooms) < n_rooms:
        order = sorted(range(len(rooms)), key=lambda i: -rooms[i].rows * rooms[i].cols)
        for i in order:
            room = rooms[i]
            horizontal = room.rows >= room.cols  # wall along a row
            span = room.rows if horizontal else room.cols
            if span >= 2 * min_side + WALL_CELLS:
                break
            horizontal = not horizontal
            span = room.rows if horizontal else room.cols
            if span >= 2 * min_side + WALL_CELLS:
                break
        else:
            raise ValueError(f"{n_rooms} rooms of side >= {min_room} m do not fit in {width}x{height}")
        lo = min_side
        hi = span - min_side - WALL_CELLS
        mid_lo = max(lo, int(round(span * 0.4)))
        mid_hi = min(hi, int(round(span * 0.6)))
        if mid_lo > mid_hi:
            mid_lo, mid_hi = lo, hi
        offset = int(rng.integers(mid_lo, mid_hi + 1))
        t = WALL_CELLS
        if horizontal:
            wall = room.r0 + offset
            occ[wall:wall + t, room.c0:room.c1 + 1] = True
            d0 = int(rng.integers(room.c0, room.c1 - door_cells + 2))
            occ[wall:wall + t, d0:d0 + door_cells] = False
            dr, dc = np.meshgrid(np.arange(wall, wall + t), np.arange(d0, d0 + door_cells), indexing="ij")
            doors.append((dr.ravel(), dc.ravel()))
            a = _Room(room.r0, room.c0, wall - 1, room.c1)
            b = _Room(wall + t, room.c0, room.r1, room.c1)
        else:
            wall = room.c0 + offset
            occ[room.r0:room.r1 + 1, wall:wall + t] = True
            d0 = int(rng.integers(room.r0, room.r1 - door_cells + 2))
            occ[d0:d0 + door_cells, wall:wall + t] = False
            dr, dc = np.meshgrid(np.arange(d0, d0 + door_cells), np.arange(wall, wall + t), indexing="ij")
            doors.append((dr.ravel(), dc.ravel()))
            a = _Room(room.r0, room.c0, room.r1, wall - 1)
            b = _Room(room.r0, wall + t, room.r1, room.c1)
        rooms[i] = a
        rooms.append(b)

    rooms.sort(key=lambda r: (r.r0, r.c0))
    room = np.full((height, width), NO_ROOM, dtype=np.int64)
    for k, r in enumerate(rooms):
        room[r.r0:r.r1 + 1, r.c0:r.c1 + 1] = k
    room[occ] = NO_ROOM
    pending = [(int(r), int(c)) for rows, cols in doors for r, c in zip(rows, cols)]
    while pending:
        rest = []
        for rr, cc in pending:
            neighbours = [room[rr + dr, cc + dc] for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
                          if room[rr + dr, cc + dc] != NO_ROOM and not occ[rr + dr, cc + dc]]
            if neighbours:
                room[rr, cc] = min(neighbours)
            else:
                rest.append((rr, cc))
        if len(rest) == len(pending):  # pragma: no cover
            raise RuntimeError("door cells not adjacent to any room")
        pending = rest

    if clutter > 0:
        _add_clutter(occ, room, doors, clutter, rng)

    tex = _paint(occ, room, len(rooms), rng, resolution)
    scene = Scene(occ, tex, room, resolution=resolution,
                  name=name or f"gen-r{n_rooms}-{width}x{height}-c{clutter:g}-s{seed}")
    if not scene.is_connected():  # pragma: no cover - generator guarantees this
        raise RuntimeError("generated scene is disconnected")
    return scene


def _add_clutter(occ, room, doors, clutter, rng, door_margin=4):
    h, w = occ.shape
    keepout = np.zeros_like(occ)
    for rows, cols in doors:
        for rr, cc in zip(rows, cols):
            keepout[max(0, rr - door_margin):rr + door_margin + 1,
                    max(0, cc - door_margin):cc + door_margin + 1] = True
    candidates = ~occ & ~keepout
    target = int(round(clutter * candidates.sum()))
    placed = 0
    attempts = 0
    while placed < target and attempts < 50 * max(target, 1):
        attempts += 1
        s = int(rng.integers(2, 4))
        r = int(rng.integers(1, h - s))
        c = int(rng.integers(1, w - s))
        block = (slice(r, r + s), slice(c, c + s))
        if not candidates[block].all():
            continue
        occ[block] = True
        if len(_components(~occ)) != 1:
            occ[block] = False
            continue
        room[block] = NO_ROOM
        candidates[block] = False
        placed += s * s


def _paint(occ, room, n_rooms, rng, res):
    """Wall textures: per-room base tone blended with a smooth spatial pattern."""
    h, w = occ.shape
    bases = rng.uniform(0.1, 0.9, size=max(n_rooms, 1))
    for _ in range(1000):
        gaps = np.abs(bases[:, None] - bases[None, :]) + np.eye(len(bases))
        if gaps.min() >= min(0.12, 0.6 / len(bases)):
            break
        bases = rng.uniform(0.1, 0.9, size=len(bases))
    ys, xs = np.mgrid[0:h, 0:w] * res
    f1, f2 = rng.uniform(0.6, 1.4, size=2)
    p1, p2 = rng.uniform(0, 2 * math.pi, size=2)
    pattern = 0.5 + 0.5 * np.sin(2 * math.pi * f1 * xs + p1) * np.cos(2 * math.pi * f2 * ys + p2)
    tex = np.zeros((h, w))
    padded = np.pad(room, 1, constant_values=NO_ROOM)
    for r, c in zip(*np.nonzero(occ)):
        nb = [padded[r + 1 + dr, c + 1 + dc] for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))]
        nb = [n for n in nb if n != NO_ROOM]
        if nb:
            base = bases[min(nb)]
            tex[r, c] = 0.65 * base + 0.35 * pattern[r, c]
        else:
            tex[r, c] = pattern[r, c]
    tex += rng.normal(0.0, 0.02, size=tex.shape)
    tex[~occ] = 0.0
    return np.clip(tex, 0.0, 1.0)


# kinematics and collision


def disc_collides(scene: Scene, x: float, y: float, radius: float = AGENT_RADIUS) -> bool:
    """True if a disc of ``radius`` at (x, y) overlaps an occupied cell or leaves the grid."""
    res = scene.resolution
    wm, hm = scene.extent
    if x - radius < 0 or y - radius < 0 or x + radius >= wm or y + radius >= hm:
        return True
    c0, c1 = int(math.floor((x - radius) / res)), int(math.floor((x + radius) / res))
    r0, r1 = int(math.floor((y - radius) / res)), int(math.floor((y + radius) / res))
    block = scene.occ[r0:r1 + 1, c0:c1 + 1]
    if not block.any():
        return False
    rows, cols = np.nonzero(block)
    rows = rows + r0
    cols = cols + c0
    dx = np.maximum(np.maximum(cols * res - x, 0.0), x - (cols + 1) * res)
    dy = np.maximum(np.maximum(rows * res - y, 0.0), y - (rows + 1) * res)
    return bool((dx * dx + dy * dy < radius * radius).any())


def step(scene: Scene, pose: Pose, cmd: VelocityCommand, dt: float = DT,
         radius: float = AGENT_RADIUS) -> tuple[Pose, bool]:
    """Advance the unicycle by ``dt`` seconds.

    Translation uses the heading at the start of the step and is swept in
    ``SUBSTEP`` increments; on the first colliding sub-step the position is
    held at the previous collision-free one and ``contact`` is reported.
    Rotation is always applied in full since the agent is a disc.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    dist = cmd.v * dt
    theta = pose.theta + cmd.w * dt
    if dist == 0.0:
        return Pose(pose.x, pose.y, theta), False
    n = max(1, int(math.ceil(dist / SUBSTEP)))
    ux, uy = math.cos(pose.theta), math.sin(pose.theta)
    x, y = pose.x, pose.y
    for k in range(1, n + 1):
        nx = pose.x + ux * dist * k / n
        ny = pose.y + uy * dist * k / n
        if disc_collides(scene, nx, ny, radius):
            return Pose(x, y, theta), True
        x, y = nx, ny
    return Pose(x, y, theta), False


# sensing


@njit(cache=True)
def _cast_rays(occ, res, x, y, angles, max_range, depths, rows, cols):  # pragma: no cover - jit
    h, w = occ.shape
    for k in range(angles.shape[0]):
        dx = math.cos(angles[k])
        dy = math.sin(angles[k])
        col = int(math.floor(x / res))
        row = int(math.floor(y / res))
        if dx > 0:
            step_c = 1
            t_max_x = ((col + 1) * res - x) / dx
            t_dx = res / dx
        elif dx < 0:
            step_c = -1
            t_max_x = (col * res - x) / dx
            t_dx = -res / dx
        else:
            step_c = 0
            t_max_x = np.inf
            t_dx = np.inf
        if dy > 0:
            step_r = 1
            t_max_y = ((row + 1) * res - y) / dy
            t_dy = res / dy
        elif dy < 0:
            step_r = -1
            t_max_y = (row * res - y) / dy
            t_dy = -res / dy
        else:
            step_r = 0
            t_max_y = np.inf
            t_dy = np.inf
        depths[k] = max_range
        rows[k] = -1
        cols[k] = -1
        while True:
            if t_max_x < t_max_y:
                t = t_max_x
                col += step_c
                t_max_x += t_dx
            else:
                t = t_max_y
                row += step_r
                t_max_y += t_dy
            if t > max_range:
                break
            if row < 0 or row >= h or col < 0 or col >= w or occ[row, col]:
                depths[k] = t
                rows[k] = min(max(row, 0), h - 1)
                cols[k] = min(max(col, 0), w - 1)
                break


def ray_angles(theta: float, n_rays: int = N_RAYS, fov: float = FOV) -> np.ndarray:
    return theta + np.linspace(-fov / 2, fov / 2, n_rays)


def cast(scene: Scene, x: float, y: float, angles, max_range: float = MAX_RANGE):
    """First-hit distance and hit cell for each ray angle (DDA traversal)."""
    angles = np.ascontiguousarray(angles, dtype=float)
    depths = np.empty(angles.shape[0])
    rows = np.empty(angles.shape[0], dtype=np.int64)
    cols = np.empty(angles.shape[0], dtype=np.int64)
    _cast_rays(scene._occ_u8, scene.resolution, float(x), float(y), angles,
               float(max_range), depths, rows, cols)
    return depths, rows, cols


def observe(scene: Scene, pose: Pose, domain: DomainParams = SIM, rng=None,
            n_rays: int = N_RAYS, fov: float = FOV, max_range: float = MAX_RANGE) -> RayObservation:
    """Render the ray fan seen from ``pose`` in the given domain.

    Parameters
    ----------
    rng : numpy.random.Generator, optional
        Required unless ``domain`` is the identity; SIM rendering is pure.
    """
    if scene.is_occupied(pose.x, pose.y):
        raise ValueError(f"pose ({pose.x:.3f}, {pose.y:.3f}) lies in an occupied cell")
    angles = ray_angles(pose.theta, n_rays, fov)
    depths, rows, cols = cast(scene, pose.x, pose.y, angles, max_range)
    hit = rows >= 0
    tex = np.zeros(n_rays)
    tex[hit] = scene.tex[rows[hit], cols[hit]]
    if domain.is_identity:
        return RayObservation(depths, tex, domain.name)
    if rng is None:
        raise ValueError(f"domain {domain.name} needs an rng")
    hx = pose.x + depths * np.cos(angles)
    hy = pose.y + depths * np.sin(angles)
    tex = np.where(hit, domain.warp(tex * domain.gain(hx, hy)), 0.0)
    if domain.noise_sigma > 0:
        depths = np.clip(depths + rng.normal(0.0, domain.noise_sigma, n_rays), 0.0, max_range)
    if domain.dropout_p > 0:
        drop = rng.random(n_rays) < domain.dropout_p
        depths = np.where(drop, max_range, depths)
        tex = np.where(drop, 0.0, tex)
    return RayObservation(depths, tex, domain.name)


def clearance(scene: Scene, x: float, y: float) -> float:
    """Distance to the nearest occupied cell center minus half a cell diagonal, floored at 0."""
    d, _ = scene._occupied_tree.query([x, y])
    return max(0.0, float(d) - scene.resolution * math.sqrt(2) / 2)


def clearance_many(scene: Scene, points) -> np.ndarray:
    d, _ = scene._occupied_tree.query(np.asarray(points, dtype=float))
    return np.maximum(0.0, d - scene.resolution * math.sqrt(2) / 2)


def segment_clear(scene: Scene, p_src, p_dst, n_samples: int = 50) -> bool:
    """True iff none of ``n_samples`` evenly spaced points on the segment is occupied."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    pts = np.linspace(np.asarray(p_src, float), np.asarray(p_dst, float), n_samples)
    w, h = scene.extent
    if ((pts < 0).any() or (pts[:, 0] >= w).any() or (pts[:, 1] >= h).any()):
        return False
    rows = np.floor(pts[:, 1] / scene.resolution).astype(int)
    cols = np.floor(pts[:, 0] / scene.resolution).astype(int)
    return not scene.occ[rows, cols].any()


def sample_free_position(scene: Scene, rng, min_clearance: float = 0.2,
                         room_id: int | None = None, max_attempts: int = 10_000) -> np.ndarray:
    """Uniform random position with at least ``min_clearance`` to obstacles."""
    w, h = scene.extent
    for _ in range(max_attempts):
        p = rng.uniform([0.0, 0.0], [w, h])
        if scene.is_occupied(*p):
            continue
        if room_id is not None and scene.room_at(*p) != room_id:
            continue
        if clearance(scene, *p) >= min_clearance:
            return p
    raise ValueError(f"no position with clearance >= {min_clearance} found in {scene.name}")
