"""Closed-loop navigation: localise, plan, orient, sweep, then run the local policy.

Only the kinematic layer (``_Agent``) touches the ground-truth pose. It
renders observations, integrates motion, and measures path length and
contacts. Localisation, planning and the policy receive observations,
descriptors and the positionless :class:`~toponav.topo_map.MapView` only.
The heading used by the PID controller plays the role of the robot's
odometry and is never given to a decision module.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .localization import DEFAULT_GOAL_THRESHOLD, goal_reached_check, localize
from .perception import PassageDetector, RayFeatureExtractor
from .planning import next_waypoint
from .policy import LocalPolicy, embed_observations, policy_step
from .sim import DT, SIM, W_MAX, DomainParams, Pose, RayObservation, Scene, VelocityCommand, observe, step, wrap_angle
from .topo_map import MapView, TopoMap

log = logging.getLogger(__name__)

ORIENT_TOLERANCE = math.radians(2.0)


class PidController:
    """Discrete PID on a wrapped angular error with output clamp and integral anti-windup."""

    def __init__(self, kp: float = 1.2, ki: float = 0.0, kd: float = 0.1, limit: float = W_MAX,
                 integral_limit: float = 1.0):
        self.kp, self.ki, self.kd = kp, ki, kd
        self.limit = limit
        self.integral_limit = integral_limit
        self.reset()

    def reset(self) -> None:
        self.integral = 0.0
        self.prev_error = None

    def update(self, error: float, dt: float = DT) -> float:
        self.integral = float(np.clip(self.integral + error * dt, -self.integral_limit, self.integral_limit))
        deriv = 0.0 if self.prev_error is None else wrap_angle(error - self.prev_error) / dt
        self.prev_error = error
        out = self.kp * error + self.ki * self.integral + self.kd * deriv
        return float(np.clip(out, -self.limit, self.limit))


@dataclass(frozen=True)
class NavConfig:
    segment_seconds: float = 5.0
    segments_per_waypoint: int = 12
    control_hz: float = 10.0
    sweep_increment: float = math.radians(20.0)
    max_seconds: float = 300.0
    goal_threshold: float = DEFAULT_GOAL_THRESHOLD
    success_radius: float = 1.5
    orient_max_steps: int = 100
    reorient_each_segment: bool = False

    def __post_init__(self):
        for name in ("segment_seconds", "segments_per_waypoint", "control_hz", "sweep_increment",
                     "max_seconds", "success_radius", "orient_max_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"NavConfig.{name} must be positive")
        if not 0.0 < self.goal_threshold <= 1.0:
            raise ValueError("NavConfig.goal_threshold must be in (0, 1]")
        if abs(1.0 / self.control_hz - DT) > 1e-12:
            raise ValueError(f"control rate must match the simulator step ({1 / DT:g} Hz)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NavModels:
    """Everything the decision layer may use: trunks, passage detector and policy."""

    fx_loc: RayFeatureExtractor
    pd: PassageDetector
    policy: LocalPolicy

    @property
    def fx_pass(self) -> RayFeatureExtractor:
        return self.pd.extractor_

    def descriptor(self, obs: RayObservation) -> np.ndarray:
        return self.fx_loc.transform(obs)[0]

    def passage(self, obs: RayObservation) -> float:
        return float(self.pd.predict_proba(obs)[0, 1])

    def embed(self, obs: RayObservation) -> np.ndarray:
        return embed_observations(obs, self.fx_loc, self.fx_pass)[0]


@dataclass
class EpisodeResult:
    success: bool
    shortest: float
    navigated: float
    contact_seconds: float
    duration: float
    reason: str
    scene: str = ""
    episode: int = -1
    goal_node: int | None = None
    final_pose: tuple | None = None
    steps: int = 0

    def __post_init__(self):
        if self.navigated < 0:
            raise ValueError("navigated length must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Agent:
    """Ground-truth kinematic state plus bookkeeping; private to the runtime."""

    scene: Scene
    pose: Pose
    domain: DomainParams
    rng: np.random.Generator
    steps: int = 0
    navigated: float = 0.0
    contact_seconds: float = 0.0
    log: list | None = None
    context: dict = field(default_factory=dict)

    def observe(self) -> RayObservation:
        return observe(self.scene, self.pose, self.domain, self.rng)

    def act(self, cmd: VelocityCommand) -> bool:
        before = self.pose
        self.pose, contact = step(self.scene, self.pose, cmd)
        self.navigated += math.hypot(self.pose.x - before.x, self.pose.y - before.y)
        self.steps += 1
        if self.log is not None:
            self.log.append({"t": round(self.steps * DT, 10), "pose": [self.pose.x, self.pose.y, self.pose.theta],
                             "node": self.context.get("node"), "plan_head": self.context.get("plan_head"),
                             "command": [cmd.v, cmd.w], "contact": bool(contact),
                             "similarity": self.context.get("similarity")})
        return contact

    @property
    def elapsed(self) -> float:
        return self.steps * DT


def _rotate_to(agent: _Agent, target: float, pid: PidController, max_steps: int) -> bool:
    pid.reset()
    for _ in range(max_steps):
        err = wrap_angle(target - agent.pose.theta)
        if abs(err) < ORIENT_TOLERANCE:
            return True
        agent.act(VelocityCommand(0.0, pid.update(err)))
    ok = abs(wrap_angle(target - agent.pose.theta)) < ORIENT_TOLERANCE
    if not ok:
        log.info("orientation budget exhausted with error %.1f deg",
                 math.degrees(wrap_angle(target - agent.pose.theta)))
    return ok


def pid_orient(scene: Scene, pose: Pose, target_angle: float, pid: PidController | None = None,
               max_steps: int = 100) -> Pose:
    """Rotate in place toward ``target_angle`` until within 2 degrees or out of steps."""
    agent = _Agent(scene, pose, SIM, np.random.default_rng(0))
    _rotate_to(agent, wrap_angle(target_angle), pid or PidController(), max_steps)
    return agent.pose


def sweep_order(increment: float) -> list[float]:
    """Heading offsets tried by the sweep: 0, +d, -d, +2d, -2d, ... covering the circle once."""
    n = int(round(2 * math.pi / increment))
    offsets = [0.0]
    k = 1
    while len(offsets) < n:
        offsets.append(k * increment)
        if len(offsets) < n:
            offsets.append(-k * increment)
        k += 1
    return offsets


def _sweep(agent: _Agent, models: NavModels, increment: float, pid: PidController, max_steps: int) -> bool:
    base = agent.pose.theta
    for off in sweep_order(increment):
        if off:
            _rotate_to(agent, wrap_angle(base + off), pid, max_steps)
        if models.passage(agent.observe()) >= 0.5:
            return True
    log.warning("no navigable heading found in a full sweep; keeping the original heading")
    _rotate_to(agent, base, pid, max_steps)
    return False


def sweep_for_passage(scene: Scene, pose: Pose, pd: PassageDetector, fx: RayFeatureExtractor | None = None,
                      increment: float = math.radians(20.0), domain: DomainParams = SIM,
                      rng=None, pid: PidController | None = None, max_steps: int = 100) -> Pose:
    """Turn by alternating increments until the passage detector reports a passage."""
    models = _PassageOnly(pd, fx)
    agent = _Agent(scene, pose, domain, np.random.default_rng(0) if rng is None else rng)
    _sweep(agent, models, increment, pid or PidController(), max_steps)
    return agent.pose


class _PassageOnly:
    def __init__(self, pd, fx):
        self.pd, self.fx = pd, fx

    def passage(self, obs):
        from .perception import passage_probability
        return passage_probability(self.pd, self.fx, obs)


def _local_segment(agent: _Agent, models: NavModels, n_steps: int) -> bool:
    h_ang, h_lin = models.policy.zero_state()
    contact = False
    for _ in range(n_steps):
        u = models.embed(agent.observe())
        cmd, _, (h_ang, h_lin) = policy_step(models.policy, u, h_ang, h_lin)
        contact |= agent.act(cmd)
    return contact


def run_episode(scene: Scene, topo_map: TopoMap | MapView, models: NavModels, start: Pose, goal_obs: RayObservation,
                cfg: NavConfig = NavConfig(), seed: int = 0, goal_position=None, shortest: float = 0.0,
                domain: DomainParams = SIM, trajectory_log: list | None = None) -> EpisodeResult:
    """Navigate from ``start`` toward the place where ``goal_obs`` was taken.

    ``goal_position`` is used only for the evaluation-side success radius, and
    ``shortest`` is passed through to the result for metric computation.
    """
    view = topo_map.view() if isinstance(topo_map, TopoMap) else topo_map
    agent = _Agent(scene, start, domain, np.random.default_rng(seed), log=trajectory_log)
    pid = PidController()
    goal_desc = models.descriptor(goal_obs)
    goal_node = localize(view, goal_desc).node
    seg_steps = int(round(cfg.segment_seconds / DT))

    def near_goal() -> bool:
        return goal_position is not None and math.dist(agent.pose.xy, goal_position) <= cfg.success_radius

    def result(success: bool, reason: str) -> EpisodeResult:
        return EpisodeResult(success, shortest, agent.navigated, agent.contact_seconds, agent.elapsed, reason,
                             scene.name, goal_node=goal_node, final_pose=(agent.pose.x, agent.pose.y, agent.pose.theta), steps=agent.steps)

    while agent.elapsed < cfg.max_seconds:
        desc = models.descriptor(agent.observe())
        similarity = float(desc @ goal_desc)
        loc = localize(view, desc)
        agent.context.update(node=loc.node, similarity=similarity)
        if goal_reached_check(desc, goal_desc, cfg.goal_threshold):
            return result(True, "goal-match")
        if loc.node == goal_node:
            return result(True, "goal-node")
        wp = next_waypoint(view, loc.node, goal_node)
        if wp is None:
            return result(False, "no-path")
        agent.context["plan_head"] = wp.node
        _rotate_to(agent, wp.angle, pid, cfg.orient_max_steps)
        _sweep(agent, models, cfg.sweep_increment, pid, cfg.orient_max_steps)
        for k in range(cfg.segments_per_waypoint):
            if agent.elapsed >= cfg.max_seconds:
                break
            if k and cfg.reorient_each_segment:
                _rotate_to(agent, wp.angle, pid, cfg.orient_max_steps)
                _sweep(agent, models, cfg.sweep_increment, pid, cfg.orient_max_steps)
            if _local_segment(agent, models, seg_steps):
                agent.contact_seconds += cfg.segment_seconds
            if near_goal():
                return result(True, "within-radius")
            desc = models.descriptor(agent.observe())
            now = localize(view, desc)
            agent.context.update(node=now.node, similarity=float(desc @ goal_desc))
            if now.node != loc.node:
                break
    return result(False, "timeout")


def save_trajectory_log(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
