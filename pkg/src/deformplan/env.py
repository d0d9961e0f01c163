"""Built-in deformable toy environment: a particle blob on a tabletop.

The blob is a fixed-size set of particles. A push action sweeps a vertical
capsule along a ground-plane segment; particles inside the capsule get
shoved radially out of it, a plasticity coefficient controls how much of
that displacement sticks, and a cohesion pass pulls disturbed particles
toward their local neighborhood centroid so the blob behaves like soft
clay instead of dust. A pinch action squeezes particles out of the gap
between two rotated finger planes.

Observations are z-buffered point-splat renders from a ring of cameras:
depth is the camera-space z of the frontmost particle per pixel, color is
diffuse shading under a configurable directional light (so appearance can
change while geometry does not).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .costs import ContinuousTarget
from .geometry import AxisAlignedBox, Camera, look_at
from .rng import make_rng

__all__ = [
    "EnvConfig",
    "BlobState",
    "GoalSpec",
    "PUSH_MODE",
    "PINCH_MODE",
    "action_bounds",
    "initial_state",
    "env_step",
    "render_observation",
    "default_cameras",
    "make_goal",
    "goal_from_particles",
    "goal_names",
    "scripted_demo",
    "BlobEnv",
    "Observation",
]

PUSH_MODE = "push"
PINCH_MODE = "pinch"


@dataclass(frozen=True)
class EnvConfig:
    n_particles: int = 256
    workspace: AxisAlignedBox = field(
        default_factory=lambda: AxisAlignedBox((-0.15, -0.15, 0.0), (0.15, 0.15, 0.12))
    )
    blob_center: tuple[float, float, float] = (0.0, 0.0, 0.035)
    blob_radius: float = 0.04
    blob_seed: int = 0  # initial observation is deterministic per config
    action_mode: str = PUSH_MODE
    pusher_radius: float = 0.025
    sweep_substeps: int = 16
    finger_halfwidth: float = 0.03
    plasticity: float = 0.8
    cohesion: float = 0.08
    cohesion_k: int = 8
    n_cameras: int = 4
    camera_distance: float = 0.32
    camera_height: float = 0.22
    resolution: int = 64
    supervision_resolution: int = 32
    fov_degrees: float = 55.0
    near: float = 0.1
    far: float = 0.7
    particle_draw_radius: float = 0.006
    light_direction: tuple[float, float, float] = (0.5, -0.3, 0.8)
    albedo: tuple[float, float, float] = (0.85, 0.55, 0.35)
    ambient: float = 0.25

    @property
    def action_dim(self) -> int:
        return 4 if self.action_mode == PUSH_MODE else 5


@dataclass
class BlobState:
    particles: np.ndarray  # (n, 3)
    step_index: int = 0

    def copy(self) -> "BlobState":
        return BlobState(self.particles.copy(), self.step_index)


@dataclass
class Observation:
    frames: list  # per camera (rgb (H,W,3) float, depth (H,W) float)
    supervision_frames: list  # lower-resolution frames for render supervision
    particles: np.ndarray  # ground truth (n, 3)


@dataclass
class GoalSpec:
    name: str
    particles: np.ndarray | None  # target particle set, when applicable
    region: ContinuousTarget | None  # continuous region target, when applicable
    frames: list  # rendered goal observation (encoder-resolution frames)

    def __post_init__(self):
        if (self.particles is None) == (self.region is None):
            raise ValueError("GoalSpec: exactly one of particles / region must be set")


def action_bounds(config: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension [lo, hi] for the configured action mode."""
    ws = config.workspace
    if config.action_mode == PUSH_MODE:
        lo = np.array([ws.lo[0], ws.lo[1], ws.lo[0], ws.lo[1]])
        hi = np.array([ws.hi[0], ws.hi[1], ws.hi[0], ws.hi[1]])
    elif config.action_mode == PINCH_MODE:
        lo = np.array([ws.lo[0], ws.lo[1], 0.01, -math.pi / 2, 0.01])
        hi = np.array([ws.hi[0], ws.hi[1], 0.08, math.pi / 2, 0.06])
    else:
        raise ValueError(f"unknown action mode {config.action_mode!r}")
    return lo, hi


def initial_state(config: EnvConfig) -> BlobState:
    """Deterministic initial blob: a seeded uniform ball, clamped to the workspace."""
    rng = make_rng(config.blob_seed)
    v = rng.standard_normal((config.n_particles, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = config.blob_radius * rng.random(config.n_particles) ** (1.0 / 3.0)
    pts = np.asarray(config.blob_center) + v * r[:, None]
    return BlobState(particles=_clamp(pts, config), step_index=0)


def _clamp(particles: np.ndarray, config: EnvConfig) -> np.ndarray:
    return np.clip(particles, config.workspace.lo, config.workspace.hi)


def _cohesion_pass(particles: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Pull each particle a fraction kappa toward its k-NN centroid."""
    if config.cohesion <= 0.0:
        return particles
    k = min(config.cohesion_k, len(particles) - 1)
    d = cdist(particles, particles)
    np.fill_diagonal(d, np.inf)
    idx = np.argpartition(d, k - 1, axis=1)[:, :k]
    centroids = particles[idx].mean(axis=1)
    return particles + config.cohesion * (centroids - particles)


def _push_step(particles: np.ndarray, action: np.ndarray, config: EnvConfig) -> tuple[np.ndarray, bool]:
    """Sweep a vertical capsule along the segment; returns (particles, touched)."""
    x0, y0, x1, y1 = action
    start = np.array([x0, y0])
    end = np.array([x1, y1])
    pts = particles.copy()
    r = config.pusher_radius
    touched = False
    for k in range(config.sweep_substeps + 1):
        center = start + (end - start) * (k / config.sweep_substeps)
        offset = pts[:, :2] - center
        dist = np.linalg.norm(offset, axis=1)
        inside = dist < r
        if not inside.any():
            continue
        touched = True
        safe = np.maximum(dist[inside], 1e-9)[:, None]
        pts[inside, :2] = center + offset[inside] / safe * r
    return pts, touched


def _pinch_step(particles: np.ndarray, action: np.ndarray, config: EnvConfig) -> tuple[np.ndarray, bool]:
    """Two parallel finger planes squeeze enclosed particles out of the gap."""
    x, y, z, r_z, gap = action
    center = np.array([x, y, z])
    normal = np.array([math.cos(r_z), math.sin(r_z), 0.0])  # finger plane normal
    along = np.array([-math.sin(r_z), math.cos(r_z), 0.0])
    rel = particles - center
    signed = rel @ normal
    within_gap = np.abs(signed) < gap / 2.0
    within_reach = (np.abs(rel @ along) < config.finger_halfwidth) & (
        np.abs(rel[:, 2]) < config.finger_halfwidth
    )
    squeeze = within_gap & within_reach
    if not squeeze.any():
        return particles.copy(), False
    pts = particles.copy()
    sign = np.where(signed[squeeze] >= 0.0, 1.0, -1.0)
    pts[squeeze] = pts[squeeze] + ((gap / 2.0) * sign - signed[squeeze])[:, None] * normal
    return pts, True


def env_step(state: BlobState, action, config: EnvConfig) -> BlobState:
    """Apply one action; deterministic, particle count preserved.

    Plasticity rho scales how much of the contact displacement persists;
    with rho = 0 contacted particles return to their pre-contact positions
    up to the cohesion pull. A contact-free action leaves the state
    unchanged (no spontaneous relaxation).
    """
    action = np.asarray(action, dtype=np.float64)
    lo, hi = action_bounds(config)
    if action.shape != lo.shape:
        raise ValueError(f"action shape {action.shape} does not match mode {config.action_mode!r}")
    action = np.clip(action, lo, hi)
    if config.action_mode == PUSH_MODE:
        displaced, touched = _push_step(state.particles, action, config)
    else:
        displaced, touched = _pinch_step(state.particles, action, config)
    if not touched:
        return BlobState(state.particles.copy(), state.step_index + 1)
    pts = state.particles + config.plasticity * (displaced - state.particles)
    pts = _cohesion_pass(pts, config)
    return BlobState(_clamp(pts, config), state.step_index + 1)


# ------------------------------------------------------------------ rendering


def default_cameras(config: EnvConfig, resolution: int | None = None) -> list[Camera]:
    """Ring of cameras looking at the blob center from above the rim."""
    res = config.resolution if resolution is None else resolution
    f = res / (2.0 * math.tan(math.radians(config.fov_degrees) / 2.0))
    target = np.asarray(config.blob_center)
    cams = []
    for i in range(config.n_cameras):
        angle = 2.0 * math.pi * i / config.n_cameras + math.pi / config.n_cameras
        eye = np.array(
            [
                config.camera_distance * math.cos(angle),
                config.camera_distance * math.sin(angle),
                config.camera_height,
            ]
        )
        cams.append(
            Camera(
                fx=f, fy=f, cx=res / 2.0, cy=res / 2.0,
                cam_to_world=look_at(eye, target),
                width=res, height=res, near=config.near, far=config.far,
            )
        )
    return cams


def _shade(particles: np.ndarray, config: EnvConfig, light_direction=None) -> np.ndarray:
    """Per-particle diffuse color from a directional light; geometry-independent."""
    light = np.asarray(light_direction if light_direction is not None else config.light_direction, float)
    light = light / np.linalg.norm(light)
    center = particles.mean(axis=0)
    normals = particles - center
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, np.maximum(norms, 1e-12))
    lambert = np.maximum(normals @ light, 0.0)
    shade = config.ambient + (1.0 - config.ambient) * lambert
    return np.clip(shade[:, None] * np.asarray(config.albedo), 0.0, 1.0)


def render_observation(
    state: BlobState,
    cameras: list[Camera],
    config: EnvConfig,
    light_direction=None,
) -> list:
    """Z-buffered point-splat render; returns per-camera (rgb, depth) pairs.

    Depth is 0 at background pixels and the winning particle's camera-space
    z elsewhere. Changing the light direction changes rgb only.
    """
    colors = _shade(state.particles, config, light_direction)
    frames = []
    for cam in cameras:
        uv, z = cam.project(state.particles)
        depth = np.zeros((cam.height, cam.width))
        owner = np.full((cam.height, cam.width), -1, dtype=np.int64)
        in_front = z > cam.near
        order = np.argsort(-z, kind="stable")  # far to near; near overwrites
        for p in order:
            if not in_front[p]:
                continue
            r_px = cam.fx * config.particle_draw_radius / z[p]
            u, v = uv[p]
            lo_u, hi_u = int(math.floor(u - r_px)), int(math.ceil(u + r_px))
            lo_v, hi_v = int(math.floor(v - r_px)), int(math.ceil(v + r_px))
            if hi_u < 0 or hi_v < 0 or lo_u >= cam.width or lo_v >= cam.height:
                continue
            lo_u, hi_u = max(lo_u, 0), min(hi_u, cam.width - 1)
            lo_v, hi_v = max(lo_v, 0), min(hi_v, cam.height - 1)
            us = np.arange(lo_u, hi_u + 1) + 0.5
            vs = np.arange(lo_v, hi_v + 1) + 0.5
            du = us - u
            dv = vs - v
            disc = du[None, :] ** 2 + dv[:, None] ** 2 <= r_px**2
            if not disc.any():
                continue
            block = (slice(lo_v, hi_v + 1), slice(lo_u, hi_u + 1))
            write = disc & ((depth[block] == 0.0) | (depth[block] > z[p]))
            depth[block][write] = z[p]
            owner[block][write] = p
        rgb = np.zeros((cam.height, cam.width, 3))
        hit = owner >= 0
        rgb[hit] = colors[owner[hit]]
        frames.append((rgb, depth))
    return frames


# --------------------------------------------------------------------- goals


def goal_names() -> list[str]:
    return ["dent", "split", "L-shape"]


def make_goal(name: str, config: EnvConfig) -> GoalSpec:
    """Construct a library goal: target particles plus rendered goal frames.

    Every library goal is the outcome of its scripted demonstration run
    from the deterministic initial state, so each one is reachable by
    construction ("dent" carves a capsule bite into the blob's side,
    "split" ploughs a furrow through the middle, "L-shape" takes a
    diagonal bite that leaves two arms).
    """
    if name not in goal_names():
        raise ValueError(f"unknown goal {name!r}; available: {goal_names()}")
    state = initial_state(config)
    for action in scripted_demo(name, config):
        state = env_step(state, action, config)
    frames = render_observation(state, default_cameras(config), config)
    return GoalSpec(name=name, particles=state.particles, region=None, frames=frames)


def goal_from_particles(name: str, particles: np.ndarray, config: EnvConfig) -> GoalSpec:
    pts = _clamp(np.asarray(particles, dtype=np.float64).reshape(-1, 3), config)
    frames = render_observation(BlobState(pts), default_cameras(config), config)
    return GoalSpec(name=name, particles=pts, region=None, frames=frames)


def scripted_demo(goal_name: str, config: EnvConfig) -> list[np.ndarray]:
    """Recorded push sequences whose outcomes define the library goals."""
    c = np.asarray(config.blob_center)
    r = config.blob_radius
    if goal_name == "split":
        return [
            np.array([c[0], c[1] - 2.5 * r, c[0], c[1] + 2.5 * r]),
            np.array([c[0], c[1] + 2.5 * r, c[0], c[1] - 2.5 * r]),
        ]
    if goal_name == "dent":
        return [np.array([c[0] + 2.6 * r, c[1], c[0] - 0.6 * r, c[1]])]
    if goal_name == "L-shape":
        return [
            np.array([c[0] + 2.2 * r, c[1] + 2.2 * r, c[0] + 0.2 * r, c[1] + 0.2 * r]),
            np.array([c[0] + 2.0 * r, c[1] + 0.8 * r, c[0] + 0.1 * r, c[1] + 0.6 * r]),
        ]
    raise ValueError(f"no scripted demo for goal {goal_name!r}")


# ----------------------------------------------------------------- contract


class BlobEnv:
    """Environment contract: reset(seed) / step(action) / observe() / goal()."""

    def __init__(self, config: EnvConfig, goal: GoalSpec | None = None):
        self.config = config
        self.cameras = default_cameras(config)
        self.supervision_cameras = default_cameras(config, config.supervision_resolution)
        self._goal = goal
        self.state = initial_state(config)

    def reset(self, seed: int | None = None) -> BlobState:
        # the initial observation is deterministic; the seed is accepted for
        # interface compatibility and ignored by the dynamics
        self.state = initial_state(self.config)
        return self.state.copy()

    def step(self, action) -> BlobState:
        self.state = env_step(self.state, action, self.config)
        return self.state.copy()

    def observe(self) -> Observation:
        frames = render_observation(self.state, self.cameras, self.config)
        sup = render_observation(self.state, self.supervision_cameras, self.config)
        return Observation(frames=frames, supervision_frames=sup, particles=self.state.particles.copy())

    def goal(self) -> GoalSpec:
        if self._goal is None:
            raise RuntimeError("environment has no goal configured")
        return self._goal

    def set_goal(self, goal: GoalSpec) -> None:
        self._goal = goal

    def simulate(self, particles: np.ndarray, actions: np.ndarray) -> list[np.ndarray]:
        """Pure rollout helper for oracle planning; does not touch live state."""
        state = BlobState(np.array(particles, dtype=np.float64))
        out = []
        for action in actions:
            state = env_step(state, action, self.config)
            out.append(state.particles.copy())
        return out
