"""Planning backends: learned latent rollouts and ground-truth oracle rollouts.

Both expose the same surface to the MPC driver: ingest an observation,
produce a PlanProblem over bounded action sequences, report a predicted
reward for the termination test, and compute true costs for logging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .costs import ContinuousTarget, chamfer, d2cd, emd, soft_iou
from .encoder import EncoderConfig, encode
from .env import BlobEnv, EnvConfig, GoalSpec, action_bounds, default_cameras
from .geometry import AxisAlignedBox, VoxelGridSpec, fuse_depth_views
from .nerf import DecoderConfig
from .planner import PlanProblem
from .rng import spawn_rng
from .rssm import RSSMConfig, RSSMState, initial_state, predict_reward, rollout, step_posterior

__all__ = [
    "Normalization",
    "ModelBundle",
    "RSSMPlanProblem",
    "OraclePlanProblem",
    "LearnedBackend",
    "OracleBackend",
    "goal_costs",
    "training_cost",
    "default_grid_spec",
]


@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def undo(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    @staticmethod
    def identity(dim: int) -> "Normalization":
        return Normalization(np.zeros(dim), np.ones(dim))

    @staticmethod
    def fit(values: np.ndarray, floor: float = 1e-6) -> "Normalization":
        flat = values.reshape(-1, values.shape[-1])
        return Normalization(flat.mean(axis=0), np.maximum(flat.std(axis=0), floor))


@dataclass
class ModelBundle:
    """Everything the closed loop needs: configs, weights, normalizations."""

    encoder_config: EncoderConfig
    encoder_params: dict
    rssm_config: RSSMConfig
    rssm_params: dict
    crop_box: AxisAlignedBox
    embed_norm: Normalization
    reward_norm: Normalization
    decoder_config: DecoderConfig | None = None
    decoder_params: dict | None = None

    def embed_observation(self, frames, cameras, downsample_seed: int = 0) -> np.ndarray:
        cloud = fuse_depth_views(frames, cameras, crop_box=self.crop_box)
        if len(cloud) == 0:
            raise ValueError("observation produced an empty point cloud inside the crop box")
        emb = encode(cloud, self.encoder_params, self.encoder_config, self.crop_box, downsample_seed)
        return self.embed_norm.apply(emb.values)


def default_grid_spec(config: EnvConfig, dims=(32, 32, 32)) -> VoxelGridSpec:
    return VoxelGridSpec.covering(config.workspace, dims)


def goal_costs(particles: np.ndarray, goal: GoalSpec, grid: VoxelGridSpec) -> dict:
    """All applicable metrics of a state against a goal, as a plain dict."""
    out = {}
    if goal.particles is not None:
        out["chamfer"] = chamfer(particles, goal.particles)
        out["emd"] = emd(particles, goal.particles)
        out["soft_iou"] = soft_iou(particles, goal.particles, grid)
    if goal.region is not None:
        out["d2cd"] = d2cd(particles, goal.region)
    return out


def training_cost(particles: np.ndarray, goal: GoalSpec, name: str, grid: VoxelGridSpec) -> float:
    """Scalar cost (lower is better) used for reward targets and planning."""
    if name == "chamfer":
        return chamfer(particles, goal.particles)
    if name == "emd":
        return emd(particles, goal.particles)
    if name == "soft_iou":
        return 1.0 - soft_iou(particles, goal.particles, grid)
    if name == "d2cd":
        target = goal.region if goal.region is not None else ContinuousTarget.from_samples(goal.particles)
        return d2cd(particles, target)
    raise ValueError(f"unknown cost {name!r}")


# ------------------------------------------------------------ plan problems


class RSSMPlanProblem(PlanProblem):
    """Expected return of latent mode-rollouts, differentiable w.r.t. actions."""

    supports_gradient = True

    def __init__(self, state: RSSMState, goal_embedding, bundle: ModelBundle, horizon: int, lower, upper):
        super().__init__(horizon, lower, upper)
        self._deter = state.deter.data.reshape(1, -1)
        self._stoch = state.stoch.data.reshape(1, -1)
        self._goal = np.asarray(goal_embedding, dtype=np.float64)
        self._params = {k: v.detach() for k, v in bundle.rssm_params.items()}
        self._config = bundle.rssm_config

    def _tiled_state(self, batch: int) -> RSSMState:
        return RSSMState(
            deter=Tensor(np.repeat(self._deter, batch, axis=0)),
            stoch=Tensor(np.repeat(self._stoch, batch, axis=0)),
        )

    def returns(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        _, rewards = rollout(
            self._tiled_state(len(actions)), actions, self._goal, self._params, self._config, mode=True
        )
        return rewards.data.sum(axis=1)

    def returns_and_grads(self, actions: np.ndarray):
        acts = Tensor(np.asarray(actions, dtype=np.float64), requires_grad=True)
        _, rewards = rollout(
            self._tiled_state(acts.shape[0]), acts, self._goal, self._params, self._config, mode=True
        )
        rewards.sum().backward()
        return rewards.data.sum(axis=1), acts.grad


class OraclePlanProblem(PlanProblem):
    """Ground-truth rollouts through the simulator; no gradients available."""

    supports_gradient = False

    def __init__(self, particles, env: BlobEnv, goal: GoalSpec, cost_name: str, horizon: int):
        lo, hi = action_bounds(env.config)
        super().__init__(horizon, lo, hi)
        self._particles = np.array(particles, dtype=np.float64)
        self._env = env
        self._goal = goal
        self._cost_name = cost_name
        self._grid = default_grid_spec(env.config)

    def returns(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        out = np.empty(len(actions))
        for i, seq in enumerate(actions):
            states = self._env.simulate(self._particles, seq)
            out[i] = -sum(
                training_cost(pts, self._goal, self._cost_name, self._grid) for pts in states
            )
        return out


# ---------------------------------------------------------------- backends


class LearnedBackend:
    """Tracks a posterior latent state and plans through the learned model."""

    def __init__(
        self,
        bundle: ModelBundle,
        env_config: EnvConfig,
        goal: GoalSpec,
        horizon: int,
        cost_name: str = "chamfer",
        seed: int = 0,
    ):
        self.bundle = bundle
        self.env_config = env_config
        self.goal = goal
        self.horizon = horizon
        self.cost_name = cost_name
        self.cameras = default_cameras(env_config)
        self._grid = default_grid_spec(env_config)
        self._seed = seed
        self.goal_embedding = bundle.embed_observation(goal.frames, self.cameras)
        self.reset()

    def reset(self) -> None:
        self.state = initial_state(self.bundle.rssm_config, batch=1)
        self._step = 0
        self._rng = spawn_rng(self._seed, "backend")

    def observe(self, observation, prev_action=None) -> None:
        emb = self.bundle.embed_observation(observation.frames, self.cameras)
        action = (
            np.zeros((1, self.bundle.rssm_config.action_dim))
            if prev_action is None
            else np.asarray(prev_action, dtype=np.float64).reshape(1, -1)
        )
        self.state = step_posterior(
            self.state.detached(), action, emb, self.bundle.rssm_params, self.bundle.rssm_config, self._rng
        ).detached()
        self._step += 1

    def make_problem(self) -> RSSMPlanProblem:
        lo, hi = action_bounds(self.env_config)
        return RSSMPlanProblem(self.state, self.goal_embedding, self.bundle, self.horizon, lo, hi)

    def predicted_reward(self) -> float:
        value = predict_reward(
            RSSMState(self.state.deter.detach(), self.state.stoch.detach()),
            self.goal_embedding,
            {k: v.detach() for k, v in self.bundle.rssm_params.items()},
            self.bundle.rssm_config,
        ).item()
        return float(self.bundle.reward_norm.undo(np.array([value]))[0])

    def true_costs(self, observation) -> dict:
        return goal_costs(observation.particles, self.goal, self._grid)


class OracleBackend:
    """Plans directly through the simulator from the observed particles."""

    def __init__(self, env: BlobEnv, goal: GoalSpec, horizon: int, cost_name: str = "chamfer"):
        self.env = env
        self.goal = goal
        self.horizon = horizon
        self.cost_name = cost_name
        self._grid = default_grid_spec(env.config)
        self._particles = None

    def reset(self) -> None:
        self._particles = None

    def observe(self, observation, prev_action=None) -> None:
        self._particles = np.array(observation.particles, dtype=np.float64)

    def make_problem(self) -> OraclePlanProblem:
        if self._particles is None:
            raise RuntimeError("OracleBackend: observe() must run before planning")
        return OraclePlanProblem(self._particles, self.env, self.goal, self.cost_name, self.horizon)

    def predicted_reward(self) -> float:
        return -training_cost(self._particles, self.goal, self.cost_name, self._grid)

    def true_costs(self, observation) -> dict:
        return goal_costs(observation.particles, self.goal, self._grid)
