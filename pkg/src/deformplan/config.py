"""Run configuration: one JSON document with per-module sections.

Defaults are desk-scale (small latents, few samples) so the full pipeline
runs on a workstation CPU in minutes; every field can be overridden from
the config file. ``RunConfig.from_file`` validates against the dataclass
fields and rejects unknown keys, so typos fail fast.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoder import EncoderConfig
from .env import EnvConfig
from .geometry import AxisAlignedBox
from .nerf import DecoderConfig
from .planner import PlannerConfig
from .rssm import RSSMConfig

__all__ = ["TrainingConfig", "RunConfig", "load_config", "desk_encoder", "desk_decoder", "desk_rssm"]


@dataclass(frozen=True)
class TrainingConfig:
    representation_steps: int = 1500
    representation_lr: float = 2e-3
    rays_per_step: int = 192
    samples_per_ray: int = 16
    views_per_step: int = 2  # observations contributing rays to one gradient step
    dynamics_steps: int = 3000
    dynamics_lr: float = 2e-3
    dynamics_batch: int = 16
    refresh_every_epochs: int = 50  # representation refresh cadence (interleaved mode)
    interleaved_refresh: bool = False
    representation_refresh_steps: int = 100
    max_frames: int = 0  # 0 = use the whole dataset
    apply_ransac: bool = False  # synthetic frames have no support plane


def desk_encoder(env: EnvConfig) -> EncoderConfig:
    return EncoderConfig(
        point_widths=(32, 64, 128),
        head_widths=(64,),
        deform_dim=32,
        appearance_dim=32,
        point_budget=1024,
    )


def desk_decoder() -> DecoderConfig:
    return DecoderConfig(
        pos_bands=6,
        dir_bands=4,
        density_widths=(96, 96, 96),
        color_widths=(64,),
        samples_per_ray=24,
    )


def desk_rssm(encoder: EncoderConfig, env: EnvConfig) -> RSSMConfig:
    return RSSMConfig(
        deter_dim=96,
        num_categoricals=8,
        num_classes=8,
        embed_dim=encoder.embed_dim,
        action_dim=4 if env.action_mode == "push" else 5,
        hidden=96,
    )


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    goal: str = "split"
    cost_name: str = "chamfer"
    episode_horizon: int = 5
    collect_episodes: int = 100
    eval_trials: int = 10
    eval_max_steps: int = 6
    plan_horizon: int = 3
    reward_threshold: float = float("inf")
    env: EnvConfig = field(default_factory=EnvConfig)
    encoder: EncoderConfig = None  # filled from env defaults when absent
    decoder: DecoderConfig = field(default_factory=desk_decoder)
    rssm: RSSMConfig = None
    planner: PlannerConfig = field(
        default_factory=lambda: PlannerConfig(
            population=48, elites=8, iterations=5, grad_steps=2, grad_lr=0.05, refine_count=6
        )
    )
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if self.encoder is None:
            self.encoder = desk_encoder(self.env)
        if self.rssm is None:
            self.rssm = desk_rssm(self.encoder, self.env)
        if self.rssm.embed_dim != self.encoder.embed_dim:
            raise ValueError(
                f"rssm.embed_dim ({self.rssm.embed_dim}) must equal encoder embed_dim "
                f"({self.encoder.embed_dim})"
            )
        expected_action = 4 if self.env.action_mode == "push" else 5
        if self.rssm.action_dim != expected_action:
            raise ValueError(
                f"rssm.action_dim ({self.rssm.action_dim}) does not match "
                f"{self.env.action_mode!r} actions ({expected_action})"
            )

    def to_dict(self) -> dict:
        return _encode(self)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        return _decode_runconfig(data)


def _encode(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _encode(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, float) and obj == float("inf"):
        return "inf"
    return obj


_SECTION_TYPES = {
    "env": EnvConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "rssm": RSSMConfig,
    "planner": PlannerConfig,
    "training": TrainingConfig,
}


def _build_dataclass(cls, data: dict):
    names = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown config keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "workspace" and isinstance(value, dict):
            value = AxisAlignedBox(lo=tuple(value["lo"]), hi=tuple(value["hi"]))
        elif isinstance(value, list):
            value = tuple(value)
        elif value == "inf":
            value = float("inf")
        kwargs[key] = value
    return cls(**kwargs)


def _decode_runconfig(data: dict) -> RunConfig:
    data = dict(data)
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES and isinstance(value, dict):
            kwargs[key] = _build_dataclass(_SECTION_TYPES[key], value)
        elif key == "reward_threshold" and value == "inf":
            kwargs[key] = float("inf")
        else:
            kwargs[key] = value
    known = {f.name for f in fields(RunConfig)}
    unknown = set(kwargs) - known
    if unknown:
        raise ValueError(f"RunConfig: unknown config keys {sorted(unknown)}")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
