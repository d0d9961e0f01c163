"""Permutation-invariant set encoder producing a split latent embedding.

Each point contributes a 6-vector (crop-box-normalized position, RGB color)
to a shared per-point MLP; a max-pool over points gives exact permutation
invariance, and a small head maps the pooled feature to the embedding. The
embedding's first ``deform_dim`` entries condition shape (density); the
remaining ``appearance_dim`` entries condition color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import AxisAlignedBox, PointCloud, farthest_point_downsample
from .rng import make_rng

__all__ = [
    "EncoderConfig",
    "LatentEmbedding",
    "init_encoder_params",
    "encode",
    "encode_features",
    "split_embedding",
]


@dataclass(frozen=True)
class EncoderConfig:
    point_widths: tuple[int, ...] = (64, 128, 256)
    head_widths: tuple[int, ...] = (128,)
    deform_dim: int = 128
    appearance_dim: int = 128
    point_budget: int = 1024

    @property
    def embed_dim(self) -> int:
        return self.deform_dim + self.appearance_dim


@dataclass
class LatentEmbedding:
    """Full embedding plus the documented split convention.

    The deformation part is the first ``deform_dim`` entries of ``full``;
    the appearance part is the rest.
    """

    full: Tensor
    deform_dim: int

    @property
    def deformation(self) -> Tensor:
        return self.full[: self.deform_dim]

    @property
    def appearance(self) -> Tensor:
        return self.full[self.deform_dim :]

    @property
    def values(self) -> np.ndarray:
        return self.full.data


def _init_linear(params, prefix, fan_in, fan_out, rng, scale=None):
    scale = np.sqrt(2.0 / fan_in) if scale is None else scale
    params[f"{prefix}/w"] = Tensor(
        rng.standard_normal((fan_in, fan_out)) * scale, requires_grad=True, name=f"{prefix}/w"
    )
    params[f"{prefix}/b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}/b")


def _linear(params, prefix, x: Tensor) -> Tensor:
    return ad.matmul(x, params[f"{prefix}/w"]) + params[f"{prefix}/b"]


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    fan_in = 6
    for i, width in enumerate(config.point_widths):
        _init_linear(params, f"encoder/point{i}", fan_in, width, rng)
        fan_in = width
    for i, width in enumerate(config.head_widths):
        _init_linear(params, f"encoder/head{i}", fan_in, width, rng)
        fan_in = width
    _init_linear(params, "encoder/out", fan_in, config.embed_dim, rng, scale=np.sqrt(1.0 / fan_in))
    return params


def encode_features(features: Tensor, params: dict[str, Tensor], config: EncoderConfig) -> Tensor:
    """Run the network on an (n, 6) feature tensor; returns the embedding."""
    h = features
    for i in range(len(config.point_widths)):
        h = ad.relu(_linear(params, f"encoder/point{i}", h))
    pooled = h.max(axis=0)
    g = pooled.reshape(1, -1)
    for i in range(len(config.head_widths)):
        g = ad.relu(_linear(params, f"encoder/head{i}", g))
    out = _linear(params, "encoder/out", g)
    return out.reshape(config.embed_dim)


def encode(
    cloud: PointCloud,
    params: dict[str, Tensor],
    config: EncoderConfig,
    crop_box: AxisAlignedBox,
    downsample_seed: int = 0,
) -> LatentEmbedding:
    """Embed a point cloud; permutation-invariant, deterministic given the seed.

    Clouds larger than the point budget are farthest-point downsampled
    first (seeded). Positions are normalized to the crop box.
    """
    if len(cloud) == 0:
        raise ValueError("encode: cannot encode an empty point cloud")
    positions, colors = cloud.positions, cloud.colors
    if len(cloud) > config.point_budget:
        idx = farthest_point_downsample(positions, config.point_budget, make_rng(downsample_seed))
        positions, colors = positions[idx], colors[idx]
    feats = np.concatenate([crop_box.normalize(positions), colors], axis=1)
    full = encode_features(Tensor(feats), params, config)
    return LatentEmbedding(full=full, deform_dim=config.deform_dim)


def split_embedding(full, deform_dim: int, appearance_dim: int):
    """Slice a full embedding into (deformation, appearance) parts.

    Accepts a Tensor or array of length deform_dim + appearance_dim;
    concatenating the two parts back recovers the input exactly.
    """
    length = full.shape[0] if hasattr(full, "shape") else len(full)
    if length != deform_dim + appearance_dim:
        raise ValueError(
            f"split_embedding: length {length} != {deform_dim} + {appearance_dim}"
        )
    return full[:deform_dim], full[deform_dim:]
