"""Conditional radiance-field decoder and volumetric rendering.

The density head sees only the positional encoding of the query point and
the deformation latent; the color head sees the density feature, the
appearance latent, and the encoded view direction. That separation is
structural: appearance can never influence geometry.

Quadrature along a ray with ascending sample depths a_i and gaps
d_i = a_{i+1} - a_i (last gap runs to the far bound):

    C = sum_i T_i * (1 - exp(-sigma_i d_i)) * c_i,   T_i = exp(-sum_{j<i} sigma_j d_j)

plus leftover transmittance times a configurable background color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import _init_linear, _linear
from .geometry import AxisAlignedBox, Camera

__all__ = [
    "DecoderConfig",
    "RayBatch",
    "RaySampleBatch",
    "init_decoder_params",
    "generate_rays",
    "stratified_sample",
    "positional_encoding",
    "density_field",
    "render_rays",
    "render_image",
    "reconstruction_loss",
    "psnr",
]

FEATURE_DIM = 256  # density-head feature width consumed by the color head


@dataclass(frozen=True)
class DecoderConfig:
    pos_bands: int = 6
    dir_bands: int = 4
    density_widths: tuple[int, ...] = (256, 256, 256, 256)
    color_widths: tuple[int, ...] = (128,)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    samples_per_ray: int = 64


@dataclass
class RayBatch:
    origins: np.ndarray  # (r, 3)
    directions: np.ndarray  # (r, 3), unit norm
    near: float
    far: float

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        norms = np.linalg.norm(self.directions, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("ray directions must be unit vectors")
        if not self.near < self.far:
            raise ValueError(f"need near < far, got {self.near} >= {self.far}")

    def __len__(self):
        return len(self.origins)


@dataclass
class RaySampleBatch:
    """Per-ray ascending sample depths, their world positions, and gaps."""

    depths: np.ndarray  # (r, s)
    positions: np.ndarray  # (r, s, 3)
    deltas: np.ndarray  # (r, s); last delta runs to the far bound

    def __post_init__(self):
        if np.any(np.diff(self.depths, axis=1) <= 0):
            raise ValueError("sample depths must be strictly ascending per ray")
        if np.any(self.deltas <= 0):
            raise ValueError("sample deltas must be positive")


def generate_rays(camera: Camera, pixels: np.ndarray | None = None) -> RayBatch:
    """Rays through pixel centers (all pixels when ``pixels`` is None)."""
    if pixels is None:
        pixels = camera.pixel_centers()
    origins, dirs = camera.rays_through(pixels)
    return RayBatch(origins=origins, directions=dirs, near=camera.near, far=camera.far)


def stratified_sample(
    rays: RayBatch, n: int, rng: np.random.Generator | None = None
) -> RaySampleBatch:
    """One uniform jitter per bin over [near, far]; bin centers without rng."""
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    r = len(rays)
    width = (rays.far - rays.near) / n
    offsets = rng.random((r, n)) if rng is not None else np.full((r, n), 0.5)
    depths = rays.near + (np.arange(n) + offsets) * width
    positions = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=1)
    deltas[:, -1] = rays.far - depths[:, -1]
    return RaySampleBatch(depths=depths, positions=positions, deltas=deltas)


def positional_encoding(x: np.ndarray, bands: int) -> np.ndarray:
    """[x, sin(2^l x), cos(2^l x)] for l = 0..bands-1 along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for l in range(bands):
        parts.append(np.sin((2.0**l) * np.pi * x))
        parts.append(np.cos((2.0**l) * np.pi * x))
    return np.concatenate(parts, axis=-1)


def init_decoder_params(
    config: DecoderConfig, deform_dim: int, appearance_dim: int, rng: np.random.Generator
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    fan_in = 3 * (1 + 2 * config.pos_bands) + deform_dim
    for i, width in enumerate(config.density_widths):
        _init_linear(params, f"decoder/density{i}", fan_in, width, rng)
        fan_in = width
    _init_linear(
        params, "decoder/density_out", fan_in, 1 + FEATURE_DIM, rng, scale=np.sqrt(1.0 / fan_in)
    )
    # start nearly empty: softplus(-2) is a thin haze that training sharpens
    params["decoder/density_out/b"].data[0] = -2.0

    fan_in = FEATURE_DIM + appearance_dim + 3 * (1 + 2 * config.dir_bands)
    for i, width in enumerate(config.color_widths):
        _init_linear(params, f"decoder/color{i}", fan_in, width, rng)
        fan_in = width
    _init_linear(params, "decoder/color_out", fan_in, 3, rng, scale=np.sqrt(1.0 / fan_in))
    return params


def _expand_latent(latent: Tensor, rows: int) -> Tensor:
    return ad.broadcast_to(latent.reshape(1, -1), (rows, latent.shape[0]))


def density_field(
    points: np.ndarray,
    e_d: Tensor,
    params: dict[str, Tensor],
    config: DecoderConfig,
    crop_box: AxisAlignedBox,
) -> tuple[Tensor, Tensor]:
    """Density and feature for world points; conditioned only on the shape latent.

    Returns (sigma (n,), features (n, FEATURE_DIM)).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pe = positional_encoding(crop_box.normalize(pts), config.pos_bands)
    h = ad.concatenate([Tensor(pe), _expand_latent(e_d, len(pts))], axis=1)
    for i in range(len(config.density_widths)):
        h = ad.relu(_linear(params, f"decoder/density{i}", h))
    out = _linear(params, "decoder/density_out", h)
    sigma = ad.softplus(out[:, 0])
    features = out[:, 1:]
    return sigma, features


def _color_head(
    features: Tensor,
    e_a: Tensor,
    dirs_encoded: np.ndarray,
    params: dict[str, Tensor],
    config: DecoderConfig,
) -> Tensor:
    n = features.shape[0]
    h = ad.concatenate([features, _expand_latent(e_a, n), Tensor(dirs_encoded)], axis=1)
    for i in range(len(config.color_widths)):
        h = ad.relu(_linear(params, f"decoder/color{i}", h))
    return ad.sigmoid(_linear(params, "decoder/color_out", h))


def render_rays(
    rays: RayBatch,
    samples: RaySampleBatch,
    e_d: Tensor,
    e_a: Tensor,
    params: dict[str, Tensor],
    config: DecoderConfig,
    crop_box: AxisAlignedBox,
) -> Tensor:
    """Quadrature colors for a batch of rays, differentiable end to end.

    Output is (r, 3) with every channel in [0, 1]: colors pass a sigmoid
    and the quadrature weights plus leftover transmittance form a convex
    combination with the background color.
    """
    r, s = samples.depths.shape
    flat_pts = samples.positions.reshape(-1, 3)
    sigma_flat, features = density_field(flat_pts, e_d, params, config, crop_box)

    dirs_pe = positional_encoding(rays.directions, config.dir_bands)
    dirs_rep = np.repeat(dirs_pe, s, axis=0)
    colors = _color_head(features, e_a, dirs_rep, params, config).reshape((r, s, 3))

    sigma = sigma_flat.reshape((r, s))
    sig_delta = sigma * Tensor(samples.deltas)
    accum = ad.cumsum(sig_delta, axis=1)
    shifted = ad.concatenate([Tensor(np.zeros((r, 1))), accum[:, :-1]], axis=1)
    transmittance = ad.exp(-shifted)
    alpha = 1.0 - ad.exp(-sig_delta)
    weights = transmittance * alpha
    rgb = (weights.reshape((r, s, 1)) * colors).sum(axis=1)
    leftover = ad.exp(-accum[:, -1]).reshape((r, 1))
    return rgb + leftover * Tensor(np.asarray(config.background))


def render_image(
    camera: Camera,
    e_d,
    e_a,
    params: dict[str, Tensor],
    config: DecoderConfig,
    crop_box: AxisAlignedBox,
    rng: np.random.Generator | None = None,
    chunk: int = 1024,
) -> np.ndarray:
    """Render a full (height, width, 3) image; no gradients are recorded."""
    frozen = {k: v.detach() for k, v in params.items()}
    e_d = e_d if isinstance(e_d, Tensor) else Tensor(e_d)
    e_a = e_a if isinstance(e_a, Tensor) else Tensor(e_a)
    rays = generate_rays(camera)
    out = np.empty((len(rays), 3))
    for start in range(0, len(rays), chunk):
        sub = RayBatch(
            rays.origins[start : start + chunk],
            rays.directions[start : start + chunk],
            rays.near,
            rays.far,
        )
        samples = stratified_sample(sub, config.samples_per_ray, rng)
        out[start : start + len(sub)] = render_rays(
            sub, samples, e_d.detach(), e_a.detach(), frozen, config, crop_box
        ).data
    return out.reshape(camera.height, camera.width, 3)


def reconstruction_loss(rendered: Tensor, truth) -> Tensor:
    """Mean squared error over a pixel batch (mean over pixels and channels)."""
    truth = np.asarray(truth, dtype=np.float64)
    if rendered.shape != truth.shape:
        raise ValueError(
            f"reconstruction_loss: rendered shape {rendered.shape} != truth shape {truth.shape}"
        )
    diff = rendered - Tensor(truth)
    return (diff * diff).mean()


def psnr(mse: float) -> float:
    if mse <= 0:
        return float("inf")
    return -10.0 * float(np.log10(mse))
