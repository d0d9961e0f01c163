"""Data collection and the two-phase training schedule.

Phase one trains encoder and decoder jointly on the pixel reconstruction
loss. Phase two freezes them (asserted by hash) and trains the dynamics
model on precomputed embeddings. When interleaved refresh is enabled the
dynamics loop re-reads the representation checkpoint on a fixed epoch
cadence and recomputes embeddings if its weights changed on disk (that
supports a concurrently running representation job; within this process
the encoder is never touched).
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import episodes as epio
from .autodiff import Adam, Tensor
from .checkpoint import load_params, params_digest, save_params
from .config import RunConfig
from .control import LearnedBackend, ModelBundle, Normalization, default_grid_spec, training_cost
from .encoder import LatentEmbedding, encode_features, init_encoder_params
from .env import BlobEnv, GoalSpec, action_bounds, default_cameras, goal_from_particles, make_goal
from .geometry import farthest_point_downsample, fuse_depth_views, ransac_remove_outliers
from .nerf import (
    RayBatch,
    generate_rays,
    init_decoder_params,
    psnr,
    reconstruction_loss,
    render_rays,
    stratified_sample,
)
from .rng import derive_seed, make_rng, spawn_rng
from .planner import mpc_loop
from .rssm import dynamics_loss, init_rssm_params

GOAL_FILE = "goal.dfne"

__all__ = [
    "collect",
    "train_representation",
    "train_dynamics",
    "augment_dataset",
    "load_dataset",
    "load_goal",
    "load_bundle",
    "Dataset",
]


# ---------------------------------------------------------------- collection


def _frames_to_arrays(frames) -> tuple[np.ndarray, np.ndarray]:
    rgb = np.stack([f[0] for f in frames]).astype(np.float32)
    depth = np.stack([f[1] for f in frames]).astype(np.float32)
    return rgb, depth


def _simulate_episode(config: RunConfig, goal: GoalSpec, ep_index: int, provenance: str,
                      actions: np.ndarray | None = None) -> epio.Episode:
    env = BlobEnv(config.env, goal=goal)
    env.reset()
    grid = default_grid_spec(config.env)
    if actions is None:
        rng = spawn_rng(config.seed, "collect", ep_index)
        lo, hi = action_bounds(config.env)
        actions = rng.uniform(lo, hi, (config.episode_horizon, len(lo)))

    rgb_all, depth_all, sup_all, particles_all, costs_all = [], [], [], [], []

    def record():
        obs = env.observe()
        rgb, depth = _frames_to_arrays(obs.frames)
        sup_rgb, _ = _frames_to_arrays(obs.supervision_frames)
        rgb_all.append(rgb)
        depth_all.append(depth)
        sup_all.append(sup_rgb)
        particles_all.append(obs.particles)
        costs_all.append(training_cost(obs.particles, goal, config.cost_name, grid))

    record()
    for action in actions:
        env.step(action)
        record()

    metadata = {
        "episode": ep_index,
        "provenance": provenance,
        "goal": goal.name,
        "cost_name": config.cost_name,
        "resolution": config.env.resolution,
        "supervision_resolution": config.env.supervision_resolution,
        "n_cameras": config.env.n_cameras,
        "action_mode": config.env.action_mode,
        "seed": config.seed,
    }
    arrays = {
        "actions": np.asarray(actions, dtype=np.float64),
        "particles": np.stack(particles_all),
        "costs": np.asarray(costs_all, dtype=np.float64),
        "rgb": np.stack(rgb_all),
        "depth": np.stack(depth_all),
        "rgb_sup": np.stack(sup_all),
    }
    return epio.Episode(metadata=metadata, arrays=arrays)


def _collect_worker(args) -> str:
    config_dict, ep_index, directory = args
    config = RunConfig.from_dict(config_dict)
    goal = make_goal(config.goal, config.env)
    episode = _simulate_episode(config, goal, ep_index, "random")
    filename = f"episode_{ep_index:05d}.dfne"
    epio.write_episode(Path(directory) / filename, episode)
    return filename


def collect(config: RunConfig, directory, n_episodes: int | None = None) -> Path:
    """Simulate seeded uniform-random episodes into a dataset directory.

    Per-episode seeds are derived from (config.seed, episode index), so the
    dataset bytes are identical regardless of worker count.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    probe = directory / ".write_probe"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise OSError(f"dataset directory {directory} is not writable: {err}") from err

    n_episodes = config.collect_episodes if n_episodes is None else n_episodes
    goal = make_goal(config.goal, config.env)
    epio.write_arrays(
        directory / GOAL_FILE,
        {"goal": goal.name, "cost_name": config.cost_name},
        {
            "particles": goal.particles,
            "rgb": np.stack([f[0] for f in goal.frames]).astype(np.float32),
            "depth": np.stack([f[1] for f in goal.frames]).astype(np.float32),
        },
    )

    jobs = [(config.to_dict(), i, str(directory)) for i in range(n_episodes)]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            filenames = list(pool.map(_collect_worker, jobs))
    else:
        filenames = [_collect_worker(job) for job in jobs]

    recorded = config.to_dict()
    recorded.pop("out_dir", None)  # run-local; keep dataset bytes location-independent
    recorded.pop("threads", None)
    manifest = epio.Manifest(metadata={"config": recorded, "goal": goal.name, "episodes": n_episodes})
    for i, filename in enumerate(filenames):
        manifest.add(directory, filename, "random", config.episode_horizon)
    manifest.save(directory)
    return directory


# ------------------------------------------------------------------- loading


@dataclass
class Dataset:
    directory: Path
    manifest: epio.Manifest
    episodes: list  # of epio.Episode
    goal: GoalSpec


def load_goal(directory, config: RunConfig) -> GoalSpec:
    metadata, arrays = epio.read_arrays(Path(directory) / GOAL_FILE)
    goal = goal_from_particles(metadata["goal"], arrays["particles"], config.env)
    # use the stored frames (they are the canonical rendered goal observation)
    goal.frames = [
        (arrays["rgb"][i].astype(np.float64), arrays["depth"][i].astype(np.float64))
        for i in range(len(arrays["rgb"]))
    ]
    return goal


def load_dataset(directory, config: RunConfig, verify: bool = True) -> Dataset:
    directory = Path(directory)
    manifest = epio.Manifest.load(directory)
    if verify:
        manifest.verify(directory)
    eps = [epio.read_episode(p) for p in manifest.paths(directory)]
    for ep in eps:
        ep.validate()
    return Dataset(directory=directory, manifest=manifest, episodes=eps, goal=load_goal(directory, config))


# ----------------------------------------------------- representation phase


def _observation_cloud_features(episode: epio.Episode, step: int, config: RunConfig,
                                cameras) -> np.ndarray:
    """Fused, cropped, optionally cleaned, downsampled (n, 6) encoder input."""
    frames = [
        (episode.arrays["rgb"][step, c].astype(np.float64), episode.arrays["depth"][step, c].astype(np.float64))
        for c in range(config.env.n_cameras)
    ]
    cloud = fuse_depth_views(frames, cameras, crop_box=config.env.workspace)
    if config.training.apply_ransac and len(cloud) >= 3:
        cloud, _ = ransac_remove_outliers(cloud, spawn_rng(config.seed, "ransac"))
    if len(cloud) == 0:
        raise ValueError(f"episode {episode.metadata.get('episode')} step {step}: empty cloud")
    positions, colors = cloud.positions, cloud.colors
    if len(cloud) > config.encoder.point_budget:
        idx = farthest_point_downsample(positions, config.encoder.point_budget, make_rng(0))
        positions, colors = positions[idx], colors[idx]
    return np.concatenate([config.env.workspace.normalize(positions), colors], axis=1)


def _precompute_clouds(dataset: Dataset, config: RunConfig) -> list[list[np.ndarray]]:
    cameras = default_cameras(config.env)
    return [
        [
            _observation_cloud_features(ep, step, config, cameras)
            for step in range(ep.steps + 1)
        ]
        for ep in dataset.episodes
    ]


def _write_curve(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def train_representation(dataset: Dataset, config: RunConfig, out_dir) -> Path:
    """Joint encoder + decoder training on random pixel batches.

    Writes `representation.dfnw` plus a training-curve CSV. On a NaN loss
    the last good checkpoint (saved every 100 steps) is retained and a
    RuntimeError is raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "representation.dfnw"
    tc = config.training

    clouds = _precompute_clouds(dataset, config)
    sup_cameras = default_cameras(config.env, config.env.supervision_resolution)
    sup_rays = [generate_rays(cam) for cam in sup_cameras]

    observations = [
        (ep_i, step)
        for ep_i, ep in enumerate(dataset.episodes)
        for step in range(ep.steps + 1)
    ]
    if tc.max_frames:
        observations = observations[: tc.max_frames]

    rng = spawn_rng(config.seed, "train-repr")
    enc_params = init_encoder_params(config.encoder, spawn_rng(config.seed, "enc-init"))
    dec_params = init_decoder_params(
        config.decoder, config.encoder.deform_dim, config.encoder.appearance_dim,
        spawn_rng(config.seed, "dec-init"),
    )
    params = {**enc_params, **dec_params}
    opt = Adam(params, lr=tc.representation_lr)

    rays_per_view = max(8, tc.rays_per_step // max(tc.views_per_step, 1))
    curve: list[dict] = []
    last_good = {k: v.data.copy() for k, v in params.items()}

    for step in range(tc.representation_steps):
        losses = []
        for _ in range(tc.views_per_step):
            ep_i, t = observations[rng.integers(len(observations))]
            feats = clouds[ep_i][t]
            emb = LatentEmbedding(
                full=encode_features(Tensor(feats), params, config.encoder),
                deform_dim=config.encoder.deform_dim,
            )
            cam_i = int(rng.integers(config.env.n_cameras))
            all_rays = sup_rays[cam_i]
            pix = rng.choice(len(all_rays), size=min(rays_per_view, len(all_rays)), replace=False)
            pix.sort()
            sub = RayBatch(all_rays.origins[pix], all_rays.directions[pix], all_rays.near, all_rays.far)
            samples = stratified_sample(sub, tc.samples_per_ray, rng)
            rendered = render_rays(
                sub, samples, emb.deformation, emb.appearance, params, config.decoder,
                config.env.workspace,
            )
            target = dataset.episodes[ep_i].arrays["rgb_sup"][t, cam_i].reshape(-1, 3)[pix]
            losses.append(reconstruction_loss(rendered, target))
        loss = losses[0] if len(losses) == 1 else sum(losses[1:], start=losses[0]) * (1.0 / len(losses))
        value = loss.item()
        if not np.isfinite(value):
            save_params(ckpt_path, last_good)
            _write_curve(out_dir / "representation_curve.csv", curve)
            raise RuntimeError(f"train_representation: non-finite loss at step {step}; last good checkpoint kept")
        loss.backward()
        opt.step()
        curve.append({"step": step, "loss": f"{value:.10g}", "psnr": f"{psnr(value):.6g}"})
        if step % 100 == 99:
            last_good = {k: v.data.copy() for k, v in params.items()}

    save_params(ckpt_path, params)
    _write_curve(out_dir / "representation_curve.csv", curve)
    return ckpt_path


# ---------------------------------------------------------- dynamics phase


def _split_params(params: dict, prefix: str) -> dict:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def compute_embeddings(dataset: Dataset, enc_params: dict, config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-encoder embeddings for every (episode, step) plus the goal."""
    clouds = _precompute_clouds(dataset, config)
    embeds = np.stack(
        [
            np.stack(
                [
                    encode_features(Tensor(feats), enc_params, config.encoder).data
                    for feats in per_episode
                ]
            )
            for per_episode in clouds
        ]
    )
    cameras = default_cameras(config.env)
    goal_cloud = fuse_depth_views(dataset.goal.frames, cameras, crop_box=config.env.workspace)
    positions, colors = goal_cloud.positions, goal_cloud.colors
    if len(goal_cloud) > config.encoder.point_budget:
        idx = farthest_point_downsample(positions, config.encoder.point_budget, make_rng(0))
        positions, colors = positions[idx], colors[idx]
    goal_feats = np.concatenate([config.env.workspace.normalize(positions), colors], axis=1)
    goal_embed = encode_features(Tensor(goal_feats), enc_params, config.encoder).data
    return embeds, goal_embed


def train_dynamics(dataset: Dataset, repr_ckpt, config: RunConfig, out_dir) -> Path:
    """Dynamics training on frozen-encoder embeddings.

    Writes `dynamics.dfnw` (model weights plus the embedding/reward
    normalizations under "norm/") and a curve CSV. The encoder weights are
    hash-checked before and after.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "dynamics.dfnw"
    tc = config.training

    repr_params = load_params(repr_ckpt, requires_grad=False)
    enc_params = _split_params(repr_params, "encoder/")
    enc_digest_before = params_digest(enc_params)
    repr_digest = params_digest(repr_params)

    embeds, goal_embed = compute_embeddings(dataset, enc_params, config)
    embed_norm = Normalization.fit(embeds)
    embeds_n = embed_norm.apply(embeds)
    goal_n = embed_norm.apply(goal_embed)

    rewards = -np.stack([ep.arrays["costs"] for ep in dataset.episodes])
    reward_norm = Normalization.fit(rewards.reshape(-1, 1))
    rewards_n = reward_norm.apply(rewards[..., None])[..., 0]
    actions = np.stack([ep.arrays["actions"] for ep in dataset.episodes])

    params = init_rssm_params(config.rssm, spawn_rng(config.seed, "rssm-init"))
    opt = Adam(params, lr=tc.dynamics_lr)
    rng = spawn_rng(config.seed, "train-dyn")

    n_eps = len(dataset.episodes)
    steps_per_epoch = max(1, n_eps // tc.dynamics_batch)
    curve: list[dict] = []
    last_good = {k: v.data.copy() for k, v in params.items()}

    for step in range(tc.dynamics_steps):
        if (
            tc.interleaved_refresh
            and step > 0
            and step % (tc.refresh_every_epochs * steps_per_epoch) == 0
        ):
            fresh = load_params(repr_ckpt, requires_grad=False)
            if params_digest(fresh) != repr_digest:
                repr_params, repr_digest = fresh, params_digest(fresh)
                enc_params = _split_params(repr_params, "encoder/")
                embeds, goal_embed = compute_embeddings(dataset, enc_params, config)
                embeds_n = embed_norm.apply(embeds)
                goal_n = embed_norm.apply(goal_embed)

        pick = rng.choice(n_eps, size=min(tc.dynamics_batch, n_eps), replace=False)
        pick.sort()
        batch = {
            "embeddings": embeds_n[pick],
            "actions": actions[pick],
            "rewards": rewards_n[pick],
            "goal": goal_n,
        }
        loss, diag = dynamics_loss(batch, params, config.rssm, rng)
        value = loss.item()
        if not np.isfinite(value):
            save_params(ckpt_path, _with_norms(last_good, embed_norm, reward_norm))
            _write_curve(out_dir / "dynamics_curve.csv", curve)
            raise RuntimeError(f"train_dynamics: non-finite loss at step {step}; last good checkpoint kept")
        loss.backward()
        opt.step()
        curve.append(
            {
                "step": step,
                "loss": f"{value:.10g}",
                "embed_mse_per_dim": f"{diag['embed_mse_per_dim']:.10g}",
                "reward_nll": f"{diag['reward_nll']:.10g}",
                "kl_nats": f"{diag['kl_nats']:.10g}",
            }
        )
        if step % 100 == 99:
            last_good = {k: v.data.copy() for k, v in params.items()}

    if params_digest(enc_params) != enc_digest_before:
        raise RuntimeError("train_dynamics: encoder weights changed during dynamics training")

    save_params(ckpt_path, _with_norms(params, embed_norm, reward_norm))
    _write_curve(out_dir / "dynamics_curve.csv", curve)
    return ckpt_path


def _with_norms(params: dict, embed_norm: Normalization, reward_norm: Normalization) -> dict:
    out = dict(params)
    out["norm/embed_mean"] = Tensor(embed_norm.mean)
    out["norm/embed_std"] = Tensor(embed_norm.std)
    out["norm/reward_mean"] = Tensor(reward_norm.mean)
    out["norm/reward_std"] = Tensor(reward_norm.std)
    return out


def load_bundle(repr_ckpt, dyn_ckpt, config: RunConfig) -> ModelBundle:
    repr_params = load_params(repr_ckpt, requires_grad=False)
    dyn_params = load_params(dyn_ckpt, requires_grad=False)
    embed_norm = Normalization(dyn_params["norm/embed_mean"].data, dyn_params["norm/embed_std"].data)
    reward_norm = Normalization(dyn_params["norm/reward_mean"].data, dyn_params["norm/reward_std"].data)
    return ModelBundle(
        encoder_config=config.encoder,
        encoder_params=_split_params(repr_params, "encoder/"),
        rssm_config=config.rssm,
        rssm_params=_split_params(dyn_params, "rssm/"),
        crop_box=config.env.workspace,
        embed_norm=embed_norm,
        reward_norm=reward_norm,
        decoder_config=config.decoder,
        decoder_params=_split_params(repr_params, "decoder/"),
    )


# ------------------------------------------------------------- augmentation


def augment_dataset(dataset_dir, bundle: ModelBundle, config: RunConfig, n_episodes: int) -> int:
    """Append planner-generated episodes; returns how many were added.

    Episodes where planning fails are skipped with a log line; the
    manifest is updated with provenance "planned".
    """
    directory = Path(dataset_dir)
    manifest = epio.Manifest.load(directory)
    goal = load_goal(directory, config)
    added = 0
    start = len(manifest.episodes)
    for i in range(n_episodes):
        index = start + i
        try:
            env = BlobEnv(config.env, goal=goal)
            env.reset()
            backend = LearnedBackend(
                bundle, config.env, goal, config.plan_horizon, config.cost_name,
                seed=derive_seed(config.seed, "augment", index),
            )
            result = mpc_loop(
                env, backend, config.planner, spawn_rng(config.seed, "augment-plan", index),
                max_steps=config.episode_horizon, reward_threshold=np.inf,
            )
            acts = np.asarray(result.actions, dtype=np.float64)
            if len(acts) < config.episode_horizon:  # pad with no-ops far from the blob
                lo, hi = action_bounds(config.env)
                pad = np.tile(lo, (config.episode_horizon - len(acts), 1))
                acts = np.concatenate([acts, pad], axis=0)
            episode = _simulate_episode(config, goal, index, "planned", actions=acts)
            filename = f"episode_{index:05d}.dfne"
            epio.write_episode(directory / filename, episode)
            manifest.add(directory, filename, "planned", config.episode_horizon)
            added += 1
        except Exception as err:  # noqa: BLE001 - skip-and-continue is the contract
            print(f"augment: skipping episode {index}: {err}")
    manifest.save(directory)
    return added
