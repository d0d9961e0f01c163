"""Closed-loop evaluation: metrics tables, trajectory logs, rendered frames.

Each trial runs the MPC loop against the toy environment with either the
learned models or the oracle backend, then reports initial and final true
costs. Tables follow the raw-meters convention with an extra x100 column
for the distance metrics.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig
from .control import LearnedBackend, ModelBundle, OracleBackend, goal_costs, default_grid_spec
from .env import BlobEnv, GoalSpec, action_bounds, default_cameras
from .geometry import farthest_point_downsample, fuse_depth_views
from .encoder import encode
from .nerf import render_image
from .planner import mpc_loop
from .rng import derive_seed, make_rng, spawn_rng

__all__ = ["EvalReport", "evaluate", "random_policy_costs", "write_png", "render_latent_views"]

SCALED_METRICS = ("chamfer", "emd", "d2cd")  # reported raw and x100


@dataclass
class EvalReport:
    goal: str
    backend: str
    trials: list = field(default_factory=list)  # per-trial {seed, initial..., final...}
    table: dict = field(default_factory=dict)  # metric -> (mean, std)

    def summary_rows(self) -> list[dict]:
        rows = []
        for metric, (mean, std) in sorted(self.table.items()):
            row = {
                "goal": self.goal,
                "backend": self.backend,
                "metric": metric,
                "mean": f"{mean:.10g}",
                "std": f"{std:.10g}",
            }
            base = metric.replace("final_", "").replace("initial_", "")
            if base in SCALED_METRICS:
                row["mean_x100"] = f"{mean * 100:.10g}"
                row["std_x100"] = f"{std * 100:.10g}"
            else:
                row["mean_x100"] = ""
                row["std_x100"] = ""
            rows.append(row)
        return rows


def _aggregate(trials: list[dict]) -> dict:
    keys = [k for k in trials[0] if k != "seed"]
    return {
        k: (float(np.mean([t[k] for t in trials])), float(np.std([t[k] for t in trials])))
        for k in keys
    }


def evaluate(
    config: RunConfig,
    goal: GoalSpec,
    bundle: ModelBundle | None,
    out_dir,
    backend_name: str = "learned",
    trials: int | None = None,
    render_final: bool = True,
) -> EvalReport:
    """Run seeded closed-loop trials; writes metrics.csv, logs, and PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trials = config.eval_trials if trials is None else trials

    results = []
    for trial in range(trials):
        trial_seed = derive_seed(config.seed, "eval", backend_name, goal.name, trial)
        env = BlobEnv(config.env, goal=goal)
        env.reset()
        if backend_name == "learned":
            if bundle is None:
                raise ValueError("learned evaluation needs a model bundle")
            backend = LearnedBackend(
                bundle, config.env, goal, config.plan_horizon, config.cost_name, seed=trial_seed
            )
        elif backend_name == "oracle":
            backend = OracleBackend(env, goal, config.plan_horizon, config.cost_name)
        else:
            raise ValueError(f"unknown backend {backend_name!r}")
        result = mpc_loop(
            env,
            backend,
            config.planner,
            spawn_rng(trial_seed, "plan"),
            max_steps=config.eval_max_steps,
            reward_threshold=config.reward_threshold,
        )
        record = {"seed": trial}
        for k, v in result.initial_costs.items():
            record[f"initial_{k}"] = v
        for k, v in result.final_costs.items():
            record[f"final_{k}"] = v
        results.append(record)

        log_path = out_dir / f"trial_{goal.name}_{backend_name}_{trial:03d}.json"
        log_path.write_text(
            json.dumps(
                {
                    "trial": trial,
                    "initial_costs": result.initial_costs,
                    "final_costs": result.final_costs,
                    "terminated_early": result.terminated_early,
                    "steps": result.step_logs,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        if render_final and trial == 0:
            obs = env.observe()
            write_png(out_dir / f"final_{goal.name}_{backend_name}_view0.png", obs.frames[0][0])
            if bundle is not None and bundle.decoder_params:
                imgs = render_latent_views(bundle, config, obs)
                for i, img in enumerate(imgs):
                    write_png(out_dir / f"final_{goal.name}_{backend_name}_render{i}.png", img)

    report = EvalReport(goal=goal.name, backend=backend_name, trials=results, table=_aggregate(results))
    _write_metrics_csv(out_dir / "metrics.csv", report)
    return report


def _write_metrics_csv(path: Path, report: EvalReport) -> None:
    rows = report.summary_rows()
    exists = path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        if not exists:
            writer.writeheader()
        writer.writerows(rows)


def random_policy_costs(config: RunConfig, goal: GoalSpec, trials: int) -> list[dict]:
    """Uniform-random action baseline, measured by the same machinery."""
    grid = default_grid_spec(config.env)
    lo, hi = action_bounds(config.env)
    out = []
    for trial in range(trials):
        rng = spawn_rng(config.seed, "random-baseline", goal.name, trial)
        env = BlobEnv(config.env, goal=goal)
        env.reset()
        record = {"seed": trial}
        for k, v in goal_costs(env.state.particles, goal, grid).items():
            record[f"initial_{k}"] = v
        for _ in range(config.eval_max_steps):
            env.step(rng.uniform(lo, hi))
        for k, v in goal_costs(env.state.particles, goal, grid).items():
            record[f"final_{k}"] = v
        out.append(record)
    return out


def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(Path(path))


def render_latent_views(bundle: ModelBundle, config: RunConfig, observation, n_views: int = 1):
    """Decode the current observation's latent back to images (inspection aid)."""
    cameras = default_cameras(config.env)
    cloud = fuse_depth_views(observation.frames, cameras, crop_box=bundle.crop_box)
    positions, colors = cloud.positions, cloud.colors
    if len(cloud) > bundle.encoder_config.point_budget:
        idx = farthest_point_downsample(positions, bundle.encoder_config.point_budget, make_rng(0))
        positions, colors = positions[idx], colors[idx]
    from .geometry import PointCloud

    emb = encode(
        PointCloud(positions, colors), bundle.encoder_params, bundle.encoder_config, bundle.crop_box
    )
    sup_cams = default_cameras(config.env, config.env.supervision_resolution)
    return [
        render_image(
            sup_cams[i], emb.deformation, emb.appearance, bundle.decoder_params,
            bundle.decoder_config, bundle.crop_box,
        )
        for i in range(n_views)
    ]
