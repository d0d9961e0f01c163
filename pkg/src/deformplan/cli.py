"""Command-line harness: collect / train / augment / plan / eval / render.

Global flags come before the subcommand:

    deformplan --config run.json --seed 7 --out runs/exp1 --threads 1 collect

With --threads 1 (the default) the BLAS thread pools are pinned to one
thread before numpy loads, so a whole run is bit-reproducible; larger
values parallelize data collection across worker processes (episode seeds
are derived per index, so results are identical either way).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformplan", description=__doc__)
    parser.add_argument("--config", type=Path, default=None, help="run config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", type=Path, default=None, help="override output directory")
    parser.add_argument("--threads", type=int, default=None, help="worker count (1 = sequential)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the effective configuration")
    p.add_argument("--print-defaults", action="store_true", help="ignore --config and print defaults")

    p = sub.add_parser("collect", help="simulate random episodes into a dataset")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--dataset", type=Path, default=None)

    p = sub.add_parser("train-repr", help="train encoder + decoder on a dataset")
    p.add_argument("--dataset", type=Path, default=None)

    p = sub.add_parser("train-dyn", help="train the dynamics model (frozen encoder)")
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--repr", dest="repr_ckpt", type=Path, default=None)

    p = sub.add_parser("augment", help="append planner-generated episodes to a dataset")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--repr", dest="repr_ckpt", type=Path, default=None)
    p.add_argument("--dyn", dest="dyn_ckpt", type=Path, default=None)

    p = sub.add_parser("plan", help="one closed-loop run with the learned models")
    p.add_argument("--goal", type=str, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--repr", dest="repr_ckpt", type=Path, default=None)
    p.add_argument("--dyn", dest="dyn_ckpt", type=Path, default=None)

    p = sub.add_parser("eval", help="closed-loop metrics over seeded trials")
    p.add_argument("--goal", type=str, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--backend", choices=("learned", "oracle", "random"), default="learned")
    p.add_argument("--repr", dest="repr_ckpt", type=Path, default=None)
    p.add_argument("--dyn", dest="dyn_ckpt", type=Path, default=None)

    p = sub.add_parser("render", help="encode an observation and render it back")
    p.add_argument("--goal", type=str, default=None, help="render this goal's observation")
    p.add_argument("--repr", dest="repr_ckpt", type=Path, default=None)
    p.add_argument("--image", type=Path, default=None, help="output PNG path")
    return parser


def _apply_thread_limits(threads: int) -> None:
    if threads <= 1:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, "1")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    threads = args.threads if args.threads is not None else 1
    _apply_thread_limits(threads)

    # imports deferred until after the thread limits are pinned
    from .config import RunConfig, load_config, save_config

    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = str(args.out)
    config.threads = threads

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _dispatch(args, config, out_dir)


def _dispatch(args, config, out_dir: Path) -> int:
    from . import evaluate as ev
    from . import training
    from .config import RunConfig
    from .env import BlobEnv, make_goal
    from .rng import spawn_rng

    dataset_dir = getattr(args, "dataset", None) or out_dir / "dataset"

    if args.command == "config":
        cfg = RunConfig() if args.print_defaults else config
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0

    if args.command == "collect":
        path = training.collect(config, dataset_dir, args.episodes)
        n = args.episodes if args.episodes is not None else config.collect_episodes
        print(f"collected {n} episodes into {path}")
        return 0

    if args.command == "train-repr":
        dataset = training.load_dataset(dataset_dir, config)
        ckpt = training.train_representation(dataset, config, out_dir)
        print(f"representation checkpoint: {ckpt}")
        return 0

    if args.command == "train-dyn":
        dataset = training.load_dataset(dataset_dir, config)
        repr_ckpt = args.repr_ckpt or out_dir / "representation.dfnw"
        ckpt = training.train_dynamics(dataset, repr_ckpt, config, out_dir)
        print(f"dynamics checkpoint: {ckpt}")
        return 0

    repr_ckpt = getattr(args, "repr_ckpt", None) or out_dir / "representation.dfnw"
    dyn_ckpt = getattr(args, "dyn_ckpt", None) or out_dir / "dynamics.dfnw"

    if args.command == "augment":
        bundle = training.load_bundle(repr_ckpt, dyn_ckpt, config)
        added = training.augment_dataset(dataset_dir, bundle, config, args.episodes)
        print(f"appended {added} planned episodes to {dataset_dir}")
        return 0

    goal_name = getattr(args, "goal", None) or config.goal

    if args.command == "plan":
        from .control import LearnedBackend
        from .planner import mpc_loop

        bundle = training.load_bundle(repr_ckpt, dyn_ckpt, config)
        goal = make_goal(goal_name, config.env)
        env = BlobEnv(config.env, goal=goal)
        env.reset()
        backend = LearnedBackend(
            bundle, config.env, goal, config.plan_horizon, config.cost_name, seed=config.seed
        )
        steps = args.steps if args.steps is not None else config.eval_max_steps
        result = mpc_loop(
            env, backend, config.planner, spawn_rng(config.seed, "plan-cli"),
            max_steps=steps, reward_threshold=config.reward_threshold,
        )
        print(json.dumps({
            "goal": goal_name,
            "initial_costs": result.initial_costs,
            "final_costs": result.final_costs,
            "steps": result.step_logs,
        }, indent=2, sort_keys=True))
        return 0

    if args.command == "eval":
        goal = make_goal(goal_name, config.env)
        trials = args.trials
        if args.backend == "random":
            rows = ev.random_policy_costs(config, goal, trials or config.eval_trials)
            table = ev._aggregate(rows)
            report = ev.EvalReport(goal=goal.name, backend="random", trials=rows, table=table)
            ev._write_metrics_csv(out_dir / "metrics.csv", report)
        else:
            bundle = None
            if args.backend == "learned":
                bundle = training.load_bundle(repr_ckpt, dyn_ckpt, config)
            report = ev.evaluate(config, goal, bundle, out_dir, backend_name=args.backend, trials=trials)
        for metric, (mean, std) in sorted(report.table.items()):
            print(f"{goal.name:10s} {report.backend:8s} {metric:20s} {mean:.6f} +- {std:.6f}")
        print(f"metrics written to {out_dir / 'metrics.csv'}")
        return 0

    if args.command == "render":
        from .checkpoint import load_params

        repr_params = load_params(repr_ckpt, requires_grad=False)
        bundle = _render_bundle(config, repr_params)
        goal = make_goal(goal_name, config.env)
        env = BlobEnv(config.env, goal=goal)
        env.reset()
        obs = env.observe()
        image = ev.render_latent_views(bundle, config, obs, n_views=1)[0]
        path = args.image or out_dir / "render.png"
        ev.write_png(path, image)
        print(f"wrote {path}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def _render_bundle(config, repr_params):
    from .control import ModelBundle, Normalization
    from .rssm import init_rssm_params
    from .rng import make_rng

    enc = {k: v for k, v in repr_params.items() if k.startswith("encoder/")}
    dec = {k: v for k, v in repr_params.items() if k.startswith("decoder/")}
    return ModelBundle(
        encoder_config=config.encoder,
        encoder_params=enc,
        rssm_config=config.rssm,
        rssm_params=init_rssm_params(config.rssm, make_rng(0)),
        crop_box=config.env.workspace,
        embed_norm=Normalization.identity(config.encoder.embed_dim),
        reward_norm=Normalization.identity(1),
        decoder_config=config.decoder,
        decoder_params=dec,
    )


if __name__ == "__main__":
    sys.exit(main())
