"""Command-line front end: train, evaluate, ablate, gen-world, rollout.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime error.
Machine-readable outputs keep full double precision; console summaries round
to two decimals.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import ConfigError, load_experiment, load_world, parse_experiment
from .harness import (
    ABLATIONS,
    load_policy_bundle,
    rollout_trajectory,
    run_ablate,
    run_evaluate,
    run_gen_world,
    run_train,
    save_rollout_csv,
)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=False), default=None,
              help="Experiment config file (YAML).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Output directory or file.")
@click.pass_context
def main(ctx, config_path, seed, out_path):
    """Quadrotor racing simulator and safety-aware RL trainer."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed
    ctx.obj["out"] = out_path


def _fail(exc: Exception, code: int):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _load_cfg(ctx, required=True):
    path = ctx.obj.get("config_path")
    if path is None:
        if required:
            raise ConfigError("a config file is required (--config)")
        return None
    cfg = load_experiment(path)
    if ctx.obj.get("seed") is not None:
        raw = dict(cfg.effective)
        raw["experiment"] = dict(raw["experiment"], seed=int(ctx.obj["seed"]))
        cfg = parse_experiment(raw)
    return cfg


def _out_dir(ctx, default: str) -> Path:
    out = ctx.obj.get("out")
    return Path(out) if out is not None else Path(default)


@main.command()
@click.option("--resume", type=click.Path(exists=True), default=None,
              help="Resume training from a checkpoint.")
@click.pass_context
def train(ctx, resume):
    """Train a policy and write checkpoints plus the training log."""
    try:
        cfg = _load_cfg(ctx)
    except (ConfigError, FileNotFoundError) as exc:
        _fail(exc, 1)
    out = _out_dir(ctx, "runs/train")
    try:
        result = run_train(cfg, out, resume=None if resume is None else Path(resume))
    except Exception as exc:  # noqa: BLE001 - runtime failure -> exit 2
        _fail(exc, 2)
    last = result.rows[-1] if result.rows else {}
    click.echo(f"trained {cfg.ppo.total_env_steps} env steps over {len(result.rows)} updates")
    if last:
        click.echo(
            f"final update: mean_reward={last['mean_reward']:.2f} "
            f"crash_fraction={last['crash_fraction']:.2f}"
        )
    click.echo(f"checkpoint: {result.checkpoint}")
    click.echo(f"training log: {result.log}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("-k", "--trajectories", type=int, default=None,
              help="Number of evaluation trajectories (default from config).")
@click.pass_context
def evaluate(ctx, checkpoint, trajectories):
    """Evaluate a checkpoint: average time and crash ratio."""
    try:
        cfg_override = _load_cfg(ctx, required=False)
    except (ConfigError, FileNotFoundError) as exc:
        _fail(exc, 1)
    out = _out_dir(ctx, "runs/evaluate")
    try:
        report = run_evaluate(
            checkpoint, out,
            n_trajectories=trajectories,
            seed=ctx.obj.get("seed"),
            cfg_override=cfg_override,
        )
    except (ConfigError, ValueError) as exc:
        _fail(exc, 1)
    except Exception as exc:  # noqa: BLE001
        _fail(exc, 2)
    avg = "n/a" if report.average_time is None else f"{report.average_time:.2f} s"
    click.echo(f"trajectories: {report.total}")
    click.echo(f"average time: {avg}")
    click.echo(f"crash ratio: {report.crash_ratio:.2f}%")
    click.echo(f"report: {out / 'report.yaml'}")


@main.command()
@click.option("--ablation", type=click.Choice(ABLATIONS), required=True)
@click.option("-k", "--trajectories", type=int, default=None)
@click.pass_context
def ablate(ctx, ablation, trajectories):
    """Train and evaluate the full and ablated rewards with matched seeds."""
    try:
        cfg = _load_cfg(ctx)
    except (ConfigError, FileNotFoundError) as exc:
        _fail(exc, 1)
    out = _out_dir(ctx, f"runs/ablate_{ablation}")
    try:
        comparison = run_ablate(cfg, ablation, out, n_trajectories=trajectories, seed=ctx.obj.get("seed"))
    except Exception as exc:  # noqa: BLE001
        _fail(exc, 2)
    for name in ("full", "ablated"):
        r = comparison[name]
        avg = "n/a" if r["average_time_s"] is None else f"{r['average_time_s']:.2f} s"
        click.echo(f"{name}: average time {avg}, crash ratio {r['crash_ratio_percent']:.2f}%")
    click.echo(f"report: {out / 'ablation_report.yaml'}")


@main.command("gen-world")
@click.option("--level", type=click.IntRange(1, 3), required=True)
@click.pass_context
def gen_world(ctx, level):
    """Generate a forest world file at the given density level."""
    seed = ctx.obj.get("seed") or 0
    out = ctx.obj.get("out") or f"forest_level{level}_seed{seed}.yaml"
    try:
        world = run_gen_world(level, seed, out)
    except Exception as exc:  # noqa: BLE001
        _fail(exc, 2)
    click.echo(f"obstacles: {len(world.obstacles)}")
    click.echo(f"minimum spacing: {world.min_obstacle_spacing():.2f} m")
    click.echo(f"world file: {out}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--world", "world_path", type=click.Path(exists=True), default=None,
              help="World file to fly (default: the checkpoint's scenario world).")
@click.pass_context
def rollout(ctx, checkpoint, world_path):
    """One deterministic rollout exported as CSV plus a trajectory figure."""
    from .config import build_scenario
    from .env import Scenario
    from .figures import save_trajectory_figure

    out = ctx.obj.get("out") or "rollout.csv"
    seed = ctx.obj.get("seed") or 0
    try:
        policy, _, normalizer, cfg = load_policy_bundle(checkpoint)
        scenario = build_scenario(cfg)
        if world_path is not None:
            world = load_world(world_path)
            scenario = Scenario(
                params=scenario.params,
                env_config=scenario.env_config,
                randomization=scenario.randomization,
                world=world,
                start_position=scenario.start_position,
            )
    except (ConfigError, ValueError) as exc:
        _fail(exc, 1)
    except Exception as exc:  # noqa: BLE001
        _fail(exc, 2)
    try:
        rows, world = rollout_trajectory(scenario, policy, normalizer, seed=seed)
        save_rollout_csv(rows, out)
        figure_path = Path(out).with_suffix(".png")
        save_trajectory_figure(rows, world, figure_path)
    except Exception as exc:  # noqa: BLE001
        _fail(exc, 2)
    click.echo(f"steps: {len(rows)}")
    click.echo(f"final status: {rows[-1][-1]}")
    click.echo(f"trajectory: {out}")
    click.echo(f"figure: {figure_path}")


if __name__ == "__main__":
    main()
