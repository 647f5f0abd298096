"""Experiment engine: training launch, the 1000-trajectory evaluation
protocol (average time over successes, crash ratio), ablation pairs, world
generation and trajectory export.

Reports are written as YAML plus per-trajectory CSV; the report path also
renders matplotlib figures next to the delimited output.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import (
    ExperimentConfig,
    build_scenario,
    effective_dict,
    parse_experiment,
    save_world,
    save_yaml,
    world_to_dict,
)
from .env import Outcome, RacingEnv, Scenario, VectorEnv
from .networks import PolicyNet, ValueNet
from .ppo import LOG_COLUMNS, PPOConfig, RunningNormalizer, Trainer, load_checkpoint, save_checkpoint
from .world import WorldSpec, generate_forest

EVAL_CHUNK = 200

ROLLOUT_COLUMNS = [
    "t_s", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz",
    "wx", "wy", "wz", "f1", "f2", "f3", "f4",
    "r_progress", "r_safety", "r_terminal", "status",
]


@dataclass(frozen=True)
class TrajectoryRecord:
    index: int
    outcome: str
    completion_time: float | None
    elapsed: float
    waypoints_passed: int
    episode_reward: float


@dataclass
class EvaluationReport:
    total: int
    success_count: int
    crash_count: int
    timeout_count: int
    average_time: float | None
    crash_ratio: float
    records: list[TrajectoryRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list[TrajectoryRecord]) -> "EvaluationReport":
        total = len(records)
        success = sum(1 for r in records if r.outcome == Outcome.COMPLETED.value)
        crash = sum(1 for r in records if r.outcome in (Outcome.COLLIDED.value, Outcome.ABORTED.value))
        timeout = total - success - crash
        times = [r.completion_time for r in records if r.completion_time is not None]
        return cls(
            total=total,
            success_count=success,
            crash_count=crash,
            timeout_count=timeout,
            average_time=float(np.mean(times)) if times else None,
            crash_ratio=100.0 * crash / total,
            records=records,
        )


def _policy_actions(policy: PolicyNet, normalizer: RunningNormalizer, obs: np.ndarray) -> np.ndarray:
    obs_n = torch.as_tensor(normalizer.normalize(obs))
    with torch.no_grad():
        actions = torch.tanh(policy.pre_squash(obs_n))
    return actions.numpy().astype(np.float64)


def evaluate_policy(
    scenario: Scenario,
    policy: PolicyNet,
    normalizer: RunningNormalizer,
    n_trajectories: int,
    seed: int = 0,
    chunk: int = EVAL_CHUNK,
) -> EvaluationReport:
    """Deterministic-mean rollouts with the scenario's randomization; each
    trajectory is the first episode of one freshly seeded environment slot."""
    torch.set_num_threads(1)
    root = np.random.SeedSequence(seed)
    batches = math.ceil(n_trajectories / chunk)
    batch_seeds = root.spawn(batches)
    max_steps = int(math.ceil(scenario.env_config.max_episode_time / scenario.env_config.control_dt)) + 2

    records: list[TrajectoryRecord] = []
    index = 0
    for b in range(batches):
        k = min(chunk, n_trajectories - b * chunk)
        env = VectorEnv(scenario, k, seed=batch_seeds[b], auto_reset=True)
        obs = env.reset()
        recorded = np.zeros(k, dtype=bool)
        slot_records: list[TrajectoryRecord | None] = [None] * k
        for _ in range(max_steps):
            step = env.step(_policy_actions(policy, normalizer, obs))
            obs = step.obs
            for i in np.where(step.done & ~recorded)[0]:
                status = step.status(int(i))
                slot_records[int(i)] = TrajectoryRecord(
                    index=0,
                    outcome=status.outcome.value,
                    completion_time=status.completion_time,
                    elapsed=status.elapsed_time,
                    waypoints_passed=status.next_waypoint_index,
                    episode_reward=float(step.episode_reward[i]),
                )
                recorded[int(i)] = True
            if np.all(recorded):
                break
        for i in range(k):
            rec = slot_records[i]
            if rec is None:
                # Defensive: the step bound guarantees a timeout before this.
                rec = TrajectoryRecord(0, Outcome.TIMEOUT.value, None, 0.0, 0, 0.0)
            records.append(replace(rec, index=index))
            index += 1
    return EvaluationReport.from_records(records)


def report_to_dict(report: EvaluationReport) -> dict:
    return {
        "total": report.total,
        "success_count": report.success_count,
        "crash_count": report.crash_count,
        "timeout_count": report.timeout_count,
        "average_time_s": report.average_time,
        "crash_ratio_percent": report.crash_ratio,
    }


def save_report(report: EvaluationReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_yaml(report_to_dict(report), out_dir / "report.yaml")
    with open(out_dir / "trajectories.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "outcome", "completion_time_s", "elapsed_s", "waypoints_passed", "episode_reward"])
        for r in report.records:
            writer.writerow([
                r.index, r.outcome,
                "" if r.completion_time is None else repr(r.completion_time),
                repr(r.elapsed), r.waypoints_passed, repr(r.episode_reward),
            ])
    return out_dir / "report.yaml"


class _LogWriter:
    """Append-only CSV training log with full double precision."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(LOG_COLUMNS)

    def __call__(self, row: dict):
        self._writer.writerow([
            row["update_index"], row["env_steps"],
            *(repr(float(row[c])) for c in LOG_COLUMNS[2:]),
        ])
        self._fh.flush()

    def close(self):
        self._fh.close()


@dataclass
class TrainOutputs:
    checkpoint: Path
    log: Path
    config: Path
    rows: list[dict]


def run_train(cfg: ExperimentConfig, out_dir, resume: Path | None = None) -> TrainOutputs:
    """Train per the experiment config; writes the frozen effective config,
    the training log, checkpoints and the training-curve figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frozen = effective_dict(cfg)
    config_path = out_dir / "config.yaml"
    save_yaml(frozen, config_path)

    scenario = build_scenario(cfg)
    env = VectorEnv(scenario, cfg.n_envs, seed=cfg.seed)
    trainer = Trainer(env, cfg.ppo, seed=cfg.seed, hidden_dim=cfg.hidden_dim)
    if resume is not None:
        trainer.load_state_dict(load_checkpoint(resume))

    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    latest = ckpt_dir / "checkpoint_latest.pt"

    def checkpoint_fn(tr: Trainer):
        save_checkpoint(tr, ckpt_dir / f"checkpoint_{tr.update_index:06d}.pt", extra={"config": frozen})
        save_checkpoint(tr, latest, extra={"config": frozen})

    log_writer = _LogWriter(out_dir / "training_log.csv")
    try:
        rows = trainer.run(log_writer=log_writer, checkpoint_fn=checkpoint_fn)
    finally:
        log_writer.close()
    if not latest.exists():
        checkpoint_fn(trainer)

    from .figures import save_training_figure

    save_training_figure(rows, out_dir / "training_curves.png")
    return TrainOutputs(checkpoint=latest, log=out_dir / "training_log.csv", config=config_path, rows=rows)


def load_policy_bundle(checkpoint_path):
    """Checkpoint -> (policy, value, normalizer, experiment config)."""
    payload = load_checkpoint(checkpoint_path)
    frozen = payload.get("extra", {}).get("config")
    if frozen is None:
        raise ValueError("checkpoint does not embed an experiment config")
    cfg = parse_experiment(frozen)
    obs_dim = payload["obs_dim"]
    if obs_dim != cfg.env.observation_dim():
        raise ValueError(
            f"checkpoint observation dim {obs_dim} does not match config ({cfg.env.observation_dim()})"
        )
    policy = PolicyNet(obs_dim, hidden_dim=cfg.hidden_dim)
    policy.load_state_dict(payload["policy"])
    value = ValueNet(obs_dim, hidden_dim=cfg.hidden_dim)
    value.load_state_dict(payload["value"])
    normalizer = RunningNormalizer(obs_dim)
    normalizer.load_state_dict(payload["normalizer"])
    return policy, value, normalizer, cfg


def run_evaluate(
    checkpoint_path,
    out_dir,
    n_trajectories: int | None = None,
    seed: int | None = None,
    cfg_override: ExperimentConfig | None = None,
) -> EvaluationReport:
    """Evaluate a checkpoint; writes report.yaml, trajectories.csv and the
    evaluation figure."""
    policy, _, normalizer, cfg = load_policy_bundle(checkpoint_path)
    if cfg_override is not None:
        if cfg_override.env.observation_dim() != cfg.env.observation_dim():
            raise ValueError("override config changes the observation dimension")
        cfg = cfg_override
    scenario = build_scenario(cfg)
    n = n_trajectories if n_trajectories is not None else cfg.eval_trajectories
    eval_seed = seed if seed is not None else cfg.seed + 1
    report = evaluate_policy(scenario, policy, normalizer, n, seed=eval_seed)
    out_dir = Path(out_dir)
    save_report(report, out_dir)

    from .figures import save_evaluation_figure

    save_evaluation_figure(report, out_dir / "evaluation.png")
    return report


ABLATIONS = ("no_safety_reward", "no_terminal_time")


def ablated_config(cfg: ExperimentConfig, ablation: str) -> ExperimentConfig:
    """Zero one reward component; everything else (seeds included) matches."""
    if ablation == "no_safety_reward":
        env = replace(cfg.env, lambda3=0.0)
    elif ablation == "no_terminal_time":
        env = replace(cfg.env, lambda4=0.0)
    else:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    out = replace(cfg, env=env)
    out.effective = effective_dict(out)
    return out


def run_ablate(cfg: ExperimentConfig, ablation: str, out_dir, n_trajectories: int | None = None,
               seed: int | None = None) -> dict:
    """Train + evaluate the full reward and the ablated reward with matched
    seeds; writes a side-by-side report."""
    out_dir = Path(out_dir)
    results = {}
    for name, variant in (("full", cfg), ("ablated", ablated_config(cfg, ablation))):
        sub = out_dir / name
        train_out = run_train(variant, sub)
        report = run_evaluate(
            train_out.checkpoint, sub / "eval", n_trajectories=n_trajectories, seed=seed,
        )
        results[name] = report
    comparison = {
        "ablation": ablation,
        "full": report_to_dict(results["full"]),
        "ablated": report_to_dict(results["ablated"]),
    }
    save_yaml(comparison, out_dir / "ablation_report.yaml")
    return comparison


def run_gen_world(level: int, seed: int, out_path) -> WorldSpec:
    world = generate_forest(level, np.random.default_rng(seed))
    save_world(world, out_path)
    return world


def rollout_trajectory(scenario: Scenario, policy: PolicyNet, normalizer: RunningNormalizer,
                       seed: int = 0):
    """One deterministic rollout; returns (rows, world) where each row
    matches ROLLOUT_COLUMNS."""
    torch.set_num_threads(1)
    env = RacingEnv(scenario, seed=seed)
    obs = env.reset()
    max_steps = int(math.ceil(scenario.env_config.max_episode_time / scenario.env_config.control_dt)) + 2
    rows = []
    for _ in range(max_steps):
        action = _policy_actions(policy, normalizer, obs[None, :])[0]
        obs, reward, status = env.step(action)
        s = env.state
        rows.append([
            status.elapsed_time,
            *s.position, *s.velocity, *s.attitude, *s.body_rate, *s.rotor_thrusts,
            reward.progress, reward.safety, reward.terminal,
            status.outcome.value,
        ])
        if status.terminal:
            break
    return rows, env.world


def save_rollout_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROLLOUT_COLUMNS)
        for row in rows:
            writer.writerow([repr(float(v)) if not isinstance(v, str) else v for v in row])
    return path
