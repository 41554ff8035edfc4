"""Training orchestration: the four-stage outer loop (goal selection ->
environment rollout -> relabeling -> optimization), the evaluation protocol,
experiment configuration, run logging, goal snapshots, and checkpoints.

A run is fully determined by (config, seed): RNG streams for the environment,
exploration, relabeling, model training, rollouts, snapshots and evaluation are
split from one root seed, and evaluation draws never touch training streams.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import yaml

from mapgo import __version__
from mapgo.dynamics import DynamicsEnsemble, EnsembleConfig
from mapgo.gomdp import (EnvironmentConfig, Trajectory, World2D, goal_reward,
                         identity_goal_map, make_env)
from mapgo.nets import load_checkpoint, save_checkpoint
from mapgo.relabel import (Fgi, HerEpisode, HerFinal, HerFuture,
                           TrajectoryListContext, relabel_batch, relabel_rows)
from mapgo.umpo import (ActorCritic, DdpgConfig, ReplayBuffer, RolloutConfig,
                        umpo_train)

Array = np.ndarray

RELABEL_STRATEGIES = ("fgi", "her_future", "her_final", "her_episode", "none")


# -- configuration ------------------------------------------------------------------

@dataclass
class RelabelSettings:
    strategy: str = "her_future"
    fraction: float = 0.8
    max_rollout_length: int = 20      # H
    her_fallback: bool = True
    condition_on: str = "original_goal"
    literal_branch: bool = False
    n_samples: int = 1

    def __post_init__(self):
        if self.strategy not in RELABEL_STRATEGIES:
            raise ValueError(f"unknown relabel strategy {self.strategy!r}")
        if not (0.0 <= self.fraction <= 1.0):
            raise ValueError("relabel fraction must be in [0, 1]")


@dataclass
class TrainingSettings:
    episodes: int = 1500
    grad_steps_per_env_step: float = 2.0
    eval_interval_steps: int = 5000
    eval_episodes: int = 100
    snapshot_episodes: Sequence[int] = ()
    probe_trajectories: int = 50
    model_train_interval: int = 1     # episodes between ensemble training calls
    write_checkpoints: bool = True

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episode budget must be >= 0")
        if self.eval_interval_steps < 1 or self.eval_episodes < 1:
            raise ValueError("evaluation cadence values must be positive")
        if self.grad_steps_per_env_step < 0:
            raise ValueError("grad_steps_per_env_step must be >= 0")


@dataclass
class ExperimentConfig:
    env_name: str = "2dworld"
    seed: int = 0
    fgi_on: bool = False
    umpo_on: bool = False
    env: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    relabel: RelabelSettings = field(default_factory=RelabelSettings)
    ddpg: DdpgConfig = field(default_factory=DdpgConfig)
    model: EnsembleConfig = field(default_factory=EnsembleConfig)
    rollouts: RolloutConfig = field(default_factory=RolloutConfig)

    def validate(self):
        if self.env_name not in ("2dworld",):
            raise ValueError(f"unknown environment {self.env_name!r}")
        if self.fgi_on and self.relabel.strategy != "fgi":
            raise ValueError("fgi_on requires relabel.strategy == 'fgi'")
        if not self.fgi_on and self.relabel.strategy == "fgi":
            raise ValueError("relabel.strategy 'fgi' requires fgi_on")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("env", "training", "relabel", "ddpg", "model", "rollouts"):
            sub = d[key]
            for k, v in sub.items():
                if isinstance(v, tuple):
                    sub[k] = list(v)
        d["training"]["snapshot_episodes"] = list(d["training"]["snapshot_episodes"])
        return d


_SECTION_TYPES = {
    "env": EnvironmentConfig,
    "training": TrainingSettings,
    "relabel": RelabelSettings,
    "ddpg": DdpgConfig,
    "model": EnsembleConfig,
    "rollouts": RolloutConfig,
}


def _build_section(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list) \
                and isinstance(getattr(cls(), f.name, None), tuple):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    kwargs = {}
    for key in ("env_name", "seed", "fgi_on", "umpo_on"):
        if key in data:
            kwargs[key] = data.pop(key)
    for key, cls in _SECTION_TYPES.items():
        if key in data:
            kwargs[key] = _build_section(cls, data.pop(key) or {}, key)
    if data:
        raise ValueError(f"unknown config sections: {sorted(data)}")
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return config_from_dict(yaml.safe_load(f))


# -- goal selection -----------------------------------------------------------------

class DefaultGoalSelector:
    """Behavioral goal = desired goal drawn from the environment's own
    distributions (the no-goal-selection baseline)."""

    def select(self, env_buffer, env: World2D, policy):
        return env.sample_initial_state(), env.sample_goal()


def default_goal_selector(env: World2D):
    """Draw (initial state, behavioral goal) from the environment samplers."""
    return DefaultGoalSelector().select(None, env, None)


# -- evaluation ----------------------------------------------------------------------

def evaluate(policy, env_config: EnvironmentConfig, episodes: int = 100,
             rng: np.random.Generator = None, seed: int = 0):
    """Run the deterministic (noise-free) policy for `episodes` episodes in
    lockstep and return (success_rate, mean_return). Never touches training
    state; draws goals only from the provided rng/seed."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    env = World2D(env_config)
    goals = env.sample_goals(episodes, rng)
    states = np.tile(np.array(env.config.start, dtype=float), (episodes, 1))
    returns = np.zeros(episodes)
    reached_any = np.zeros(episodes, dtype=bool)
    r = np.full(episodes, -1.0)
    for _ in range(env.config.horizon):
        actions = policy(states, goals)
        states = env.step_dynamics(states, actions)
        r = env.reward(states, goals)
        returns += r
        reached_any |= (r == 0.0)
    if env.config.success_mode == "final":
        success = (r == 0.0)
    else:
        success = reached_any
    return float(np.mean(success)), float(np.mean(returns))


# -- run log --------------------------------------------------------------------------

@dataclass
class RunLog:
    config: dict
    build: str
    rows: List[dict] = field(default_factory=list)

    @property
    def eval_rows(self) -> List[dict]:
        return [r for r in self.rows if r["type"] == "eval"]

    @property
    def episode_rows(self) -> List[dict]:
        return [r for r in self.rows if r["type"] == "episode"]

    def to_jsonl(self) -> str:
        head = {"type": "config", "build": self.build, "version": __version__,
                "config": self.config}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.rows]
        return "\n".join(lines) + "\n"


def _git_build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


# -- the trainer -----------------------------------------------------------------------

class Trainer:
    """One training run. Stage order per episode is strict: select goal,
    roll out in the environment, update the model, relabel, optimize."""

    def __init__(self, config: ExperimentConfig, out_dir=None,
                 goal_selector=None):
        config.validate()
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.goal_selector = goal_selector or DefaultGoalSelector()

        root = np.random.SeedSequence(config.seed)
        (env_ss, explore_ss, relabel_ss, model_ss, rollout_ss,
         eval_ss, snap_ss, init_ss) = root.spawn(8)
        self.env = make_env(config.env_name, config.env, seed=env_ss)
        self.explore_rng = np.random.default_rng(explore_ss)
        self.relabel_rng = np.random.default_rng(relabel_ss)
        self.model_rng = np.random.default_rng(model_ss)
        self.rollout_rng = np.random.default_rng(rollout_ss)
        self.snapshot_rng = np.random.default_rng(snap_ss)
        self._eval_seeds = eval_ss
        self._eval_children: List = []

        init_rngs = init_ss.spawn(2)
        env = self.env
        self.ac = ActorCritic(env.state_dim, env.action_dim, env.goal_dim,
                              config.ddpg, rng=np.random.default_rng(init_rngs[0]))
        self.needs_model = config.fgi_on or config.umpo_on
        self.ensemble = DynamicsEnsemble(env.state_dim, env.action_dim, config.model,
                                         rng=np.random.default_rng(init_rngs[1])) \
            if self.needs_model else None

        cap = config.ddpg.buffer_capacity
        self.env_buffer = ReplayBuffer(cap, env.state_dim, env.action_dim,
                                       env.goal_dim, goal_map=env.goal_map)
        self.model_buffer = ReplayBuffer(config.rollouts.model_buffer_capacity,
                                         env.state_dim, env.action_dim, env.goal_dim,
                                         goal_map=env.goal_map) if config.umpo_on else None

        self.strategy = self._build_strategy()
        self.probe: List[Trajectory] = []
        self.env_steps = 0
        self.episode = 0
        self.log = RunLog(config=config.to_dict(), build=_git_build_id())
        self._log_file = None
        self._curve_file = None

    def _build_strategy(self):
        r = self.config.relabel
        if r.strategy == "none":
            return None
        if r.strategy == "her_future":
            return HerFuture()
        if r.strategy == "her_final":
            return HerFinal()
        if r.strategy == "her_episode":
            return HerEpisode()
        return Fgi(model=self.ensemble, policy=self.ac.act,
                   max_rollout_length=r.max_rollout_length,
                   her_fallback=r.her_fallback, condition_on=r.condition_on,
                   literal_branch=r.literal_branch, n_samples=r.n_samples)

    # -- logging helpers ---------------------------------------------------------

    def _emit(self, row: dict):
        self.log.rows.append(row)
        if self._log_file is not None:
            self._log_file.write(json.dumps(row, sort_keys=True) + "\n")

    def _open_outputs(self):
        if self.out_dir is None:
            return
        self._log_file = open(self.out_dir / "log.jsonl", "w")
        head = {"type": "config", "build": self.log.build, "version": __version__,
                "config": self.log.config}
        self._log_file.write(json.dumps(head, sort_keys=True) + "\n")
        self._curve_file = open(self.out_dir / "curve.csv", "w", newline="")
        self._curve_writer = csv.writer(self._curve_file)
        self._curve_writer.writerow(["env_steps", "success_rate", "mean_return"])

    def _close_outputs(self):
        for f in (self._log_file, self._curve_file):
            if f is not None:
                f.close()
        self._log_file = self._curve_file = None

    # -- episode stages ----------------------------------------------------------

    def _collect_episode(self) -> Trajectory:
        env, cfg = self.env, self.config
        s0, goal = self.goal_selector.select(self.env_buffer, env, self.ac.act)
        state, goal = env.reset(goal=goal)
        h = env.config.horizon
        states = np.empty((h + 1, env.state_dim))
        actions = np.empty((h, env.action_dim))
        rewards = np.empty(h)
        states[0] = state
        for t in range(h):
            a = self.ac.explore_act(states[t], goal, self.explore_rng)
            ns, r = env.step(a)
            states[t + 1] = ns
            actions[t] = np.clip(a, -1.0, 1.0)
            rewards[t] = r
        traj = Trajectory(states=states, actions=actions, rewards=rewards, goal=goal)
        self.env_buffer.add_trajectory(traj)
        self.env_steps += h
        if len(self.probe) < cfg.training.probe_trajectories:
            self.probe.append(traj)
            if len(self.probe) == cfg.training.probe_trajectories:
                self._save_probe()
        return traj

    def _train_model(self):
        cfg = self.config
        if not self.needs_model:
            return
        if self.episode % max(cfg.training.model_train_interval, 1) != 0:
            return
        s, a, ns = self.env_buffer.all_transitions()
        report = self.ensemble.train(s, a, ns, self.model_rng)
        if report.trained:
            if self.model_buffer is not None:
                self.model_buffer.clear()      # full refresh per retrain
            self._emit({"type": "model_train", "episode": self.episode,
                        "env_steps": self.env_steps, **report.to_row()})

    def _real_batch_source(self, n: int):
        batch = self.env_buffer.sample(n, self.relabel_rng)
        strategy = self.strategy
        if isinstance(strategy, Fgi) and not self.ensemble.trained:
            strategy = HerFuture()       # warmup: model not yet usable
        if strategy is None:
            return batch
        return relabel_batch(batch, strategy, self.config.relabel.fraction,
                             self.relabel_rng, self.env.config.epsilon,
                             self.env.goal_map)

    def _optimize(self):
        cfg = self.config
        n_updates = int(round(cfg.training.grad_steps_per_env_step
                              * self.env.config.horizon))
        if n_updates == 0 or len(self.env_buffer) == 0:
            return None
        return umpo_train(
            self.ac, self.env_buffer, self._real_batch_source, self.ensemble,
            self.model_buffer, cfg.rollouts, self.rollout_rng,
            self.env.config.epsilon, iterations=1, gradient_steps=n_updates,
            goal_sampler=self.env.sample_goals, goal_map=self.env.goal_map,
            use_model_rollouts=cfg.umpo_on)

    def _evaluate_point(self):
        cfg = self.config
        child = self._eval_seeds.spawn(1)[0]
        rng = np.random.default_rng(child)
        success, mean_return = evaluate(self.ac.act, self.env.config,
                                        cfg.training.eval_episodes, rng)
        row = {"type": "eval", "env_steps": self.env_steps, "episode": self.episode,
               "success_rate": success, "mean_return": mean_return}
        self._emit(row)
        if self._curve_file is not None:
            self._curve_writer.writerow([self.env_steps, repr(success),
                                         repr(mean_return)])
            self._curve_file.flush()
        if self.out_dir is not None and cfg.training.write_checkpoints:
            self.save_checkpoint(self.out_dir / f"checkpoint_{self.env_steps}.npz")
        return row

    # -- snapshots ------------------------------------------------------------------

    def _save_probe(self):
        if self.out_dir is None:
            return
        np.savez(self.out_dir / "probe.npz",
                 states=np.stack([t.states for t in self.probe]),
                 actions=np.stack([t.actions for t in self.probe]),
                 rewards=np.stack([t.rewards for t in self.probe]),
                 goals=np.stack([t.goal for t in self.probe]))

    def snapshot_goals(self, episode_tag: int, strategy=None, rng=None,
                       path=None) -> List[dict]:
        """Relabel the frozen probe trajectories with the current policy/model
        and return (optionally write) rows of achieved vs relabeled points."""
        if not self.probe:
            raise ValueError("no probe trajectories collected yet")
        strategy = strategy if strategy is not None else self.strategy
        if strategy is None:
            raise ValueError("snapshotting requires a relabel strategy")
        rng = rng if rng is not None else self.snapshot_rng
        rows = snapshot_relabeled_goals(self.probe, strategy, episode_tag, rng,
                                        self.env.config.epsilon, self.env.goal_map)
        if path is None and self.out_dir is not None:
            path = self.out_dir / f"goals_{episode_tag}.csv"
        if path is not None:
            write_goal_snapshot_csv(path, rows)
            self._emit({"type": "snapshot", "episode": episode_tag,
                        "file": os.path.basename(str(path))})
        return rows

    # -- checkpoints ------------------------------------------------------------------

    def save_checkpoint(self, path):
        comps = {"actor_critic": self.ac.state_dict()}
        if self.ensemble is not None:
            comps["ensemble"] = self.ensemble.state_dict()
        meta = {"env_steps": self.env_steps, "episode": self.episode,
                "config": self.config.to_dict(), "version": __version__}
        save_checkpoint(path, comps, meta)

    def load_networks(self, path):
        comps, meta = load_checkpoint(path)
        self.ac.load_state_dict(comps["actor_critic"])
        if self.ensemble is not None and "ensemble" in comps:
            self.ensemble.load_state_dict(comps["ensemble"])
        return meta

    # -- the outer loop -----------------------------------------------------------------

    def run(self) -> RunLog:
        cfg = self.config
        self._open_outputs()
        try:
            next_eval = cfg.training.eval_interval_steps
            snapshot_at = set(int(e) for e in cfg.training.snapshot_episodes)
            for ep in range(1, cfg.training.episodes + 1):
                self.episode = ep
                traj = self._collect_episode()
                self._train_model()
                stats = self._optimize()
                row = {"type": "episode", "episode": ep, "env_steps": self.env_steps,
                       "return": float(traj.rewards.sum()),
                       "success": bool(self.env.episode_success(traj)),
                       "buffer": len(self.env_buffer),
                       "model_buffer": len(self.model_buffer) if self.model_buffer else 0}
                if stats is not None:
                    row["critic_loss"] = round(stats.critic_loss, 6)
                    row["actor_q"] = round(stats.actor_q, 6)
                self._emit(row)
                while self.env_steps >= next_eval:
                    self._evaluate_point()
                    next_eval += cfg.training.eval_interval_steps
                if ep in snapshot_at and self.probe and self.strategy is not None:
                    self.snapshot_goals(ep)
            if self.out_dir is not None and cfg.training.write_checkpoints \
                    and cfg.training.episodes > 0:
                self.save_checkpoint(self.out_dir / "checkpoint_final.npz")
        finally:
            self._close_outputs()
        return self.log


def run_training(config, out_dir=None, goal_selector=None) -> RunLog:
    """Run one full training experiment; returns the RunLog (and writes run
    artifacts when out_dir is given). Accepts an ExperimentConfig or a plain
    config mapping."""
    if isinstance(config, dict):
        config = config_from_dict(config)
    return Trainer(config, out_dir=out_dir, goal_selector=goal_selector).run()


# -- probe snapshot helpers ------------------------------------------------------------

GOAL_SNAPSHOT_FIELDS = ["episode", "trajectory", "t", "achieved_x", "achieved_y",
                        "relabeled_x", "relabeled_y", "source"]


def snapshot_relabeled_goals(probe_trajectories, strategy, episode_tag: int,
                             rng: np.random.Generator, epsilon: float,
                             goal_map=identity_goal_map) -> List[dict]:
    """Relabel every transition of the probe set under `strategy`; one row per
    transition with the achieved point and the relabeled goal."""
    ctx = TrajectoryListContext(probe_trajectories, goal_map)
    rows_idx = np.arange(len(ctx))
    goals, _, model_mask = relabel_rows(ctx, rows_idx, strategy, rng, epsilon, goal_map)
    achieved = goal_map(ctx.next_states)
    out = []
    for i in rows_idx:
        out.append({
            "episode": int(episode_tag),
            "trajectory": int(ctx.owner[i]),
            "t": int(ctx.t[i]),
            "achieved_x": float(achieved[i][0]),
            "achieved_y": float(achieved[i][1]),
            "relabeled_x": float(goals[i][0]),
            "relabeled_y": float(goals[i][1]),
            "source": "model-rollout" if model_mask[i] else "hindsight-trajectory",
        })
    return out


def write_goal_snapshot_csv(path, rows: List[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=GOAL_SNAPSHOT_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def load_probe(path) -> List[Trajectory]:
    data = np.load(path)
    out = []
    for i in range(len(data["goals"])):
        out.append(Trajectory(states=data["states"][i], actions=data["actions"][i],
                              rewards=data["rewards"][i], goal=data["goals"][i]))
    return out
