"""Goal-oriented MDP core: goal mapping, sparse goal reward, trajectories,
and the 2D-World point-navigation environment.

States, actions and goals are plain float ndarrays. A goal mapping projects a
state (or a batch of states) into goal space; for 2D-World it is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

Array = np.ndarray

# Goal mapping: State -> Goal, vectorized over leading axes.
GoalMapping = Callable[[Array], Array]


def identity_goal_map(states: Array) -> Array:
    return states


def goal_reward(next_state: Array, goal: Array, epsilon: float,
                goal_map: GoalMapping = identity_goal_map) -> Array:
    """Sparse goal reward: 0 if ||phi(next_state) - goal||_2 <= epsilon, else -1.

    Works on single vectors or batches (leading axes broadcast). Returns a
    float scalar for vector inputs, an array for batched inputs.
    """
    achieved = goal_map(np.asarray(next_state))
    goal = np.asarray(goal)
    if achieved.shape[-1] != goal.shape[-1]:
        raise ValueError(
            f"goal dimension mismatch: phi(state) has dim {achieved.shape[-1]}, "
            f"goal has dim {goal.shape[-1]}")
    dist = np.linalg.norm(achieved - goal, axis=-1)
    reward = np.where(dist <= epsilon, 0.0, -1.0)
    if reward.ndim == 0:
        return float(reward)
    return reward


@dataclass
class Transition:
    """One (s, a, s', g, r) experience tuple."""
    state: Array
    action: Array
    next_state: Array
    goal: Array
    reward: float
    trajectory_id: int = -1
    step_index: int = 0


@dataclass
class Trajectory:
    """One episode: states (L+1, ds) chained, actions (L, da), one behavioral goal.

    ``rewards[t]`` is the goal reward for reaching ``states[t+1]`` under the
    behavioral goal.
    """
    states: Array          # (L+1, ds)
    actions: Array         # (L, da)
    rewards: Array         # (L,)
    goal: Array            # (dg,)
    trajectory_id: int = -1

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("trajectory needs exactly one more state than actions")
        if len(self.rewards) != len(self.actions):
            raise ValueError("one reward per action required")
        if len(self.actions) < 1:
            raise ValueError("empty trajectory")

    @property
    def length(self) -> int:
        return len(self.actions)

    def transition(self, t: int) -> Transition:
        return Transition(state=self.states[t], action=self.actions[t],
                          next_state=self.states[t + 1], goal=self.goal,
                          reward=float(self.rewards[t]),
                          trajectory_id=self.trajectory_id, step_index=t)

    def transitions(self):
        return [self.transition(t) for t in range(self.length)]


@dataclass
class EnvironmentConfig:
    """2D-World parameters. Defaults follow the benchmark setup: fixed start at
    the origin, targets in the far corner square, final-step success rule."""
    epsilon: float = 0.15
    horizon: int = 100
    state_low: float = 0.0
    state_high: float = 20.0
    goal_low: float = 18.5
    goal_high: float = 19.5
    start: tuple = (0.0, 0.0)
    success_mode: str = "final"   # "final": last step within epsilon; "any": some step

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.success_mode not in ("final", "any"):
            raise ValueError(f"unknown success_mode {self.success_mode!r}")


class World2D:
    """Point navigation on [0, 20]^2 with movement actions in [-1, 1]^2.

    Dynamics: s' = clamp(s + clip(a, -1, 1), bounds). The goal mapping is the
    identity on the 2-vector state. Instances are independently seedable; the
    initial-state and desired-goal samplers are exposed so goal selectors can
    query them.
    """

    state_dim = 2
    action_dim = 2
    goal_dim = 2

    def __init__(self, config: EnvironmentConfig = None, seed: int = 0):
        self.config = config if config is not None else EnvironmentConfig()
        self.rng = np.random.default_rng(seed)
        self.goal_map: GoalMapping = identity_goal_map
        self._state: Optional[Array] = None
        self._goal: Optional[Array] = None

    # -- distribution samplers (rho_0 and p_g) --------------------------------

    def sample_initial_state(self, rng: np.random.Generator = None) -> Array:
        return np.array(self.config.start, dtype=float)

    def sample_goal(self, rng: np.random.Generator = None) -> Array:
        rng = rng if rng is not None else self.rng
        c = self.config
        return rng.uniform(c.goal_low, c.goal_high, size=self.goal_dim)

    def sample_goals(self, n: int, rng: np.random.Generator = None) -> Array:
        rng = rng if rng is not None else self.rng
        c = self.config
        return rng.uniform(c.goal_low, c.goal_high, size=(n, self.goal_dim))

    # -- stateful episode interface -------------------------------------------

    def reset(self, goal: Array = None):
        """Start an episode at the fixed initial state with a fresh desired goal."""
        self._state = self.sample_initial_state()
        self._goal = np.asarray(goal, dtype=float) if goal is not None else self.sample_goal()
        return self._state.copy(), self._goal.copy()

    def step(self, action: Array):
        if self._state is None:
            raise ValueError("step before reset")
        next_state = self.step_dynamics(self._state, action)
        reward = goal_reward(next_state, self._goal, self.config.epsilon, self.goal_map)
        self._state = next_state
        return next_state.copy(), float(reward)

    # -- pure dynamics, shared by the stateful API and batched evaluation -----

    def step_dynamics(self, states: Array, actions: Array) -> Array:
        """Deterministic transition, vectorized over leading axes."""
        c = self.config
        a = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
        return np.clip(np.asarray(states, dtype=float) + a, c.state_low, c.state_high)

    def reward(self, next_states: Array, goals: Array) -> Array:
        return goal_reward(next_states, goals, self.config.epsilon, self.goal_map)

    # -- episode outcome -------------------------------------------------------

    def episode_success(self, trajectory: Trajectory) -> bool:
        """Success under the configured rule: final-step proximity (default) or
        reaching the goal at any step."""
        if trajectory.length < 1:
            raise ValueError("empty trajectory")
        if self.config.success_mode == "final":
            return float(trajectory.rewards[-1]) == 0.0
        return bool(np.any(trajectory.rewards == 0.0))


class TrueDynamicsModel:
    """Adapter exposing an environment's exact dynamics through the rollout-model
    interface (``step_batch``), for oracle checks against learned models."""

    trained = True

    def __init__(self, env: World2D):
        self.env = env

    def step_batch(self, states: Array, actions: Array, rng=None) -> Array:
        return self.env.step_dynamics(states, actions)


ENVIRONMENTS = {"2dworld": World2D}


def make_env(name: str, config: EnvironmentConfig = None, seed: int = 0) -> World2D:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(ENVIRONMENTS)}")
    return cls(config, seed=seed)
