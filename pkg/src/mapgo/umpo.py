"""Universal model-based policy optimization: goal-conditioned DDPG updates,
dual replay buffers, branched model rollouts, and mixed real/model batches.

The critic regresses r + gamma * Q'(s', pi(s', g), g) with a polyak-averaged
target network; the actor ascends the critic. Training batches mix a fixed
fraction of real-environment transitions with model-generated ones.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from mapgo.gomdp import GoalMapping, Trajectory, goal_reward, identity_goal_map
from mapgo.nets import Adam, Mlp
from mapgo.relabel import future_achieved_goals

Array = np.ndarray

ROLLOUT_GOAL_STRATEGIES = ("relabel", "no_relabel", "now_desired")


# -- replay storage ---------------------------------------------------------------

@dataclass
class TransitionBatch:
    """A sampled batch with enough trajectory context to relabel it.

    ``achieved_goal(rows, j)`` resolves phi(s_j) within each row's trajectory
    (j indexes visited states 1..L). Rows sampled from different buffers lose
    context after ``concat`` and can no longer be relabeled.
    """
    states: Array
    actions: Array
    next_states: Array
    goals: Array
    rewards: Array
    t: Array
    length: Array
    rows: Array                       # logical buffer indices (for sampling tests)
    traj_start: Optional[Array] = None
    buffer: Optional["ReplayBuffer"] = None
    sources: Optional[Array] = None

    def __len__(self):
        return len(self.goals)

    def achieved_goal(self, rows: Array, j: Array) -> Array:
        if self.buffer is None or self.traj_start is None:
            raise ValueError("batch has no trajectory context")
        phys = (self.traj_start[rows] + np.asarray(j) - 1) % self.buffer.capacity
        return self.buffer.goal_map(self.buffer._next_states[phys])

    def with_goals(self, goals: Array, rewards: Array, sources: Array) -> "TransitionBatch":
        return replace(self, goals=goals, rewards=rewards, sources=sources)

    @staticmethod
    def concat(batches: Sequence["TransitionBatch"]) -> "TransitionBatch":
        return TransitionBatch(
            states=np.concatenate([b.states for b in batches]),
            actions=np.concatenate([b.actions for b in batches]),
            next_states=np.concatenate([b.next_states for b in batches]),
            goals=np.concatenate([b.goals for b in batches]),
            rewards=np.concatenate([b.rewards for b in batches]),
            t=np.concatenate([b.t for b in batches]),
            length=np.concatenate([b.length for b in batches]),
            rows=np.concatenate([b.rows for b in batches]),
            traj_start=None, buffer=None, sources=None)

    def slice(self, lo: int, hi: int) -> "TransitionBatch":
        return TransitionBatch(
            states=self.states[lo:hi], actions=self.actions[lo:hi],
            next_states=self.next_states[lo:hi], goals=self.goals[lo:hi],
            rewards=self.rewards[lo:hi], t=self.t[lo:hi], length=self.length[lo:hi],
            rows=self.rows[lo:hi],
            traj_start=None if self.traj_start is None else self.traj_start[lo:hi],
            buffer=self.buffer,
            sources=None if self.sources is None else self.sources[lo:hi])


class ReplayBuffer:
    """Ring buffer of transitions with trajectory indexing.

    Insertion is whole trajectories; when full, the oldest trajectories are
    evicted in insertion order so every stored transition stays resolvable to
    its complete episode (needed for hindsight relabeling).
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int, goal_dim: int,
                 goal_map: GoalMapping = identity_goal_map):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.goal_map = goal_map
        self._states = np.zeros((capacity, state_dim))
        self._actions = np.zeros((capacity, action_dim))
        self._next_states = np.zeros((capacity, state_dim))
        self._goals = np.zeros((capacity, goal_dim))
        self._rewards = np.zeros(capacity)
        self._t = np.zeros(capacity, dtype=int)
        self._len = np.zeros(capacity, dtype=int)
        self._traj_start = np.zeros(capacity, dtype=int)
        self._episodes = deque()        # (start_slot, length, trajectory_id)
        self._head = 0
        self._size = 0
        self._next_traj_id = 0

    def __len__(self):
        return self._size

    @property
    def n_trajectories(self) -> int:
        return len(self._episodes)

    def add_trajectory(self, traj: Trajectory) -> int:
        L = traj.length
        if L > self.capacity:
            raise ValueError("trajectory longer than buffer capacity")
        while self.capacity - self._size < L:
            _, old_len, _ = self._episodes.popleft()
            self._size -= old_len
        traj_id = self._next_traj_id
        self._next_traj_id += 1
        slots = (self._head + np.arange(L)) % self.capacity
        self._states[slots] = traj.states[:-1]
        self._actions[slots] = traj.actions
        self._next_states[slots] = traj.states[1:]
        self._goals[slots] = traj.goal
        self._rewards[slots] = traj.rewards
        self._t[slots] = np.arange(L)
        self._len[slots] = L
        self._traj_start[slots] = self._head
        self._episodes.append((self._head, L, traj_id))
        self._head = (self._head + L) % self.capacity
        self._size += L
        return traj_id

    def clear(self):
        self._episodes.clear()
        self._head = 0
        self._size = 0

    def stored_trajectory_ids(self) -> List[int]:
        return [tid for _, _, tid in self._episodes]

    def _tail(self) -> int:
        return (self._head - self._size) % self.capacity

    def sample(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniform sample of n transitions (with replacement)."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        rows = rng.integers(0, self._size, size=n)
        phys = (self._tail() + rows) % self.capacity
        return TransitionBatch(
            states=self._states[phys].copy(), actions=self._actions[phys].copy(),
            next_states=self._next_states[phys].copy(), goals=self._goals[phys].copy(),
            rewards=self._rewards[phys].copy(), t=self._t[phys].copy(),
            length=self._len[phys].copy(), rows=rows,
            traj_start=self._traj_start[phys].copy(), buffer=self)

    def all_transitions(self):
        """(states, actions, next_states) of everything stored, oldest first."""
        phys = (self._tail() + np.arange(self._size)) % self.capacity
        return self._states[phys], self._actions[phys], self._next_states[phys]


# -- actor-critic -------------------------------------------------------------------

@dataclass
class DdpgConfig:
    actor_hidden: Sequence[int] = (256, 256, 256)
    critic_hidden: Sequence[int] = (256, 256, 256)
    actor_lr: float = 5e-4
    critic_lr: float = 1e-4
    gamma: float = 0.98
    tau: float = 0.005
    batch_size: int = 256
    buffer_capacity: int = 100000
    mixture_alpha: float = 0.05
    exploration_sigma: float = 0.2
    exploration_random_prob: float = 0.3
    actor_final_scale: float = 1e-2
    dtype: str = "float32"

    def __post_init__(self):
        if not (0.0 <= self.mixture_alpha <= 1.0):
            raise ValueError("mixture_alpha must be in [0, 1]")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must be in [0, 1)")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must be in (0, 1]")


class ActorCritic:
    """Universal policy pi(s, g), critic Q(s, a, g), and delayed target critic."""

    def __init__(self, state_dim: int, action_dim: int, goal_dim: int,
                 config: DdpgConfig = None, rng: np.random.Generator = None):
        self.config = config if config is not None else DdpgConfig()
        cfg = self.config
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = np.dtype(cfg.dtype)
        self.state_dim, self.action_dim, self.goal_dim = state_dim, action_dim, goal_dim
        self.actor = Mlp([state_dim + goal_dim, *cfg.actor_hidden, action_dim],
                         output="tanh", rng=rng, dtype=dtype,
                         final_scale=cfg.actor_final_scale)
        self.critic = Mlp([state_dim + action_dim + goal_dim, *cfg.critic_hidden, 1],
                          rng=rng, dtype=dtype)
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, lr=cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params, lr=cfg.critic_lr)

    # -- acting ------------------------------------------------------------------

    def act(self, states: Array, goals: Array) -> Array:
        """Deterministic policy actions, batched."""
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(goals)], axis=-1)
        return self.actor.forward(x)

    def act_single(self, state: Array, goal: Array) -> Array:
        return self.act(state[None, :], goal[None, :])[0]

    def explore_act(self, state: Array, goal: Array, rng: np.random.Generator) -> Array:
        """Behavior action: epsilon-uniform exploration plus gaussian noise."""
        cfg = self.config
        if rng.random() < cfg.exploration_random_prob:
            return rng.uniform(-1.0, 1.0, size=self.action_dim)
        a = self.act_single(state, goal)
        a = a + rng.normal(0.0, cfg.exploration_sigma, size=self.action_dim)
        return np.clip(a, -1.0, 1.0)

    # -- updates -----------------------------------------------------------------

    def critic_targets(self, batch: TransitionBatch) -> Array:
        """Bootstrap targets r + gamma * Q_target(s', pi(s', g), g), computed
        without caching so no gradient can flow into the target network or the
        actor."""
        dt = self.critic.dtype
        g = batch.goals.astype(dt)
        sp = batch.next_states.astype(dt)
        a_next = self.actor.forward(np.concatenate([sp, g], axis=-1))
        q_next = self.target_critic.forward(np.concatenate([sp, a_next, g], axis=-1))
        return batch.rewards.astype(dt)[:, None] + dt.type(self.config.gamma) * q_next

    def critic_update(self, batch: TransitionBatch) -> float:
        """One Adam step on the critic toward its bootstrap targets. Returns the
        pre-step loss."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        dt = self.critic.dtype
        y = self.critic_targets(batch)
        x = np.concatenate([batch.states.astype(dt), batch.actions.astype(dt),
                            batch.goals.astype(dt)], axis=-1)
        q, cache = self.critic.forward(x, need_cache=True)
        diff = q - y
        loss = float(np.mean(diff * diff))
        grad = (2.0 / len(batch)) * diff
        grads, _ = self.critic.backward(cache, grad)
        self.critic_opt.step(self.critic.params, grads)
        return loss

    def actor_gradients(self, batch: TransitionBatch):
        """Gradients of -mean Q(s, pi(s,g), g) w.r.t. actor parameters, with the
        critic frozen. Returns (grads, mean Q)."""
        dt = self.actor.dtype
        s = batch.states.astype(dt)
        g = batch.goals.astype(dt)
        a, cache_a = self.actor.forward(np.concatenate([s, g], axis=-1), need_cache=True)
        x = np.concatenate([s, a, g], axis=-1)
        q, cache_q = self.critic.forward(x, need_cache=True)
        objective = float(np.mean(q))
        gout = np.full_like(q, -1.0 / len(batch))      # descend -mean(Q)
        _, gx = self.critic.backward(cache_q, gout, need_input_grad=True,
                                     need_param_grads=False)
        ga = gx[:, self.state_dim:self.state_dim + self.action_dim]
        grads, _ = self.actor.backward(cache_a, ga)
        return grads, objective

    def actor_update(self, batch: TransitionBatch) -> float:
        """One Adam step ascending mean Q(s, pi(s,g), g); the critic is frozen
        during this step. Returns the pre-step mean Q."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        grads, objective = self.actor_gradients(batch)
        self.actor_opt.step(self.actor.params, grads)
        return objective

    def soft_target_update(self, tau: float = None):
        """omega' <- tau * omega + (1 - tau) * omega', elementwise."""
        tau = self.config.tau if tau is None else tau
        if not (0.0 < tau <= 1.0):
            raise ValueError("tau must be in (0, 1]")
        for tp, p in zip(self.target_critic.params, self.critic.params):
            tp *= (1.0 - tau)
            tp += tau * p

    # -- checkpoint plumbing -------------------------------------------------------

    def state_dict(self) -> dict:
        out = {}
        for name, net in (("actor", self.actor), ("critic", self.critic),
                          ("target_critic", self.target_critic)):
            for k, v in net.state_dict().items():
                out[f"{name}.{k}"] = v
        for name, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            for k, v in opt.state_dict().items():
                out[f"{name}.{k}"] = v
        return out

    def load_state_dict(self, d: dict):
        def sub(prefix):
            return {k[len(prefix) + 1:]: v for k, v in d.items()
                    if k.startswith(prefix + ".")}
        self.actor.load_state_dict(sub("actor"))
        self.critic.load_state_dict(sub("critic"))
        self.target_critic.load_state_dict(sub("target_critic"))
        self.actor_opt.load_state_dict(sub("actor_opt"))
        self.critic_opt.load_state_dict(sub("critic_opt"))


# -- model rollouts and batch mixing -------------------------------------------------

@dataclass
class RolloutConfig:
    length: int = 5                   # k: steps per branched rollout
    per_iteration: int = 400          # K: rollouts generated per outer iteration
    model_buffer_capacity: int = 100000
    goal_strategy: str = "relabel"

    def __post_init__(self):
        if self.goal_strategy not in ROLLOUT_GOAL_STRATEGIES:
            raise ValueError(f"unknown rollout goal strategy {self.goal_strategy!r}")


def branched_rollouts(env_buffer: ReplayBuffer, ensemble, ac: ActorCritic,
                      model_buffer: ReplayBuffer, cfg: RolloutConfig,
                      rng: np.random.Generator, epsilon: float,
                      goal_sampler=None,
                      goal_map: GoalMapping = identity_goal_map) -> int:
    """Generate K branched rollouts of k model steps from states sampled out of
    real experience, append them to the model buffer, and return the number of
    transitions added.

    Rollout behavioral goals per ``cfg.goal_strategy``: "relabel" draws a
    hindsight (future-achieved) goal from the source trajectory, "no_relabel"
    keeps the trajectory's original desired goal, "now_desired" draws fresh
    desired goals (requires ``goal_sampler``).
    """
    if len(env_buffer) == 0:
        raise ValueError("environment buffer is empty")
    if not getattr(ensemble, "trained", False):
        raise ValueError("dynamics ensemble must be trained before rollouts")
    K, k = cfg.per_iteration, cfg.length
    batch = env_buffer.sample(K, rng)
    if cfg.goal_strategy == "relabel":
        goals = future_achieved_goals(batch, np.arange(K), rng)
    elif cfg.goal_strategy == "no_relabel":
        goals = batch.goals
    else:
        if goal_sampler is None:
            raise ValueError("now_desired rollout strategy needs a goal sampler")
        goals = goal_sampler(K, rng)

    states = np.empty((k + 1, K, env_buffer._states.shape[1]))
    rewards = np.empty((k, K))
    actions = np.empty((k, K, env_buffer._actions.shape[1]))
    states[0] = batch.states
    for step in range(k):
        a = ac.act(states[step], goals)
        states[step + 1] = ensemble.step_batch(states[step], a, rng)
        actions[step] = a
        rewards[step] = goal_reward(states[step + 1], goals, epsilon, goal_map)
    for i in range(K):
        model_buffer.add_trajectory(Trajectory(
            states=states[:, i], actions=actions[:, i], rewards=rewards[:, i],
            goal=goals[i]))
    return K * k


def real_fraction_size(alpha: float, batch_size: int) -> int:
    """Number of real-environment samples per mixed batch: ceil(alpha * B)."""
    return min(batch_size, math.ceil(alpha * batch_size))


def mixed_batch(env_buffer: ReplayBuffer, model_buffer: Optional[ReplayBuffer],
                cfg: DdpgConfig, rng: np.random.Generator) -> TransitionBatch:
    """Mixture batch: ceil(alpha*B) real transitions, the rest model-generated.
    Before the model buffer holds anything the batch degrades to all-real."""
    if len(env_buffer) == 0 and (model_buffer is None or len(model_buffer) == 0):
        raise ValueError("both buffers are empty")
    B = cfg.batch_size
    if model_buffer is None or len(model_buffer) == 0:
        return env_buffer.sample(B, rng)
    n_real = real_fraction_size(cfg.mixture_alpha, B)
    parts = []
    if n_real:
        parts.append(env_buffer.sample(n_real, rng))
    if B - n_real:
        parts.append(model_buffer.sample(B - n_real, rng))
    return TransitionBatch.concat(parts) if len(parts) > 1 else parts[0]


@dataclass
class UmpoStats:
    critic_loss: float = 0.0
    actor_q: float = 0.0
    gradient_steps: int = 0
    model_transitions_added: int = 0


def umpo_train(ac: ActorCritic, env_buffer: ReplayBuffer,
               real_batch_source, ensemble, model_buffer: Optional[ReplayBuffer],
               rollout_cfg: Optional[RolloutConfig], rng: np.random.Generator,
               epsilon: float, iterations: int = 1, gradient_steps: int = 100,
               goal_sampler=None, goal_map: GoalMapping = identity_goal_map,
               use_model_rollouts: bool = True) -> UmpoStats:
    """UMPO outer loop: per iteration, refresh branched rollouts, then run
    DDPG updates on mixed batches whose real portion comes (already relabeled)
    from ``real_batch_source(n)``."""
    cfg = ac.config
    B = cfg.batch_size
    stats = UmpoStats()
    for _ in range(iterations):
        if use_model_rollouts and model_buffer is not None and len(env_buffer) > 0 \
                and getattr(ensemble, "trained", False):
            stats.model_transitions_added += branched_rollouts(
                env_buffer, ensemble, ac, model_buffer, rollout_cfg, rng,
                epsilon, goal_sampler, goal_map)
        if gradient_steps == 0 or len(env_buffer) == 0:
            continue
        model_ready = (use_model_rollouts and model_buffer is not None
                       and len(model_buffer) > 0)
        n_real = real_fraction_size(cfg.mixture_alpha, B) if model_ready else B
        n_model = B - n_real
        real_big = real_batch_source(gradient_steps * n_real)
        model_big = model_buffer.sample(gradient_steps * n_model, rng) if n_model else None
        for i in range(gradient_steps):
            real_part = real_big.slice(i * n_real, (i + 1) * n_real)
            if model_big is not None:
                model_part = model_big.slice(i * n_model, (i + 1) * n_model)
                batch = TransitionBatch.concat([real_part, model_part])
            else:
                batch = real_part
            stats.critic_loss += ac.critic_update(batch)
            stats.actor_q += ac.actor_update(batch)
            ac.soft_target_update()
            stats.gradient_steps += 1
    if stats.gradient_steps:
        stats.critic_loss /= stats.gradient_steps
        stats.actor_q /= stats.gradient_steps
    return stats
