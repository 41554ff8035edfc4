"""Goal relabeling: hindsight strategies and foresight goal inference (FGI).

Hindsight strategies rewrite a transition's goal to a goal actually achieved
later in its own trajectory. FGI instead rolls the current policy forward in a
learned dynamics model from the transition's successor state, relabeling with
the goal the policy itself would reach; long lookaheads optionally fall back to
capped hindsight relabeling.

Rewards are always recomputed from the stored next state, so every relabeled
transition satisfies ``reward == goal_reward(next_state, new_goal, eps)``.

Two entry layers: single-transition operations on ``Trajectory`` objects
(reference semantics, used by tests and probes) and a vectorized batch path
used by training, driven by a trajectory-context view (duck-typed: ``t``,
``length``, ``next_states``, ``goals``, ``achieved_goal(rows, j)``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from mapgo.gomdp import GoalMapping, Trajectory, Transition, goal_reward, identity_goal_map

Array = np.ndarray

SOURCE_HINDSIGHT = "hindsight-trajectory"
SOURCE_MODEL = "model-rollout"


@dataclass
class RelabelOutcome:
    goal: Array
    reward: float
    source: str


# -- strategy descriptors --------------------------------------------------------

@dataclass
class HerFuture:
    pass


@dataclass
class HerFinal:
    pass


@dataclass
class HerEpisode:
    pass


@dataclass
class Fgi:
    """Foresight relabeling via model rollouts.

    model: anything with ``step_batch(states, actions, rng) -> next_states``
    (the dynamics ensemble, or exact dynamics for oracle checks). ``policy`` is
    a callable (states, goals) -> actions, typically the current deterministic
    actor.

    her_fallback: draw the rollout step h over the whole remaining trajectory
    and divert draws beyond ``max_rollout_length`` to capped hindsight
    relabeling. With the fallback off, h is drawn within the cap and every
    relabel is a model rollout.

    condition_on: "original_goal" rolls the policy toward the transition's own
    stored goal; "interim_future_goal" draws a hindsight goal first and rolls
    toward that instead. literal_branch switches the fallback test from the
    drawn step to the whole trajectory length (a stricter reading that disables
    rollouts on long trajectories; kept for comparison).
    """
    model: object
    policy: Callable[[Array, Array], Array]
    max_rollout_length: int = 20
    her_fallback: bool = True
    condition_on: str = "original_goal"
    literal_branch: bool = False
    n_samples: int = 1

    def __post_init__(self):
        if self.max_rollout_length < 1:
            raise ValueError("max rollout length must be >= 1")
        if self.condition_on not in ("original_goal", "interim_future_goal"):
            raise ValueError(f"unknown condition_on {self.condition_on!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def _require_usable(strategy, trajectory_lengths) -> None:
    if isinstance(strategy, Fgi):
        trained = getattr(strategy.model, "trained", True)
        if not trained:
            raise ValueError("FGI requires a trained dynamics model")
        if np.any(np.asarray(trajectory_lengths) < 2):
            raise ValueError("FGI requires trajectories of length >= 2")


# -- single-transition operations -------------------------------------------------

def her_future(trajectory: Trajectory, t: int, rng: np.random.Generator,
               epsilon: float, goal_map: GoalMapping = identity_goal_map,
               max_k: Optional[int] = None) -> RelabelOutcome:
    """Relabel with a state achieved strictly after s_t in the same episode:
    goal = phi(s_{t+k}), k uniform on {1, ..., L-t} (optionally capped)."""
    L = trajectory.length
    if L < 1:
        raise ValueError("empty trajectory")
    if t >= L:
        raise ValueError(f"step index {t} out of range for length {L}")
    hi = L - t
    if max_k is not None:
        hi = min(hi, max_k)
    k = int(rng.integers(1, hi, endpoint=True))
    goal = goal_map(trajectory.states[t + k]).copy()
    reward = goal_reward(trajectory.states[t + 1], goal, epsilon, goal_map)
    return RelabelOutcome(goal=goal, reward=float(reward), source=SOURCE_HINDSIGHT)


def her_final(trajectory: Trajectory, t: int, epsilon: float,
              goal_map: GoalMapping = identity_goal_map) -> RelabelOutcome:
    """Relabel with the episode's final visited state."""
    if trajectory.length < 1:
        raise ValueError("empty trajectory")
    goal = goal_map(trajectory.states[-1]).copy()
    reward = goal_reward(trajectory.states[t + 1], goal, epsilon, goal_map)
    return RelabelOutcome(goal=goal, reward=float(reward), source=SOURCE_HINDSIGHT)


def her_episode(trajectory: Trajectory, t: int, rng: np.random.Generator,
                epsilon: float, goal_map: GoalMapping = identity_goal_map) -> RelabelOutcome:
    """Relabel with a state drawn uniformly from the whole episode's visited
    states (possibly before t)."""
    L = trajectory.length
    if L < 1:
        raise ValueError("empty trajectory")
    j = int(rng.integers(1, L, endpoint=True))
    goal = goal_map(trajectory.states[j]).copy()
    reward = goal_reward(trajectory.states[t + 1], goal, epsilon, goal_map)
    return RelabelOutcome(goal=goal, reward=float(reward), source=SOURCE_HINDSIGHT)


def fgi_rollout_goal(start_state: Array, condition_goal: Array, h: int,
                     model, policy, rng: np.random.Generator,
                     goal_map: GoalMapping = identity_goal_map) -> Array:
    """Deterministic-core FGI lookahead: roll `h` model steps from start_state
    with actions policy(s, condition_goal); returns phi(final state)."""
    s = np.asarray(start_state, dtype=float)[None, :]
    g = np.asarray(condition_goal, dtype=float)[None, :]
    for _ in range(h):
        a = policy(s, g)
        s = model.step_batch(s, a, rng)
    return goal_map(s[0]).copy()


def fgi_relabel(transition: Transition, trajectory: Trajectory, strategy: Fgi,
                rng: np.random.Generator, epsilon: float,
                goal_map: GoalMapping = identity_goal_map) -> RelabelOutcome:
    """Foresight relabel of one transition (see ``Fgi`` for the knobs)."""
    L = trajectory.length
    _require_usable(strategy, [L])
    t = transition.step_index
    H = strategy.max_rollout_length

    if strategy.her_fallback:
        h = int(rng.integers(1, L - 1, endpoint=True))
        fallback = (L > H) if strategy.literal_branch else (h > H)
        if fallback:
            return her_future(trajectory, t, rng, epsilon, goal_map, max_k=H)
    else:
        h = int(rng.integers(1, min(L - 1, H), endpoint=True))

    if strategy.condition_on == "interim_future_goal":
        cond = her_future(trajectory, t, rng, epsilon, goal_map).goal
    else:
        cond = transition.goal
    goals = [fgi_rollout_goal(transition.next_state, cond, h, strategy.model,
                              strategy.policy, rng, goal_map)
             for _ in range(strategy.n_samples)]
    goal = goals[0] if strategy.n_samples == 1 else np.mean(goals, axis=0)
    reward = goal_reward(transition.next_state, goal, epsilon, goal_map)
    return RelabelOutcome(goal=goal, reward=float(reward), source=SOURCE_MODEL)


# -- vectorized batch path ---------------------------------------------------------

class TrajectoryListContext:
    """Trajectory-context view over a list of Trajectory objects: one row per
    transition, in order. Used for probe-set snapshots and tests."""

    def __init__(self, trajectories, goal_map: GoalMapping = identity_goal_map):
        self.trajectories = list(trajectories)
        self.goal_map = goal_map
        ts, Ls, owner = [], [], []
        ns, gs = [], []
        for i, traj in enumerate(self.trajectories):
            for t in range(traj.length):
                ts.append(t)
                Ls.append(traj.length)
                owner.append(i)
                ns.append(traj.states[t + 1])
                gs.append(traj.goal)
        self.t = np.array(ts, dtype=int)
        self.length = np.array(Ls, dtype=int)
        self.owner = np.array(owner, dtype=int)
        self.next_states = np.array(ns, dtype=float)
        self.goals = np.array(gs, dtype=float)

    def __len__(self):
        return len(self.t)

    def achieved_goal(self, rows: Array, j: Array) -> Array:
        out = np.empty((len(rows), self.goals.shape[1]))
        for i, (r, jj) in enumerate(zip(rows, j)):
            out[i] = self.goal_map(self.trajectories[self.owner[r]].states[jj])
        return out


def future_achieved_goals(ctx, rows: Array, rng: np.random.Generator,
                  max_k: Optional[int] = None) -> Array:
    hi = ctx.length[rows] - ctx.t[rows]
    if max_k is not None:
        hi = np.minimum(hi, max_k)
    k = rng.integers(1, hi, endpoint=True)
    return ctx.achieved_goal(rows, ctx.t[rows] + k)


def _batched_fgi_goals(ctx, rows: Array, h: Array, strategy: Fgi,
                       rng: np.random.Generator,
                       goal_map: GoalMapping) -> Array:
    if strategy.condition_on == "interim_future_goal":
        cond = future_achieved_goals(ctx, rows, rng)
    else:
        cond = ctx.goals[rows]
    # Sort rows by descending rollout length so the still-active set at every
    # step is a contiguous prefix (slices instead of gathers).
    order = np.argsort(-h, kind="stable")
    h_sorted = h[order]
    cond_sorted = np.ascontiguousarray(cond[order])
    start = ctx.next_states[rows][order]
    dtype = getattr(strategy.model, "rollout_dtype", None)
    if dtype is not None:
        cond_sorted = cond_sorted.astype(dtype)

    samples = []
    max_h = int(h_sorted[0]) if len(h_sorted) else 0
    for _ in range(strategy.n_samples):
        states = start.astype(dtype) if dtype is not None else start.copy()
        for step in range(1, max_h + 1):
            m = int(np.searchsorted(-h_sorted, -step, side="right"))
            if m == 0:
                break
            a = strategy.policy(states[:m], cond_sorted[:m])
            states[:m] = strategy.model.step_batch(states[:m], a, rng)
        samples.append(states)
    final = samples[0] if strategy.n_samples == 1 else np.mean(samples, axis=0)
    goals = np.empty((len(rows), ctx.goals.shape[1]))
    goals[order] = goal_map(final)
    return goals


def relabel_rows(ctx, rows: Array, strategy, rng: np.random.Generator,
                 epsilon: float, goal_map: GoalMapping = identity_goal_map):
    """Relabel the given context rows under a strategy. Returns
    (new_goals, new_rewards, model_rollout_mask) for those rows."""
    rows = np.asarray(rows, dtype=int)
    m = len(rows)
    model_mask = np.zeros(m, dtype=bool)
    if m == 0:
        return (np.empty((0, ctx.goals.shape[1])), np.empty(0), model_mask)

    if isinstance(strategy, HerFuture):
        goals = future_achieved_goals(ctx, rows, rng)
    elif isinstance(strategy, HerFinal):
        goals = ctx.achieved_goal(rows, ctx.length[rows])
    elif isinstance(strategy, HerEpisode):
        j = rng.integers(1, ctx.length[rows], endpoint=True)
        goals = ctx.achieved_goal(rows, j)
    elif isinstance(strategy, Fgi):
        _require_usable(strategy, ctx.length[rows])
        H = strategy.max_rollout_length
        L = ctx.length[rows]
        if strategy.her_fallback:
            h = rng.integers(1, np.maximum(L - 1, 1), endpoint=True)
            fallback = (L > H) if strategy.literal_branch else (h > H)
            model_mask = ~fallback
            goals = np.empty((m, ctx.goals.shape[1]))
            fb_rows = np.nonzero(fallback)[0]
            if len(fb_rows):
                goals[fb_rows] = future_achieved_goals(ctx, rows[fb_rows], rng, max_k=H)
            md_rows = np.nonzero(model_mask)[0]
            if len(md_rows):
                goals[md_rows] = _batched_fgi_goals(
                    ctx, rows[md_rows], h[md_rows], strategy, rng, goal_map)
        else:
            h = rng.integers(1, np.minimum(np.maximum(L - 1, 1), H), endpoint=True)
            model_mask[:] = True
            goals = _batched_fgi_goals(ctx, rows, h, strategy, rng, goal_map)
    else:
        raise ValueError(f"unknown relabel strategy {strategy!r}")

    rewards = goal_reward(ctx.next_states[rows], goals, epsilon, goal_map)
    return goals, np.atleast_1d(rewards), model_mask


def relabel_batch(batch, strategy, relabel_fraction: float,
                  rng: np.random.Generator, epsilon: float,
                  goal_map: GoalMapping = identity_goal_map):
    """Independently relabel each transition of a sampled batch with probability
    ``relabel_fraction``; others keep their original goal. Returns a new batch
    with goals, rewards, and per-row source tags updated."""
    if not (0.0 <= relabel_fraction <= 1.0):
        raise ValueError("relabel_fraction must be in [0, 1]")
    n = len(batch.goals)
    mask = rng.random(n) < relabel_fraction
    rows = np.nonzero(mask)[0]
    goals = batch.goals.copy()
    rewards = goal_reward(batch.next_states, goals, epsilon, goal_map)
    sources = np.full(n, "original", dtype=object)
    if len(rows):
        new_goals, new_rewards, model_mask = relabel_rows(
            batch, rows, strategy, rng, epsilon, goal_map)
        goals[rows] = new_goals
        rewards = np.asarray(rewards, dtype=float)
        rewards[rows] = new_rewards
        sources[rows] = SOURCE_HINDSIGHT
        sources[rows[model_mask]] = SOURCE_MODEL
    return batch.with_goals(goals, rewards, sources)
