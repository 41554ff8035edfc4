"""Bootstrapped probabilistic dynamics ensemble.

N networks each predict a Gaussian over the next-state delta with diagonal
covariance, trained by negative log likelihood on bootstrap resamples of the
training split. A shared validation split ranks members; the lowest-loss
members form the elite set used for stochastic rollouts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from mapgo.nets import Adam, StackedMlp, split_gaussian

Array = np.ndarray


def nll_loss(mean: Array, variance: Array, target: Array, reduce: str = "sum"):
    """Gaussian negative log likelihood (up to the constant term):
    (mu - s')^T Sigma^-1 (mu - s') + log det Sigma, diagonal Sigma.

    Accepts single vectors or batches; "sum" reduces over the batch,
    "none" returns per-sample values.
    """
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    target = np.asarray(target, dtype=float)
    if mean.shape[-1] != target.shape[-1]:
        raise ValueError("mean/target dimension mismatch")
    if np.any(variance <= 0):
        raise ValueError("variance must be strictly positive")
    d = mean - target
    per_sample = (d * d / variance).sum(axis=-1) + np.log(variance).sum(axis=-1)
    if reduce == "sum":
        return float(per_sample.sum())
    if reduce == "none":
        return per_sample
    raise ValueError(f"unknown reduce {reduce!r}")


def nll_grad(mean: Array, log_variance: Array, target: Array):
    """d(nll)/d(mean) and d(nll)/d(log_variance) for the per-sample loss."""
    var = np.exp(log_variance)
    d = mean - target
    return 2.0 * d / var, 1.0 - d * d / var


class Normalizer:
    """Per-dimension affine normalization; statistics frozen at fit time."""

    def __init__(self, dim: int, dtype=np.float64):
        self.mean = np.zeros(dim, dtype=dtype)
        self.std = np.ones(dim, dtype=dtype)

    def fit(self, data: Array):
        self.mean = data.mean(axis=0).astype(self.mean.dtype)
        std = data.std(axis=0)
        self.std = np.where(std < 1e-6, 1.0, std).astype(self.std.dtype)

    def normalize(self, data: Array) -> Array:
        return (data - self.mean) / self.std

    def denormalize(self, data: Array) -> Array:
        return data * self.std + self.mean

    def state_dict(self):
        return {"mean": self.mean, "std": self.std}

    def load_state_dict(self, d):
        self.mean, self.std = d["mean"], d["std"]


@dataclass
class EnsembleConfig:
    n_models: int = 6
    n_elites: int = 3
    hidden: Sequence[int] = (200, 200, 200, 200)
    lr: float = 1e-3
    batch_size: int = 256
    validation_fraction: float = 0.2
    patience: int = 5
    max_epochs: int = 100
    max_epochs_after_first: Optional[int] = None  # cheaper refresh once warm
    min_buffer: int = 256
    max_fit_samples: Optional[int] = None         # subsample cap per training call
    predict_delta: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if not (0 < self.n_elites <= self.n_models):
            raise ValueError("need 0 < n_elites <= n_models")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must be in (0, 1)")


@dataclass
class ModelTrainReport:
    trained: bool
    epochs: int = 0
    stop_reason: str = "skipped: insufficient data"
    train_curves: List[List[float]] = field(default_factory=list)   # per member
    val_curves: List[List[float]] = field(default_factory=list)     # per member
    val_losses: List[float] = field(default_factory=list)           # final, per member
    elite_indices: List[int] = field(default_factory=list)

    def to_row(self) -> dict:
        return {"trained": self.trained, "epochs": self.epochs,
                "stop_reason": self.stop_reason,
                "val_losses": [round(v, 6) for v in self.val_losses],
                "elites": list(self.elite_indices)}


class DynamicsEnsemble:
    """Ensemble transition model over (state, action) -> next state.

    Members share a validation split but train on independent bootstrap
    resamples. Rollout sampling draws uniformly among the elite members and
    samples from the predicted Gaussian.
    """

    def __init__(self, state_dim: int, action_dim: int,
                 config: EnsembleConfig = None, rng: np.random.Generator = None):
        self.config = config if config is not None else EnsembleConfig()
        cfg = self.config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.action_dim = action_dim
        dtype = np.dtype(cfg.dtype)
        sizes = [state_dim + action_dim, *cfg.hidden, 2 * state_dim]
        self.net = StackedMlp(cfg.n_models, sizes, output="gaussian", rng=rng, dtype=dtype)
        self.opt = Adam(self.net.params, lr=cfg.lr)
        self.input_norm = Normalizer(state_dim + action_dim, dtype=dtype)
        self.target_norm = Normalizer(state_dim, dtype=dtype)
        self.elite_indices: List[int] = []
        self.val_losses: List[float] = []
        self.trained = False
        self._train_calls = 0

    # -- training ---------------------------------------------------------------

    def _targets(self, states, next_states):
        if self.config.predict_delta:
            return next_states - states
        return next_states

    def train(self, states: Array, actions: Array, next_states: Array,
              rng: np.random.Generator) -> ModelTrainReport:
        """One training call over the provided transition data (typically the
        environment buffer contents)."""
        cfg = self.config
        n = len(states)
        if n < cfg.min_buffer:
            return ModelTrainReport(trained=False)
        if cfg.max_fit_samples is not None and n > cfg.max_fit_samples:
            pick = rng.choice(n, size=cfg.max_fit_samples, replace=False)
            states, actions, next_states = states[pick], actions[pick], next_states[pick]
            n = cfg.max_fit_samples

        dtype = self.net.dtype
        inputs = np.concatenate([states, actions], axis=1).astype(dtype)
        targets = self._targets(states, next_states).astype(dtype)

        perm = rng.permutation(n)
        n_val = max(1, int(round(cfg.validation_fraction * n)))
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        self.input_norm.fit(inputs[train_idx])
        self.target_norm.fit(targets[train_idx])
        x_all = self.input_norm.normalize(inputs).astype(dtype)
        y_all = self.target_norm.normalize(targets).astype(dtype)
        x_val, y_val = x_all[val_idx], y_all[val_idx]

        n_train = len(train_idx)
        boot = rng.integers(0, n_train, size=(cfg.n_models, n_train))
        member_idx = train_idx[boot]          # (N, n_train) bootstrap resamples

        max_epochs = cfg.max_epochs
        if self._train_calls > 0 and cfg.max_epochs_after_first is not None:
            max_epochs = cfg.max_epochs_after_first

        report = ModelTrainReport(trained=True, stop_reason="max epochs")
        report.train_curves = [[] for _ in range(cfg.n_models)]
        report.val_curves = [[] for _ in range(cfg.n_models)]
        best_val = np.inf
        since_best = 0
        bs = cfg.batch_size
        for epoch in range(max_epochs):
            order = rng.permuted(member_idx, axis=1)
            epoch_loss = np.zeros(cfg.n_models)
            n_batches = 0
            for start in range(0, n_train, bs):
                cols = order[:, start:start + bs]
                xb = x_all[cols]              # (N, B, in)
                yb = y_all[cols]
                out, cache = self.net.forward(xb, need_cache=True)
                mean, logvar = split_gaussian(out)
                gmu, glv = nll_grad(mean, logvar, yb)
                b = xb.shape[1]
                grad = np.concatenate([gmu, glv], axis=-1) / b
                grads = self.net.backward(cache, grad.astype(dtype))
                self.opt.step(self.net.params, grads)
                per = ((mean - yb) ** 2 / np.exp(logvar) + logvar).sum(-1).mean(-1)
                epoch_loss += per
                n_batches += 1
            epoch_loss /= max(n_batches, 1)
            val = self._validation_losses(x_val, y_val)
            for i in range(cfg.n_models):
                report.train_curves[i].append(float(epoch_loss[i]))
                report.val_curves[i].append(float(val[i]))
            report.epochs = epoch + 1
            mean_val = float(val.mean())
            if mean_val < best_val - 1e-6:
                best_val = mean_val
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    report.stop_reason = f"validation plateau (patience {cfg.patience})"
                    break

        self.val_losses = [float(v) for v in self._validation_losses(x_val, y_val)]
        order = np.argsort(self.val_losses, kind="stable")
        self.elite_indices = [int(i) for i in order[:cfg.n_elites]]
        self._assert_elites()
        report.val_losses = list(self.val_losses)
        report.elite_indices = list(self.elite_indices)
        self.trained = True
        self._train_calls += 1
        return report

    def _validation_losses(self, x_val: Array, y_val: Array) -> Array:
        out = self.net.forward(x_val)
        mean, logvar = split_gaussian(out)
        per = ((mean - y_val) ** 2 / np.exp(logvar) + logvar).sum(-1)
        return per.mean(axis=-1)

    def _assert_elites(self):
        worst_elite = max(self.val_losses[i] for i in self.elite_indices)
        others = [v for i, v in enumerate(self.val_losses) if i not in self.elite_indices]
        if others and worst_elite > min(others) + 1e-12:
            raise AssertionError("elite set is not the lowest-validation-loss subset")

    # -- prediction and rollouts --------------------------------------------------

    def predict_all(self, states: Array, actions: Array):
        """Per-member Gaussian prediction for a batch: means and variances of the
        next state, shapes (N, B, ds)."""
        self._require_trained()
        x = self.input_norm.normalize(
            np.concatenate([states, actions], axis=-1).astype(self.net.dtype))
        out = self.net.forward(x)
        mean_n, logvar_n = split_gaussian(out)
        mean = self.target_norm.denormalize(mean_n)
        var = np.exp(logvar_n) * (self.target_norm.std ** 2)
        if self.config.predict_delta:
            mean = mean + states
        return mean, var

    def member_prediction(self, member: int, states: Array, actions: Array):
        """(mean, variance) of next state under one member."""
        mean, var = self.predict_all(states, actions)
        return mean[member], var[member]

    def step_batch(self, states: Array, actions: Array, rng: np.random.Generator) -> Array:
        """One stochastic model step per row: pick an elite member uniformly at
        random, then sample next state ~ N(mean, diag variance).

        Each row is evaluated only under its chosen member (rows grouped by
        member), so the cost is one network pass over the batch."""
        self._require_trained()
        dt = self.net.dtype
        states = np.atleast_2d(np.asarray(states))
        actions = np.atleast_2d(np.asarray(actions))
        b = states.shape[0]
        members = rng.choice(self.elite_indices, size=b)
        noise = rng.standard_normal((b, self.state_dim), dtype=dt)

        x = np.concatenate([states, actions], axis=-1).astype(dt, copy=False)
        x -= self.input_norm.mean
        x /= self.input_norm.std
        out = np.empty((b, 2 * self.state_dim), dtype=dt)
        for m in self.elite_indices:
            idx = np.nonzero(members == m)[0]
            if len(idx):
                out[idx] = self.net.forward_member(m, x[idx])
        mean_n = out[:, :self.state_dim]
        logvar_n = out[:, self.state_dim:]
        np.exp(0.5 * logvar_n, out=logvar_n)
        logvar_n *= self.target_norm.std
        noise *= logvar_n                     # sigma * eps
        next_states = self.target_norm.denormalize(mean_n).astype(dt, copy=False)
        if self.config.predict_delta:
            next_states += states.astype(dt, copy=False)
        next_states += noise
        return next_states

    def rollout_step(self, state: Array, action: Array, rng: np.random.Generator) -> Array:
        """Single-transition form of step_batch."""
        return self.step_batch(state[None, :], action[None, :], rng)[0]

    def rollout(self, start: Array, goal: Array, policy, steps: int,
                rng: np.random.Generator) -> Array:
        """Iterate policy + model for `steps` steps; returns the visited states
        after each step, shape (steps, ds) (or (steps, B, ds) for batched start)."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        single = np.asarray(start).ndim == 1
        s = np.atleast_2d(np.asarray(start, dtype=float))
        g = np.atleast_2d(np.asarray(goal, dtype=float))
        if g.shape[0] == 1 and s.shape[0] > 1:
            g = np.broadcast_to(g, (s.shape[0], g.shape[1]))
        out = []
        for _ in range(steps):
            a = policy(s, g)
            s = self.step_batch(s, a, rng)
            out.append(s)
        stacked = np.stack(out)
        return stacked[:, 0] if single else stacked

    def _require_trained(self):
        if not self.trained:
            raise ValueError("dynamics ensemble used before its first training call")

    @property
    def rollout_dtype(self):
        """Preferred working dtype for rollout state chains."""
        return self.net.dtype

    # -- checkpoint plumbing -------------------------------------------------------

    def state_dict(self) -> dict:
        d = self.net.state_dict()
        d["elite_indices"] = np.array(self.elite_indices, dtype=int)
        d["val_losses"] = np.array(self.val_losses, dtype=float)
        d["trained"] = np.array(int(self.trained))
        d["input_mean"] = self.input_norm.mean
        d["input_std"] = self.input_norm.std
        d["target_mean"] = self.target_norm.mean
        d["target_std"] = self.target_norm.std
        return d

    def load_state_dict(self, d: dict):
        self.net.load_state_dict(d)
        self.elite_indices = [int(i) for i in d["elite_indices"]]
        self.val_losses = [float(v) for v in d["val_losses"]]
        self.trained = bool(int(d["trained"]))
        self.input_norm.mean, self.input_norm.std = d["input_mean"], d["input_std"]
        self.target_norm.mean, self.target_norm.std = d["target_mean"], d["target_std"]
