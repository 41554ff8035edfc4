"""Feed-forward network machinery: MLP forward/backward, Adam, parameter
checkpoints, and finite-difference gradient verification.

Everything is plain numpy. ``Mlp`` is a single network; ``StackedMlp`` holds N
independent networks in stacked arrays so ensemble members train in one set of
batched matmuls. Both expose the same parameter-list convention
``[W0, b0, W1, b1, ...]`` consumed by ``Adam``.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

Array = np.ndarray

# Log-variance soft-clamp range for gaussian heads; keeps predicted covariance
# away from collapse/explosion.
LOGVAR_MIN = -10.0
LOGVAR_MAX = 0.5


def _softplus(x: Array) -> Array:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def soft_clamp(x: Array, lo: float = LOGVAR_MIN, hi: float = LOGVAR_MAX) -> Array:
    """Smoothly squash x into (lo, hi) using softplus on both sides."""
    x = hi - _softplus(hi - x)
    return lo + _softplus(x - lo)


def _soft_clamp_grad(x: Array, lo: float = LOGVAR_MIN, hi: float = LOGVAR_MAX) -> Array:
    inner = hi - _softplus(hi - x)
    return _sigmoid(hi - x) * _sigmoid(inner - lo)


class Mlp:
    """Fully connected network with rectifier hidden units.

    output: "identity" (linear), "tanh" (bounded squash, scaled by
    ``output_scale``), or "gaussian" (last layer emits [mean | log_var] halves,
    log-variance soft-clamped).
    """

    def __init__(self, sizes: Sequence[int], output: str = "identity",
                 rng: np.random.Generator = None, dtype=np.float64,
                 final_scale: float = 1.0, output_scale: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if output not in ("identity", "tanh", "gaussian"):
            raise ValueError(f"unknown output head {output!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = list(sizes)
        self.output = output
        self.dtype = np.dtype(dtype)
        self.output_scale = output_scale
        self.params: List[Array] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if i == len(sizes) - 2:
                w *= final_scale
            self.params.append(w.astype(self.dtype))
            self.params.append(b.astype(self.dtype))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: Array, need_cache: bool = False):
        """Returns the output (B, out) or, with need_cache, (output, cache).

        For the gaussian head the output is the concatenation [mean | log_var];
        callers split it with ``split_gaussian``.
        """
        squeeze = False
        x = np.asarray(x)
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        if x.ndim == 1:
            x, squeeze = x[None, :], True
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input dim {x.shape[-1]} != expected {self.sizes[0]}")
        acts = [x] if need_cache else None
        h = x
        n = self.n_layers
        for i in range(n):
            z = h @ self.params[2 * i]
            z += self.params[2 * i + 1]
            if i < n - 1:
                h = np.maximum(z, 0.0, out=z)
                if need_cache:
                    acts.append(h)
            else:
                h = z
        out, head_cache = self._apply_head(h)
        if squeeze:
            out = out[0]
        if need_cache:
            return out, (acts, head_cache)
        return out

    def _apply_head(self, z: Array):
        if self.output == "identity":
            return z, None
        if self.output == "tanh":
            y = np.tanh(z) * self.output_scale
            return y, y
        half = z.shape[-1] // 2
        raw_lv = z[..., half:]
        lv = soft_clamp(raw_lv)
        out = np.concatenate([z[..., :half], lv], axis=-1)
        return out, raw_lv

    def backward(self, cache, grad_out: Array, need_input_grad: bool = False,
                 need_param_grads: bool = True):
        """Exact gradients for the forward pass that produced ``cache``.

        grad_out is dLoss/dOutput. Returns (grads, grad_input); grads mirrors
        ``self.params`` (None when need_param_grads is off).
        """
        if cache is None:
            raise ValueError("backward requires the cache from forward(need_cache=True)")
        acts, head_cache = cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None, :]
        g = self._head_backward(g, head_cache)
        grads = [None] * len(self.params) if need_param_grads else None
        n = self.n_layers
        for i in range(n - 1, -1, -1):
            a = acts[i]
            if need_param_grads:
                grads[2 * i] = a.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[2 * i].T)
                g *= (acts[i] > 0)
            elif need_input_grad:
                g = g @ self.params[0].T
        grad_input = g if need_input_grad else None
        return grads, grad_input

    def _head_backward(self, g: Array, head_cache) -> Array:
        if self.output == "identity":
            return g
        if self.output == "tanh":
            y = head_cache
            return g * (self.output_scale - y * y / self.output_scale)
        raw_lv = head_cache
        half = raw_lv.shape[-1]
        gz = np.concatenate([g[..., :half], g[..., half:] * _soft_clamp_grad(raw_lv)],
                            axis=-1)
        return gz

    # -- parameter plumbing ----------------------------------------------------

    def state_dict(self) -> dict:
        d = {f"W{i}": self.params[2 * i] for i in range(self.n_layers)}
        d.update({f"b{i}": self.params[2 * i + 1] for i in range(self.n_layers)})
        return d

    def load_state_dict(self, d: dict):
        for i in range(self.n_layers):
            w, b = d[f"W{i}"], d[f"b{i}"]
            if w.shape != self.params[2 * i].shape or b.shape != self.params[2 * i + 1].shape:
                raise ValueError("checkpoint shapes do not match network")
            self.params[2 * i] = w.astype(self.dtype)
            self.params[2 * i + 1] = b.astype(self.dtype)

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other.output = self.output
        other.dtype = self.dtype
        other.output_scale = self.output_scale
        other.params = [p.copy() for p in self.params]
        return other


def split_gaussian(out: Array) -> Tuple[Array, Array]:
    """Split a gaussian-head output into (mean, log_variance)."""
    half = out.shape[-1] // 2
    return out[..., :half], out[..., half:]


class StackedMlp:
    """N independent MLPs evaluated with stacked (N, B, d) matmuls.

    Same head options as ``Mlp``; parameters are [W0, b0, ...] with shapes
    (N, fan_in, fan_out) and (N, 1, fan_out).
    """

    def __init__(self, n_stack: int, sizes: Sequence[int], output: str = "identity",
                 rng: np.random.Generator = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        if output not in ("identity", "gaussian"):
            raise ValueError(f"unsupported stacked head {output!r}")
        self.n_stack = n_stack
        self.sizes = list(sizes)
        self.output = output
        self.dtype = np.dtype(dtype)
        self.params: List[Array] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-limit, limit, size=(n_stack, fan_in, fan_out))
            b = np.zeros((n_stack, 1, fan_out))
            self.params.append(w.astype(self.dtype))
            self.params.append(b.astype(self.dtype))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: Array, need_cache: bool = False):
        """x: (N, B, in) or (B, in) broadcast to all members. Output (N, B, out)."""
        x = np.asarray(x)
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        if x.ndim == 2:
            x = np.broadcast_to(x, (self.n_stack,) + x.shape)
        acts = [x] if need_cache else None
        h = x
        n = self.n_layers
        for i in range(n):
            z = np.matmul(h, self.params[2 * i])
            z += self.params[2 * i + 1]
            if i < n - 1:
                h = np.maximum(z, 0.0, out=z)
                if need_cache:
                    acts.append(h)
            else:
                h = z
        head_cache = None
        if self.output == "gaussian":
            half = h.shape[-1] // 2
            head_cache = h[..., half:]
            h = np.concatenate([h[..., :half], soft_clamp(head_cache)], axis=-1)
        if need_cache:
            return h, (acts, head_cache)
        return h

    def backward(self, cache, grad_out: Array):
        acts, head_cache = cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if self.output == "gaussian":
            half = head_cache.shape[-1]
            g = np.concatenate([g[..., :half], g[..., half:] * _soft_clamp_grad(head_cache)],
                               axis=-1)
        grads = [None] * len(self.params)
        n = self.n_layers
        for i in range(n - 1, -1, -1):
            a = acts[i]
            grads[2 * i] = np.matmul(a.transpose(0, 2, 1), g)
            grads[2 * i + 1] = g.sum(axis=1, keepdims=True)
            if i > 0:
                g = np.matmul(g, self.params[2 * i].transpose(0, 2, 1))
                g *= (acts[i] > 0)
        return grads

    def member_params(self, i: int) -> List[Array]:
        """Views of member i's parameters (weights (in,out), biases (out,))."""
        out = []
        for j in range(self.n_layers):
            out.append(self.params[2 * j][i])
            out.append(self.params[2 * j + 1][i, 0])
        return out

    def forward_member(self, i: int, x: Array) -> Array:
        """Forward a single member on a 2-D batch (cheaper than forwarding the
        whole stack when only one member's prediction is needed)."""
        h = np.asarray(x)
        if h.dtype != self.dtype:
            h = h.astype(self.dtype)
        n = self.n_layers
        for j in range(n):
            z = h @ self.params[2 * j][i]
            z += self.params[2 * j + 1][i, 0]
            h = np.maximum(z, 0.0, out=z) if j < n - 1 else z
        if self.output == "gaussian":
            half = h.shape[-1] // 2
            h = np.concatenate([h[..., :half], soft_clamp(h[..., half:])], axis=-1)
        return h

    def state_dict(self) -> dict:
        d = {f"W{i}": self.params[2 * i] for i in range(self.n_layers)}
        d.update({f"b{i}": self.params[2 * i + 1] for i in range(self.n_layers)})
        return d

    def load_state_dict(self, d: dict):
        for i in range(self.n_layers):
            self.params[2 * i] = d[f"W{i}"].astype(self.dtype)
            self.params[2 * i + 1] = d[f"b{i}"].astype(self.dtype)


class Adam:
    """Standard Adam on a list of parameter arrays (first/second moment
    accumulators per parameter, bias-corrected)."""

    def __init__(self, params_like: Sequence[Array], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params_like]
        self.v = [np.zeros_like(p) for p in params_like]

    def step(self, params: List[Array], grads: Sequence[Array]):
        """Apply one update in place; returns params for convenience."""
        if len(params) != len(self.m):
            raise ValueError("parameter/optimizer shape mismatch")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params

    def state_dict(self) -> dict:
        d = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            d[f"m{i}"] = m
            d[f"v{i}"] = v
        return d

    def load_state_dict(self, d: dict):
        self.t = int(d["t"])
        self.m = [d[f"m{i}"] for i in range(len(self.m))]
        self.v = [d[f"v{i}"] for i in range(len(self.v))]


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    n_checked: int


def relative_error(a: float, b: float) -> float:
    denom = max(abs(a) + abs(b), 1e-10)
    return abs(a - b) / denom


def finite_difference_check(net: Mlp, x: Array,
                            loss_fn: Callable[[Array], Tuple[float, Array]],
                            tolerance: float = 1e-4,
                            perturbation: float = 1e-5) -> GradCheckReport:
    """Compare backward() against central finite differences.

    loss_fn maps the network output to (scalar loss, dLoss/dOutput). Every
    parameter entry is perturbed by +-perturbation.
    """
    out, cache = net.forward(x, need_cache=True)
    _, grad_out = loss_fn(out)
    grads, _ = net.backward(cache, grad_out)

    max_err = 0.0
    n = 0
    for p, g in zip(net.params, grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + perturbation
            lp, _ = loss_fn(net.forward(x))
            flat_p[i] = orig - perturbation
            lm, _ = loss_fn(net.forward(x))
            flat_p[i] = orig
            fd = (lp - lm) / (2.0 * perturbation)
            max_err = max(max_err, relative_error(float(flat_g[i]), float(fd)))
            n += 1
    return GradCheckReport(passed=max_err <= tolerance, max_rel_error=max_err,
                           tolerance=tolerance, n_checked=n)


# -- checkpoints ---------------------------------------------------------------
#
# A checkpoint is an .npz archive. Array keys are "<component>/<name>" and the
# "__meta__" entry stores a JSON description. Arrays round-trip bit-exactly.

def save_checkpoint(path, components: dict, meta: dict = None):
    """components: mapping name -> dict of arrays (a state_dict)."""
    flat = {}
    for comp, state in components.items():
        for key, arr in state.items():
            flat[f"{comp}/{key}"] = np.asarray(arr)
    flat["__meta__"] = np.frombuffer(
        json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **flat)


def load_checkpoint(path):
    """Returns (components, meta) inverse to save_checkpoint."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        comps: dict = {}
        for key in data.files:
            if key == "__meta__":
                continue
            comp, name = key.split("/", 1)
            comps.setdefault(comp, {})[name] = data[key]
    return comps, meta
