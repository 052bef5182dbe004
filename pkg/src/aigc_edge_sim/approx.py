"""Small dense MLPs with exact reverse-mode gradients, an Adam/SGD optimizer,
finite-difference gradient checking and a versioned JSON snapshot format.

Every network in the package (IRL generator, critic and discriminator, the
diffusion actor and the twin Q-critics) is built from these pieces.
Arrays are float64; weight matrices are stored ``(fan_in, fan_out)`` so a
batch ``x`` of shape ``(B, fan_in)`` maps as ``x @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument, NumericError

MAGIC = "AES-MLP-1"

ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # derivative expressed through the pre-activation z and output a
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class Mlp:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self) -> None:
        n = len(self.layer_sizes) - 1
        if len(self.weights) != n or len(self.biases) != n or len(self.activations) != n:
            raise InvalidArgument("layer count mismatch between sizes, weights and activations")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]):
                raise InvalidArgument(f"weight {i} has shape {w.shape}")
            if b.shape != (self.layer_sizes[i + 1],):
                raise InvalidArgument(f"bias {i} has shape {b.shape}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise InvalidArgument(f"unknown activation {a!r}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in canonical order ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, layer_sizes, arrays, activations) -> "Mlp":
        return cls(list(layer_sizes), list(arrays[0::2]), list(arrays[1::2]), list(activations))

    def copy(self) -> "Mlp":
        return Mlp.from_arrays(self.layer_sizes, [a.copy() for a in self.arrays()], self.activations)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def macs_per_sample(self) -> int:
        return sum(self.layer_sizes[i] * self.layer_sizes[i + 1] for i in range(len(self.layer_sizes) - 1))

    def checksum(self) -> float:
        return float(sum(np.sum(a * (k + 1)) for k, a in enumerate(self.arrays())))


@dataclass
class MacCounter:
    """Accumulates multiply-accumulate operations of instrumented forward passes."""

    macs: int = 0


def _expand_activations(activation, n_layers: int) -> list[str]:
    if isinstance(activation, str):
        # hidden layers use the tag, the output layer is linear
        return [activation] * (n_layers - 1) + ["identity"]
    acts = list(activation)
    if len(acts) != n_layers:
        raise InvalidArgument(f"expected {n_layers} activation tags, got {len(acts)}")
    return acts


def mlp_init(layer_sizes: Sequence[int], activation="tanh", seed: int = 0, zero: bool = False) -> Mlp:
    """Glorot-uniform weights in ``±sqrt(6 / (fan_in + fan_out))``, zero biases.

    ``activation`` is either one tag for all hidden layers (output stays
    identity) or an explicit per-layer list.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise InvalidArgument(f"layer_sizes must have >= 2 positive entries, got {list(layer_sizes)}")
    acts = _expand_activations(activation, len(sizes) - 1)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if zero:
            weights.append(np.zeros((fan_in, fan_out)))
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases, acts)


def _as_batch(params: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.n_in:
        raise InvalidArgument(f"input shape {x.shape} does not match first layer size {params.n_in}")
    return x, single


def mlp_forward_cache(params: Mlp, x, counter: MacCounter | None = None):
    """Forward pass returning ``(output, cache)``; ``x`` is ``(in,)`` or ``(B, in)``."""
    h, single = _as_batch(params, x)
    inputs, pre, post = [], [], []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(h)
        z = h @ w + b
        h = _act(act, z)
        pre.append(z)
        post.append(h)
    if counter is not None:
        counter.macs += inputs[0].shape[0] * params.macs_per_sample()
    return (h[0] if single else h), (inputs, pre, post, single)


def mlp_forward(params: Mlp, x, counter: MacCounter | None = None) -> np.ndarray:
    return mlp_forward_cache(params, x, counter)[0]


def mlp_backward(params: Mlp, cache, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse pass from a cache. Parameter gradients are summed over the batch."""
    inputs, pre, post, single = cache
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != post[-1].shape:
        raise InvalidArgument(f"upstream gradient shape {g.shape} != output shape {post[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(params.weights))  # type: ignore[list-item]
    for i in range(len(params.weights) - 1, -1, -1):
        dz = g * _act_grad(params.activations[i], pre[i], post[i])
        grads[2 * i] = inputs[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        g = dz @ params.weights[i].T
    return grads, (g[0] if single else g)


def mlp_gradient(params: Mlp, x, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of ``<upstream, f(x)>`` w.r.t. parameters and input."""
    _, cache = mlp_forward_cache(params, x)
    return mlp_backward(params, cache, upstream)


@dataclass
class OptimizerState:
    lr: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None


def optimizer_init(params: Mlp, lr: float, mode: str = "adam", max_grad_norm: float | None = None) -> OptimizerState:
    if lr <= 0:
        raise InvalidArgument("learning rate must be positive")
    if mode not in ("adam", "sgd"):
        raise InvalidArgument(f"unknown optimizer mode {mode!r}")
    zeros = [np.zeros_like(a) for a in params.arrays()]
    return OptimizerState(lr=lr, m=zeros, v=[z.copy() for z in zeros], mode=mode, max_grad_norm=max_grad_norm)


def optimizer_step(params: Mlp, grads: Sequence[np.ndarray], state: OptimizerState) -> tuple[Mlp, OptimizerState]:
    """One descent step; returns new parameter and state objects.

    ``sgd`` mode is the plain ``w <- w - lr * g`` rule. To ascend an
    objective, pass its negated gradient.
    """
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise InvalidArgument("gradient list does not match parameter list")
    for g, a in zip(grads, arrays):
        if g.shape != a.shape:
            raise InvalidArgument(f"gradient shape {g.shape} != parameter shape {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to optimizer_step")
    grads = list(grads)
    if state.max_grad_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if norm > state.max_grad_norm:
            grads = [g * (state.max_grad_norm / norm) for g in grads]
    t = state.step + 1
    if state.mode == "sgd":
        new = [a - state.lr * g for a, g in zip(arrays, grads)]
        new_state = OptimizerState(state.lr, state.m, state.v, t, state.mode, state.beta1, state.beta2,
                                   state.eps, state.max_grad_norm)
    else:
        b1, b2 = state.beta1, state.beta2
        m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
        v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
        c1, c2 = 1 - b1**t, 1 - b2**t
        new = [a - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for a, mi, vi in zip(arrays, m, v)]
        new_state = OptimizerState(state.lr, m, v, t, state.mode, b1, b2, state.eps, state.max_grad_norm)
    return Mlp.from_arrays(params.layer_sizes, new, params.activations), new_state


def soft_update(target: Mlp, online: Mlp, rate: float) -> Mlp:
    """Polyak averaging ``target <- (1 - rate) * target + rate * online``."""
    if not 0.0 < rate <= 1.0:
        raise InvalidArgument(f"soft-update rate must lie in (0, 1], got {rate}")
    if target.layer_sizes != online.layer_sizes:
        raise InvalidArgument("target and online networks differ in shape")
    new = [(1.0 - rate) * t + rate * o for t, o in zip(target.arrays(), online.arrays())]
    return Mlp.from_arrays(target.layer_sizes, new, target.activations)


def grad_check(fn: Callable[[Mlp], tuple[float, list[np.ndarray]]], params: Mlp, eps: float = 1e-5) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(params)`` returns ``(scalar value, gradient list)`` with the gradient
    in ``params.arrays()`` order.
    """
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    _, analytic = fn(params)
    base = [a.copy() for a in params.arrays()]
    worst = 0.0
    for k, arr in enumerate(base):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                probe = [a.copy() for a in base]
                probe[k].reshape(-1)[j] += sign * eps
                vals.append(fn(Mlp.from_arrays(params.layer_sizes, probe, params.activations))[0])
            fd = (vals[0] - vals[1]) / (2.0 * eps)
            an = float(np.asarray(analytic[k]).reshape(-1)[j])
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


def save_mlp(params: Mlp, path) -> None:
    doc = {
        "magic": MAGIC,
        "layer_sizes": params.layer_sizes,
        "activations": params.activations,
        "arrays": [a.reshape(-1).tolist() for a in params.arrays()],
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_mlp(path) -> Mlp:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("magic") != MAGIC:
        raise InvalidArgument(f"{path}: not an {MAGIC} snapshot")
    sizes = doc["layer_sizes"]
    shapes = []
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        shapes.extend(((fi, fo), (fo,)))
    arrays = [np.asarray(flat, dtype=np.float64).reshape(shape) for flat, shape in zip(doc["arrays"], shapes)]
    return Mlp.from_arrays(sizes, arrays, doc["activations"])


@dataclass
class Trainable:
    """A network bundled with its optimizer state (convenience for training loops)."""

    net: Mlp
    opt: OptimizerState = field(repr=False)

    @classmethod
    def create(cls, sizes, activation, seed, lr, mode="adam", max_grad_norm=None) -> "Trainable":
        net = mlp_init(sizes, activation, seed)
        return cls(net, optimizer_init(net, lr, mode, max_grad_norm))

    def apply(self, grads) -> None:
        self.net, self.opt = optimizer_step(self.net, grads, self.opt)
