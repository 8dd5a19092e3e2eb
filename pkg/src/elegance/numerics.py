"""Dense MLPs with explicit layer-wise backprop, AdamW, and a finite-difference
gradient oracle.

Tensors are float64 numpy arrays. Weights are stored ``[out, in]`` and a batch
of inputs is ``[batch, in]``; 1-D inputs are treated as a batch of one and the
output is squeezed back.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from elegance import ConfigError, NumericError

ACTIVATIONS = ("tanh", "relu")


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


@dataclass
class MlpParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ConfigError(f"layer {i}: input dim {w.shape[1]} != previous output dim")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers], self.activation)

    def with_arrays(self, arrays: list[np.ndarray]) -> "MlpParams":
        pairs = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(self.layers))]
        return MlpParams(pairs, self.activation)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers], self.activation)

    def equals(self, other: "MlpParams") -> bool:
        """Bitwise equality of structure and values."""
        if self.activation != other.activation or self.dims != other.dims:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_mlp(dims: list[int], rng: np.random.Generator, activation: str = "tanh",
             out_scale: float = 1.0) -> MlpParams:
    """Glorot-uniform weights, zero biases. ``out_scale`` shrinks the last layer."""
    if len(dims) < 2:
        raise ConfigError("an MLP needs at least input and output dims")
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = math.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        if i == len(dims) - 2:
            w *= out_scale
        layers.append((w, np.zeros(n_out)))
    return MlpParams(layers, activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    return 1.0 - h * h if kind == "tanh" else (z > 0.0).astype(z.dtype)


def _as_batch(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ConfigError(f"input shape {x.shape} does not match MLP input dim {params.in_dim}")
    return x, single


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward_cached(params, x)
    return out


def mlp_forward_cached(params: MlpParams, x: np.ndarray):
    """Forward pass returning the output and the per-layer (pre, post) activations."""
    h, single = _as_batch(params, x)
    cache = [(None, h)]
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = h @ w.T + b
        h = z if i == last else _act(z, params.activation)
        cache.append((z, h))
    _check_finite(h, "MLP output")
    return (h[0] if single else h), cache


def mlp_backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray, cache=None):
    """Gradients of ``sum(upstream * mlp_forward(params, x))``.

    Returns ``(param_grads, input_grad)``; ``param_grads`` is an ``MlpParams``
    holding the gradient arrays.
    """
    xb, single = _as_batch(params, x)
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], params.out_dim):
        raise ConfigError(f"upstream grad shape {g.shape} != output shape {(xb.shape[0], params.out_dim)}")
    if cache is None:
        _, cache = mlp_forward_cached(params, xb)
    grads = []
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        w, _ = params.layers[i]
        z, h = cache[i + 1]
        if i != last:
            g = g * _act_grad(z, h, params.activation)
        h_in = cache[i][1]
        grads.append((g.T @ h_in, g.sum(axis=0)))
        g = g @ w
    grads.reverse()
    out = MlpParams(grads, params.activation)
    for a in out.arrays():
        _check_finite(a, "parameter gradient")
    _check_finite(g, "input gradient")
    return out, (g[0] if single else g)


def finite_diff_grad(loss_fn: Callable[[MlpParams], float], params: MlpParams,
                     eps: float = 1e-5) -> MlpParams:
    """Central differences ``(f(p+eps) - f(p-eps)) / (2 eps)`` for every coordinate."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    work = params.copy()
    grads = work.zeros_like()
    for arr, garr in zip(work.arrays(), grads.arrays()):
        flat, gflat = arr.reshape(-1), garr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(loss_fn(work))
            flat[j] = orig - eps
            f_minus = float(loss_fn(work))
            flat[j] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError("non-finite loss during finite differencing")
            gflat[j] = (f_plus - f_minus) / (2.0 * eps)
    return grads


def finite_diff_vector(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, oflat = x.reshape(-1), out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = float(fn(x))
        flat[j] = orig - eps
        f_minus = float(fn(x))
        flat[j] = orig
        oflat[j] = (f_plus - f_minus) / (2.0 * eps)
    return out


def max_rel_error(a: np.ndarray, b: np.ndarray, abs_floor: float = 1e-7) -> float:
    """Largest elementwise relative error; entries whose absolute gap is under
    ``abs_floor`` count as exact."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    gap = np.abs(a - b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    rel = np.where(gap <= abs_floor, 0.0, gap / scale)
    return float(rel.max(initial=0.0))


def params_rel_error(a: MlpParams, b: MlpParams, abs_floor: float = 1e-7) -> float:
    return max(max_rel_error(x, y, abs_floor) for x, y in zip(a.arrays(), b.arrays()))


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: MlpParams, **hyper) -> "AdamWState":
        arrays = params.arrays()
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **hyper)


def adamw_step(params: MlpParams, grads: MlpParams, state: AdamWState) -> tuple[MlpParams, AdamWState]:
    """One bias-corrected Adam step with decoupled weight decay.

    Decay multiplies the weights by ``1 - lr * weight_decay`` before the Adam
    update and never touches the moment estimates.
    """
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or any(p.shape != g.shape for p, g in zip(p_arrays, g_arrays)):
        raise ConfigError("gradient shapes do not match parameters")
    if not state.m:
        state = AdamWState.for_params(params, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                                      eps=state.eps, weight_decay=state.weight_decay)
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    decay = 1.0 - state.lr * state.weight_decay
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        _check_finite(g, "gradient")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p = p * decay - state.lr * update
        _check_finite(p, "updated parameters")
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    new_state = AdamWState(state.lr, state.beta1, state.beta2, state.eps, state.weight_decay, t, new_m, new_v)
    return params.with_arrays(new_p), new_state


def clip_grad_norm(grads: MlpParams, max_norm: float) -> MlpParams:
    norm = math.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays()))
    if norm <= max_norm or norm == 0.0:
        return grads
    return grads.with_arrays([a * (max_norm / norm) for a in grads.arrays()])


# -- checkpoints -------------------------------------------------------------
# JSON: {"format": "elegance-mlp/1", "activation": ..., "dims": [...],
#        "layers": [{"weight": [row-major floats], "bias": [floats]}, ...]}
# Python's float repr is shortest-round-trip, so the JSON text is bit-exact.

def mlp_to_dict(params: MlpParams) -> dict:
    return {
        "format": "elegance-mlp/1",
        "activation": params.activation,
        "dims": params.dims,
        "layers": [{"weight": w.reshape(-1).tolist(), "bias": b.tolist()} for w, b in params.layers],
    }


def mlp_from_dict(data: dict) -> MlpParams:
    if data.get("format") != "elegance-mlp/1":
        raise ConfigError(f"unsupported checkpoint format {data.get('format')!r}")
    dims = data["dims"]
    layers = []
    for i, layer in enumerate(data["layers"]):
        w = np.array(layer["weight"], dtype=np.float64).reshape(dims[i + 1], dims[i])
        b = np.array(layer["bias"], dtype=np.float64)
        layers.append((w, b))
    return MlpParams(layers, data["activation"])


def save_mlp(params: MlpParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mlp_to_dict(params)))


def load_mlp(path: str | Path) -> MlpParams:
    return mlp_from_dict(json.loads(Path(path).read_text()))
