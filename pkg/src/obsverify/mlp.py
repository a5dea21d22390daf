"""Small MLP with hand-rolled forward/backward passes.

Input layout: [x1 | x2 | one-hot(q) | t/T]; hidden layers with
LeakyReLU; scalar linear output.  Gradients are computed by explicit
reverse-mode recursion over the cached pre-activations and verified
against finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_HIDDEN = (64, 64, 32)
LEAKY_SLOPE = 0.01


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # per layer, shape (fan_out, fan_in)
    biases: list[np.ndarray]   # per layer, shape (fan_out,)
    d_x: int
    n_q: int
    horizon: int
    slope: float = LEAKY_SLOPE

    @property
    def in_dim(self) -> int:
        return 2 * self.d_x + self.n_q + 1

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases],
                         self.d_x, self.n_q, self.horizon, self.slope)


def init_params(d_x: int, n_q: int, horizon: int, rng: np.random.Generator,
                hidden=DEFAULT_HIDDEN) -> MlpParams:
    """Uniform +/- sqrt(6 / (fan_in + fan_out)) initialization per layer."""
    dims = [2 * d_x + n_q + 1, *hidden, 1]
    weights, biases = [], []
    for fi, fo in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fi + fo))
        weights.append(rng.uniform(-bound, bound, size=(fo, fi)))
        biases.append(np.zeros(fo))
    return MlpParams(weights, biases, d_x, n_q, horizon)


def features(params: MlpParams, x1: np.ndarray, x2: np.ndarray,
             q: np.ndarray, t) -> np.ndarray:
    """Assemble the input matrix (n, 2*d_x + n_q + 1)."""
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    n = x1.shape[0]
    q = np.broadcast_to(np.asarray(q, dtype=np.int64), (n,))
    onehot = np.zeros((n, params.n_q))
    onehot[np.arange(n), q] = 1.0
    tt = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    tcol = (tt / max(params.horizon, 1))[:, None]
    return np.concatenate([x1, x2, onehot, tcol], axis=1)


def forward(params: MlpParams, X: np.ndarray, need_cache: bool = False):
    """Returns (values (n,), cache); cache holds inputs and pre-activations."""
    a = X
    zs = []
    acts = [X]
    n_layers = len(params.weights)
    for k in range(n_layers):
        z = a @ params.weights[k].T + params.biases[k]
        if k < n_layers - 1:
            zs.append(z if need_cache else None)
            a = np.maximum(z, params.slope * z)  # LeakyReLU, slope in [0, 1)
            if need_cache:
                acts.append(a)
        else:
            out = z[:, 0]
    cache = (acts, zs) if need_cache else None
    return out, cache


def forward_f32(params: MlpParams, X: np.ndarray) -> np.ndarray:
    """Single-precision forward used only to screen candidates (argmin/argmax);
    selected branches are recomputed in double precision."""
    a = np.asarray(X, dtype=np.float32)
    n_layers = len(params.weights)
    slope = np.float32(params.slope)
    for k in range(n_layers):
        z = a @ params.weights[k].T.astype(np.float32) + \
            params.biases[k].astype(np.float32)
        if k < n_layers - 1:
            a = np.maximum(z, slope * z)
        else:
            return z[:, 0]
    raise AssertionError("unreachable")


def backward(params: MlpParams, cache, dout: np.ndarray):
    """Gradients of sum(dout * output) w.r.t. every weight and bias."""
    acts, zs = cache
    n_layers = len(params.weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    delta = dout[:, None]  # (n, 1) gradient at the linear output
    for k in range(n_layers - 1, -1, -1):
        a_in = acts[k]
        grads_w[k] = delta.T @ a_in
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            da = delta @ params.weights[k]
            z = zs[k - 1]
            delta = da * np.where(z > 0, 1.0, params.slope)
    return grads_w, grads_b


def flatten(params: MlpParams) -> np.ndarray:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten(params: MlpParams, vec: np.ndarray) -> MlpParams:
    out = params.copy()
    k = 0
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out.weights[i] = vec[k:k + w.size].reshape(w.shape).copy()
        k += w.size
        out.biases[i] = vec[k:k + b.size].copy()
        k += b.size
    return out
