"""Minimal neural-net building blocks with hand-written backward passes.

Only what the routers and the deformation expert need: 3x3 same-padded
convolutions (im2col), dense tanh layers, and He initialization. Everything
is float64 and deterministic.
"""

from __future__ import annotations

import numpy as np


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H*W) columns of zero-padded 3x3 patches."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # win: (C, H, W, 3, 3) -> (C, 3, 3, H, W) -> (C*9, H*W)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * 9, h * w)


def conv3x3_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Same-padded 3x3 convolution.

    x: (Cin, H, W); weight: (Cout, Cin, 3, 3); bias: (Cout,).
    Returns (y, cache) with y: (Cout, H, W).
    """
    cin, h, w = x.shape
    cout = weight.shape[0]
    cols = _im2col3(x)
    y = weight.reshape(cout, cin * 9) @ cols + bias[:, None]
    return y.reshape(cout, h, w), (cols, x.shape, weight)


def conv3x3_backward(cache, dy: np.ndarray):
    """Returns (dx, dweight, dbias) for conv3x3_forward."""
    cols, x_shape, weight = cache
    cin, h, w = x_shape
    cout = weight.shape[0]
    dyf = dy.reshape(cout, h * w)
    dweight = (dyf @ cols.T).reshape(cout, cin, 3, 3)
    dbias = dyf.sum(axis=1)
    dcols = (weight.reshape(cout, cin * 9).T @ dyf).reshape(cin, 3, 3, h, w)
    dxp = np.zeros((cin, h + 2, w + 2), dtype=dy.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + h, kj:kj + w] += dcols[:, ki, kj]
    return dxp[:, 1:-1, 1:-1], dweight, dbias


def relu_forward(x: np.ndarray):
    mask = x > 0.0
    return x * mask, mask


def relu_backward(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * mask


class DenseTanhMLP:
    """Fully-connected net: `depth` tanh hidden layers then a linear head.

    The head is zero-initialized so a fresh network is the zero function;
    callers that need a non-trivial start perturb the head themselves.
    """

    def __init__(self, in_dim: int, hidden: int, out_dim: int, depth: int,
                 rng: np.random.Generator):
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        dims = [in_dim] + [hidden] * depth + [out_dim]
        for i in range(len(dims) - 1):
            if i == len(dims) - 2:
                w = np.zeros((dims[i], dims[i + 1]))
            else:
                w = he_normal(rng, (dims[i], dims[i + 1]), fan_in=dims[i])
            self.weights.append(w)
            self.biases.append(np.zeros(dims[i + 1]))

    @classmethod
    def from_arrays(cls, arrays: dict, n_layers: int) -> "DenseTanhMLP":
        obj = cls.__new__(cls)
        obj.weights = [arrays[f"w{i}"] for i in range(n_layers)]
        obj.biases = [arrays[f"b{i}"] for i in range(n_layers)]
        return obj

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray):
        """x: (N, in_dim). Returns (y, cache)."""
        acts = [x]
        for i in range(self.n_layers):
            z = acts[-1] @ self.weights[i] + self.biases[i]
            if i < self.n_layers - 1:
                z = np.tanh(z)
            acts.append(z)
        return acts[-1], acts

    def backward(self, acts, dy: np.ndarray):
        """Returns (dx, dweights, dbiases)."""
        dws = [None] * self.n_layers
        dbs = [None] * self.n_layers
        grad = dy
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                grad = grad * (1.0 - acts[i + 1] ** 2)  # tanh'
            dws[i] = acts[i].T @ grad
            dbs[i] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        return grad, dws, dbs

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def set_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for i in range(self.n_layers):
            self.weights[i] = arrays[f"w{i}"]
            self.biases[i] = arrays[f"b{i}"]
