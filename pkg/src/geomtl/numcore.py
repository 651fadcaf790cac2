"""Dense network substrate: layers with exact analytic gradients and Adam.

Everything is float64. Matrices are plain 2-D ``np.ndarray`` (row-major); a
batch is always ``(batch, features)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import kernels

BCE_CLAMP = 1e-12


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class StateError(RuntimeError):
    """An operation was called in the wrong layer state (e.g. backward before forward)."""


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


class DenseLayer:
    """Affine map ``y = x @ W.T + b`` with ``W`` of shape (out_dim, in_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None, bias: bool = True):
        if in_dim < 1 or out_dim < 1:
            raise ShapeError(f"dense dims must be >= 1, got {in_dim}->{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.has_bias = bias
        if rng is None:
            self.weight = np.zeros((out_dim, in_dim))
        else:
            # He init for ReLU stacks
            self.weight = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
        self.bias = np.zeros(out_dim)
        self.cached_input: np.ndarray | None = None

    def params(self) -> dict[str, np.ndarray]:
        if self.has_bias:
            return {"weight": self.weight, "bias": self.bias}
        return {"weight": self.weight}

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(
                f"dense input shape {x.shape} does not match weight shape {self.weight.shape}"
            )
        self.cached_input = x
        out = x @ self.weight.T
        if self.has_bias:
            out += self.bias
        return out

    def backward(self, grad_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.cached_input is None:
            raise StateError("dense backward called without a preceding forward")
        grad_out = as_matrix(grad_out)
        x = self.cached_input
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise ShapeError(
                f"grad_out shape {grad_out.shape} != forward output shape {(x.shape[0], self.out_dim)}"
            )
        self.cached_input = None
        grad_in = grad_out @ self.weight
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
        return grad_in, grad_w, grad_b


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    return layer.forward(x)


def dense_backward(layer: DenseLayer, grad_out):
    return layer.backward(grad_out)


class BatchNormLayer:
    """Per-column batch normalization with running statistics.

    Training mode standardizes with the batch mean and (biased) variance and
    updates the running estimates as ``r = (1 - momentum) * r + momentum * batch``.
    Inference mode uses the running estimates instead.
    """

    def __init__(self, dim: int, momentum: float = 0.1, epsilon: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        if epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.dim = dim
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.training = True
        self._cache = None

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False
        self._cache = None

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.dim:
            raise ShapeError(f"batch-norm input shape {x.shape} does not match dim {self.dim}")
        if not self.training:
            return self.gamma * (x - self.running_mean) / np.sqrt(self.running_var + self.epsilon) + self.beta
        if x.shape[0] < 2:
            raise ValueError("batch-norm in training mode needs a batch of at least 2 rows")
        y, xhat, mean, var, inv_std = kernels.bn_forward(np.ascontiguousarray(x), self.gamma, self.beta, self.epsilon)
        self._cache = (xhat, inv_std)
        # in place so references held by an optimizer or checkpoint stay valid
        self.running_mean *= 1.0 - self.momentum
        self.running_mean += self.momentum * mean
        self.running_var *= 1.0 - self.momentum
        self.running_var += self.momentum * var
        return y

    def backward(self, grad_out):
        if not self.training:
            raise StateError("batch-norm backward is undefined in inference mode")
        if self._cache is None:
            raise StateError("batch-norm backward called without a preceding training forward")
        xhat, inv_std = self._cache
        grad_out = as_matrix(grad_out)
        if grad_out.shape != xhat.shape:
            raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {xhat.shape}")
        self._cache = None
        return kernels.bn_backward(np.ascontiguousarray(grad_out), xhat, self.gamma, inv_std)


def batchnorm_forward(layer: BatchNormLayer, x) -> np.ndarray:
    return layer.forward(x)


def batchnorm_backward(layer: BatchNormLayer, grad_out):
    return layer.backward(grad_out)


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid(z) -> np.ndarray:
    return expit(np.asarray(z, dtype=np.float64))


def bce_loss(p, y) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its derivative with respect to ``p``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} and labels {y.shape} differ in shape")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    n = p.size
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    grad = -(y / pc - (1.0 - y) / (1.0 - pc)) / n
    return float(loss), grad


@dataclass
class AdamState:
    """Moments for a single flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper) -> "AdamState":
        params = np.asarray(params, dtype=np.float64)
        return cls(np.zeros(params.shape), np.zeros(params.shape), **hyper)


def adam_step(state: AdamState, params, grads) -> np.ndarray:
    """Bias-corrected Adam update; returns a new array and advances ``state``."""
    params = np.array(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(f"adam shapes differ: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.t += 1
    flat = params.reshape(-1)
    kernels.adam_update(
        flat, np.ascontiguousarray(grads).reshape(-1), state.m.reshape(-1), state.v.reshape(-1),
        state.lr, state.beta1, state.beta2, state.eps, state.t,
    )
    return params


@dataclass
class Adam:
    """Adam over a named set of parameter arrays, updated in place.

    Parameters left out of ``active`` in a step are skipped entirely (neither
    moments nor values move) and keep their own step count for bias
    correction. This is how absent task heads stay frozen.
    """

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], active=None) -> None:
        self.t += 1
        for name, p in params.items():
            if active is not None and name not in active:
                continue
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
                self.steps[name] = 0
            self.steps[name] += 1
            kernels.adam_update(
                p.reshape(-1), np.ascontiguousarray(g).reshape(-1), self.m[name].reshape(-1),
                self.v[name].reshape(-1), self.lr, self.beta1, self.beta2, self.eps, self.steps[name],
            )


def grad_check(
    model_fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``model_fn()`` evaluates the scalar loss at the current contents of
    ``params`` and returns ``(loss, grads)`` with one gradient per parameter
    array. Parameters are perturbed in place and restored.
    """
    _, analytic = model_fn()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = model_fn()
            flat[i] = orig - h
            lm, _ = model_fn()
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num))
            worst = max(worst, err)
    return worst
