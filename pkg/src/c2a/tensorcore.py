"""Dense float64 numerics: linear layers with explicit backward passes,
leaky ReLU, a stable softmax, polynomial-decay SGD and a finite-difference
gradient checker.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = as_tensor(self.value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    @property
    def shape(self):
        return self.value.shape


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


class LinearLayer:
    """Affine map ``y = x @ W.T + b`` on the last axis.

    Any number of leading axes is accepted; they are treated as batch axes.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        if rng is None:
            w = np.zeros((out_dim, in_dim))
        else:
            w = glorot_uniform(rng, out_dim, in_dim)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.value.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.value.shape[0]

    @property
    def grad_weight(self) -> np.ndarray:
        return self.weight.grad

    @property
    def grad_bias(self) -> np.ndarray:
        return self.bias.grad

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def zero_grad(self) -> None:
        self.weight.zero_grad()
        self.bias.zero_grad()

    def load(self, weight: np.ndarray, bias: np.ndarray) -> None:
        weight = as_tensor(weight)
        bias = as_tensor(bias)
        if weight.shape != self.weight.shape or bias.shape != self.bias.shape:
            raise ShapeError(
                f"cannot load weight {weight.shape}/bias {bias.shape} into layer "
                f"with weight {self.weight.shape}/bias {self.bias.shape}"
            )
        self.weight.value[...] = weight
        self.bias.value[...] = bias

    def forward(self, x: np.ndarray) -> np.ndarray:
        return linear_forward(self, x)

    def backward(self, x: np.ndarray, grad_out: np.ndarray, accumulate: bool = True) -> np.ndarray:
        return linear_backward(self, x, grad_out, accumulate=accumulate)


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] != layer.in_dim:
        raise ShapeError(
            f"linear_forward: input shape {x.shape} incompatible with weight shape "
            f"{layer.weight.shape}"
        )
    return x @ layer.weight.value.T + layer.bias.value


def linear_backward(
    layer: LinearLayer, x: np.ndarray, grad_out: np.ndarray, accumulate: bool = True
) -> np.ndarray:
    """Accumulate parameter grads and return the gradient wrt ``x``.

    With ``accumulate=False`` the layer's grad buffers are left untouched,
    which is how a frozen network passes gradients through to its input.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    expected = x.shape[:-1] + (layer.out_dim,)
    if grad_out.shape != expected or x.shape[-1] != layer.in_dim:
        raise ShapeError(
            f"linear_backward: grad_out shape {grad_out.shape} does not match "
            f"forward output shape {expected} (input {x.shape}, weight {layer.weight.shape})"
        )
    if accumulate:
        g2 = grad_out.reshape(-1, layer.out_dim)
        x2 = x.reshape(-1, layer.in_dim)
        layer.weight.grad += g2.T @ x2
        layer.bias.grad += g2.sum(axis=0)
    return grad_out @ layer.weight.value


def leaky_relu_forward(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float) -> np.ndarray:
    # subgradient at exactly 0 is `slope`
    return np.where(x > 0, grad_out, slope * grad_out)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient wrt the logits given the gradient wrt softmax outputs."""
    inner = (grad_probs * probs).sum(axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


@dataclass
class SgdState:
    base_lr: float
    max_iter: int
    power: float = 0.9
    iter: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be positive, got {self.max_iter}")
        if self.iter < 0:
            raise ValueError(f"iter must be non-negative, got {self.iter}")

    def lr(self, it: int | None = None) -> float:
        it = self.iter if it is None else it
        frac = min(max(it / self.max_iter, 0.0), 1.0)
        return self.base_lr * (1.0 - frac) ** self.power


def sgd_step(params: Iterable[Parameter], state: SgdState) -> float:
    """In-place ``p <- p - lr_eff * grad``; advances ``state.iter`` by one.

    Returns the effective learning rate used.
    """
    lr = state.lr()
    if lr != 0.0:
        for p in params:
            p.value -= lr * p.grad
    state.iter += 1
    return lr


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    eps: float = 1e-5,
    n_samples: int | None = 64,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic grads and central differences.

    ``params`` are perturbed in place and restored; ``loss_fn`` must read them.
    ``grads`` are the analytic gradients, aligned with ``params``. When
    ``n_samples`` is None every coordinate is checked, otherwise that many
    coordinates are sampled uniformly over all parameters.
    """
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(0) if rng is None else rng
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].reshape(-1)
        old = flat[j]
        flat[j] = old + eps
        lp = loss_fn()
        flat[j] = old - eps
        lm = loss_fn()
        flat[j] = old
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteError("finite_diff_check: loss is not finite")
        numeric = (lp - lm) / (2.0 * eps)
        analytic = grads[i].reshape(-1)[j]
        err = abs(numeric - analytic) / (abs(analytic) + floor)
        worst = max(worst, err)
    return worst
