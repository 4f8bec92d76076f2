"""Dense float64 numerics for small MLPs: linear/ReLU layers, softmax
cross-entropy, Adam with L2 weight decay and finite-difference checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when array shapes do not conform."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight + bias`` with bias broadcast over rows."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    return x @ weight + bias


def linear_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weight, grad_bias)`` for ``x @ weight + b``."""
    if x.shape[1] != weight.shape[0] or grad_out.shape != (x.shape[0], weight.shape[1]):
        raise DimensionError(
            f"incompatible shapes input={x.shape} weight={weight.shape} grad_out={grad_out.shape}"
        )
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0.0, grad_out, 0.0)


def relu_forward_backward(x: np.ndarray, grad_out: np.ndarray):
    return relu_forward(x), relu_backward(x, grad_out)


@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    probs: np.ndarray | None = None


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels) -> LossValue:
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. logits."""
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    value = float(-logp[rows, labels].mean()) if n else 0.0
    probs = np.exp(logp)
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    if n:
        grad /= n
    return LossValue(value, grad, probs)


@dataclass
class AdamState:
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One bias-corrected Adam update, in place on ``params``.

    Weight decay is classical L2: ``weight_decay * p`` is added to the
    gradient before the moment estimates are updated.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if weight_decay < 0:
        raise ValueError("weight_decay must be non-negative")
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        tmp = np.multiply(g, g)
        tmp *= 1.0 - b2
        v += tmp
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps), without temporaries
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += state.epsilon
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        p -= tmp
    return params, state


def numerical_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (modified and restored in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
