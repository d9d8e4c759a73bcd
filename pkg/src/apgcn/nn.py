"""Dense forward/backward primitives and the Adam optimizer.

The network architecture is fixed, so there is no autodiff graph: each
operation has a hand-derived backward, and the model composes them
explicitly. Every backward here is validated against central finite
differences in the test suite.
"""

from __future__ import annotations

import numpy as np


class DivergenceError(RuntimeError):
    """Non-finite values encountered during optimization."""


class ParamTensor:
    """A trainable array with its gradient and Adam moment buffers.

    ``l2`` is the per-tensor ridge coefficient; the penalty enters as an
    explicit gradient term (2 * l2 * value) inside :func:`adam_step`.
    """

    __slots__ = ("value", "grad", "adam_m", "adam_v", "step_count", "l2")

    def __init__(self, value: np.ndarray, l2: float = 0.0):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0
        self.l2 = float(l2)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def snapshot(self) -> np.ndarray:
        return self.value.copy()

    def restore(self, value: np.ndarray) -> None:
        self.value[...] = value


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"affine shape mismatch: {x.shape} @ {w.shape} + {b.shape}")
    return x @ w + b


def affine_backward(upstream: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (dx, dw, db) for out = x @ w + b."""
    if upstream.shape != (x.shape[0], w.shape[1]):
        raise ValueError(f"affine upstream shape mismatch: {upstream.shape}")
    return upstream @ w.T, x.T @ upstream, upstream.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(upstream: np.ndarray, x: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-logaddexp(0, -x)) is stable for large |x| of either sign
    return np.exp(-np.logaddexp(0, -x))


def sigmoid_backward(upstream: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Backward given the forward `out` = sigmoid(x)."""
    return upstream * out * (1 - out)


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator,
                    train: bool = True):
    """Inverted dropout: returns (out, mask); mask is None in eval mode.

    The mask folds in the 1/(1-rate) scaling so backward is a plain
    multiply replay.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(upstream: np.ndarray, mask) -> np.ndarray:
    return upstream if mask is None else upstream * mask


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          mask: np.ndarray):
    """Mean negative log-likelihood over the masked rows.

    Returns (loss, dlogits); dlogits is zero outside the mask. Uses the
    max-subtraction stabilization.
    """
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("empty mask")
    sub = logits[mask]
    if not np.all(np.isfinite(sub)):
        raise ValueError("non-finite logits")
    sub = sub - sub.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(sub).sum(axis=1, keepdims=True))
    log_p = sub - log_z
    rows = np.arange(mask.size)
    picked = labels[mask].astype(np.int64)
    loss = float(-log_p[rows, picked].mean())

    dmasked = np.exp(log_p)
    dmasked[rows, picked] -= 1
    dmasked /= mask.size
    dlogits = np.zeros_like(logits)
    dlogits[mask] = dmasked.astype(logits.dtype)
    return loss, dlogits


def adam_step(p: ParamTensor, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float | None = None) -> None:
    """Bias-corrected Adam update in place; grad is left untouched."""
    wd = p.l2 if weight_decay is None else weight_decay
    g = p.grad
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")
    if wd > 0:
        g = g + p.value.dtype.type(2.0 * wd) * p.value
    p.step_count += 1
    t = p.step_count
    p.adam_m += (1 - beta1) * (g - p.adam_m)
    p.adam_v += (1 - beta2) * (g * g - p.adam_v)
    m_hat = p.adam_m / (1 - beta1 ** t)
    v_hat = p.adam_v / (1 - beta2 ** t)
    p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
