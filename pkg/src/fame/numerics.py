"""Dense matrix primitives with hand-derived backward rules.

Everything downstream (attention layers, the facet head, the projector)
reduces to the operations in this module.  Forward semantics are exact;
each op that participates in training has a matching *_backward companion
whose output is validated against ``finite_difference_gradient``.

Arrays are plain numpy ndarrays.  Training runs in float32; gradient-check
builds construct parameters in float64 (pass ``dtype`` at init time).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

DEFAULT_DTYPE = np.float32
GRAD_CHECK_DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ParameterError(ValueError):
    """A hyperparameter is outside its valid range."""


# ---------------------------------------------------------------------------
# deterministic rng
# ---------------------------------------------------------------------------


def _derive_seed(seed: int, label: str) -> int:
    import hashlib

    digest = hashlib.blake2b(
        seed.to_bytes(8, "little", signed=False) + label.encode("utf-8"),
        digest_size=8,
    ).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Seeded PCG64 stream; identical seed gives an identical stream on
    every platform.  ``split`` derives an independent child stream from a
    label so subsystems cannot perturb each other's draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, label: str) -> "Rng":
        return Rng(_derive_seed(self.seed, label))

    def normal(self, shape, std: float = 1.0, dtype=DEFAULT_DTYPE) -> Array:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def xavier_uniform(self, shape, dtype=DEFAULT_DTYPE) -> Array:
        fan_in, fan_out = shape[0], shape[-1]
        limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
        return self._gen.uniform(-limit, limit, size=shape).astype(dtype)

    def random(self, shape=None) -> Array:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def shuffle(self, seq: list) -> None:
        self._gen.shuffle(seq)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def choice(self, options, size=None, replace: bool = True):
        return self._gen.choice(options, size=size, replace=replace)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------


@dataclass
class Param:
    """A trainable matrix with its gradient accumulator and Adam state."""

    value: Array
    grad: Array
    adam_m: Array
    adam_v: Array
    step_count: int = 0

    @classmethod
    def of(cls, value: Array) -> "Param":
        value = np.asarray(value)
        return cls(
            value=value,
            grad=np.zeros_like(value),
            adam_m=np.zeros_like(value),
            adam_v=np.zeros_like(value),
        )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def adam_step(
    param: Param,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction; zeroes the gradient afterward."""
    param.step_count += 1
    t = param.step_count
    g = param.grad
    param.adam_m[...] = beta1 * param.adam_m + (1.0 - beta1) * g
    param.adam_v[...] = beta2 * param.adam_v + (1.0 - beta2) * (g * g)
    m_hat = param.adam_m / (1.0 - beta1**t)
    v_hat = param.adam_v / (1.0 - beta2**t)
    param.value[...] = param.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    param.zero_grad()


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def matmul(a: Array, b: Array) -> Array:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: Array) -> Array:
    """Row-wise softmax with max subtraction; tolerates -inf masked entries
    as long as each row keeps at least one finite entry."""
    m = np.atleast_2d(m)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(d_probs: Array, probs: Array) -> Array:
    dot = (d_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (d_probs - dot)


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(d_y: Array, x: Array) -> Array:
    return d_y * (x > 0)


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    y, _ = layer_norm_forward(x, gamma, beta, eps)
    return y


def layer_norm_forward(x: Array, gamma: Array, beta: Array, eps: float = 1e-5):
    """Row-wise layer norm with population variance."""
    if eps <= 0:
        raise ParameterError("layer_norm eps must be positive")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)  # population variance
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    y = gamma * x_hat + beta
    return y, (x_hat, inv_std, gamma)


def layer_norm_backward(d_y: Array, cache):
    x_hat, inv_std, gamma = cache
    n = x_hat.shape[-1]
    d_gamma = (d_y * x_hat).sum(axis=tuple(range(d_y.ndim - 1)))
    d_beta = d_y.sum(axis=tuple(range(d_y.ndim - 1)))
    d_xhat = d_y * gamma
    d_x = (
        d_xhat
        - d_xhat.mean(axis=-1, keepdims=True)
        - x_hat * (d_xhat * x_hat).mean(axis=-1, keepdims=True)
    ) * inv_std
    return d_x, d_gamma, d_beta


def dropout(x: Array, p: float, rng: Rng | None, training: bool) -> Array:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time so
    evaluation is the identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    return x * dropout_mask(x.shape, p, rng, x.dtype)


def dropout_mask(shape, p: float, rng: Rng, dtype=DEFAULT_DTYPE) -> Array:
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def cross_entropy_from_logits(logits: Array, target: int) -> tuple[float, Array]:
    """Softmax cross entropy for one target index.

    Returns (loss, d_loss/d_logits) where the gradient is
    softmax(logits) - onehot(target).
    """
    logits = np.asarray(logits)
    if not 0 <= target < logits.shape[-1]:
        raise IndexError(f"target {target} out of range for {logits.shape[-1]} logits")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    total = e.sum()
    loss = float(np.log(total) - shifted[target])
    grad = e / total
    grad[target] -= 1.0
    return loss, grad


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    f: Callable[[], float],
    params: Sequence[Param],
    h: float = 1e-4,
) -> list[Array]:
    """Central-difference gradient estimate of ``f`` per parameter entry.

    ``f`` must be deterministic given the parameter values (fixed rng,
    dropout disabled).  This is the oracle every analytic backward pass is
    checked against; it never calls any backward code itself.
    """
    if h <= 0:
        raise ParameterError("finite difference step must be positive")
    grads = []
    for param in params:
        flat = param.value.reshape(-1)
        est = np.zeros_like(flat, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f()
            flat[i] = orig - h
            f_minus = f()
            flat[i] = orig
            est[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(est.reshape(param.value.shape))
    return grads


def relative_gradient_error(analytic: Iterable[Array], numeric: Iterable[Array]) -> float:
    """max_i |a_i - n_i| / max(1e-8, |a_i|, |n_i|) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric, strict=True):
        denom = np.maximum(1e-8, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
