"""Dense float64 kernels with hand-written gradients.

Everything operates on the last axis, so a single vector and a batch of row
vectors go through the same code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamTensor:
    name: str
    values: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64)
        if self.grad.shape != self.values.shape:
            raise ValueError(f"{self.name}: grad shape {self.grad.shape} != values shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class RngState:
    """Seeded PCG64 stream. ``spawn(key)`` derives independent child streams."""

    def __init__(self, seed: int, *, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(_key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))
        self.position = 0

    def spawn(self, *key: int) -> "RngState":
        return RngState(self.seed, _key=self.key + tuple(int(k) for k in key))

    @property
    def generator(self) -> np.random.Generator:
        self.position += 1
        return self._gen

    def uniform(self, low, high, size):
        return self.generator.uniform(low, high, size)

    def normal(self, loc, scale, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def get_state(self) -> dict:
        return {"seed": self.seed, "key": list(self.key), "position": self.position,
                "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state["bit_generator"]
        self.position = state["position"]


def _check_linear(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> None:
    if W.ndim != 2:
        raise ValueError(f"weight must be 2-D, got shape {W.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"dimension mismatch: input shape {x.shape} vs weight shape {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"dimension mismatch: bias shape {b.shape} vs weight shape {W.shape}")


def as_real(x) -> np.ndarray:
    """float64 array, except that extended-precision input is passed through
    (the gradient checker evaluates its finite differences in long double)."""
    a = np.asarray(x)
    return a if a.dtype == np.longdouble else a.astype(np.float64, copy=False)


def _values(p):
    return p.values if isinstance(p, ParamTensor) else as_real(p)


def linear_forward(x, W, b) -> np.ndarray:
    """W @ x + b for a vector x, or row-wise for a batch of shape (B, in)."""
    x = as_real(x)
    Wv, bv = _values(W), _values(b)
    _check_linear(x, Wv, bv)
    return x @ Wv.T + bv


def linear_backward(x, W, upstream):
    """Gradients of ``linear_forward`` given dL/dout.

    Returns (dW, db, dx); for batched input dW and db are summed over rows.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    Wv = _values(W)
    _check_linear(x, Wv)
    if upstream.shape[-1] != Wv.shape[0] or upstream.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"shape mismatch: upstream {upstream.shape}, input {x.shape}, weight {Wv.shape}")
    if x.ndim == 1:
        return np.outer(upstream, x), upstream.copy(), Wv.T @ upstream
    return upstream.T @ x, upstream.sum(axis=0), upstream @ Wv


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(z: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(z > 0.0, upstream, 0.0)


def softmax(z) -> np.ndarray:
    z = as_real(z)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if np.isnan(z).any():
        raise ValueError("softmax input contains NaN")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = as_real(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_backward(p: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``p``."""
    return p * (upstream - (p * upstream).sum(axis=-1, keepdims=True))


def dropout_mask(shape, rate: float, rng: RngState) -> np.ndarray:
    """Inverted dropout: entries are 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.uniform(0.0, 1.0, shape) >= rate
    return keep / (1.0 - rate)


def glorot_uniform(fan_out: int, fan_in: int, rng: RngState) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in))
