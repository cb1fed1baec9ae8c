"""Numeric core: float64 tensors, strict-shape kernels, seeded RNG, Adam and a
finite-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
refuse implicit broadcasting; the network code in :mod:`tamrl.networks` uses
numpy directly on arrays whose shapes it controls.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from .errors import NumericError, ShapeError

Tensor = np.ndarray


def as_tensor(data, shape: tuple[int, ...] | None = None) -> Tensor:
    """Copy ``data`` into a float64 array, optionally reshaping to ``shape``."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape dimensions must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return arr


def check_finite(x: Tensor, what: str = "value") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


_UNARY = {"tanh": np.tanh, "sigmoid": sigmoid, "relu": relu}
_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise ``op`` over ``a`` (and ``b``, which must have the same shape)."""
    a = np.asarray(a, dtype=np.float64)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _UNARY[op](a)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise ValueError(f"{op} needs two operands")
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return _BINARY[op](a, b)


class SeededRng:
    """Reproducible random stream.

    ``child(i)`` derives an independent stream from ``(seed, path, i)`` so that
    work item ``i`` gets the same numbers no matter which order items are
    generated in.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "SeededRng":
        return SeededRng(self.seed, self._path + (int(index),))

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


@dataclass(frozen=True)
class AdamState:
    m: Tensor
    v: Tensor
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Tensor, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), 0, lr, **kw)


def adam_step(params: Tensor, grads: Tensor, state: AdamState) -> tuple[Tensor, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"adam_step shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    check_finite(grads, "gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


def init_adam(params: Mapping[str, Tensor], lr: float) -> dict[str, AdamState]:
    return {k: AdamState.zeros_like(p, lr=lr) for k, p in params.items()}


def adam_update(
    params: Mapping[str, Tensor], grads: Mapping[str, Tensor], states: Mapping[str, AdamState]
) -> tuple[dict[str, Tensor], dict[str, AdamState]]:
    """Apply :func:`adam_step` to every entry of a flat parameter dict."""
    new_p, new_s = {}, {}
    for k in params:
        new_p[k], new_s[k] = adam_step(params[k], grads[k], states[k])
    return new_p, new_s


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / denom)
