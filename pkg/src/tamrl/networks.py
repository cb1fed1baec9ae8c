"""MLP, LSTM and bidirectional-LSTM encoder with hand-derived backward passes.

Conventions
-----------
* Linear layers store ``W`` as ``(out, in)`` and compute ``h @ W.T + b``.
* LSTM gates are stacked in the fixed order (input, forget, cell, output):
  ``W`` is ``(4H, D)``, ``U`` is ``(4H, H)``, ``b`` is ``(4H,)``.
* FiLM pairs ``(gamma, beta)`` passed to :func:`mlp_forward` act on each
  layer's pre-activation: ``act(gamma * (h @ W.T + b) + beta)``.
* MLP weights may carry a leading episode axis, ``W: (E, out, in)`` and
  ``b: (E, out)``, when every episode owns its own copy (per-task adaptation).
"""
from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from typing import Any

import numpy as np

from .errors import ShapeError
from .numcore import SeededRng, sigmoid

FilmPairs = list  # list[tuple[np.ndarray, np.ndarray]]


# --------------------------------------------------------------------------
# parameter containers


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("MLP needs matching, non-empty weight and bias lists")
        for l in range(1, len(self.weights)):
            if self.weights[l].shape[-1] != self.weights[l - 1].shape[-2]:
                raise ShapeError(
                    f"layer {l} expects {self.weights[l].shape[-1]} inputs, "
                    f"previous layer emits {self.weights[l - 1].shape[-2]}"
                )

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[-1]] + [w.shape[-2] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)


@dataclass
class LstmParams:
    W: np.ndarray  # (4H, D)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]


@dataclass
class BiLstmParams:
    fwd: LstmParams
    bwd: LstmParams

    def __post_init__(self):
        if self.fwd.hidden != self.bwd.hidden:
            raise ShapeError("forward and backward LSTMs must share a hidden size")

    @property
    def hidden(self) -> int:
        return self.fwd.hidden


@dataclass
class LinearParams:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)


# --------------------------------------------------------------------------
# flat dict <-> dataclass, used by the optimizer and checkpoints


def _holds_arrays(val: Any) -> bool:
    if isinstance(val, np.ndarray) or is_dataclass(val):
        return True
    if isinstance(val, (list, tuple)):
        return any(_holds_arrays(v) for v in val)
    if isinstance(val, dict):
        return any(_holds_arrays(v) for v in val.values())
    return False


def to_flat(obj: Any, prefix: str = "") -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    if isinstance(obj, np.ndarray):
        out[prefix] = obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(to_flat(item, f"{prefix}.{i}" if prefix else str(i)))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            out.update(to_flat(item, f"{prefix}.{k}" if prefix else str(k)))
    elif is_dataclass(obj):
        for f in fields(obj):
            if not f.init:
                continue
            val = getattr(obj, f.name)
            if _holds_arrays(val):
                out.update(to_flat(val, f"{prefix}.{f.name}" if prefix else f.name))
    else:
        raise TypeError(f"cannot flatten {type(obj).__name__}")
    return out


def from_flat(template: Any, flat: dict[str, np.ndarray], prefix: str = "") -> Any:
    """Rebuild an object shaped like ``template`` from ``flat`` (see :func:`to_flat`)."""
    if isinstance(template, np.ndarray):
        return flat[prefix]
    if isinstance(template, list):
        return [from_flat(t, flat, f"{prefix}.{i}" if prefix else str(i)) for i, t in enumerate(template)]
    if isinstance(template, dict):
        return {k: from_flat(t, flat, f"{prefix}.{k}" if prefix else str(k)) for k, t in template.items()}
    if isinstance(template, tuple):
        return tuple(from_flat(t, flat, f"{prefix}.{i}" if prefix else str(i)) for i, t in enumerate(template))
    if is_dataclass(template):
        kwargs = {}
        for f in fields(template):
            if not f.init:
                continue
            val = getattr(template, f.name)
            key = f"{prefix}.{f.name}" if prefix else f.name
            if _holds_arrays(val):
                kwargs[f.name] = from_flat(val, flat, key)
            else:
                kwargs[f.name] = val
        return type(template)(**kwargs)
    raise TypeError(f"cannot rebuild {type(template).__name__}")


def zeros_like_params(obj: Any) -> Any:
    return from_flat(obj, {k: np.zeros_like(v) for k, v in to_flat(obj).items()})


# --------------------------------------------------------------------------
# initialization


def _uniform(rng: SeededRng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(kind: str, dims, rng: SeededRng):
    """Fresh parameters: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases,
    LSTM forget-gate bias 1.

    ``kind`` is one of ``"mlp"`` (dims = layer sizes), ``"linear"`` (in, out),
    ``"lstm"`` or ``"bilstm"`` (input size, hidden size).
    """
    if kind == "mlp":
        sizes = [int(d) for d in dims]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad MLP sizes {sizes}")
        ws = [_uniform(rng, sizes[i], (sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)]
        bs = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
        return MlpParams(ws, bs)
    if kind == "linear":
        din, dout = (int(d) for d in dims)
        return LinearParams(_uniform(rng, din, (dout, din)), np.zeros(dout))
    if kind == "lstm":
        d, h = (int(v) for v in dims)
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0
        return LstmParams(_uniform(rng, d, (4 * h, d)), _uniform(rng, h, (4 * h, h)), b)
    if kind == "bilstm":
        return BiLstmParams(init_params("lstm", dims, rng), init_params("lstm", dims, rng))
    raise ValueError(f"unknown parameter kind {kind!r}")


# --------------------------------------------------------------------------
# helpers


def _affine(h: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if W.ndim == 2:
        return h @ W.T + b
    return h @ np.swapaxes(W, -1, -2) + b[:, None, :]


def _affine_grads(h: np.ndarray, W: np.ndarray, dpre: np.ndarray):
    if W.ndim == 2:
        out, inp = W.shape
        dW = dpre.reshape(-1, out).T @ h.reshape(-1, inp)
        db = dpre.reshape(-1, out).sum(axis=0)
    else:
        dW = np.swapaxes(dpre, -1, -2) @ h
        db = dpre.sum(axis=1)
    dh = dpre @ W
    return dW, db, dh


def _film_shape(gamma: np.ndarray, ndim: int) -> np.ndarray:
    # (d,) acts on every row; (R, d) acts per row of a 3-D activation
    if gamma.ndim == 1 or ndim == 2:
        return gamma
    return gamma[:, None, :]


def _film_reduce(g: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    if gamma.ndim == 1:
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    red = g.sum(axis=1) if g.ndim == 3 else g
    if gamma.shape[0] == 1 and red.shape[0] != 1:
        red = red.sum(axis=0, keepdims=True)
    return red


# --------------------------------------------------------------------------
# MLP


@dataclass
class MlpCache:
    params: MlpParams
    inputs: list[np.ndarray]
    pre: list[np.ndarray]  # affine outputs before FiLM
    post: list[np.ndarray]  # after FiLM, before activation
    film: FilmPairs | None
    out_shape: tuple


def mlp_forward(p: MlpParams, x: np.ndarray, film: FilmPairs | None = None):
    """Forward pass. ``x`` is ``(B, D_in)`` or ``(E, B, D_in)``; relu on hidden layers."""
    if x.shape[-1] != p.sizes[0]:
        raise ShapeError(f"MLP expects {p.sizes[0]} input columns, got array of shape {x.shape}")
    if film is not None and len(film) != p.n_layers:
        raise ShapeError(f"MLP with {p.n_layers} layers needs {p.n_layers} FiLM sites, got {len(film)}")
    inputs, pre, post = [], [], []
    h = x
    for l in range(p.n_layers):
        inputs.append(h)
        a = _affine(h, p.weights[l], p.biases[l])
        pre.append(a)
        if film is not None:
            g, bt = film[l]
            a = _film_shape(g, a.ndim) * a + _film_shape(bt, a.ndim)
        post.append(a)
        h = np.maximum(a, 0.0) if l < p.n_layers - 1 else a
    return h, MlpCache(p, inputs, pre, post, film, h.shape)


def mlp_backward(p: MlpParams, cache: MlpCache, dY: np.ndarray):
    """Returns ``(dparams, dx, dfilm)``; ``dfilm`` is None when no FiLM was applied."""
    if cache.params is not p:
        raise ValueError("cache was produced by different parameters")
    if dY.shape != cache.out_shape:
        raise ShapeError(f"dY shape {dY.shape} does not match forward output {cache.out_shape}")
    dWs = [None] * p.n_layers
    dbs = [None] * p.n_layers
    dfilm = [None] * p.n_layers if cache.film is not None else None
    d = dY
    for l in reversed(range(p.n_layers)):
        if l < p.n_layers - 1:
            d = d * (cache.post[l] > 0)
        if cache.film is not None:
            g, bt = cache.film[l]
            a = cache.pre[l]
            dfilm[l] = (_film_reduce(d * a, g), _film_reduce(d, bt))
            d = d * _film_shape(g, d.ndim)
        dWs[l], dbs[l], d = _affine_grads(cache.inputs[l], p.weights[l], d)
    return MlpParams(dWs, dbs), d, dfilm


# --------------------------------------------------------------------------
# LSTM


@dataclass
class LstmStepCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


@dataclass
class LstmCache:
    params: LstmParams
    steps: list[LstmStepCache]
    batched: bool
    out_shape: tuple


def lstm_step(p: LstmParams, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    """One recurrence step on a batch: ``x (B, D)``, ``h, c (B, H)``."""
    H = p.hidden
    a = x @ p.W.T + h @ p.U.T + p.b
    i = sigmoid(a[:, :H])
    f = sigmoid(a[:, H : 2 * H])
    g = np.tanh(a[:, 2 * H : 3 * H])
    o = sigmoid(a[:, 3 * H :])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    return h_new, c_new, LstmStepCache(x, h, c, i, f, g, o, tanh_c)


def lstm_forward(p: LstmParams, seq: np.ndarray, h0: np.ndarray | None = None, c0: np.ndarray | None = None):
    """Run the LSTM over ``seq`` of shape ``(T, D)`` or ``(B, T, D)``.

    Returns all hidden states, shaped ``(T, H)`` or ``(B, T, H)``.
    """
    batched = seq.ndim == 3
    s = seq if batched else seq[None]
    if s.ndim != 3 or s.shape[2] != p.input_size:
        raise ShapeError(f"LSTM expects (T, {p.input_size}) input, got {seq.shape}")
    B, T, _ = s.shape
    if T < 1:
        raise ShapeError("LSTM needs at least one timestep")
    H = p.hidden
    h = np.zeros((B, H)) if h0 is None else np.broadcast_to(h0, (B, H)).astype(np.float64)
    c = np.zeros((B, H)) if c0 is None else np.broadcast_to(c0, (B, H)).astype(np.float64)
    outs = np.empty((B, T, H))
    steps = []
    for t in range(T):
        h, c, sc = lstm_step(p, s[:, t, :], h, c)
        outs[:, t, :] = h
        steps.append(sc)
    out = outs if batched else outs[0]
    return out, LstmCache(p, steps, batched, out.shape)


def lstm_backward(p: LstmParams, cache: LstmCache, dH_all: np.ndarray):
    """Backpropagation through time. Returns ``(dparams, dseq)``."""
    if cache.params is not p:
        raise ValueError("cache was produced by different parameters")
    if dH_all.shape != cache.out_shape:
        raise ShapeError(f"dH shape {dH_all.shape} does not match forward output {cache.out_shape}")
    dH = dH_all if cache.batched else dH_all[None]
    B, T, H = dH.shape
    dW = np.zeros_like(p.W)
    dU = np.zeros_like(p.U)
    db = np.zeros_like(p.b)
    dseq = np.empty((B, T, p.input_size))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        sc = cache.steps[t]
        dh = dH[:, t, :] + dh_next
        do = dh * sc.tanh_c
        dc = dh * sc.o * (1.0 - sc.tanh_c**2) + dc_next
        di = dc * sc.g
        dg = dc * sc.i
        df = dc * sc.c_prev
        dc_next = dc * sc.f
        da = np.concatenate(
            [di * sc.i * (1.0 - sc.i), df * sc.f * (1.0 - sc.f), dg * (1.0 - sc.g**2), do * sc.o * (1.0 - sc.o)],
            axis=1,
        )
        dW += da.T @ sc.x
        dU += da.T @ sc.h_prev
        db += da.sum(axis=0)
        dseq[:, t, :] = da @ p.W
        dh_next = da @ p.U
    return LstmParams(dW, dU, db), (dseq if cache.batched else dseq[0])


# --------------------------------------------------------------------------
# bidirectional encoder


@dataclass
class BiLstmCache:
    params: BiLstmParams
    fwd: LstmCache
    bwd: LstmCache
    batched: bool
    T: int


def bilstm_encode(p: BiLstmParams, seq: np.ndarray):
    """Embed ``seq`` (``(T, D)`` or ``(B, T, D)``) as the sum of the final hidden
    states of a forward pass and of a pass over the time-reversed sequence."""
    batched = seq.ndim == 3
    s = seq if batched else seq[None]
    if s.ndim != 3 or s.shape[1] == 0:
        raise ShapeError("empty support: encoder needs at least one timestep")
    hf, cf = lstm_forward(p.fwd, s)
    hb, cb = lstm_forward(p.bwd, s[:, ::-1, :])
    z = hf[:, -1, :] + hb[:, -1, :]
    return (z if batched else z[0]), BiLstmCache(p, cf, cb, batched, s.shape[1])


def bilstm_backward(p: BiLstmParams, cache: BiLstmCache, dz: np.ndarray):
    """Returns ``(dparams, dseq)`` for an upstream gradient on the embedding."""
    if cache.params is not p:
        raise ValueError("cache was produced by different parameters")
    dz2 = dz if cache.batched else dz[None]
    B, H = dz2.shape
    dHf = np.zeros((B, cache.T, H))
    dHf[:, -1, :] = dz2
    gf, dsf = lstm_backward(p.fwd, cache.fwd, dHf)
    gb, dsb = lstm_backward(p.bwd, cache.bwd, dHf.copy())
    dseq = dsf + dsb[:, ::-1, :]
    return BiLstmParams(gf, gb), (dseq if cache.batched else dseq[0])


# --------------------------------------------------------------------------
# linear layer (f_d, output projection, FiLM generators)


def linear_forward(p: LinearParams, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != p.W.shape[1]:
        raise ShapeError(f"linear layer expects {p.W.shape[1]} inputs, got shape {x.shape}")
    return x @ p.W.T + p.b


def linear_backward(p: LinearParams, x: np.ndarray, dy: np.ndarray):
    out, inp = p.W.shape
    dW = dy.reshape(-1, out).T @ x.reshape(-1, inp)
    db = dy.reshape(-1, out).sum(axis=0)
    return LinearParams(dW, db), dy @ p.W
