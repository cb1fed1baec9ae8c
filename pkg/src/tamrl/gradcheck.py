"""Finite-difference audit of every hand-written backward pass.

Each component draws random small instances, reduces the network output to a
scalar with a random linear functional, and compares the analytic gradient
with central differences over all parameters (and inputs where the backward
returns them).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .modulation import MlpBase, generate_modulation, generator_backward, init_generator
from .networks import (
    bilstm_backward,
    bilstm_encode,
    from_flat,
    init_params,
    lstm_backward,
    lstm_forward,
    mlp_backward,
    mlp_forward,
    to_flat,
)
from .numcore import SeededRng, finite_diff_grad, relative_error
from .training import MetaBatch, Scaler, TamrlParams, build_base, build_modulation, query_loss_and_grads

COMPONENTS = ("mlp", "lstm", "bilstm", "film-pipeline", "joint")
THRESHOLD = 1e-4


@dataclass
class ComponentResult:
    name: str
    instances: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < THRESHOLD


def _pack(flat: dict[str, np.ndarray]):
    keys = list(flat)
    vec = np.concatenate([flat[k].ravel() for k in keys])

    def unpack(v: np.ndarray) -> dict[str, np.ndarray]:
        out, o = {}, 0
        for k in keys:
            n = flat[k].size
            out[k] = v[o : o + n].reshape(flat[k].shape)
            o += n
        return out

    return vec, unpack


def compare(obj, loss_fn: Callable, analytic, skew: float = 1.0) -> float:
    """Relative error between ``analytic`` (same structure as ``obj``) and central
    differences of ``loss_fn(obj)`` over every array in ``obj``."""
    vec, unpack = _pack(to_flat(obj))
    num = finite_diff_grad(lambda v: loss_fn(from_flat(obj, unpack(v))), vec)
    ana = _pack(to_flat(analytic))[0] * skew
    return relative_error(ana, num)


# (parameters and inputs, scalar loss of them, analytic gradient)
Instance = tuple


def _dims(rng: SeededRng, lo: int, hi: int) -> int:
    return int(rng.integers(lo, hi + 1))


def _random_biases(obj, rng: SeededRng):
    # zero-initialized biases put dead relu units exactly on the kink, where
    # central differences are meaningless
    def is_bias(key: str) -> bool:
        parts = key.split(".")
        return "biases" in parts or parts[-1] == "b"

    return from_flat(obj, {k: v + rng.normal(v.shape, 0.5) if is_bias(k) else v for k, v in to_flat(obj).items()})


def check_mlp(rng: SeededRng) -> Instance:
    sizes = [_dims(rng, 1, 4) for _ in range(_dims(rng, 2, 4))]
    p = _random_biases(init_params("mlp", sizes, rng), rng)
    x = rng.normal((_dims(rng, 1, 5), sizes[0]))
    R = rng.normal((x.shape[0], sizes[-1]))

    def loss(obj):
        q, xx = obj
        return float(np.sum(mlp_forward(q, xx)[0] * R))

    _, cache = mlp_forward(p, x)
    dp, dx, _ = mlp_backward(p, cache, R)
    return (p, x), loss, (dp, dx)


def check_lstm(rng: SeededRng) -> Instance:
    D, H, T, B = _dims(rng, 1, 3), _dims(rng, 1, 3), _dims(rng, 1, 5), _dims(rng, 1, 3)
    p = init_params("lstm", (D, H), rng)
    seq = rng.normal((B, T, D))
    R = rng.normal((B, T, H))

    def loss(obj):
        q, s = obj
        return float(np.sum(lstm_forward(q, s)[0] * R))

    _, cache = lstm_forward(p, seq)
    dp, dseq = lstm_backward(p, cache, R)
    return (p, seq), loss, (dp, dseq)


def check_bilstm(rng: SeededRng) -> Instance:
    D, H, T, B = _dims(rng, 1, 3), _dims(rng, 1, 3), _dims(rng, 1, 5), _dims(rng, 1, 3)
    p = init_params("bilstm", (D, H), rng)
    seq = rng.normal((B, T, D))
    R = rng.normal((B, H))

    def loss(obj):
        q, s = obj
        return float(np.sum(bilstm_encode(q, s)[0] * R))

    _, cache = bilstm_encode(p, seq)
    dp, dseq = bilstm_backward(p, cache, R)
    return (p, seq), loss, (dp, dseq)


def check_film_pipeline(rng: SeededRng) -> Instance:
    """Embedding -> generator -> FiLM-modulated MLP base, per-episode FiLM values."""
    sizes = [1] + [_dims(rng, 1, 4) for _ in range(_dims(rng, 1, 2))] + [1]
    base = MlpBase(_random_biases(init_params("mlp", sizes, rng), rng))
    Hz, E, P = _dims(rng, 1, 3), _dims(rng, 1, 3), _dims(rng, 1, 4)
    gen = init_generator(base.site_specs(), Hz, rng)
    z = rng.normal((E, Hz))
    x = rng.normal((E, P, 1))
    R = rng.normal((E, P))

    def forward(obj):
        b, g, zz = obj
        sites = generate_modulation(g, zz)
        return b.forward(x, [(s.gamma, s.beta) for s in sites])

    def loss(obj):
        return float(np.sum(forward(obj)[0] * R))

    _, cache = forward((base, gen, z))
    dbase, dfilm = base.backward(cache, R)
    dgen, dz = generator_backward(gen, z, dfilm)
    return (base, gen, z), loss, (dbase, dgen, dz)


def check_joint(rng: SeededRng) -> Instance:
    """Full query objective through base, FiLM, generator and BiLSTM encoder."""
    kind = "mlp" if rng.uniform(0.0, 1.0) < 0.5 else "lstm"
    D = 1 if kind == "mlp" else _dims(rng, 1, 2)
    arch = {"kind": kind, "n_drivers": D, "base_hidden": _dims(rng, 1, 3), "base_layers": _dims(rng, 2, 3),
            "input_width": _dims(rng, 1, 3), "encoder_hidden": _dims(rng, 1, 3)}
    base = _random_biases(build_base(arch, rng), rng)
    enc, gen = build_modulation(arch, base, rng)
    params = TamrlParams(base, enc, gen)
    E, S, Q, Ls, Lq = _dims(rng, 1, 3), _dims(rng, 1, 2), _dims(rng, 1, 2), _dims(rng, 1, 4), _dims(rng, 1, 4)
    batch = MetaBatch([str(i) for i in range(E)], rng.normal((E, S, Ls, D)), rng.normal((E, S, Ls)),
                      rng.normal((E, Q, Lq, D)), rng.normal((E, Q, Lq)))
    scaler = Scaler(rng.normal(D), 0.5 + rng.uniform(0.0, 1.0, D), float(rng.normal()), 0.5 + rng.uniform(0.0, 1.0))
    _, _, grads = query_loss_and_grads(params, scaler, batch)
    return params, lambda p: query_loss_and_grads(p, scaler, batch)[0], grads


CHECKS: dict[str, Callable[[SeededRng], Instance]] = {
    "mlp": check_mlp,
    "lstm": check_lstm,
    "bilstm": check_bilstm,
    "film-pipeline": check_film_pipeline,
    "joint": check_joint,
}


def run_suite(instances: int = 20, seed: int = 0, corrupt: str | None = None) -> list[ComponentResult]:
    """Run every component ``instances`` times.

    ``corrupt`` names a component whose analytic gradients are deliberately
    scaled by 1.01, so callers can confirm that a broken backward is caught.
    """
    if corrupt is not None and corrupt not in CHECKS:
        raise ValueError(f"unknown component {corrupt!r}")
    rng = SeededRng(seed)
    results = []
    for c, name in enumerate(COMPONENTS):
        t0 = time.perf_counter()
        skew = 1.01 if name == corrupt else 1.0
        worst = max(compare(*CHECKS[name](rng.child(c).child(i)), skew=skew) for i in range(instances))
        results.append(ComponentResult(name, instances, worst, time.perf_counter() - t0))
    return results
