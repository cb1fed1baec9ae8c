"""Two-stage training: pretraining the base on pooled data, then amortized joint
training of encoder, generator and modulated base on query losses.

Episodes are handed around as :class:`MetaBatch` arrays::

    support_x (E, S, Ls, D)   support_y (E, S, Ls)
    query_x   (E, Q, Lq, D)   query_y   (E, Q, Lq)

For the synthetic benchmark ``S = Q = 1`` and the ``L`` axis holds the five
points of a task (the encoder reads them as a sequence, the MLP base treats
them as independent rows). For entity time series ``S``/``Q`` count windows
and ``L`` is the window length.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .modulation import (
    GeneratorParams,
    MlpBase,
    SeqBase,
    generate_modulation,
    generator_backward,
    init_generator,
    init_mlp_base,
    init_seq_base,
)
from .networks import BiLstmParams, bilstm_backward, bilstm_encode, from_flat, init_params, to_flat
from .numcore import AdamState, SeededRng, adam_update, init_adam

CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# data containers


@dataclass
class Scaler:
    """Fixed standardization of drivers and responses, fit once on training data.

    Networks see standardized inputs; the base output is mapped back to
    response units, so every loss and metric is in response units.
    """

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> "Scaler":
        X = X.reshape(-1, X.shape[-1])
        xs = X.std(axis=0)
        ys = float(np.std(y))
        return cls(X.mean(axis=0), np.where(xs > 1e-12, xs, 1.0), float(np.mean(y)), ys if ys > 1e-12 else 1.0)

    @classmethod
    def identity(cls, n_drivers: int) -> "Scaler":
        return cls(np.zeros(n_drivers), np.ones(n_drivers), 0.0, 1.0)

    def nx(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def ny(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std


@dataclass
class MetaBatch:
    ids: list[str]
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray

    def __post_init__(self):
        E = len(self.ids)
        if self.support_x.ndim != 4 or self.query_x.ndim != 4:
            raise ShapeError("support_x and query_x must be (E, S|Q, L, D)")
        if self.support_x.shape[0] != E or self.query_x.shape[0] != E:
            raise ShapeError("episode count mismatch inside batch")
        if self.support_x.shape[1] == 0 or self.support_x.shape[2] == 0:
            raise ShapeError("episode with empty support")
        if self.query_x.shape[1] == 0 or self.query_x.shape[2] == 0:
            raise ShapeError("episode with empty query")
        if self.support_y.shape != self.support_x.shape[:3] or self.query_y.shape != self.query_x.shape[:3]:
            raise ShapeError("response arrays must match driver arrays without the feature axis")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "MetaBatch":
        idx = np.asarray(idx)
        return MetaBatch([self.ids[i] for i in idx], self.support_x[idx], self.support_y[idx],
                         self.query_x[idx], self.query_y[idx])


def synthetic_batch(ep) -> MetaBatch:
    """Wrap :class:`~tamrl.synthetic.EpisodeArrays` as a batch."""
    return MetaBatch(list(ep.task_ids), ep.support_x[:, None, :, None], ep.support_y[:, None, :],
                     ep.query_x[:, None, :, None], ep.query_y[:, None, :])


class EpisodeSource(Protocol):
    def epoch_batches(self, rng: SeededRng, batch_size: int) -> Iterator[MetaBatch]: ...


@dataclass
class FixedEpisodes:
    """A fixed pool of episodes, reshuffled every epoch."""

    batch: MetaBatch

    def epoch_batches(self, rng: SeededRng, batch_size: int) -> Iterator[MetaBatch]:
        order = rng.permutation(len(self.batch))
        for s in range(0, len(order), batch_size):
            yield self.batch.subset(order[s : s + batch_size])


# --------------------------------------------------------------------------
# model


@dataclass
class TamrlParams:
    base: MlpBase | SeqBase
    encoder: BiLstmParams
    generator: GeneratorParams


@dataclass
class ModelState:
    params: TamrlParams
    scaler: Scaler
    arch: dict
    seed: int = 0
    opt: dict[str, AdamState] | None = None
    pretrain_epochs_done: int = 0
    joint_epochs_done: int = 0
    pretrain_curve: list[float] = field(default_factory=list)
    joint_curve: list[float] = field(default_factory=list)
    rng_state: dict | None = None
    config_hash: str = ""


def arch_from_config(cfg, n_drivers: int) -> dict:
    kind = cfg["model.kind"]
    if kind not in ("mlp", "lstm"):
        raise ConfigError(f"model.kind must be 'mlp' or 'lstm', got {kind!r}")
    return {
        "kind": kind,
        "n_drivers": int(n_drivers),
        "base_hidden": int(cfg["model.base_hidden"]),
        "base_layers": int(cfg["model.base_layers"]),
        "input_width": int(cfg["model.input_width"]) or int(cfg["model.base_hidden"]),
        "encoder_hidden": int(cfg["model.encoder_hidden"]),
    }


def build_base(arch: dict, rng: SeededRng) -> MlpBase | SeqBase:
    if arch["kind"] == "mlp":
        L = arch["base_layers"]
        sizes = [arch["n_drivers"]] + [arch["base_hidden"]] * (L - 1) + [1]
        return init_mlp_base(sizes, rng)
    return init_seq_base(arch["n_drivers"], arch["base_hidden"], rng, arch["input_width"])


def build_modulation(arch: dict, base, rng: SeededRng) -> tuple[BiLstmParams, GeneratorParams]:
    enc = init_params("bilstm", (arch["n_drivers"] + 1, arch["encoder_hidden"]), rng)
    gen = init_generator(base.site_specs(), arch["encoder_hidden"], rng)
    return enc, gen


def new_model(arch: dict, scaler: Scaler, seed: int) -> ModelState:
    rng = SeededRng(seed)
    base = build_base(arch, rng.child(0))
    enc, gen = build_modulation(arch, base, rng.child(1))
    return ModelState(TamrlParams(base, enc, gen), scaler, dict(arch), seed)


# --------------------------------------------------------------------------
# losses


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def batched_weights(base) -> bool:
    return isinstance(base, MlpBase) and base.mlp.weights[0].ndim == 3


def base_rows(base, film, x: np.ndarray):
    """Lay episodes ``x (E, Q, L, D)`` out as base-network rows.

    Shared weights see ``E * Q`` rows of length ``L`` with FiLM values repeated
    per row; per-episode MLP weights see ``E`` rows of ``Q * L`` points.
    """
    E, Q, L, D = x.shape
    if batched_weights(base):
        return x.reshape(E, Q * L, D), film
    if film is not None:
        film = [(_repeat_rows(g, Q), _repeat_rows(b, Q)) for g, b in film]
    return x.reshape(E * Q, L, D), film


def base_loss_and_grads(base, film, scaler: Scaler, x: np.ndarray, y: np.ndarray, reduction: str = "mean"):
    """Loss of ``base`` (optionally FiLM-modulated) on episodes ``x (E, Q, L, D)``.

    ``film`` holds per-site ``(gamma, beta)`` of shape ``(E, d)`` or ``(1, d)``.
    ``reduction="mean"`` averages the per-episode MSEs; ``"sum"`` adds them,
    which makes every episode's gradient independent of the others.
    Returns ``(loss, per_episode_mse, dbase, dfilm)``.
    """
    E, Q, L, _ = x.shape
    rows, rows_film = base_rows(base, film, scaler.nx(x))
    out, cache = base.forward(rows, rows_film)
    pred = out * scaler.y_std + scaler.y_mean
    diff = pred - y.reshape(out.shape)
    per_ep = (diff * diff).reshape(E, Q * L).mean(axis=1)
    if not np.all(np.isfinite(per_ep)):
        raise NumericError("non-finite loss")
    if reduction == "mean":
        loss, scale = float(per_ep.mean()), 2.0 / (E * Q * L)
    elif reduction == "sum":
        loss, scale = float(per_ep.sum()), 2.0 / (Q * L)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    dbase, dfilm_rows = base.backward(cache, diff * (scale * scaler.y_std))
    dfilm = None
    if film is not None:
        dfilm = [(_sum_rows(dg, g, Q), _sum_rows(db, b, Q)) for (dg, db), (g, b) in zip(dfilm_rows, film)]
    return loss, per_ep, dbase, dfilm


def _repeat_rows(a: np.ndarray, Q: int) -> np.ndarray:
    return a if (Q == 1 or a.shape[0] == 1) else np.repeat(a, Q, axis=0)


def _sum_rows(g: np.ndarray, like: np.ndarray, Q: int) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return g.reshape(like.shape[0], Q, -1).sum(axis=1)


def encoder_input(scaler: Scaler, support_x: np.ndarray, support_y: np.ndarray) -> np.ndarray:
    """``[x; y]`` rows for the encoder, standardized: ``(E, S, L, D + 1)``."""
    return np.concatenate([scaler.nx(support_x), scaler.ny(support_y)[..., None]], axis=-1)


def embed(encoder: BiLstmParams, scaler: Scaler, support_x, support_y):
    """Per-episode embeddings ``(E, H_z)``; multiple support windows are averaged."""
    seq = encoder_input(scaler, support_x, support_y)
    E, S, L, D = seq.shape
    zs, cache = bilstm_encode(encoder, seq.reshape(E * S, L, D))
    return zs.reshape(E, S, -1).mean(axis=1), cache


def query_loss_and_grads(params: TamrlParams, scaler: Scaler, batch: MetaBatch, reduction: str = "mean"):
    """Query-set loss of the fully modulated model and gradients for every
    parameter group. The encoder only ever sees the support arrays."""
    z, ecache = embed(params.encoder, scaler, batch.support_x, batch.support_y)
    sites = generate_modulation(params.generator, z)
    film = [(s.gamma, s.beta) for s in sites]
    loss, per_ep, dbase, dfilm = base_loss_and_grads(params.base, film, scaler, batch.query_x, batch.query_y, reduction)
    dgen, dz = generator_backward(params.generator, z, dfilm)
    S = batch.support_x.shape[1]
    dzs = np.repeat(dz[:, None, :] / S, S, axis=1).reshape(-1, dz.shape[-1])
    denc, _ = bilstm_backward(params.encoder, ecache, dzs)
    return loss, per_ep, TamrlParams(dbase, denc, dgen)


# --------------------------------------------------------------------------
# pretraining


def pretrain(base, scaler: Scaler, X: np.ndarray, Y: np.ndarray, epochs: int, batch_size: int, lr: float,
             rng: SeededRng):
    """Minibatch Adam on pooled ``X (N, P, D) -> Y (N, P)`` with no entity information.

    Returns the trained base and the per-epoch mean training loss.
    """
    if X.shape[0] == 0:
        raise DataError("pretraining needs data")
    if epochs < 0 or batch_size < 1:
        raise ConfigError("pretrain epochs must be >= 0 and batch size >= 1")
    opt = init_adam(to_flat(base), lr)
    curve = []
    N = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(N)
        total = 0.0
        for s in range(0, N, batch_size):
            idx = order[s : s + batch_size]
            loss, _, grads, _ = base_loss_and_grads(base, None, scaler, X[idx][None], Y[idx][None])
            new, opt = adam_update(to_flat(base), to_flat(grads), opt)
            base = from_flat(base, new)
            total += loss * len(idx)
        curve.append(total / N)
    return base, curve


def pooled_loss(base, scaler: Scaler, X: np.ndarray, Y: np.ndarray, chunk: int = 4096) -> float:
    total = 0.0
    for s in range(0, X.shape[0], chunk):
        loss, *_ = base_loss_and_grads(base, None, scaler, X[s : s + chunk][None], Y[s : s + chunk][None])
        total += loss * X[s : s + chunk].shape[0]
    return total / X.shape[0]


# --------------------------------------------------------------------------
# joint training


def joint_train(state: ModelState, source: EpisodeSource, epochs: int, batch_size: int, lr: float,
                rng: SeededRng | None = None) -> ModelState:
    """Amortized training: one Adam step on all parameters per episode batch.

    Each batch is embedded, modulated and scored on its query sets; there is
    no inner-loop adaptation. ``rng`` drives batch order and, for time-series
    sources, the per-epoch resampling of support windows. Its final state is
    stored on the returned model so training can resume bit-identically.
    """
    if rng is None:
        rng = SeededRng(state.seed).child(3)
        if state.rng_state is not None:
            rng.set_state(state.rng_state)
    params = state.params
    flat = to_flat(params)
    opt = state.opt if state.opt is not None else init_adam(flat, lr)
    curve = list(state.joint_curve)
    for _ in range(epochs):
        total, count = 0.0, 0
        for batch in source.epoch_batches(rng, batch_size):
            loss, _, grads = query_loss_and_grads(params, state.scaler, batch)
            flat, opt = adam_update(flat, to_flat(grads), opt)
            params = from_flat(params, flat)
            total += loss * len(batch)
            count += len(batch)
        if count == 0:
            raise DataError("episode source produced no batches")
        curve.append(total / count)
        if not np.isfinite(curve[-1]):
            raise NumericError("joint training diverged")
    return ModelState(params, state.scaler, state.arch, state.seed, opt, state.pretrain_epochs_done,
                      state.joint_epochs_done + epochs, list(state.pretrain_curve), curve, rng.get_state(),
                      state.config_hash)


def train_member(arch: dict, scaler: Scaler, seed: int, pooled: tuple[np.ndarray, np.ndarray] | None,
                 source: EpisodeSource, pretrain_epochs: int, joint_epochs: int, batch_size: int,
                 pretrain_batch_size: int, lr: float, config_hash: str = "") -> ModelState:
    """Pretrain then joint-train one ensemble member. ``pooled=None`` skips pretraining."""
    state = new_model(arch, scaler, seed)
    state.config_hash = config_hash
    rng = SeededRng(seed)
    if pooled is not None and pretrain_epochs > 0:
        base, curve = pretrain(state.params.base, scaler, pooled[0], pooled[1], pretrain_epochs,
                               pretrain_batch_size, lr, rng.child(2))
        state.params.base = base
        state.pretrain_curve = curve
        state.pretrain_epochs_done = pretrain_epochs
    return joint_train(state, source, joint_epochs, batch_size, lr, rng.child(3))


def member_seeds(seed: int, n: int) -> list[int]:
    if n < 1:
        raise ConfigError("ensemble size must be at least 1")
    return [int(seed) + k for k in range(n)]


def train_ensemble(arch, scaler, seed, n_seeds, **kwargs) -> list[ModelState]:
    """Independent members that differ only in their initialization seed."""
    return [train_member(arch, scaler, s, **kwargs) for s in member_seeds(seed, n_seeds)]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: ModelState) -> None:
    arrays = {f"p/{k}": v for k, v in to_flat(state.params).items()}
    if state.opt is not None:
        for k, s in state.opt.items():
            arrays[f"m/{k}"] = s.m
            arrays[f"v/{k}"] = s.v
    arrays["scaler/x_mean"] = state.scaler.x_mean
    arrays["scaler/x_std"] = state.scaler.x_std
    opt_meta = None
    if state.opt is not None:
        any_state = next(iter(state.opt.values()))
        opt_meta = {"t": {k: s.t for k, s in state.opt.items()}, "lr": any_state.lr, "beta1": any_state.beta1,
                    "beta2": any_state.beta2, "eps": any_state.eps}
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": state.config_hash,
        "seed": state.seed,
        "arch": state.arch,
        "scaler_y": [state.scaler.y_mean, state.scaler.y_std],
        "opt": opt_meta,
        "pretrain_epochs_done": state.pretrain_epochs_done,
        "joint_epochs_done": state.joint_epochs_done,
        "pretrain_curve": state.pretrain_curve,
        "joint_curve": state.joint_curve,
        "rng_state": state.rng_state,
    }
    arrays["meta"] = np.array(json.dumps(meta, default=int))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expected_hash: str | None = None) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        if expected_hash is not None and meta["config_hash"] != expected_hash:
            raise ConfigError(
                f"{path}: checkpoint was trained under config {meta['config_hash']}, current config is {expected_hash}"
            )
        arrays = {k: npz[k] for k in npz.files}
    arch = meta["arch"]
    template = new_model(arch, Scaler.identity(arch["n_drivers"]), 0).params
    params = from_flat(template, {k[2:]: v for k, v in arrays.items() if k.startswith("p/")})
    opt = None
    if meta["opt"] is not None:
        om = meta["opt"]
        opt = {k: AdamState(arrays[f"m/{k}"], arrays[f"v/{k}"], int(t), om["lr"], om["beta1"], om["beta2"], om["eps"])
               for k, t in om["t"].items()}
    scaler = Scaler(arrays["scaler/x_mean"], arrays["scaler/x_std"], *meta["scaler_y"])
    return ModelState(params, scaler, arch, meta["seed"], opt, meta["pretrain_epochs_done"], meta["joint_epochs_done"],
                      meta["pretrain_curve"], meta["joint_curve"], meta["rng_state"], meta["config_hash"])
