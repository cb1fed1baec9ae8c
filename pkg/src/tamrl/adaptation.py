"""Inference for new tasks: modulate, optionally fine-tune, predict.

Also holds the evaluation variants (ablations, the unmodulated base) and the
first-order MAML baseline, which shares the base architecture but has no
modulation network.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .modulation import FilmSite, MlpBase, ModulatedBase, SeqBase, generate_modulation, modulate_base
from .networks import MlpParams, from_flat, to_flat
from .numcore import SeededRng, adam_update, init_adam
from .training import EpisodeSource, MetaBatch, ModelState, Scaler, base_loss_and_grads, base_rows, embed
from .windowing import ResultRow, rmse

VARIANTS = ("tamrl", "tamrl-no-finetune", "tamrl-no-pretrain", "tamrl-no-finetune-no-pretrain", "fomaml", "base")
NO_FINETUNE = ("tamrl-no-finetune", "tamrl-no-finetune-no-pretrain", "base")


@dataclass(frozen=True)
class AdaptConfig:
    variant: str = "tamrl"
    num_inner_steps: int = 5
    lr: float = 0.001

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.num_inner_steps < 0:
            raise ConfigError("num_inner_steps must be >= 0")
        if self.variant in NO_FINETUNE and self.num_inner_steps != 0:
            raise ConfigError(f"variant {self.variant} does not fine-tune; num_inner_steps must be 0")

    @classmethod
    def for_variant(cls, variant: str, steps: int, lr: float) -> "AdaptConfig":
        return cls(variant, 0 if variant in NO_FINETUNE else steps, lr)

    @property
    def needs_pretrain(self) -> bool:
        return "no-pretrain" not in self.variant


@dataclass
class TaskModel:
    """A base network (shared or per-episode weights) with optional FiLM values.

    ``film`` holds one ``(gamma, beta)`` pair per site, each ``(E, d)`` for E
    episodes; ``None`` means the base runs unmodulated.
    """

    base: MlpBase | SeqBase
    film: list | None
    scaler: Scaler

    @property
    def n_episodes(self) -> int:
        return 1 if self.film is None else self.film[0][0].shape[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Responses for drivers ``x (E, Q, L, D)``; takes no targets."""
        if x.ndim != 4:
            raise ShapeError(f"predict expects (E, Q, L, D) drivers, got {x.shape}")
        if x.shape[-1] != self.base.input_size:
            raise ShapeError(f"base expects {self.base.input_size} drivers, got {x.shape[-1]}")
        rows, film = base_rows(self.base, self.film, self.scaler.nx(x))
        out, _ = self.base.forward(rows, film)
        return (out * self.scaler.y_std + self.scaler.y_mean).reshape(x.shape[:3])

    def as_modulated(self, episode: int = 0) -> ModulatedBase:
        if self.film is None:
            raise ValueError("unmodulated model")
        base = self.base
        if isinstance(base, MlpBase) and base.mlp.weights[0].ndim == 3:
            base = MlpBase(MlpParams([w[episode] for w in base.mlp.weights], [b[episode] for b in base.mlp.biases]))
        sites = [FilmSite(tag, g[episode], b[episode]) for (tag, _), (g, b) in zip(base.site_specs(), self.film)]
        return modulate_base(base, sites)


def infer_modulated(state: ModelState, support_x: np.ndarray, support_y: np.ndarray) -> TaskModel:
    """Embed each episode's support set and generate its FiLM values.

    ``support_x (E, S, L, D)``, ``support_y (E, S, L)``. Encoder and generator
    are only read.
    """
    if support_x.ndim != 4 or support_x.shape[1] == 0 or support_x.shape[2] == 0:
        raise ShapeError(f"support must be a nonempty (E, S, L, D) array, got {support_x.shape}")
    z, _ = embed(state.params.encoder, state.scaler, support_x, support_y)
    sites = generate_modulation(state.params.generator, z)
    return TaskModel(state.params.base, [(s.gamma, s.beta) for s in sites], state.scaler)


def embeddings(state: ModelState, support_x: np.ndarray, support_y: np.ndarray) -> np.ndarray:
    return embed(state.params.encoder, state.scaler, support_x, support_y)[0]


def per_episode_base(base, E: int):
    """Give every episode its own copy of the base weights (MLP only)."""
    if E == 1 or not isinstance(base, MlpBase) or base.mlp.weights[0].ndim == 3:
        return base
    return MlpBase(MlpParams([np.repeat(w[None], E, axis=0) for w in base.mlp.weights],
                             [np.repeat(b[None], E, axis=0) for b in base.mlp.biases]))


def adapt(model: TaskModel, support_x: np.ndarray, support_y: np.ndarray, steps: int, lr: float):
    """Adam on support MSE over the base weights and the FiLM values.

    Episodes are adapted independently (per-episode weights, summed loss). A
    sequence base only supports one episode at a time. Returns the adapted
    model and the trace ``(steps + 1, E)`` of support losses, the last row
    measured after the final step.
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    E = support_x.shape[0]
    if isinstance(model.base, SeqBase) and E != 1:
        raise ShapeError("sequence bases are adapted one episode at a time")
    trace = []
    if steps == 0:
        loss, per_ep, _, _ = base_loss_and_grads(model.base, model.film, model.scaler, support_x, support_y, "sum")
        return model, np.array([per_ep])
    params = {"base": per_episode_base(model.base, E), "film": [list(p) for p in model.film] if model.film else []}
    flat = to_flat(params)
    opt = init_adam(flat, lr)
    for _ in range(steps):
        film = params["film"] or None
        _, per_ep, dbase, dfilm = base_loss_and_grads(params["base"], film, model.scaler, support_x, support_y, "sum")
        trace.append(per_ep)
        grads = {"base": dbase, "film": [list(p) for p in dfilm] if dfilm else []}
        flat, opt = adam_update(flat, to_flat(grads), opt)
        params = from_flat(params, flat)
    film = params["film"] or None
    _, per_ep, _, _ = base_loss_and_grads(params["base"], film, model.scaler, support_x, support_y, "sum")
    trace.append(per_ep)
    film = [tuple(p) for p in params["film"]] if params["film"] else None
    return TaskModel(params["base"], film, model.scaler), np.array(trace)


def sgd_adapt(base, scaler: Scaler, support_x, support_y, steps: int, lr: float):
    """Plain gradient steps on per-episode copies of an unmodulated base."""
    E = support_x.shape[0]
    if isinstance(base, SeqBase) and E != 1:
        raise ShapeError("sequence bases are adapted one episode at a time")
    base = per_episode_base(base, E)
    for _ in range(steps):
        _, _, grads, _ = base_loss_and_grads(base, None, scaler, support_x, support_y, "sum")
        flat = to_flat(base)
        g = to_flat(grads)
        base = from_flat(base, {k: flat[k] - lr * g[k] for k in flat})
    return base


def _batch_size_for(base) -> int:
    return 1 if isinstance(base, SeqBase) else 1 << 30


def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def predict_tamrl(state: ModelState, batch: MetaBatch, cfg: AdaptConfig, chunk: int = 1024) -> np.ndarray:
    """Query predictions ``(E, Q, L)`` of one trained member under ``cfg``."""
    out = []
    size = min(chunk, _batch_size_for(state.params.base))
    for sl in _chunks(len(batch), size):
        sx, sy = batch.support_x[sl], batch.support_y[sl]
        if cfg.variant == "base":
            out.append(TaskModel(state.params.base, None, state.scaler).predict(batch.query_x[sl]))
            continue
        model = infer_modulated(state, sx, sy)
        if cfg.num_inner_steps > 0:
            model, _ = adapt(model, sx, sy, cfg.num_inner_steps, cfg.lr)
        out.append(model.predict(batch.query_x[sl]))
    return np.concatenate(out)


# --------------------------------------------------------------------------
# first-order MAML


@dataclass
class FomamlState:
    base: MlpBase | SeqBase
    scaler: Scaler
    seed: int
    inner_steps: int
    inner_lr: float
    curve: list[float] = field(default_factory=list)


def _fomaml_batch_grads(base, scaler, batch: MetaBatch, steps: int, inner_lr: float):
    """Mean over episodes of the query gradient at each episode's adapted weights."""
    if isinstance(base, SeqBase):
        total, acc = 0.0, None
        for i in range(len(batch)):
            ep = batch.subset([i])
            adapted = sgd_adapt(base, scaler, ep.support_x, ep.support_y, steps, inner_lr)
            loss, _, g, _ = base_loss_and_grads(adapted, None, scaler, ep.query_x, ep.query_y)
            g = to_flat(g)
            acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
            total += loss
        E = len(batch)
        return total / E, {k: v / E for k, v in acc.items()}
    adapted = sgd_adapt(base, scaler, batch.support_x, batch.support_y, steps, inner_lr)
    loss, _, g, _ = base_loss_and_grads(adapted, None, scaler, batch.query_x, batch.query_y, "mean")
    g = to_flat(g)
    if adapted is not base:
        # per-episode copies: the outer gradient of shared weights is their sum
        g = {k: v.sum(axis=0) for k, v in g.items()}
    return loss, g


def train_fomaml(base, scaler: Scaler, source: EpisodeSource, epochs: int, meta_batch: int, lr: float,
                 inner_steps: int, inner_lr: float, rng: SeededRng, seed: int = 0) -> FomamlState:
    """First-order MAML: SGD inner loop on support, Adam outer step with the
    query gradient taken at the adapted weights."""
    flat = to_flat(base)
    opt = init_adam(flat, lr)
    curve = []
    for _ in range(epochs):
        total, count = 0.0, 0
        for batch in source.epoch_batches(rng, meta_batch):
            loss, g = _fomaml_batch_grads(base, scaler, batch, inner_steps, inner_lr)
            flat, opt = adam_update(flat, g, opt)
            base = from_flat(base, flat)
            total += loss * len(batch)
            count += len(batch)
        curve.append(total / max(count, 1))
        if not np.isfinite(curve[-1]):
            raise NumericError("FOMAML training diverged")
    return FomamlState(base, scaler, seed, inner_steps, inner_lr, curve)


def predict_fomaml(state: FomamlState, batch: MetaBatch, steps: int | None = None, chunk: int = 1024) -> np.ndarray:
    steps = state.inner_steps if steps is None else steps
    out = []
    size = min(chunk, _batch_size_for(state.base))
    for sl in _chunks(len(batch), size):
        adapted = sgd_adapt(state.base, state.scaler, batch.support_x[sl], batch.support_y[sl], steps, state.inner_lr)
        out.append(TaskModel(adapted, None, state.scaler).predict(batch.query_x[sl]))
    return np.concatenate(out)


# --------------------------------------------------------------------------
# variants and result rows


def predict_variant(cfg: AdaptConfig, members, batch: MetaBatch) -> np.ndarray:
    """Stacked predictions ``(n_members, E, Q, L)``."""
    preds = []
    for m in members:
        if cfg.variant == "fomaml":
            if not isinstance(m, FomamlState):
                raise ConfigError("fomaml variant needs FOMAML-trained members")
            preds.append(predict_fomaml(m, batch, cfg.num_inner_steps))
        else:
            if not isinstance(m, ModelState):
                raise ConfigError(f"variant {cfg.variant} needs TAM-RL members")
            preds.append(predict_tamrl(m, batch, cfg))
    return np.stack(preds)


def result_rows(preds: np.ndarray, batch: MetaBatch, model: str, budget: str, seeds) -> list[ResultRow]:
    """Per-member rows plus ``seed="ensemble"`` rows (RMSE of the averaged prediction)."""
    rows = []
    mean = preds.mean(axis=0)
    for e, eid in enumerate(batch.ids):
        for k, s in enumerate(seeds):
            rows.append(ResultRow(eid, budget, model, str(s), rmse(preds[k, e], batch.query_y[e])))
        rows.append(ResultRow(eid, budget, model, "ensemble", rmse(mean[e], batch.query_y[e])))
    return rows


def run_variant(cfg: AdaptConfig, members, batch: MetaBatch, budget: str = "") -> list[ResultRow]:
    preds = predict_variant(cfg, members, batch)
    return result_rows(preds, batch, cfg.variant, budget, [m.seed for m in members])


def ensemble_mse(preds: np.ndarray, batch: MetaBatch) -> float:
    """Mean over episodes of the query MSE of the member-averaged prediction."""
    diff = preds.mean(axis=0) - batch.query_y
    return float(np.mean(diff.reshape(diff.shape[0], -1) ** 2))

