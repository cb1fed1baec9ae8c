"""Experiment orchestration shared by the CLI, the demos and the acceptance tests.

A :class:`Dataset` bundles everything a run needs: the training episode source,
pooled pretraining data, the scaler and the evaluation batches (one per
budget for entity series, one per mode set for the synthetic benchmark).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adaptation import AdaptConfig, FomamlState, predict_variant, result_rows, train_fomaml
from .config import ExperimentConfig
from .errors import ConfigError, DataError
from .networks import from_flat, to_flat
from .numcore import SeededRng
from .samples import bundled
from .synthetic import build_mode_set, set_name, stack_episodes
from .training import (
    FixedEpisodes,
    MetaBatch,
    ModelState,
    Scaler,
    arch_from_config,
    build_base,
    member_seeds,
    synthetic_batch,
    train_member,
)
from .windowing import (
    EntitySeries,
    ResultRow,
    load_entity_csv,
    make_windows,
    split_support_query,
    support_count,
    window_arrays,
)

log = logging.getLogger("tamrl")


@dataclass
class SeriesEpisodes:
    """Training episodes drawn afresh each epoch from entity windows."""

    series: list[EntitySeries]
    length: int
    stride: int
    support_fraction: float
    support_windows: int
    query_windows: int

    def __post_init__(self):
        self.windows = [make_windows(s, self.length, self.stride) for s in self.series]
        short = [s.entity_id for s, w in zip(self.series, self.windows) if len(w) < 2]
        if short:
            raise DataError(f"entities with fewer than 2 windows cannot form episodes: {', '.join(short)}")
        # every draw must yield equally many windows per entity
        ks = [support_count(len(w), self.support_fraction) for w in self.windows]
        self.s_count = max(1, min(self.support_windows, min(ks)))
        self.q_count = max(1, min(self.query_windows, min(len(w) - k for w, k in zip(self.windows, ks))))

    def __len__(self) -> int:
        return len(self.series)

    def draw(self, rng: SeededRng) -> MetaBatch:
        sx, sy, qx, qy = [], [], [], []
        for s, wins in zip(self.series, self.windows):
            ep = split_support_query(wins, self.support_fraction, rng, s.entity_id)
            sup = [ep.support[i] for i in sorted(rng.choice(len(ep.support), self.s_count))]
            qry = [ep.query[i] for i in sorted(rng.choice(len(ep.query), self.q_count))]
            a, b = window_arrays(s, sup)
            c, d = window_arrays(s, qry)
            sx.append(a), sy.append(b), qx.append(c), qy.append(d)
        return MetaBatch([s.entity_id for s in self.series], np.stack(sx), np.stack(sy), np.stack(qx), np.stack(qy))

    def epoch_batches(self, rng: SeededRng, batch_size: int):
        yield from FixedEpisodes(self.draw(rng)).epoch_batches(rng, batch_size)


@dataclass
class Dataset:
    kind: str
    source: FixedEpisodes | SeriesEpisodes
    pooled: tuple[np.ndarray, np.ndarray]
    scaler: Scaler
    arch: dict
    evals: list[tuple[str, list[MetaBatch]]]
    train_batch: MetaBatch | None = None


# --------------------------------------------------------------------------
# synthetic


def synthetic_split(cfg: ExperimentConfig, split: str):
    """Task/episode pairs of the configured mode set. Train and eval sets come
    from separate child streams of the seed."""
    name = set_name(cfg["synth.set"])
    n = cfg["synth.train_tasks_per_mode"] if split == "train" else cfg["synth.eval_tasks_per_mode"]
    rng = SeededRng(cfg["seed"]).child(0 if split == "train" else 1)
    return build_mode_set(name, n, rng, cfg["synth.k_support"], cfg["synth.k_query"], cfg["synth.noise_std"],
                          id_prefix=f"{name.lower()}-{split}")


def pooled_points(batch: MetaBatch) -> tuple[np.ndarray, np.ndarray]:
    """All support and query points as independent one-point rows."""
    D = batch.support_x.shape[-1]
    X = np.concatenate([batch.support_x.reshape(len(batch), -1, D), batch.query_x.reshape(len(batch), -1, D)], axis=1)
    Y = np.concatenate([batch.support_y.reshape(len(batch), -1), batch.query_y.reshape(len(batch), -1)], axis=1)
    return X.reshape(-1, 1, D), Y.reshape(-1, 1)


def synthetic_dataset(cfg: ExperimentConfig, train_pairs=None, eval_pairs=None) -> Dataset:
    train_pairs = train_pairs if train_pairs is not None else synthetic_split(cfg, "train")
    eval_pairs = eval_pairs if eval_pairs is not None else synthetic_split(cfg, "eval")
    train = synthetic_batch(stack_episodes(e for _, e in train_pairs))
    ev = synthetic_batch(stack_episodes(e for _, e in eval_pairs))
    X, Y = pooled_points(train)
    scaler = Scaler.fit(X, Y)
    return Dataset("synthetic", FixedEpisodes(train), (X, Y), scaler, arch_from_config(cfg, 1),
                   [(set_name(cfg["synth.set"]), [ev])], train)


# --------------------------------------------------------------------------
# entity series


def series_files(cfg: ExperimentConfig) -> list[Path]:
    """CSV files named by ``dataset.path``: one file, a directory of files, or
    ``bundled:NAME`` for a sample shipped with the package."""
    raw = str(cfg["dataset.path"])
    if not raw:
        raise ConfigError("dataset.path is required for series data")
    path = bundled(raw[len("bundled:"):]) if raw.startswith("bundled:") else Path(raw)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise DataError(f"dataset.path not found: {path}")
    files = sorted(path.glob("*.csv"))
    if not files:
        raise DataError(f"{path}: no CSV files")
    return files


def load_series(cfg: ExperimentConfig) -> list[EntitySeries]:
    schema = {"timestamp": cfg["schema.timestamp"], "drivers": cfg["schema.drivers"], "response": cfg["schema.response"]}
    out = [load_entity_csv(f, schema) for f in series_files(cfg)]
    L = cfg["window.length"]
    for s in out:
        if len(s) < L:
            raise DataError(f"entity {s.entity_id}: {len(s)} time steps, shorter than window length {L}")
    return out


def split_entities(series: list[EntitySeries], fraction: float, seed: int):
    """Hold out ``round(fraction * n)`` entities (at least one) for evaluation."""
    n = len(series)
    if n < 2:
        raise DataError("need at least two entities to hold one out")
    k = max(1, min(n - 1, int(round(fraction * n))))
    perm = SeededRng(seed).child(2).permutation(n)
    held = set(perm[:k].tolist())
    return [s for i, s in enumerate(series) if i not in held], [s for i, s in enumerate(series) if i in held]


def budget_episode(s: EntitySeries, budget: int, length: int, stride: int) -> MetaBatch:
    """Few-shot episode for a held-out entity: the first ``budget`` windows
    are the support; query windows start after the support ends."""
    wins = make_windows(s, length, stride)
    if budget < 1 or budget >= len(wins):
        raise DataError(f"entity {s.entity_id}: budget {budget} leaves no query among {len(wins)} windows")
    sup = wins[:budget]
    qry = [w for w in wins[budget:] if w.start >= sup[-1].stop] or wins[budget:]
    a, b = window_arrays(s, sup)
    c, d = window_arrays(s, qry)
    return MetaBatch([s.entity_id], a[None], b[None], c[None], d[None])


def series_dataset(cfg: ExperimentConfig) -> Dataset:
    series = load_series(cfg)
    train, held = split_entities(series, cfg["dataset.test_fraction"], cfg["seed"])
    L, S = cfg["window.length"], cfg["window.stride"]
    source = SeriesEpisodes(train, L, S, cfg["support.fraction"], cfg["support.windows"], cfg["train.query_windows"])
    pooled_x, pooled_y = [], []
    for s, wins in zip(train, source.windows):
        a, b = window_arrays(s, wins)
        pooled_x.append(a)
        pooled_y.append(b)
    X, Y = np.concatenate(pooled_x), np.concatenate(pooled_y)
    scaler = Scaler.fit(X, Y)
    budgets = [int(b) for b in cfg["dataset.budgets"]]
    evals = []
    if budgets:
        for b in budgets:
            evals.append((str(b), [budget_episode(s, b, L, S) for s in held]))
    else:
        eps = []
        for s in held:
            n = len(make_windows(s, L, S))
            eps.append(budget_episode(s, support_count(n, cfg["support.fraction"]), L, S))
        evals.append(("default", eps))
    n_drivers = len(cfg["schema.drivers"])
    return Dataset("series", source, (X, Y), scaler, arch_from_config(cfg, n_drivers), evals)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    kind = cfg["dataset.kind"]
    if kind == "synthetic":
        return synthetic_dataset(cfg)
    if kind == "series":
        return series_dataset(cfg)
    raise ConfigError(f"dataset.kind must be 'synthetic' or 'series', got {kind!r}")


# --------------------------------------------------------------------------
# training and evaluation


def train_tamrl(cfg: ExperimentConfig, data: Dataset, pretrain: bool = True, seeds=None,
                joint_epochs: int | None = None) -> list[ModelState]:
    seeds = seeds if seeds is not None else member_seeds(cfg["seed"], cfg["ensemble.size"])
    out = []
    for s in seeds:
        log.info("training member seed=%d pretrain=%s", s, pretrain)
        out.append(train_member(
            data.arch, data.scaler, s, data.pooled if pretrain else None, data.source,
            pretrain_epochs=cfg["train.pretrain_epochs"],
            joint_epochs=cfg["train.joint_epochs"] if joint_epochs is None else joint_epochs,
            batch_size=cfg["train.batch_size"], pretrain_batch_size=cfg["train.pretrain_batch_size"],
            lr=cfg["train.lr"], config_hash=cfg.model_hash(),
        ))
    return out


def train_fomaml_ensemble(cfg: ExperimentConfig, data: Dataset, seeds=None) -> list[FomamlState]:
    seeds = seeds if seeds is not None else member_seeds(cfg["seed"], cfg["ensemble.size"])
    out = []
    for s in seeds:
        log.info("training FOMAML member seed=%d", s)
        base = build_base(data.arch, SeededRng(s).child(0))
        out.append(train_fomaml(base, data.scaler, data.source, cfg["fomaml.epochs"], cfg["fomaml.meta_batch"],
                                cfg["train.lr"], cfg["fomaml.inner_steps"], cfg["fomaml.inner_lr"],
                                SeededRng(s).child(4), seed=s))
    return out


def adapt_config(cfg: ExperimentConfig, variant: str) -> AdaptConfig:
    steps = cfg["fomaml.inner_steps"] if variant == "fomaml" else cfg["adapt.steps"]
    return AdaptConfig.for_variant(variant, steps, cfg["adapt.lr"])


def evaluate(cfg: ExperimentConfig, data: Dataset, variant: str, members) -> tuple[list[ResultRow], dict[str, float]]:
    """Result rows for every evaluation batch and the mean ensemble query MSE per budget."""
    acfg = adapt_config(cfg, variant)
    seeds = [m.seed for m in members]
    rows, mse = [], {}
    for budget, batches in data.evals:
        sq = []
        for batch in batches:
            preds = predict_variant(acfg, members, batch)
            rows.extend(result_rows(preds, batch, variant, budget, seeds))
            diff = preds.mean(axis=0) - batch.query_y
            sq.append((diff.reshape(len(batch), -1) ** 2).mean(axis=1))
        mse[budget] = float(np.mean(np.concatenate(sq)))
    return rows, mse


# --------------------------------------------------------------------------
# FOMAML checkpoints (TAM-RL checkpoints live in training)


def save_fomaml(path, state: FomamlState, config_hash: str, arch: dict) -> None:
    arrays = {f"p/{k}": v for k, v in to_flat(state.base).items()}
    arrays["scaler/x_mean"] = state.scaler.x_mean
    arrays["scaler/x_std"] = state.scaler.x_std
    meta = {"version": 1, "kind": "fomaml", "config_hash": config_hash, "seed": state.seed, "arch": arch,
            "inner_steps": state.inner_steps, "inner_lr": state.inner_lr, "curve": state.curve,
            "scaler_y": [state.scaler.y_mean, state.scaler.y_std]}
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_fomaml(path, expected_hash: str | None = None) -> FomamlState:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["meta"]))
        arrays = {k: npz[k] for k in npz.files}
    if meta.get("kind") != "fomaml":
        raise DataError(f"{path}: not a FOMAML checkpoint")
    if expected_hash is not None and meta["config_hash"] != expected_hash:
        raise ConfigError(f"{path}: checkpoint was trained under config {meta['config_hash']}, current config is {expected_hash}")
    template = build_base(meta["arch"], SeededRng(0))
    base = from_flat(template, {k[2:]: v for k, v in arrays.items() if k.startswith("p/")})
    scaler = Scaler(arrays["scaler/x_mean"], arrays["scaler/x_std"], *meta["scaler_y"])
    return FomamlState(base, scaler, meta["seed"], meta["inner_steps"], meta["inner_lr"], meta["curve"])
