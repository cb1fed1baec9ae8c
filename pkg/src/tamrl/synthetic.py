"""Synthetic multi-modal regression tasks (five function families, three mode sets).

Every task ``i`` of a set draws its parameters and its points from its own
child stream ``rng.child(i)``, so a set is reproducible from the seed and a
single task can be regenerated without touching the others.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError
from .numcore import SeededRng

TWO_PI = 2.0 * math.pi

# parameter -> (low, high); "A_split" marks the two-interval amplitude
FAMILY_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "sine": {"A": (0.1, 5.0), "w": (0.5, 2.0), "b": (0.0, TWO_PI)},
    "linear": {"A": (-3.0, 3.0), "b": (-3.0, 3.0)},
    "quadratic": {"A_split": (0.02, 0.15), "c": (-3.0, 3.0), "b": (-3.0, 3.0)},
    "l1norm": {"A_split": (0.02, 0.15), "c": (-3.0, 3.0), "b": (-3.0, 3.0)},
    "tanh": {"A": (-3.0, 3.0), "c": (-3.0, 3.0), "b": (-3.0, 3.0)},
}
FAMILIES = tuple(FAMILY_RANGES)

MODE_SETS: dict[str, tuple[str, str, str]] = {
    "SET1": ("sine", "linear", "quadratic"),
    "SET2": ("linear", "tanh", "l1norm"),
    "SET3": ("quadratic", "tanh", "l1norm"),
}

X_RANGE = (-5.0, 5.0)
NOISE_STD = 0.3


def set_name(name) -> str:
    key = str(name).upper().replace("SET", "").replace("_", "").strip()
    full = f"SET{key}"
    if full not in MODE_SETS:
        raise ConfigError(f"unknown mode set {name!r}; expected one of {', '.join(MODE_SETS)}")
    return full


@dataclass(frozen=True)
class TaskInstance:
    family: str
    params: dict

    def __call__(self, x):
        return eval_task(self, x)


@dataclass
class RegressionEpisode:
    task_id: str
    family: str
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray


def sample_task(family: str, rng: SeededRng) -> TaskInstance:
    if family not in FAMILY_RANGES:
        raise ConfigError(f"unknown task family {family!r}")
    params = {}
    for name, (lo, hi) in FAMILY_RANGES[family].items():
        if name == "A_split":
            sign = 1.0 if rng.uniform(0.0, 1.0) < 0.5 else -1.0
            params["A"] = sign * rng.uniform(lo, hi)
        else:
            params[name] = rng.uniform(lo, hi)
    return TaskInstance(family, params)


def eval_task(t: TaskInstance, x):
    """Noiseless value of the task's function at ``x`` (scalar or array)."""
    p = t.params
    x = np.asarray(x, dtype=np.float64)
    if t.family == "sine":
        out = p["A"] * np.sin(p["w"] * x + p["b"])
    elif t.family == "linear":
        out = p["A"] * x + p["b"]
    elif t.family == "quadratic":
        out = p["A"] * (x - p["c"]) ** 2 + p["b"]
    elif t.family == "l1norm":
        out = p["A"] * np.abs(x - p["c"]) + p["b"]
    elif t.family == "tanh":
        out = p["A"] * np.tanh(x - p["c"]) + p["b"]
    else:
        raise ConfigError(f"unknown task family {t.family!r}")
    return float(out) if out.ndim == 0 else out


def sample_episode(t: TaskInstance, k_s: int, k_q: int, rng: SeededRng, noise_std: float = NOISE_STD,
                   task_id: str = "", x_range: tuple[float, float] = X_RANGE) -> RegressionEpisode:
    """Independent support and query draws, both with additive Gaussian noise."""
    if k_s < 1 or k_q < 1:
        raise ConfigError("support and query sizes must be at least 1")
    xs = rng.uniform(*x_range, k_s)
    xq = rng.uniform(*x_range, k_q)
    ys = eval_task(t, xs) + rng.normal(k_s, scale=noise_std)
    yq = eval_task(t, xq) + rng.normal(k_q, scale=noise_std)
    return RegressionEpisode(task_id, t.family, xs, ys, xq, yq)


def build_mode_set(name, tasks_per_mode: int, rng: SeededRng, k_s: int = 5, k_q: int = 5,
                   noise_std: float = NOISE_STD, id_prefix: str = "task"):
    """Round-robin over the set's three families: task ``i`` has family ``i % 3``."""
    families = MODE_SETS[set_name(name)]
    if tasks_per_mode < 1:
        raise ConfigError("tasks_per_mode must be at least 1")
    out = []
    for i in range(tasks_per_mode * len(families)):
        sub = rng.child(i)
        task = sample_task(families[i % len(families)], sub)
        ep = sample_episode(task, k_s, k_q, sub, noise_std, task_id=f"{id_prefix}-{i:06d}")
        out.append((task, ep))
    return out


# --------------------------------------------------------------------------
# arrays and CSV


@dataclass
class EpisodeArrays:
    """Episodes stacked along axis 0 (all with the same support/query sizes)."""

    task_ids: list[str]
    families: list[str]
    support_x: np.ndarray  # (N, k_s)
    support_y: np.ndarray
    query_x: np.ndarray  # (N, k_q)
    query_y: np.ndarray

    def __len__(self) -> int:
        return len(self.task_ids)

    def subset(self, idx) -> "EpisodeArrays":
        idx = np.asarray(idx)
        return EpisodeArrays(
            [self.task_ids[i] for i in idx],
            [self.families[i] for i in idx],
            self.support_x[idx],
            self.support_y[idx],
            self.query_x[idx],
            self.query_y[idx],
        )


def stack_episodes(episodes: Iterable[RegressionEpisode]) -> EpisodeArrays:
    eps = list(episodes)
    if not eps:
        raise DataError("no episodes")
    return EpisodeArrays(
        [e.task_id for e in eps],
        [e.family for e in eps],
        np.stack([e.support_x for e in eps]),
        np.stack([e.support_y for e in eps]),
        np.stack([e.query_x for e in eps]),
        np.stack([e.query_y for e in eps]),
    )


PARAM_COLUMNS = ("A", "w", "b", "c")


def write_task_manifest(path, tasks_and_episodes, header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "family", *PARAM_COLUMNS])
        for task, ep in tasks_and_episodes:
            w.writerow([ep.task_id, task.family, *(repr(float(task.params[k])) if k in task.params else "" for k in PARAM_COLUMNS)])


def write_episodes(path, episodes: Iterable[RegressionEpisode], header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "family", "split", "x", "y"])
        for ep in episodes:
            for split, xs, ys in (("support", ep.support_x, ep.support_y), ("query", ep.query_x, ep.query_y)):
                for x, y in zip(xs, ys):
                    w.writerow([ep.task_id, ep.family, split, repr(float(x)), repr(float(y))])


def _data_lines(fh):
    for line in fh:
        if not line.startswith("#"):
            yield line


def read_episodes(path) -> EpisodeArrays:
    """Inverse of :func:`write_episodes` (comment lines starting with ``#`` are skipped)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"episode file not found: {path}")
    order: list[str] = []
    rows: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(_data_lines(fh))
        for r in reader:
            tid = r["task_id"]
            if tid not in rows:
                order.append(tid)
                rows[tid] = {"family": r["family"], "support": ([], []), "query": ([], [])}
            xs, ys = rows[tid][r["split"]]
            xs.append(float(r["x"]))
            ys.append(float(r["y"]))
    eps = [
        RegressionEpisode(tid, rows[tid]["family"], np.array(rows[tid]["support"][0]), np.array(rows[tid]["support"][1]),
                          np.array(rows[tid]["query"][0]), np.array(rows[tid]["query"][1]))
        for tid in order
    ]
    return stack_episodes(eps)
