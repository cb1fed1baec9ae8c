"""Entity time series: CSV ingestion, sliding windows, support/query splits,
RMSE metrics and the results CSV."""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .numcore import SeededRng


@dataclass
class EntitySeries:
    entity_id: str
    timestamps: list
    X: np.ndarray  # (T, D_x)
    y: np.ndarray  # (T,)
    driver_names: tuple[str, ...] = ()
    response_name: str = "y"

    def __len__(self) -> int:
        return self.y.shape[0]

    def head(self, n: int) -> "EntitySeries":
        return EntitySeries(self.entity_id, self.timestamps[:n], self.X[:n], self.y[:n], self.driver_names, self.response_name)

    def tail_from(self, n: int) -> "EntitySeries":
        return EntitySeries(self.entity_id, self.timestamps[n:], self.X[n:], self.y[n:], self.driver_names, self.response_name)


def _parse_time(text: str):
    text = text.strip()
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        return dt.datetime.fromisoformat(text)


def load_entity_csv(path, schema: Mapping, entity_id: str | None = None) -> EntitySeries:
    """Read one entity's series.

    ``schema`` names the columns: ``timestamp`` (default ``"timestamp"``),
    ``drivers`` (list) and ``response``. Rows are numbered as file lines, the
    header being row 1. Any empty cell, unparsable number, repeated or
    decreasing timestamp, or schema column absent from the header raises
    :class:`DataError`.
    """
    path = Path(path)
    ts_col = schema.get("timestamp", "timestamp")
    drivers = list(schema.get("drivers") or [])
    response = schema.get("response")
    if not drivers or not response:
        raise DataError("schema must name driver columns and a response column")
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in [ts_col, *drivers, response]:
            if col not in header:
                raise DataError(f"{path}: unknown column {col!r} (header has {', '.join(header)})")
        idx = {h: i for i, h in enumerate(header)}
        stamps, X, y = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno}: expected {len(header)} cells, found {len(row)}")
            cells = {}
            for col in [ts_col, *drivers, response]:
                cell = row[idx[col]].strip()
                if cell == "" or cell.lower() in ("nan", "na", "null"):
                    raise DataError(f"{path}: row {lineno}: missing value in column {col!r}")
                cells[col] = cell
            try:
                t = _parse_time(cells[ts_col])
            except ValueError:
                raise DataError(f"{path}: row {lineno}: bad timestamp {cells[ts_col]!r}") from None
            if stamps and not t > stamps[-1]:
                raise DataError(
                    f"{path}: row {lineno}: timestamp {cells[ts_col]} is not after previous {stamps[-1].isoformat()}"
                )
            try:
                vals = [float(cells[c]) for c in drivers]
                yv = float(cells[response])
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in (*vals, yv)):
                raise DataError(f"{path}: row {lineno}: non-finite value")
            stamps.append(t)
            X.append(vals)
            y.append(yv)
    if not stamps:
        raise DataError(f"{path}: no data rows")
    return EntitySeries(entity_id or path.stem, stamps, np.array(X, dtype=np.float64), np.array(y, dtype=np.float64),
                        tuple(drivers), response)


@dataclass(frozen=True)
class SlidingWindow:
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


def make_windows(series, length: int, stride: int) -> list[SlidingWindow]:
    """Windows starting at 0, S, 2S, ... that fit inside the series."""
    T = series if isinstance(series, int) else len(series)
    if length < 1 or stride < 1:
        raise ShapeError("window length and stride must be at least 1")
    if length > T:
        raise ShapeError(f"window length {length} exceeds series length {T}")
    return [SlidingWindow(s, length) for s in range(0, T - length + 1, stride)]


@dataclass
class WindowEpisode:
    entity_id: str
    support: list[SlidingWindow]
    query: list[SlidingWindow]


def support_count(n_windows: int, support_fraction: float) -> int:
    """``round(fraction * n)`` clamped so both sides of a split are nonempty."""
    return max(1, min(n_windows - 1, int(math.floor(support_fraction * n_windows + 0.5))))


def split_support_query(windows: Sequence[SlidingWindow], support_fraction: float, rng: SeededRng,
                        entity_id: str = "") -> WindowEpisode:
    """Random disjoint split; the support takes ``round(fraction * n)`` windows
    (at least one, leaving at least one for the query)."""
    n = len(windows)
    if n < 2:
        raise ShapeError(f"need at least 2 windows to split, got {n}")
    if not 0.0 < support_fraction < 1.0:
        raise ValueError("support fraction must lie in (0, 1)")
    k = support_count(n, support_fraction)
    perm = rng.permutation(n)
    sup = sorted(perm[:k].tolist())
    qry = sorted(perm[k:].tolist())
    return WindowEpisode(entity_id, [windows[i] for i in sup], [windows[i] for i in qry])


def window_arrays(series: EntitySeries, windows: Sequence[SlidingWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into drivers ``(W, L, D_x)`` and responses ``(W, L)``."""
    X = np.stack([series.X[w.start : w.stop] for w in windows])
    y = np.stack([series.y[w.start : w.stop] for w in windows])
    return X, y


# --------------------------------------------------------------------------
# metrics


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"rmse: shape mismatch {pred.shape} vs {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def ensemble_rmse(predictions: Sequence, target) -> float:
    """RMSE of the member-averaged prediction."""
    preds = [np.asarray(p, dtype=np.float64) for p in predictions]
    if not preds:
        raise ValueError("empty ensemble")
    return rmse(np.mean(np.stack(preds), axis=0), target)


# --------------------------------------------------------------------------
# results CSV

RESULT_COLUMNS = ("entity_id", "budget", "model", "seed", "rmse")


@dataclass(frozen=True)
class ResultRow:
    entity_id: str
    budget: str
    model: str
    seed: str
    rmse: float

    def __post_init__(self):
        if not self.rmse >= 0.0:
            raise ValueError(f"rmse must be non-negative, got {self.rmse}")


def write_results(path, rows: Iterable[ResultRow], header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r.entity_id, r.budget, r.model, r.seed, repr(float(r.rmse))])


def read_results(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
        raise DataError(f"{path}: not a results file (columns {reader.fieldnames})")
    return [ResultRow(r["entity_id"], r["budget"], r["model"], r["seed"], float(r["rmse"])) for r in reader]
