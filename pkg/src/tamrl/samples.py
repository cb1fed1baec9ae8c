"""Synthetic entity series shaped like flux-tower and river-basin datasets.

Values are made up: smooth seasonal drivers plus noise, and a response whose
dependence on the drivers varies by entity through hidden parameters. They
exist so that ingestion, windowing and the series pipeline can be exercised
without the real datasets.
"""
from __future__ import annotations

import csv
import datetime as dt
from pathlib import Path

import numpy as np

from .numcore import SeededRng

FLUX_DRIVERS = ("precip", "ta", "vpd", "sw_in", "lai")
FLUX_RESPONSE = "gpp"
BASIN_DRIVERS = (
    "total_precipitation_sum",
    "potential_evaporation_sum",
    "temperature_2m_mean",
    "dewpoint_temperature_2m_mean",
    "surface_net_solar_radiation_mean",
    "surface_net_thermal_radiation_mean",
    "surface_pressure_mean",
    "u_component_of_wind_10m_mean",
    "v_component_of_wind_10m_mean",
)
BASIN_RESPONSE = "streamflow"

START = dt.date(2001, 1, 1)


def _season(days: int, phase: float = 0.0) -> np.ndarray:
    return np.sin(2 * np.pi * (np.arange(days) / 365.25) + phase)


def flux_site(days: int, rng: SeededRng) -> dict[str, np.ndarray]:
    s = _season(days, -np.pi / 2)
    ta = 12 + rng.uniform(-6, 6) + 10 * s + rng.normal(days, 2.0)
    sw = np.clip(180 + 110 * s + rng.normal(days, 30.0), 5, None)
    vpd = np.clip(0.6 + 0.05 * np.maximum(ta, 0) + rng.normal(days, 0.2), 0.05, None)
    precip = np.where(rng.uniform(0, 1, days) < 0.3, rng.uniform(0, 1, days) * 15, 0.0)
    lai = np.clip(2.0 + rng.uniform(-1, 2) + 1.5 * s + rng.normal(days, 0.1), 0.1, None)
    # hidden site character: light-use efficiency, thermal optimum, drought sensitivity
    lue, t_opt, k_vpd = rng.uniform(0.01, 0.04), rng.uniform(10, 25), rng.uniform(0.1, 0.6)
    f_t = np.exp(-(((ta - t_opt) / 10.0) ** 2))
    gpp = lue * sw * f_t * np.exp(-k_vpd * vpd) * (1 - np.exp(-0.5 * lai))
    gpp = np.clip(gpp + rng.normal(days, 0.3), 0, None)
    return {"precip": precip, "ta": ta, "vpd": vpd, "sw_in": sw, "lai": lai, "gpp": gpp}


def basin(days: int, rng: SeededRng) -> dict[str, np.ndarray]:
    s = _season(days, np.pi / 2)
    precip = np.where(rng.uniform(0, 1, days) < 0.45, rng.uniform(0, 1, days) * 12, 0.0)
    temp = 9 + 6 * -s + rng.normal(days, 2.0)
    pet = np.clip(1.5 - 1.2 * s + rng.normal(days, 0.3), 0, None)
    cols = {
        "total_precipitation_sum": precip,
        "potential_evaporation_sum": pet,
        "temperature_2m_mean": temp,
        "dewpoint_temperature_2m_mean": temp - np.abs(rng.normal(days, 2.0)) - 1,
        "surface_net_solar_radiation_mean": np.clip(100 - 70 * s + rng.normal(days, 20.0), 0, None),
        "surface_net_thermal_radiation_mean": -50 + rng.normal(days, 10.0),
        "surface_pressure_mean": 100 + rng.normal(days, 0.8),
        "u_component_of_wind_10m_mean": rng.normal(days, 3.0),
        "v_component_of_wind_10m_mean": rng.normal(days, 3.0),
    }
    # hidden basin character: runoff fraction and storage recession
    frac, k = rng.uniform(0.3, 0.8), rng.uniform(0.05, 0.3)
    store, q = 10.0, np.empty(days)
    for t in range(days):
        store = max(store + frac * precip[t] - 0.3 * pet[t], 0.0)
        q[t] = k * store
        store -= q[t]
    cols["streamflow"] = q + np.abs(rng.normal(days, 0.05))
    return cols


def write_series(path, columns: dict[str, np.ndarray], start: dt.date = START) -> None:
    names = list(columns)
    days = len(next(iter(columns.values())))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *names])
        for t in range(days):
            w.writerow([(start + dt.timedelta(days=t)).isoformat(), *(f"{columns[n][t]:.4f}" for n in names)])


def write_collection(directory, kind: str, n_entities: int, days: int, seed: int = 0) -> list[Path]:
    """Write ``n_entities`` CSV files of ``kind`` ``"flux"`` or ``"basin"``."""
    make = {"flux": flux_site, "basin": basin}[kind]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(seed)
    paths = []
    for i in range(n_entities):
        p = directory / f"{kind}-{i + 1:03d}.csv"
        write_series(p, make(days, rng.child(i)))
        paths.append(p)
    return paths


def bundled(name: str) -> Path:
    """Path of a sample shipped inside the package."""
    return Path(__file__).parent / "data" / name


def main(argv=None) -> None:
    import argparse

    p = argparse.ArgumentParser(prog="python3 -m tamrl.samples", description="Write synthetic entity CSVs.")
    p.add_argument("kind", choices=("flux", "basin"))
    p.add_argument("directory", type=Path)
    p.add_argument("--n", type=int, default=8, help="number of entities")
    p.add_argument("--days", type=int, default=1096)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    for path in write_collection(a.directory, a.kind, a.n, a.days, a.seed):
        print(path)


if __name__ == "__main__":
    main()
