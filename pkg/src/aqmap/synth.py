"""Seeded synthetic city datasets in the on-disk format of ``aqmap.data``.

The hidden AQI field is a background level plus 3-6 Gaussian plumes whose
strength follows a diurnal cycle peaking at 18:00 and varies from day to
day. Covariates are generated from the same field so that they carry real
signal: daily AOD tracks the day's mean AQI at each cell, population and
road density concentrate around plume centers, green space thins there.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .data import DAILY_COLUMNS, READING_COLUMNS, SENSOR_COLUMNS, STATIC_COLUMNS, TRUTH_COLUMNS
from .errors import ParameterError
from .grid import GridSpec, node_coords, node_id

DEFAULT_START = datetime(2024, 12, 20)
PEAK_HOUR = 18
PLUME_DIURNAL = 0.35
BACKGROUND_DIURNAL = 0.10
NOISE_SD = 1.5


@dataclass
class Plume:
    center_km: tuple[float, float]  # (y, x) in the grid plane
    width_km: float
    amplitude: float


def diurnal(hour) -> np.ndarray:
    """Cosine cycle in [-1, 1] with its maximum at PEAK_HOUR."""
    return np.cos(2.0 * np.pi * (np.asarray(hour, dtype=np.float64) - PEAK_HOUR) / 24.0)


def _plume_fields(spec: GridSpec, plumes) -> np.ndarray:
    xy = node_coords(spec)
    out = np.empty((len(plumes), spec.n))
    for k, p in enumerate(plumes):
        d2 = np.sum((xy - np.asarray(p.center_km)) ** 2, axis=1)
        out[k] = np.exp(-d2 / (2.0 * p.width_km**2))
    return out


def synth_generate(
    spec: GridSpec,
    n_sensors: int,
    hours: int,
    seed: int,
    out_dir,
    start: datetime = DEFAULT_START,
    min_hours: int = 25,
) -> dict:
    """Write grid.json, sensors.csv, readings.csv, daily.csv, static.csv,
    truth.csv and synth_meta.json into ``out_dir``. Returns the metadata."""
    if not 1 <= n_sensors <= spec.n:
        raise ParameterError(f"n_sensors must be in 1..{spec.n}, got {n_sensors}")
    if hours < min_hours:
        raise ParameterError(f"hours must be >= {min_hours}, got {hours}")
    rng = np.random.default_rng(seed)
    n = spec.n
    height, width = spec.rows * spec.cell_size_km, spec.cols * spec.cell_size_km
    extent = min(height, width)

    n_plumes = int(rng.integers(3, 7))
    plumes = [
        Plume(
            center_km=(float(rng.uniform(0.1, 0.9) * height), float(rng.uniform(0.1, 0.9) * width)),
            width_km=float(rng.uniform(0.06, 0.14) * extent),
            amplitude=float(rng.uniform(60.0, 180.0)),
        )
        for _ in range(n_plumes)
    ]
    shapes = _plume_fields(spec, plumes)  # (P, N)
    background = 50.0 + 20.0 * rng.random()

    n_days = math.ceil(hours / 24)
    day_mult = rng.uniform(0.7, 1.3, size=(n_plumes, n_days))
    t_hours = np.arange(hours)
    hod = t_hours % 24
    day_idx = t_hours // 24
    cyc = diurnal(hod)

    amp = np.array([p.amplitude for p in plumes])
    plume_level = (amp[:, None] * day_mult)[:, day_idx] * (1.0 + PLUME_DIURNAL * cyc)[None, :]  # (P, H)
    clean = background * (1.0 + BACKGROUND_DIURNAL * cyc)[:, None] + plume_level.T @ shapes  # (H, N)
    truth = np.round(np.maximum(clean + rng.normal(0.0, NOISE_SD, size=clean.shape), 5.0), 3)

    sensors = np.sort(rng.choice(n, size=n_sensors, replace=False)) + 1

    # daily covariates, driven by the day's mean field
    daily_mean = np.stack([clean[day_idx == d].mean(axis=0) for d in range(n_days)])  # (D, N)
    day_off = rng.normal(size=(n_days, 5))
    aod055 = 0.005 * daily_mean * np.exp(rng.normal(0.0, 0.08, size=daily_mean.shape))
    aod044 = 1.25 * aod055 * np.exp(rng.normal(0.0, 0.05, size=daily_mean.shape))
    lst = 290.0 - 0.01 * daily_mean + 1.5 * day_off[:, [0]] + rng.normal(0.0, 0.3, size=daily_mean.shape)
    pres = 1016.0 + 2.0 * day_off[:, [1]] + rng.normal(0.0, 0.2, size=daily_mean.shape)
    hum = 55.0 + 8.0 * day_off[:, [2]] + 0.05 * daily_mean + rng.normal(0.0, 1.0, size=daily_mean.shape)
    wind = np.maximum(0.3, 2.5 + 0.8 * day_off[:, [3]] + rng.normal(0.0, 0.2, size=daily_mean.shape))
    wdir = np.mod(rng.uniform(0.0, 360.0, size=(n_days, 1)) + rng.normal(0.0, 10.0, size=daily_mean.shape), 360.0)

    # static covariates
    dens = (amp[:, None] * shapes).sum(axis=0)
    dens = dens / dens.max()
    population = np.round(20000.0 * dens + 2000.0 * np.exp(rng.normal(0.0, 0.5, size=n)))
    road = np.round(np.maximum(0.0, 0.5 + 3.0 * dens + rng.normal(0.0, 0.3, size=n)), 3)
    t_int = rng.poisson(2.0 + 10.0 * dens)
    multi = rng.poisson(1.0 + 5.0 * dens)
    poi_rate = np.array([0.5, 1.0, 1.5, 2.0, 1.0, 1.5, 1.0, 3.0])
    pois = rng.poisson(poi_rate[None, :] * (0.2 + dens)[:, None])
    ugs = np.round(np.clip(0.3 - 0.25 * dens + rng.normal(0.0, 0.05, size=n), 0.0, 1.0), 4)

    # hourly met at sensors
    sensor_xy = node_coords(spec, sensors)
    tcyc = np.sin(2.0 * np.pi * (hod - 9) / 24.0)
    temp = (14.0 + 6.0 * tcyc + 1.5 * day_off[day_idx, 4])[:, None] + 0.02 * sensor_xy[None, :, 0] + rng.normal(0.0, 0.3, size=(hours, n_sensors))
    rh = (60.0 - 15.0 * tcyc)[:, None] + rng.normal(0.0, 1.0, size=(hours, n_sensors))
    hpa = (1016.0 + 2.0 * day_off[day_idx, 1] + 0.5 * cyc)[:, None] + rng.normal(0.0, 0.1, size=(hours, n_sensors))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec.save(out / "grid.json")
    stamps = [(start + timedelta(hours=int(h))).strftime("%Y-%m-%dT%H:00") for h in t_hours]
    days = [(start + timedelta(days=d)).strftime("%Y-%m-%d") for d in range(n_days)]

    lines = [",".join(SENSOR_COLUMNS)]
    for s in sensors:
        lat, lon = spec.cell_center(int(s))
        lines.append(f"{s},{lat:.6f},{lon:.6f}")
    _write(out / "sensors.csv", lines)

    lines = [",".join(READING_COLUMNS)]
    for h in range(hours):
        for j, s in enumerate(sensors):
            lines.append(f"{stamps[h]},{s},{truth[h, s - 1]:.3f},{temp[h, j]:.3f},{rh[h, j]:.3f},{hpa[h, j]:.3f}")
    _write(out / "readings.csv", lines)

    lines = [",".join(DAILY_COLUMNS)]
    for d in range(n_days):
        for i in range(n):
            lines.append(
                f"{days[d]},{i + 1},{aod044[d, i]:.5f},{aod055[d, i]:.5f},{lst[d, i]:.3f},{pres[d, i]:.3f},"
                f"{hum[d, i]:.3f},{wind[d, i]:.3f},{wdir[d, i]:.2f}"
            )
    _write(out / "daily.csv", lines)

    lines = [",".join(STATIC_COLUMNS)]
    for i in range(n):
        poi = ",".join(str(int(v)) for v in pois[i])
        lines.append(f"{i + 1},{road[i]:.3f},{t_int[i]},{multi[i]},{poi},{int(population[i])},{ugs[i]:.4f}")
    _write(out / "static.csv", lines)

    lines = [",".join(TRUTH_COLUMNS)]
    for h in range(hours):
        row = truth[h]
        stamp = stamps[h]
        lines.extend(f"{stamp},{i + 1},{row[i]:.3f}" for i in range(n))
    _write(out / "truth.csv", lines)

    meta = {
        "seed": seed,
        "hours": hours,
        "start": stamps[0],
        "background": background,
        "plumes": [
            {
                "center_km": list(p.center_km),
                "center_node": node_id(
                    min(spec.rows - 1, int(round(p.center_km[0] / spec.cell_size_km))),
                    min(spec.cols - 1, int(round(p.center_km[1] / spec.cell_size_km))),
                    spec,
                ),
                "width_km": p.width_km,
                "amplitude": p.amplitude,
            }
            for p in plumes
        ],
        "sensors": [int(s) for s in sensors],
    }
    (out / "synth_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return meta


def _write(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
