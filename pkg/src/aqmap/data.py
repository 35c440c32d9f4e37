"""Dataset files, IDW spreading of sensor readings, z-scoring, window assembly.

A dataset directory holds::

    grid.json     GridSpec
    sensors.csv   node_id,lat,lon
    readings.csv  timestamp,node_id,aqi,temperature_c,humidity_pct,pressure_hpa
    daily.csv     date,node_id,aod_044,aod_055,lst_k,pressure_hpa,humidity_pct,wind_speed_ms,wind_dir_deg
    static.csv    node_id,road_len_km,t_intersections,multileg_intersections,p1..p8,population,ugs_km2
    truth.csv     timestamp,node_id,aqi   (synthetic datasets only)

Empty cells are read as missing. Missing daily values are carried forward
from the previous day at the same node (or filled with the feature mean when
no earlier value exists); missing hourly readings drop that sensor from the
IDW at that hour and from the supervised loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import CoverageError, MalformedCSVError, MissingFileError, ShapeError, ValidationError
from .features import FeatureSet, TimeContext, WindowBatch, time_encoding
from .grid import GridSpec, node_coords, node_distance, pairwise_distances

TIMESTAMP_FMT = "%Y-%m-%dT%H:00"
DATE_FMT = "%Y-%m-%d"

SENSOR_COLUMNS = ["node_id", "lat", "lon"]
READING_COLUMNS = ["timestamp", "node_id", "aqi", "temperature_c", "humidity_pct", "pressure_hpa"]
DAILY_COLUMNS = [
    "date",
    "node_id",
    "aod_044",
    "aod_055",
    "lst_k",
    "pressure_hpa",
    "humidity_pct",
    "wind_speed_ms",
    "wind_dir_deg",
]
STATIC_COLUMNS = [
    "node_id",
    "road_len_km",
    "t_intersections",
    "multileg_intersections",
    *[f"p{i}" for i in range(1, 9)],
    "population",
    "ugs_km2",
]
TRUTH_COLUMNS = ["timestamp", "node_id", "aqi"]

MET_CHANNELS = ["temperature_c", "humidity_pct", "pressure_hpa"]
# wind direction is stored as a sin/cos pair
DAILY_CHANNELS = DAILY_COLUMNS[2:-1] + ["wind_dir_sin", "wind_dir_cos"]
STATIC_CHANNELS = STATIC_COLUMNS[1:]

DEFAULT_IDW_POWER = 2.0


# ---- IDW ----------------------------------------------------------------------


def idw_interpolate(points, query: int, power: float = DEFAULT_IDW_POWER, spec: GridSpec | None = None) -> float:
    """Inverse-distance-weighted value at node ``query``.

    ``points`` is a sequence of (node_id, value). A point at the query node
    returns its value exactly (several co-located points are averaged).
    """
    if not points:
        raise ValidationError("IDW needs at least one point")
    if not power > 0:
        raise ValidationError(f"IDW power must be positive, got {power}")
    if spec is None:
        raise ValidationError("IDW needs the grid specification for distances")
    num = den = 0.0
    exact = []
    for node, value in points:
        d = node_distance(int(node), int(query), spec)
        if d == 0.0:
            exact.append(float(value))
            continue
        w = d ** (-power)
        num += w * value
        den += w
    if exact:
        return sum(exact) / len(exact)
    return num / den


def idw_weights(spec: GridSpec, sources, targets=None, power: float = DEFAULT_IDW_POWER) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized IDW weights (targets x sources) plus a co-location indicator."""
    if not power > 0:
        raise ValidationError(f"IDW power must be positive, got {power}")
    d = pairwise_distances(node_coords(spec, targets), node_coords(spec, sources))
    zero = d == 0.0
    with np.errstate(divide="ignore"):
        w = np.where(zero, 0.0, d ** (-power))
    return w, zero.astype(np.float64)


def idw_field(values: np.ndarray, weights: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Spread point values to targets for many time steps at once.

    ``values`` is (steps, sources) with NaN for missing readings; returns
    (steps, targets). Steps with no valid source give NaN.
    """
    w, zero = weights
    valid = np.isfinite(values).astype(np.float64)
    v = np.where(valid > 0, values, 0.0)
    num, den = v @ w.T, valid @ w.T
    znum, zden = v @ zero.T, valid @ zero.T
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(zden > 0, znum / np.where(zden > 0, zden, 1.0), num / den)
    return out


# ---- z-score ------------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def zscore_fit(samples) -> NormStats:
    """Per-feature mean and population std; features on the last axis.

    A 1-D input is treated as samples of a single feature.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    x = x.reshape(-1, x.shape[-1])
    if x.shape[0] == 0:
        raise ValidationError("zscore_fit needs at least one sample")
    return NormStats(np.nanmean(x, axis=0), np.nanstd(x, axis=0))


def zscore_apply(x, stats: NormStats, axis: int = -1) -> np.ndarray:
    """(x - mean) / std along ``axis``; zero-variance features become 0.

    Missing values (NaN) stay missing.
    """
    x = np.asarray(x, dtype=np.float64)
    shape = [1] * x.ndim
    shape[axis] = -1
    mu = stats.mean.reshape(shape)
    sd = stats.std.reshape(shape)
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (x - mu) / safe, (x - mu) * 0.0)


def zscore_invert(z, stats: NormStats, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shape = [1] * z.ndim
    shape[axis] = -1
    return z * stats.std.reshape(shape) + stats.mean.reshape(shape)


# ---- CSV reading ----------------------------------------------------------------


def _open_csv(path: Path, columns: list[str]):
    if not path.exists():
        raise MissingFileError(f"{path}: no such file")
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        fh.close()
        raise MalformedCSVError(path, 1, "empty file")
    header = [h.strip() for h in header]
    if header != columns:
        fh.close()
        raise MalformedCSVError(path, 1, f"expected header {','.join(columns)}, got {','.join(header)}")
    return fh, reader


def _rows(path: Path, columns: list[str]):
    """Yield (line_number, fields) with the column count checked."""
    fh, reader = _open_csv(path, columns)
    with fh:
        for fields in reader:
            if not fields:
                continue
            if len(fields) != len(columns):
                raise MalformedCSVError(path, reader.line_num, f"expected {len(columns)} fields, got {len(fields)}")
            yield reader.line_num, fields


def _num(path, line, text, column) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise MalformedCSVError(path, line, f"column {column}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise MalformedCSVError(path, line, f"column {column}: non-finite value {text!r}")
    return v


def _node(path, line, text, n) -> int:
    try:
        v = int(text)
    except ValueError:
        raise MalformedCSVError(path, line, f"node_id is not an integer: {text!r}") from None
    if not 1 <= v <= n:
        raise MalformedCSVError(path, line, f"node_id {v} outside 1..{n}")
    return v


def _timestamp(path, line, text) -> datetime:
    try:
        return datetime.strptime(text.strip(), TIMESTAMP_FMT)
    except ValueError:
        raise MalformedCSVError(path, line, f"timestamp must look like YYYY-MM-DDTHH:00, got {text!r}") from None


def _date(path, line, text) -> date:
    try:
        return datetime.strptime(text.strip(), DATE_FMT).date()
    except ValueError:
        raise MalformedCSVError(path, line, f"date must look like YYYY-MM-DD, got {text!r}") from None


# ---- dataset ----------------------------------------------------------------------


@dataclass
class Dataset:
    grid: GridSpec
    sensors: np.ndarray  # (S,) 1-based node ids, file order
    sensor_latlon: np.ndarray  # (S, 2)
    hours: list  # consecutive hourly datetimes
    aqi: np.ndarray  # (H, S), NaN where missing
    met: np.ndarray  # (H, S, 3)
    dates: list  # consecutive dates
    daily: np.ndarray  # (D, N, 8), wind direction already as sin/cos
    static: np.ndarray  # (N, 13)
    truth: np.ndarray | None = None  # (H, N)

    @property
    def n(self) -> int:
        return self.grid.n

    def hour_index(self, ts: datetime) -> int:
        idx = int((ts - self.hours[0]) / timedelta(hours=1))
        if not 0 <= idx < len(self.hours):
            raise CoverageError(f"{ts:%Y-%m-%dT%H:00} outside readings range")
        return idx

    def sensor_columns(self, nodes) -> np.ndarray:
        pos = {int(s): i for i, s in enumerate(self.sensors)}
        try:
            return np.array([pos[int(v)] for v in nodes], dtype=np.intp)
        except KeyError as exc:
            raise ValidationError(f"node {exc.args[0]} has no sensor") from None

    def covered_timestamps(self, t1: int, t3: int) -> list:
        """All hours with complete daily (t1 days) and hourly (t3 hours) history."""
        if not self.hours or not self.dates:
            return []
        first_hour = self.hours[0] + timedelta(hours=t3 - 1)
        first_day = self.dates[0] + timedelta(days=t1 - 1)
        out = []
        for ts in self.hours:
            if ts >= first_hour and first_day <= ts.date() <= self.dates[-1]:
                out.append(ts)
        return out

    def check_coverage(self, ts: datetime, t1: int, t3: int) -> None:
        start_h = ts - timedelta(hours=t3 - 1)
        start_d = ts.date() - timedelta(days=t1 - 1)
        if not self.hours or start_h < self.hours[0] or ts > self.hours[-1]:
            have = f"{self.hours[0]:%Y-%m-%dT%H:00}..{self.hours[-1]:%Y-%m-%dT%H:00}" if self.hours else "nothing"
            raise CoverageError(f"hourly history {start_h:%Y-%m-%dT%H:00}..{ts:%Y-%m-%dT%H:00} not covered (have {have})")
        if not self.dates or start_d < self.dates[0] or ts.date() > self.dates[-1]:
            have = f"{self.dates[0]}..{self.dates[-1]}" if self.dates else "nothing"
            raise CoverageError(f"daily history {start_d}..{ts.date()} not covered (have {have})")


def _wind_to_channels(daily_raw: np.ndarray) -> np.ndarray:
    """(D, N, 7) raw daily columns -> (D, N, 8) with wind direction as sin/cos."""
    rad = np.deg2rad(daily_raw[..., 6])
    return np.concatenate([daily_raw[..., :6], np.sin(rad)[..., None], np.cos(rad)[..., None]], axis=-1)


def _carry_forward(x: np.ndarray) -> np.ndarray:
    """Fill NaN along axis 0 with the last finite value, then with the column mean."""
    x = x.copy()
    for t in range(1, x.shape[0]):
        gap = np.isnan(x[t])
        x[t][gap] = x[t - 1][gap]
    if np.isnan(x).any():
        col_mean = np.nanmean(x.reshape(-1, x.shape[-1]), axis=0)
        col_mean = np.where(np.isfinite(col_mean), col_mean, 0.0)
        x = np.where(np.isnan(x), col_mean, x)
    return x


def _read_sensors(path: Path, grid: GridSpec) -> tuple[list, list]:
    sensors, latlon = [], []
    for line, f in _rows(path, SENSOR_COLUMNS):
        node = _node(path, line, f[0], grid.n)
        if node in sensors:
            raise MalformedCSVError(path, line, f"duplicate sensor node {node}")
        sensors.append(node)
        latlon.append((_num(path, line, f[1], "lat"), _num(path, line, f[2], "lon")))
    if not sensors:
        raise ValidationError(f"{path}: no sensors listed")
    return sensors, latlon


def load_sensors(path, grid: GridSpec) -> list[int]:
    """Sensor node ids from a sensors.csv file."""
    return _read_sensors(Path(path), grid)[0]


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    grid = GridSpec.load(d / "grid.json")
    n = grid.n

    sensors, latlon = _read_sensors(d / "sensors.csv", grid)
    col_of = {s: i for i, s in enumerate(sensors)}

    path = d / "readings.csv"
    recs = []
    for line, f in _rows(path, READING_COLUMNS):
        ts = _timestamp(path, line, f[0])
        node = _node(path, line, f[1], n)
        if node not in col_of:
            raise MalformedCSVError(path, line, f"node {node} is not listed in sensors.csv")
        vals = [_num(path, line, f[k], READING_COLUMNS[k]) for k in range(2, 6)]
        recs.append((ts, col_of[node], vals, line))
    if not recs:
        raise ValidationError(f"{path}: no readings")
    t0 = min(r[0] for r in recs)
    t_end = max(r[0] for r in recs)
    n_hours = int((t_end - t0) / timedelta(hours=1)) + 1
    hours = [t0 + timedelta(hours=i) for i in range(n_hours)]
    aqi = np.full((n_hours, len(sensors)), np.nan)
    met = np.full((n_hours, len(sensors), 3), np.nan)
    for ts, col, vals, line in recs:
        h = int((ts - t0) / timedelta(hours=1))
        if not np.isnan(aqi[h, col]) or not np.all(np.isnan(met[h, col])):
            raise MalformedCSVError(path, line, "duplicate reading for this timestamp and node")
        if vals[0] < 0:
            raise MalformedCSVError(path, line, "aqi must be non-negative")
        aqi[h, col] = vals[0]
        met[h, col] = vals[1:]

    path = d / "daily.csv"
    drecs = []
    for line, f in _rows(path, DAILY_COLUMNS):
        day = _date(path, line, f[0])
        node = _node(path, line, f[1], n)
        drecs.append((day, node, [_num(path, line, f[k], DAILY_COLUMNS[k]) for k in range(2, 9)], line))
    if not drecs:
        raise ValidationError(f"{path}: no daily rows")
    d0 = min(r[0] for r in drecs)
    n_days = (max(r[0] for r in drecs) - d0).days + 1
    dates = [d0 + timedelta(days=i) for i in range(n_days)]
    raw = np.full((n_days, n, 7), np.nan)
    seen = np.zeros((n_days, n), dtype=bool)
    for day, node, vals, line in drecs:
        i = (day - d0).days
        if seen[i, node - 1]:
            raise MalformedCSVError(path, line, "duplicate daily row for this date and node")
        seen[i, node - 1] = True
        raw[i, node - 1] = vals
    daily = _carry_forward(_wind_to_channels(raw))

    path = d / "static.csv"
    static = np.full((n, len(STATIC_CHANNELS)), np.nan)
    seen_s = np.zeros(n, dtype=bool)
    for line, f in _rows(path, STATIC_COLUMNS):
        node = _node(path, line, f[0], n)
        if seen_s[node - 1]:
            raise MalformedCSVError(path, line, f"duplicate static row for node {node}")
        seen_s[node - 1] = True
        static[node - 1] = [_num(path, line, f[k], STATIC_COLUMNS[k]) for k in range(1, len(STATIC_COLUMNS))]
    if not seen_s.all():
        missing = int(np.flatnonzero(~seen_s)[0]) + 1
        raise ValidationError(f"{path}: no row for node {missing} (every node needs static features)")
    col_mean = np.nanmean(static, axis=0)
    static = np.where(np.isnan(static), np.where(np.isfinite(col_mean), col_mean, 0.0), static)

    truth = None
    path = d / "truth.csv"
    if path.exists():
        truth = np.full((n_hours, n), np.nan)
        for line, f in _rows(path, TRUTH_COLUMNS):
            ts = _timestamp(path, line, f[0])
            h = int((ts - t0) / timedelta(hours=1))
            if 0 <= h < n_hours:
                truth[h, _node(path, line, f[1], n) - 1] = _num(path, line, f[2], "aqi")

    return Dataset(
        grid=grid,
        sensors=np.array(sensors, dtype=np.int64),
        sensor_latlon=np.array(latlon, dtype=np.float64),
        hours=hours,
        aqi=aqi,
        met=met,
        dates=dates,
        daily=daily,
        static=static,
        truth=truth,
    )


# ---- feature assembly -------------------------------------------------------------


@dataclass
class FeatureStats:
    x1: NormStats
    x2: NormStats
    x3: NormStats

    def to_dict(self) -> dict:
        return {"x1": self.x1.to_dict(), "x2": self.x2.to_dict(), "x3": self.x3.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(NormStats.from_dict(d["x1"]), NormStats.from_dict(d["x2"]), NormStats.from_dict(d["x3"]))


def hourly_grid(ds: Dataset, hour_slice: slice, sensors=None, power: float = DEFAULT_IDW_POWER) -> np.ndarray:
    """Hourly met readings spread to all nodes by IDW: (H', N, 3).

    Only ``sensors`` (default: all) act as IDW sources. Hours with no
    readings at all are carried forward.
    """
    cols = np.arange(len(ds.sensors)) if sensors is None else ds.sensor_columns(sensors)
    weights = idw_weights(ds.grid, ds.sensors[cols], power=power)
    met = ds.met[hour_slice][:, cols, :]
    out = np.stack([idw_field(met[..., c], weights) for c in range(met.shape[-1])], axis=-1)
    return _carry_forward(out)


def _spans(ds: Dataset, timestamps, t1: int, t3: int):
    for ts in (timestamps[0], timestamps[-1]):
        ds.check_coverage(ts, t1, t3)
    h_lo = ds.hour_index(timestamps[0]) - (t3 - 1)
    h_hi = ds.hour_index(timestamps[-1]) + 1
    d_lo = (timestamps[0].date() - ds.dates[0]).days - (t1 - 1)
    d_hi = (timestamps[-1].date() - ds.dates[0]).days + 1
    return slice(h_lo, h_hi), slice(d_lo, d_hi)


def fit_feature_stats(ds: Dataset, timestamps, t1: int, t3: int, sensors=None, power: float = DEFAULT_IDW_POWER) -> FeatureStats:
    """Normalization statistics over the span the given timestamps draw on."""
    timestamps = sorted(timestamps)
    if not timestamps:
        raise ValidationError("no timestamps to fit normalization on")
    h_span, d_span = _spans(ds, timestamps, t1, t3)
    return FeatureStats(
        x1=zscore_fit(ds.daily[d_span]),
        x2=zscore_fit(ds.static),
        x3=zscore_fit(hourly_grid(ds, h_span, sensors, power)),
    )


def assemble_batch(
    ds: Dataset,
    timestamps,
    t1: int,
    t3: int,
    stats: FeatureStats,
    sensors=None,
    power: float = DEFAULT_IDW_POWER,
) -> WindowBatch:
    """Normalized windows for sorted ``timestamps``, sharing one series per block."""
    timestamps = list(timestamps)
    if not timestamps:
        raise ValidationError("no timestamps requested")
    if any(b <= a for a, b in zip(timestamps, timestamps[1:])):
        raise ValidationError("timestamps must be strictly increasing")
    for ts in timestamps:
        ds.check_coverage(ts, t1, t3)
    h_span, d_span = _spans(ds, timestamps, t1, t3)
    x3 = zscore_apply(hourly_grid(ds, h_span, sensors, power), stats.x3)  # (H', N, 3)
    x1 = zscore_apply(ds.daily[d_span], stats.x1)  # (D', N, 8)
    x2 = zscore_apply(ds.static, stats.x2)  # (N, 13)

    hour_end = np.array([ds.hour_index(ts) - h_span.start for ts in timestamps], dtype=np.intp)
    day_of = np.array([(ts.date() - ds.dates[0]).days - d_span.start for ts in timestamps], dtype=np.intp)
    day_end, ts_day = np.unique(day_of, return_inverse=True)
    return WindowBatch(
        x1_series=np.ascontiguousarray(np.transpose(x1, (2, 0, 1))),
        x2=np.ascontiguousarray(x2.T),
        x3_series=np.ascontiguousarray(np.transpose(x3, (2, 0, 1))),
        day_end=day_end,
        ts_day=ts_day.reshape(-1),
        hour_end=hour_end,
        time_enc=np.stack([time_encoding(TimeContext.from_datetime(ts)) for ts in timestamps]),
    )


def assemble_window(
    ds: Dataset,
    at: datetime,
    t1: int,
    t3: int,
    stats: FeatureStats,
    sensors=None,
    power: float = DEFAULT_IDW_POWER,
) -> tuple[FeatureSet, TimeContext]:
    """The single window ending at ``at`` (oldest -> newest along time)."""
    batch = assemble_batch(ds, [at], t1, t3, stats, sensors, power)
    fs = batch.window(0, t1, t3)
    if not (np.all(np.isfinite(fs.x1)) and np.all(np.isfinite(fs.x2)) and np.all(np.isfinite(fs.x3))):
        raise ShapeError("assembled window contains non-finite values")
    return fs, TimeContext.from_datetime(at)


def label_matrix(ds: Dataset, timestamps, nodes=None) -> np.ndarray:
    """(B, N) AQI labels at sensor nodes (restricted to ``nodes``), NaN elsewhere."""
    rows = [ds.hour_index(ts) for ts in timestamps]
    y = np.full((len(rows), ds.n), np.nan)
    nodes = ds.sensors if nodes is None else np.asarray(sorted(nodes), dtype=np.int64)
    cols = ds.sensor_columns(nodes)
    y[:, nodes - 1] = ds.aqi[rows][:, cols]
    return y
