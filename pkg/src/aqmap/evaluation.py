"""Error metrics, leave-2-sensors-out runs, hyperparameter sweeps, IDW baseline."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as D
from .errors import CoverageError, EmptyTrainingSetError, ValidationError
from .model import ModelConfig, ModelParams, forward_batch
from .training import TrainConfig, train

log = logging.getLogger(__name__)

# (lr, lambda) cells of the reference hyperparameter table
TABLE1_GRID = [
    (1e-4, 1e-4),
    (1e-4, 1e-5),
    (1e-4, 1e-6),
    (1e-3, 1e-5),
    (1e-5, 1e-5),
]


# ---- metrics -----------------------------------------------------------------


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape or pred.size == 0:
        raise ValidationError(f"metrics need equal non-empty inputs, got {pred.size} and {truth.size}")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape(pred, truth) -> float:
    """Mean absolute percentage error, in percent. Zero truth values are an error."""
    pred, truth = _pair(pred, truth)
    if np.any(truth == 0):
        raise ValidationError("MAPE undefined: truth contains zeros")
    return float(100.0 * np.mean(np.abs(pred - truth) / np.abs(truth)))


# ---- fitted model -----------------------------------------------------------------


@dataclass
class FittedModel:
    params: ModelParams
    model_cfg: ModelConfig
    feature_stats: D.FeatureStats
    target_stats: D.NormStats
    train_sensors: list
    idw_power: float
    history: list = field(default_factory=list)

    def predict(self, ds: D.Dataset, graph, timestamps) -> np.ndarray:
        """(B, N) AQI predictions for every node at the given timestamps."""
        cfg = self.model_cfg
        batch = D.assemble_batch(ds, timestamps, cfg.t1, cfg.t3, self.feature_stats, self.train_sensors, self.idw_power)
        y = forward_batch(batch, graph, self.params, cfg).data
        return D.zscore_invert(y, self.target_stats)

    def meta(self) -> dict:
        return {
            "feature_stats": self.feature_stats.to_dict(),
            "target_stats": self.target_stats.to_dict(),
            "train_sensors": [int(s) for s in self.train_sensors],
            "idw_power": self.idw_power,
        }


def eval_timestamps(ds: D.Dataset, model_cfg: ModelConfig) -> list:
    ts = ds.covered_timestamps(model_cfg.t1, model_cfg.t3)
    if not ts:
        raise CoverageError(
            f"no timestamp has {model_cfg.t1} days of daily and {model_cfg.t3} hours of hourly history"
        )
    return ts


def fit_model(
    ds: D.Dataset,
    graph,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    idw_power: float = D.DEFAULT_IDW_POWER,
    timestamps=None,
) -> FittedModel:
    """Fit normalization on the training sensors and train the network.

    Held-out sensors contribute neither labels nor IDW source readings.
    """
    if timestamps is None:
        timestamps = eval_timestamps(ds, model_cfg)
    train_sensors = sorted(cfg.train_nodes)
    stats = D.fit_feature_stats(ds, timestamps, model_cfg.t1, model_cfg.t3, train_sensors, idw_power)
    batch = D.assemble_batch(ds, timestamps, model_cfg.t1, model_cfg.t3, stats, train_sensors, idw_power)
    y = D.label_matrix(ds, timestamps, train_sensors)
    labels = y[:, np.array(train_sensors) - 1]
    if not np.isfinite(labels).any():
        raise EmptyTrainingSetError("training sensors have no AQI readings in the covered range")
    target_stats = D.zscore_fit(labels[np.isfinite(labels)])
    y_norm = D.zscore_apply(y, target_stats)
    result = train(batch, graph, y_norm, cfg, model_cfg)
    return FittedModel(result.params, model_cfg, stats, target_stats, train_sensors, idw_power, result.history)


# ---- reports ------------------------------------------------------------------------


@dataclass
class RunReport:
    run_id: int | str
    test_nodes: tuple
    mae: float
    rmse: float
    mape: float
    series: list  # (timestamp, node_id, y_true, y_pred)
    method: str = "gcn"
    history: list = field(default_factory=list)

    def write_series_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "node_id", "y_true", "y_pred"])
            for ts, node, yt, yp in self.series:
                w.writerow([ts.strftime(D.TIMESTAMP_FMT), node, repr(float(yt)), repr(float(yp))])


def _report(run_id, test_nodes, timestamps, truth, pred, method, history=()) -> RunReport:
    """Metrics over the concatenated series of the test nodes (finite truth only)."""
    series = []
    for j, node in enumerate(test_nodes):
        for b, ts in enumerate(timestamps):
            if np.isfinite(truth[b, j]):
                series.append((ts, int(node), float(truth[b, j]), float(pred[b, j])))
    if not series:
        raise ValidationError(f"test nodes {tuple(test_nodes)} have no readings in the evaluation range")
    yt = np.array([s[2] for s in series])
    yp = np.array([s[3] for s in series])
    try:
        mape_v = mape(yp, yt)
    except ValidationError:
        mape_v = float("nan")
    return RunReport(run_id, tuple(int(v) for v in test_nodes), mae(yp, yt), rmse(yp, yt), mape_v, series, method, list(history))


def _check_pair(ds: D.Dataset, test_nodes) -> tuple:
    test_nodes = tuple(int(v) for v in test_nodes)
    if len(ds.sensors) < 3:
        raise EmptyTrainingSetError(f"dataset has {len(ds.sensors)} sensors; leave-2-out needs at least 3")
    if len(set(test_nodes)) != len(test_nodes) or not test_nodes:
        raise ValidationError(f"test nodes must be distinct, got {test_nodes}")
    ds.sensor_columns(test_nodes)
    return test_nodes


def run_once(
    ds: D.Dataset,
    graph,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    idw_power: float = D.DEFAULT_IDW_POWER,
    run_id: int | str = 0,
) -> RunReport:
    """Train without ``cfg.test_nodes`` and score predictions at those nodes."""
    test_nodes = _check_pair(ds, sorted(cfg.test_nodes))
    timestamps = eval_timestamps(ds, model_cfg)
    fitted = fit_model(ds, graph, cfg, model_cfg, idw_power, timestamps)
    pred = fitted.predict(ds, graph, timestamps)[:, np.array(test_nodes) - 1]
    truth = D.label_matrix(ds, timestamps, test_nodes)[:, np.array(test_nodes) - 1]
    return _report(run_id, test_nodes, timestamps, truth, pred, "gcn", fitted.history)


def idw_baseline(
    ds: D.Dataset,
    test_nodes,
    power: float = D.DEFAULT_IDW_POWER,
    timestamps=None,
    run_id: int | str = 0,
    model_cfg: ModelConfig | None = None,
) -> RunReport:
    """Predict held-out sensors by IDW over the other sensors' simultaneous AQI."""
    test_nodes = _check_pair(ds, test_nodes)
    if timestamps is None:
        timestamps = eval_timestamps(ds, model_cfg or ModelConfig())
    train_sensors = [int(s) for s in ds.sensors if int(s) not in test_nodes]
    rows = [ds.hour_index(ts) for ts in timestamps]
    src = ds.aqi[rows][:, ds.sensor_columns(train_sensors)]
    weights = D.idw_weights(ds.grid, train_sensors, test_nodes, power)
    pred = D.idw_field(src, weights)
    truth = ds.aqi[rows][:, ds.sensor_columns(test_nodes)]
    return _report(run_id, test_nodes, timestamps, truth, pred, "idw")


# ---- sweeps ---------------------------------------------------------------------------


def draw_test_pairs(sensors, n_runs: int, seed: int) -> list[tuple[int, int]]:
    """Seeded sequence of held-out sensor pairs (fixed across hyperparameter cells)."""
    if n_runs < 1:
        raise ValidationError("n_runs must be >= 1")
    sensors = np.asarray(sensors, dtype=np.int64)
    if sensors.size < 3:
        raise EmptyTrainingSetError(f"{sensors.size} sensors cannot support leave-2-out runs")
    rng = np.random.default_rng(seed)
    return [tuple(sorted(int(v) for v in rng.choice(sensors, size=2, replace=False))) for _ in range(n_runs)]


@dataclass
class SweepResult:
    rows: list  # dicts with lr, lambda, run_id, test_node_a, test_node_b, mae, rmse, mape
    pairs: list

    COLUMNS = ["lr", "lambda", "run_id", "test_node_a", "test_node_b", "mae", "rmse", "mape"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.COLUMNS])

    def cell_rows(self, lr, lam) -> list:
        return [r for r in self.rows if r["lr"] == lr and r["lambda"] == lam]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _sweep_job(args):
    ds, graph, cfg, model_cfg, idw_power, run_id = args
    return run_once(ds, graph, cfg, model_cfg, idw_power, run_id)


def run_sweep(
    ds: D.Dataset,
    graph,
    cells=TABLE1_GRID,
    n_runs: int = 10,
    seed: int = 0,
    epochs: int = 100,
    model_cfg: ModelConfig | None = None,
    idw_power: float = D.DEFAULT_IDW_POWER,
    jobs: int = 1,
    per_timestamp: bool = False,
) -> SweepResult:
    """Every (lr, lambda) cell runs the same seeded test pairs and init seeds."""
    model_cfg = model_cfg or ModelConfig()
    pairs = draw_test_pairs(ds.sensors, n_runs, seed)
    base = TrainConfig(epochs=epochs, labeled_nodes=frozenset(int(s) for s in ds.sensors), test_nodes=frozenset(pairs[0]))
    jobs_args = []
    for lr, lam in cells:
        for i, pair in enumerate(pairs):
            cfg = replace(base, lr=lr, lam=lam, seed=seed + i, test_nodes=frozenset(pair), per_timestamp=per_timestamp)
            jobs_args.append((ds, graph, cfg, model_cfg, idw_power, i + 1))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_sweep_job, jobs_args))
    else:
        reports = [_sweep_job(a) for a in jobs_args]

    rows = []
    it = iter(reports)
    for lr, lam in cells:
        cell = [next(it) for _ in pairs]
        for rep in cell:
            rows.append(
                {
                    "lr": float(lr),
                    "lambda": float(lam),
                    "run_id": rep.run_id,
                    "test_node_a": rep.test_nodes[0],
                    "test_node_b": rep.test_nodes[1],
                    "mae": rep.mae,
                    "rmse": rep.rmse,
                    "mape": rep.mape,
                }
            )
            log.info("lr=%g lambda=%g run %s %s: MAE %.3f RMSE %.3f MAPE %.2f%%", lr, lam, rep.run_id, rep.test_nodes, rep.mae, rep.rmse, rep.mape)
        rows.append(
            {
                "lr": float(lr),
                "lambda": float(lam),
                "run_id": "avg",
                "test_node_a": None,
                "test_node_b": None,
                "mae": float(np.mean([r.mae for r in cell])),
                "rmse": float(np.mean([r.rmse for r in cell])),
                "mape": float(np.mean([r.mape for r in cell])),
            }
        )
    return SweepResult(rows, pairs)
