"""Command-line entry point: ``aqmap <subcommand> [flags]``.

Settings come from defaults, then an optional ``--config`` file of
``key = value`` lines, then explicit flags. Keys use flag names with dashes or
underscores (``threshold_r = 0.01``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from . import data as D
from .errors import AQMapError, MissingFileError, ParameterError, ValidationError
from .evaluation import (
    TABLE1_GRID,
    FittedModel,
    draw_test_pairs,
    eval_timestamps,
    fit_model,
    idw_baseline,
    run_once,
    run_sweep,
)
from .grid import DEFAULT_SIGMA_KM, DEFAULT_THRESHOLD_R, GridSpec, build_graph
from .model import ModelConfig, load_params, save_params
from .render import export_frames
from .synth import synth_generate
from .training import TrainConfig

log = logging.getLogger("aqmap")


class UsageError(AQMapError):
    error_class = "usage-error"
    exit_code = 2


# ---- argument definitions -----------------------------------------------------------


def _graph_flags(p):
    g = p.add_argument_group("graph")
    g.add_argument("--sigma", type=float, default=DEFAULT_SIGMA_KM, help="Gaussian kernel scale in km (default: %(default)s)")
    g.add_argument("--threshold-r", type=float, default=DEFAULT_THRESHOLD_R, help="adjacency cutoff r (default: %(default)s)")
    g.add_argument(
        "--degree",
        choices=["a+i", "a"],
        default="a+i",
        help="degree matrix used in normalization: of A+I or of A alone (default: %(default)s)",
    )


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--hidden", type=int, default=32, help="hidden width of every branch (default: %(default)s)")
    g.add_argument("--gcn-layers", type=int, default=2, help="GCN layers per branch (default: %(default)s)")
    g.add_argument("--kernel-k", type=int, default=3, help="temporal kernel width, 1 or 3 (default: %(default)s)")
    g.add_argument("--t1", type=int, default=4, help="daily history window in days (default: %(default)s)")
    g.add_argument("--t3", type=int, default=24, help="hourly history window in hours (default: %(default)s)")
    g.add_argument("--idw-power", type=float, default=D.DEFAULT_IDW_POWER, help="IDW distance exponent (default: %(default)s)")


def _train_flags(p, sweep=False):
    g = p.add_argument_group("training")
    if not sweep:
        g.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate (default: %(default)s)")
        g.add_argument("--lambda", dest="lam", type=float, default=1e-6, help="smoothness weight (default: %(default)s)")
    g.add_argument("--epochs", type=int, default=100, help="training epochs (default: %(default)s)")
    g.add_argument("--seed", type=int, default=0, help="initialization / split seed (default: %(default)s)")
    g.add_argument(
        "--per-timestamp",
        action="store_true",
        default=False,
        help="one Adam step per timestamp instead of one full-batch step per epoch (default: off)",
    )


def _nodes(text: str) -> list[int]:
    try:
        out = [int(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated node ids, got {text!r}")
    return out


def _cells(text: str) -> list[tuple[float, float]]:
    out = []
    for item in str(text).split(";"):
        if not item.strip():
            continue
        try:
            lr, lam = item.split(",")
            out.append((float(lr), float(lam)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected 'lr,lambda;lr,lambda...', got {text!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aqmap", description="Urban AQI mapping from sparse sensors with a hybrid CNN/GCN model.")
    parser.add_argument("--config", help="key = value settings file; explicit flags take precedence")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--rows", type=int, default=49, help="grid rows (default: %(default)s)")
    p.add_argument("--cols", type=int, default=49, help="grid columns (default: %(default)s)")
    p.add_argument("--cell-size-km", type=float, default=1.0, help="cell edge in km (default: %(default)s)")
    p.add_argument("--origin-lat", type=float, default=31.75, help="north edge latitude (default: %(default)s)")
    p.add_argument("--origin-lon", type=float, default=74.10, help="west edge longitude (default: %(default)s)")
    p.add_argument("--sensors", type=int, default=30, help="number of sensors (default: %(default)s)")
    p.add_argument("--hours", type=int, default=288, help="hours of readings (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: %(default)s)")

    p = sub.add_parser("build-graph", help="write the adjacency edge list of a grid")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset directory (uses its grid.json)")
    src.add_argument("--grid", help="grid.json file")
    p.add_argument("--out", required=True, help="output CSV (i,j,weight; upper triangle)")
    _graph_flags(p)

    p = sub.add_parser("train", help="train on every sensor except --test-nodes")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for model.ckpt, train_meta.json, loss.csv")
    p.add_argument("--test-nodes", type=_nodes, default=[], help="comma-separated sensor node ids to hold out (default: none)")
    _graph_flags(p)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("predict", help="predict AQI at all nodes for every covered timestamp")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True, help="directory written by 'train'")
    p.add_argument("--out", required=True, help="output CSV (timestamp,node_id,aqi_pred)")

    p = sub.add_parser("evaluate", help="leave-2-out run of the model and the IDW baseline")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for report.csv and series.csv")
    p.add_argument("--test-nodes", type=_nodes, default=None, help="held-out sensor ids (default: first seeded random pair)")
    _graph_flags(p)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("sweep", help="learning-rate / lambda grid of leave-2-out runs")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument(
        "--cells",
        type=_cells,
        default=list(TABLE1_GRID),
        help="'lr,lambda;...' cells (default: %s)" % ";".join(f"{a:g},{b:g}" for a, b in TABLE1_GRID),
    )
    p.add_argument("--n-runs", type=int, default=10, help="random test pairs per cell (default: %(default)s)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: %(default)s)")
    _graph_flags(p)
    _model_flags(p)
    _train_flags(p, sweep=True)

    p = sub.add_parser("render", help="render a predictions CSV to PNG frames")
    p.add_argument("--predictions", required=True, help="CSV from 'predict'")
    p.add_argument("--grid", help="grid.json (default: from --data)")
    p.add_argument("--data", help="dataset directory (grid and, with --outline-sensors, sensor cells)")
    p.add_argument("--out", required=True, help="output frame directory")
    p.add_argument("--scale", type=int, default=8, help="pixels per cell edge (default: %(default)s)")
    p.add_argument("--outline-sensors", action="store_true", help="outline sensor cells (needs --data)")
    return parser


# ---- config file --------------------------------------------------------------------


def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = (value, lineno)
    return out


def _apply_config(sub: argparse.ArgumentParser, cfg: dict, path) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help",)}
    aliases = {"lambda": "lam"}
    defaults = {}
    for key, (value, lineno) in cfg.items():
        dest = aliases.get(key, key)
        action = actions.get(dest)
        if action is None:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r} for this command")
        if isinstance(action, argparse._StoreTrueAction):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{path}:{lineno}: {key} expects true/false")
            defaults[dest] = low in ("true", "1", "yes")
            continue
        try:
            conv = action.type(value) if action.type else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}")
        if action.choices is not None and conv not in action.choices:
            raise UsageError(f"{path}:{lineno}: {key} must be one of {sorted(action.choices)}")
        defaults[dest] = conv
        action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sub, read_config(args.config), args.config)
        args = parser.parse_args(argv)
    return args


# ---- helpers ------------------------------------------------------------------------


def _model_cfg(args) -> ModelConfig:
    return ModelConfig(hidden=args.hidden, gcn_layers=args.gcn_layers, kernel_k=args.kernel_k, t1=args.t1, t3=args.t3)


def _graph(spec: GridSpec, args):
    return build_graph(spec, sigma=args.sigma, r=args.threshold_r, self_loop_degree=(args.degree == "a+i"))


def _check_common(args) -> None:
    if getattr(args, "epochs", 1) < 1:
        raise ParameterError("--epochs must be >= 1")
    if getattr(args, "n_runs", 1) < 1:
        raise ParameterError("--n-runs must be >= 1")
    if getattr(args, "jobs", 1) < 1:
        raise ParameterError("--jobs must be >= 1")
    if getattr(args, "idw_power", 1.0) <= 0:
        raise ParameterError("--idw-power must be > 0")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _ts(ts: datetime) -> str:
    return ts.strftime(D.TIMESTAMP_FMT)


# ---- subcommands ----------------------------------------------------------------------


def cmd_synth(args) -> None:
    spec = GridSpec(args.origin_lat, args.origin_lon, args.rows, args.cols, args.cell_size_km)
    synth_generate(spec, args.sensors, args.hours, args.seed, args.out)


def cmd_build_graph(args) -> None:
    spec = GridSpec.load(Path(args.data) / "grid.json" if args.data else args.grid)
    n_edges = _graph(spec, args).write_edges_csv(args.out)
    log.info("wrote %d edges to %s", n_edges, args.out)


def _train_cfg(args, ds, test_nodes) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        lam=args.lam,
        epochs=args.epochs,
        seed=args.seed,
        labeled_nodes=frozenset(int(s) for s in ds.sensors),
        test_nodes=frozenset(test_nodes),
        per_timestamp=args.per_timestamp,
    )


def cmd_train(args) -> None:
    ds = D.load_dataset(args.data)
    ds.sensor_columns(args.test_nodes)
    model_cfg = _model_cfg(args)
    graph = _graph(ds.grid, args)
    cfg = _train_cfg(args, ds, args.test_nodes)
    fitted = fit_model(ds, graph, cfg, model_cfg, args.idw_power)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.ckpt").write_bytes(save_params(fitted.params, model_cfg))
    meta = fitted.meta()
    meta.update(
        {
            "grid": json.loads(ds.grid.to_json()),
            "sigma": args.sigma,
            "threshold_r": args.threshold_r,
            "degree": args.degree,
            "test_nodes": sorted(int(v) for v in args.test_nodes),
            "lr": args.lr,
            "lambda": args.lam,
            "epochs": args.epochs,
            "seed": args.seed,
            "per_timestamp": args.per_timestamp,
        }
    )
    _write_json(out / "train_meta.json", meta)
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "l_sup", "l_reg", "l_total"])
        for e, sup, reg, tot in fitted.history:
            w.writerow([e, repr(float(sup)), repr(float(reg)), repr(float(tot))])


def load_fitted(model_dir) -> tuple[FittedModel, dict]:
    model_dir = Path(model_dir)
    for name in ("model.ckpt", "train_meta.json"):
        if not (model_dir / name).is_file():
            raise MissingFileError(f"{model_dir / name} not found")
    params, model_cfg = load_params((model_dir / "model.ckpt").read_bytes())
    meta = json.loads((model_dir / "train_meta.json").read_text(encoding="utf-8"))
    fitted = FittedModel(
        params,
        model_cfg,
        D.FeatureStats.from_dict(meta["feature_stats"]),
        D.NormStats.from_dict(meta["target_stats"]),
        meta["train_sensors"],
        float(meta["idw_power"]),
    )
    return fitted, meta


def cmd_predict(args) -> None:
    fitted, meta = load_fitted(args.model)
    ds = D.load_dataset(args.data)
    if GridSpec.from_json(json.dumps(meta["grid"])) != ds.grid:
        raise ValidationError("dataset grid differs from the grid the model was trained on")
    graph = build_graph(ds.grid, sigma=meta["sigma"], r=meta["threshold_r"], self_loop_degree=(meta["degree"] == "a+i"))
    timestamps = eval_timestamps(ds, fitted.model_cfg)
    pred = fitted.predict(ds, graph, timestamps)
    write_predictions_csv(args.out, timestamps, pred)


def write_predictions_csv(path, timestamps, pred: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "node_id", "aqi_pred"])
        for ts, row in zip(timestamps, pred):
            stamp = _ts(ts)
            for node, v in enumerate(row, start=1):
                w.writerow([stamp, node, f"{v:.6f}"])


def read_predictions_csv(path, n: int) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"predictions file not found: {path}")
    values: dict[str, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["timestamp", "node_id", "aqi_pred"]:
            raise D.MalformedCSVError(path, 1, "expected header timestamp,node_id,aqi_pred")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise D.MalformedCSVError(path, lineno, f"expected 3 fields, got {len(row)}")
            ts = row[0]
            D._timestamp(path, lineno, ts)
            node = D._node(path, lineno, row[1], n)
            v = D._num(path, lineno, row[2], "aqi_pred")
            values.setdefault(ts, np.full(n, np.nan))[node - 1] = v
    if not values:
        raise ValidationError(f"{path}: no prediction rows")
    stamps = sorted(values)
    pred = np.stack([values[s] for s in stamps])
    if np.isnan(pred).any():
        raise ValidationError(f"{path}: some timestamps lack predictions for every node")
    return stamps, pred


def _report_rows(reports) -> list[list]:
    rows = []
    for rep in reports:
        rows.append([rep.method, rep.run_id, rep.test_nodes[0], rep.test_nodes[1], repr(rep.mae), repr(rep.rmse), repr(rep.mape)])
    return rows


def cmd_evaluate(args) -> None:
    ds = D.load_dataset(args.data)
    test_nodes = args.test_nodes if args.test_nodes is not None else list(draw_test_pairs(ds.sensors, 1, args.seed)[0])
    if len(test_nodes) != 2:
        raise ParameterError(f"--test-nodes needs exactly two sensor ids, got {test_nodes}")
    model_cfg = _model_cfg(args)
    graph = _graph(ds.grid, args)
    cfg = _train_cfg(args, ds, test_nodes)
    gcn = run_once(ds, graph, cfg, model_cfg, args.idw_power, run_id=1)
    base = idw_baseline(ds, test_nodes, args.idw_power, model_cfg=model_cfg, run_id=1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "run_id", "test_node_a", "test_node_b", "mae", "rmse", "mape"])
        w.writerows(_report_rows([gcn, base]))
    with open(out / "series.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "node_id", "y_true", "y_pred_gcn", "y_pred_idw"])
        for (ts, node, yt, yg), (_, _, _, yi) in zip(gcn.series, base.series):
            w.writerow([_ts(ts), node, repr(float(yt)), repr(float(yg)), repr(float(yi))])
    log.info("gcn MAPE %.3f%%  idw MAPE %.3f%%", gcn.mape, base.mape)


def cmd_sweep(args) -> None:
    ds = D.load_dataset(args.data)
    if not args.cells:
        raise ParameterError("--cells is empty")
    result = run_sweep(
        ds,
        _graph(ds.grid, args),
        cells=args.cells,
        n_runs=args.n_runs,
        seed=args.seed,
        epochs=args.epochs,
        model_cfg=_model_cfg(args),
        idw_power=args.idw_power,
        jobs=args.jobs,
        per_timestamp=args.per_timestamp,
    )
    result.write_csv(args.out)


def cmd_render(args) -> None:
    if args.grid:
        spec = GridSpec.load(args.grid)
    elif args.data:
        spec = GridSpec.load(Path(args.data) / "grid.json")
    else:
        raise UsageError("render needs --grid or --data")
    sensors = None
    if args.outline_sensors:
        if not args.data:
            raise UsageError("--outline-sensors needs --data")
        sensors = D.load_sensors(Path(args.data) / "sensors.csv", spec)
    stamps, pred = read_predictions_csv(args.predictions, spec.n)
    export_frames(pred, stamps, spec, args.out, scale=args.scale, sensors=sensors)


COMMANDS = {
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "render": cmd_render,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except AQMapError as exc:
        print(f"error: {exc.error_class}: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        _check_common(args)
        COMMANDS[args.command](args)
    except AQMapError as exc:
        print(f"error: {exc.error_class}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return MissingFileError.exit_code
    except MemoryError as exc:
        print(f"error: numeric-error: out of memory: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
