"""Command-line entry point: ``stjgcn <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint, gradcheck
from .config import FIELDS, ConfigError, RunConfig, parse_config
from .data import generate_synthetic, load_distances, load_traffic, save_distances, save_traffic
from .graphs import PredefinedSTJG, build_predefined
from .model import STJGCN, ModelConfig, count_parameters
from .training import (
    SplitSpec, TrainConfig, ZScoreStats, evaluate, history_csv, make_windows, predict,
    split_windows, train, window_starts,
)

PATH_KEYS = ("data", "distances", "out")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- output -----------------------------------------------------------------------
def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def emit(rows: list[dict], fmt: str, out=None) -> None:
    """Write rows as an aligned table, CSV, or one JSON object per line."""
    out = out or sys.stdout
    if not rows:
        return
    cols = list(rows[0])
    if fmt == "json":
        for r in rows:
            out.write(json.dumps(r) + "\n")
    elif fmt == "csv":
        w = csv.writer(out, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    else:
        cells = [[_fmt(r[c]) for c in cols] for r in rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        out.write("  ".join(c.rjust(w) for c, w in zip(cols, widths)) + "\n")
        for row in cells:
            out.write("  ".join(v.rjust(w) for v, w in zip(row, widths)) + "\n")


# -- parser -----------------------------------------------------------------------
def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False, allow_abbrev=False)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    for name, f in FIELDS.items():
        if name == "strict":
            p.add_argument("--strict", action="store_const", const=True, default=None,
                           help="single-threaded bit-exact mode")
        elif f.metadata["choices"]:
            p.add_argument(f"--{name}", choices=f.metadata["choices"], default=None)
        else:
            p.add_argument(f"--{name}", default=None, help=f.metadata["help"] or None)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="stjgcn", description="Spatio-temporal joint graph forecaster", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-graph", parents=[common], help="dump the pre-defined adjacency per time gap",
                       allow_abbrev=False)
    p.add_argument("--sparse", action="store_true", help="write k,from,to,weight triplets instead of dense CSVs")

    sub.add_parser("train", parents=[common], help="train and write model.ckpt + history.csv", allow_abbrev=False)

    for name, text in (("evaluate", "metrics on one split"), ("predict", "forecast from a window of --data")):
        p = sub.add_parser(name, parents=[common], help=text, allow_abbrev=False)
        p.add_argument("--checkpoint", required=True)
    sub.choices["evaluate"].add_argument("--split", choices=("train", "val", "test"), default="test")
    sub.choices["evaluate"].add_argument("--dump-windows", help="CSV file receiving one MAE per window")
    sub.choices["predict"].add_argument(
        "--origin", type=int, default=None,
        help="index of the first forecast step (default: right after the last reading)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check", allow_abbrev=False)
    p.add_argument("--nodes", type=int, default=4)

    p = sub.add_parser("params", parents=[common], help="parameter counts and cost estimates", allow_abbrev=False)
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--interval", type=int, default=5, help="minutes between readings")
    p.add_argument("--edges", type=int, default=None, help="edge count of the graph, self loops included")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset and road graph", allow_abbrev=False)
    p.add_argument("--nodes", type=int, default=10)
    p.add_argument("--steps", type=int, default=2016)
    p.add_argument("--interval", type=int, default=5)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--csv", action="store_true", help="write data.csv instead of data.stts")
    return parser


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in FIELDS}
    return parse_config(args.config, overrides)


def _need(cfg: RunConfig, *keys) -> None:
    for key in keys:
        if not getattr(cfg, key):
            raise UsageError(f"--{key} is required for this command")


# -- commands ---------------------------------------------------------------------
def cmd_build_graph(cfg: RunConfig, args) -> int:
    _need(cfg, "distances")
    graph = load_distances(cfg.distances)
    stjg = build_predefined(graph, cfg.K, cfg.delta_pdf, cfg.sigma or None)
    N = graph.num_nodes
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.sparse:
            with open(out / "adjacency.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["k", "from", "to", "weight"])
                for k, i, j in zip(*np.nonzero(stjg.raw)):
                    w.writerow([k, i, j, repr(float(stjg.raw[k, i, j]))])
        else:
            for k in range(cfg.K):
                np.savetxt(out / f"adjacency_k{k}.csv", stjg.raw[k], delimiter=",", fmt="%.17g")
    rows = [
        {"k": k, "edges": e, "sparsity": 1.0 - e / (N * N)}
        for k, e in enumerate(stjg.edge_counts())
    ]
    emit(rows, args.format)
    return 0


def _load_training_inputs(cfg: RunConfig):
    _need(cfg, "data", "distances")
    ds = load_traffic(cfg.data)
    graph = load_distances(cfg.distances, ds.num_nodes)
    return ds, graph


def _meta(model: STJGCN, cfg: RunConfig, stats: ZScoreStats, interval: int) -> dict:
    run = {k: v for k, v in cfg.to_dict().items() if k not in PATH_KEYS}
    return {**model.meta(), "run": run, "zscore": stats.to_dict(), "interval": interval}


def cmd_train(cfg: RunConfig, args) -> int:
    _need(cfg, "out")
    ds, graph = _load_training_inputs(cfg)
    if not 0 <= cfg.target_channel < ds.num_channels:
        raise ConfigError(f"target_channel {cfg.target_channel} outside [0, {ds.num_channels})")
    mcfg = ModelConfig(num_nodes=ds.num_nodes, in_channels=ds.num_channels, P=cfg.P, Q=cfg.Q, d=cfg.d,
                       K=cfg.K, delta_adt=cfg.delta_adt, steps_per_day=ds.calendar.steps_per_day)
    stjg = build_predefined(graph, mcfg.layer_config().max_time_gap + 1, cfg.delta_pdf, cfg.sigma or None)
    splits = split_windows(ds, cfg.P, cfg.Q, SplitSpec(cfg.train_frac, cfg.val_frac, cfg.test_frac),
                           cfg.target_channel)
    model = STJGCN(mcfg, stjg, seed=cfg.seed)
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, beta=cfg.beta, seed=cfg.seed,
                       clip_norm=cfg.clip_norm, target_channel=cfg.target_channel)

    def progress(rec):
        print(f"epoch {rec.epoch}: train {rec.train_loss:.4f}  val {rec.val_loss:.4f}  mae {rec.val_mae:.4f}",
              file=sys.stderr)

    result = train(model, splits, tcfg, progress=progress)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "model.ckpt", model.state_arrays(), _meta(model, cfg, splits.stats, ds.interval))
    (out / "history.csv").write_text(history_csv(result.history))
    if result.history:
        best = result.history[result.best_epoch - 1]
        emit([{"best_epoch": best.epoch, "val_loss": best.val_loss, "val_mae": best.val_mae,
               "val_rmse": best.val_rmse, "val_mape": best.val_mape}], args.format)
    else:
        print("no epochs run; checkpoint holds the initial parameters", file=sys.stderr)
    return 0


def _load_model(path, ds):
    arrays, meta = checkpoint.load(path)
    model = STJGCN.from_arrays(arrays, meta)
    mc = model.config
    if (ds.num_nodes, ds.num_channels) != (mc.num_nodes, mc.in_channels):
        raise ag.ShapeError(
            f"dataset has (nodes, channels) = {(ds.num_nodes, ds.num_channels)}, "
            f"checkpoint expects {(mc.num_nodes, mc.in_channels)}"
        )
    if ds.calendar.steps_per_day != mc.steps_per_day:
        raise ValueError(f"dataset has {ds.calendar.steps_per_day} steps per day, "
                         f"checkpoint expects {mc.steps_per_day}")
    return model, meta


def cmd_evaluate(cfg: RunConfig, args) -> int:
    _need(cfg, "data")
    ds = load_traffic(cfg.data)
    model, meta = _load_model(args.checkpoint, ds)
    run = meta["run"]
    P, Q, ch = model.config.P, model.config.Q, run["target_channel"]
    stats = ZScoreStats.from_dict(meta["zscore"])
    spec = SplitSpec(run["train_frac"], run["val_frac"], run["test_frac"])
    starts = dict(zip(("train", "val", "test"), window_starts(ds.num_steps, P, Q, spec)))[args.split]
    windows = make_windows(ds, starts, P, Q, stats, ch)
    pred = predict(model, windows, stats, ch)
    rows = [dict(zip(("horizon", "mae", "rmse", "mape"), ("all", *evaluate(pred, windows.y))))]
    for q in range(Q):
        rows.append(dict(zip(("horizon", "mae", "rmse", "mape"), (q + 1, *evaluate(pred[:, q], windows.y[:, q])))))
    emit(rows, args.format)
    if args.dump_windows:
        per_window = np.abs(pred - windows.y).mean(axis=(1, 2))
        with open(args.dump_windows, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["start", "origin_time", "mae"])
            for s, m in zip(windows.start, per_window):
                w.writerow([int(s), ds.calendar.timestamp(s + P - 1).isoformat(), repr(float(m))])
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    _need(cfg, "data")
    ds = load_traffic(cfg.data)
    model, meta = _load_model(args.checkpoint, ds)
    P, Q, ch = model.config.P, model.config.Q, meta["run"]["target_channel"]
    origin = ds.num_steps if args.origin is None else args.origin
    if not P <= origin <= ds.num_steps:
        raise UsageError(f"--origin must lie in [{P}, {ds.num_steps}] so that {P} readings precede it")
    stats = ZScoreStats.from_dict(meta["zscore"])
    windows = make_windows(ds, np.array([origin - P]), P, 0, stats, ch)
    pred = predict(model, windows, stats, ch)[0]
    cal = ds.calendar
    nodes = ds.node_ids or list(range(ds.num_nodes))
    origin_time = cal.timestamp(origin - 1).isoformat()
    rows = [
        {"origin_time": origin_time, "horizon": q + 1, "time": cal.timestamp(origin + q).isoformat(),
         "node": nodes[n], "value": float(pred[q, n])}
        for q in range(Q) for n in range(ds.num_nodes)
    ]
    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            emit(rows, "csv" if args.format == "table" else args.format, fh)
    else:
        emit(rows, args.format)
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    # tiny defaults unless the user overrides them explicitly
    P = cfg.P if args.P is not None else 8
    d = cfg.d if args.d is not None else 8
    K = cfg.K if args.K is not None else 2
    if args.nodes > 5 or d > 8 or P > 8:
        raise UsageError("gradcheck needs a tiny model: --nodes <= 5, --d <= 8, --P <= 8")
    reports, threshold = gradcheck.run(args.nodes, P, d, K, precision=cfg.precision, seed=cfg.seed)
    rows = [{"group": r.group, "max_rel_error": float(r.max_rel_error), "checked": r.checked,
             "threshold": threshold, "status": "PASS" if r.passed(threshold) else "FAIL"} for r in reports]
    emit(rows, args.format)
    failed = [r.group for r in reports if not r.passed(threshold)]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_params(cfg: RunConfig, args) -> int:
    mcfg = ModelConfig(num_nodes=args.nodes, in_channels=args.channels, P=cfg.P, Q=cfg.Q, d=cfg.d, K=cfg.K,
                       delta_adt=cfg.delta_adt, steps_per_day=24 * 60 // args.interval)
    kp = mcfg.layer_config().max_time_gap + 1
    eye = np.broadcast_to(np.eye(args.nodes), (kp, args.nodes, args.nodes)).copy()
    model = STJGCN(mcfg, PredefinedSTJG(raw=eye, forward=eye, backward=eye, delta=cfg.delta_pdf, sigma=1.0))
    edges = args.edges
    if edges is None and cfg.distances:
        graph = load_distances(cfg.distances, args.nodes)
        edges = build_predefined(graph, 1, cfg.delta_pdf, cfg.sigma or None).edge_counts()[0]
    report = count_parameters(model, edges)
    rows = [{"item": f"params.{g}", "value": n} for g, n in report["groups"].items()]
    rows.append({"item": "params.total", "value": report["total"]})
    rows += [{"item": f"cost.{k}", "value": v} for k, v in report["costs"].items()]
    rows += [{"item": "edges", "value": report["edges"]}, {"item": "layers", "value": report["layers"]}]
    emit(rows, args.format)
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    _need(cfg, "out")
    ds, graph = generate_synthetic(args.nodes, args.steps, args.interval, cfg.seed, args.noise)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / ("data.csv" if args.csv else "data.stts")
    save_traffic(ds, data_path)
    save_distances(graph, out / "distances.csv")
    emit([{"data": str(data_path), "distances": str(out / "distances.csv"), "steps": ds.num_steps,
           "nodes": ds.num_nodes, "edges": len(graph.edges)}], args.format)
    return 0


COMMANDS = {
    "build-graph": cmd_build_graph, "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
    "gradcheck": cmd_gradcheck, "params": cmd_params, "synth": cmd_synth,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _run_config(args)
    except (UsageError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    strict = ag.strict() if cfg.strict else contextlib.nullcontext()
    try:
        with strict, ag.precision(cfg.precision):
            return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, FloatingPointError, OSError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
