"""Command-line entry point: ``strata <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import raster
from .baselines import TreeRules, direct_regression_infer, direct_regression_train, handcrafted_infer
from .errors import NumericalError, PlotFormatError
from .evaluation import benchmark_throughput, evaluate, format_csv, format_table
from .gamma import ecm_fit, init_mixture, save_mixture
from .loss import LossConfig
from .plotio import DEFAULT_RADIUS, RAW_FEATURES, Plot, load_dataset, load_plot, normalize_elevation, save_plot, subsample
from .synthgen import random_spec, generate_plot, write_scene
from .train import Bundle, TrainConfig, infer, load_bundle, prepare, save_bundle, train

logger = logging.getLogger("strata")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed() -> int:
    raw = os.environ.get("STRATA_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"STRATA_SEED must be an integer, got {raw!r}") from None


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# ---------------------------------------------------------------------------
# argument definitions


def _common(p: argparse.ArgumentParser, seed: int):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--seed", type=int, default=seed, help="random seed (env STRATA_SEED)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for numerical kernels")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")


def _train_flags(p: argparse.ArgumentParser):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs, help="training epochs")
    p.add_argument("--lr", type=float, default=d.lr, help="ADAM learning rate")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="plots per ADAM step")
    p.add_argument("--K", type=int, default=d.K, help="raster size in pixels per side")
    p.add_argument("--subsample", type=int, default=d.subsample, help="points per plot during training")
    p.add_argument("--alpha", type=float, default=d.loss.alpha, help="entropy loss weight")
    p.add_argument("--lam", type=float, default=d.loss.lam, help="elevation likelihood weight")
    p.add_argument("--val-fraction", type=float, default=d.val_fraction, help="share of plots held out for validation")
    p.add_argument("--encoder", default="32,64", help="encoder widths")
    p.add_argument("--decoder", default="64,32", help="decoder hidden widths")


def _method_flags(p: argparse.ArgumentParser, choices=("ours", "handcrafted", "direct")):
    p.add_argument("--method", choices=choices, default=None, help="defaults to the model bundle's method")
    p.add_argument("--ndvi-threshold", type=float, default=TreeRules().ndvi_threshold, help="handcrafted rule: NDVI cutoff for low vegetation")
    p.add_argument("--low", type=float, default=TreeRules().low, help="lower/medium boundary, m")
    p.add_argument("--high", type=float, default=TreeRules().high, help="medium/higher boundary, m")


def build_parser(seed: int) -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="strata", description="Vegetation stratum occupancy from plot point clouds.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic plots with truth sidecars", formatter_class=fmt)
    _common(p, seed)
    p.add_argument("--plots", type=int, default=200, help="number of plots to generate")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS, help="plot radius, m")

    p = sub.add_parser("fit-gamma", help="fit the elevation Gamma mixture", formatter_class=fmt)
    _common(p, seed)
    p.add_argument("--data", required=True, help="directory of plot files")
    p.add_argument("--out", required=True, help="mixture text file")
    p.add_argument("--max-iter", type=int, default=500, help="ECM iteration cap")
    p.add_argument("--tol", type=float, default=1e-8, help="ECM stop: log-likelihood gain per sample")

    p = sub.add_parser("train", help="train a model bundle", formatter_class=fmt)
    _common(p, seed)
    p.add_argument("--data", required=True, help="directory of plot files")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--method", choices=("ours", "direct"), default="ours", help="model to train")
    _train_flags(p)

    p = sub.add_parser("infer", help="occupancy and rasters for one plot", formatter_class=fmt)
    _common(p, seed)
    p.add_argument("--model", help="bundle directory (not needed for handcrafted)")
    p.add_argument("--plot", required=True, help="plot file")
    p.add_argument("--export-ppm", help="composite raster image path")
    p.add_argument("--export-dir", help="write PGM/PPM/CSV rasters here")
    p.add_argument("--K", type=int, default=32, help="raster size in pixels per side")
    _method_flags(p)

    p = sub.add_parser("eval", help="absolute occupancy error table", formatter_class=fmt)
    _common(p, seed)
    p.add_argument("--model", help="model bundle directory")
    p.add_argument("--data", required=True, help="directory of plot files")
    p.add_argument("--csv", help="also write the report as CSV here")
    p.add_argument("--K", type=int, default=32, help="raster size in pixels per side")
    _method_flags(p)

    p = sub.add_parser("bench", help="inference throughput", formatter_class=fmt)
    _common(p, seed)
    p.add_argument("--model", help="model bundle directory")
    p.add_argument("--data", required=True, help="directory of plot files")
    p.add_argument("--repetitions", type=int, default=3, help="timed passes; the median is reported")
    p.add_argument("--points", type=int, default=4096, help="resample every plot to this many points")
    p.add_argument("--K", type=int, default=32, help="raster size in pixels per side")
    _method_flags(p)

    p = sub.add_parser("export-raster", help="write PGM/PPM/CSV rasters for one plot", formatter_class=fmt)
    _common(p, seed)
    p.add_argument("--model", help="model bundle directory")
    p.add_argument("--plot", required=True, help="plot file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--K", type=int, default=32, help="raster size in pixels per side")
    _method_flags(p)

    p = sub.add_parser("convert", help="canonical plot files from delimited point tables", formatter_class=fmt)
    _common(p, seed)
    p.add_argument("--points", nargs="+", required=True, help="one table per plot; plot id = file stem")
    p.add_argument("--labels", help="CSV with columns plot_id,o_L,o_M,o_H")
    p.add_argument("--columns", default=",".join(RAW_FEATURES), help="input column order, comma separated")
    p.add_argument("--delimiter", default=None, help="field separator (default: whitespace or comma)")
    p.add_argument("--skip-header", action="store_true", help="ignore the first line of each table")
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS, help="plot radius, m")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser(_default_seed())
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in subparser._actions}
        unknown = sorted(set(values) - set(known) - {"help"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, raw in values.items():
            action = known[key]
            try:
                value = action.type(raw) if action.type else raw
            except ValueError:
                raise UsageError(f"bad value for {key}: {raw!r}") from None
            if action.choices and value not in action.choices:
                raise UsageError(f"bad value for {key}: {raw!r}")
            defaults[key] = value
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# subcommands


def _widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad layer widths {text!r}") from None


def _train_config(args) -> TrainConfig:
    from .pointnet import Arch

    return TrainConfig(
        K=args.K,
        batch_size=args.batch_size,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        subsample=args.subsample,
        loss=LossConfig(alpha=args.alpha, lam=args.lam),
        val_fraction=args.val_fraction,
        arch=Arch(encoder=_widths(args.encoder), decoder=_widths(args.decoder)),
    )


def _load_data(directory) -> list[Plot]:
    if not Path(directory).is_dir():
        raise FileNotFoundError(f"data directory not found: {directory}")
    plots = load_dataset(directory)
    if not plots:
        raise PlotFormatError(f"no plot files in {directory}")
    return plots


def _predictor(args):
    """(method, function plot -> InferResult-like occupancy source)."""
    bundle = method = None
    if args.model:
        bundle, method = load_bundle(args.model)
    trained = method
    method = args.method or trained
    if method is None:
        raise UsageError("--model is required unless --method handcrafted")
    if method != "handcrafted" and bundle is None:
        raise UsageError(f"--model is required for method {method}")
    if bundle is not None and method != "handcrafted" and method != trained:
        raise UsageError(f"bundle was trained with method {trained}, not {method}")
    K = args.K
    if method == "ours":
        def run(plot):
            return infer(bundle.params, bundle.mixture, bundle.scaler, plot, K)
    elif method == "handcrafted":
        rules = TreeRules(args.low, args.high, args.ndvi_threshold)

        def run(plot):
            return handcrafted_infer(plot, rules, K)
    else:
        def run(plot):
            return direct_regression_infer(bundle.params, bundle.scaler, plot)
    return method, run


def _occ(result) -> np.ndarray:
    return result.occupancy if hasattr(result, "occupancy") else np.asarray(result)


def cmd_synth(args) -> int:
    out = Path(args.out)
    for i in range(args.plots):
        scene = generate_plot(random_spec(args.seed * 100_003 + i, args.radius), plot_id=f"plot{i:04d}")
        write_scene(scene, out)
    print(f"wrote {args.plots} plots to {out}")
    return EXIT_OK


def cmd_fit_gamma(args) -> int:
    plots = prepare(_load_data(args.data))
    z = np.concatenate([p.z_norm for p in plots])
    mix = ecm_fit(z, init_mixture(z), tol=args.tol, max_iter=args.max_iter)
    save_mixture(mix, args.out)
    print(mix.to_text(), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    plots = _load_data(args.data)
    if args.method == "ours":
        _, report, bundle = train(plots, cfg)
    else:
        _, report, bundle = direct_regression_train(plots, cfg)
    out = save_bundle(bundle, args.out, method=args.method)
    (out / "loss_curve.csv").write_text(report.curve_csv())
    split = [f"train {i}" for i in report.train_ids] + [f"val {i}" for i in report.val_ids]
    (out / "split.txt").write_text("\n".join(split) + "\n")
    if report.final_val_errors:
        lo, me, hi = (100 * v for v in report.final_val_errors)
        print(f"validation absolute error %: lower {lo:.1f} medium {me:.1f} higher {hi:.1f}")
    print(f"model bundle written to {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    method, run = _predictor(args)
    plot = normalize_elevation(load_plot(args.plot))
    result = run(plot)
    occ = _occ(result)
    print(f"{plot.plot_id} o_L={occ[0]:.4f} o_M={occ[1]:.4f} o_H={occ[2]:.4f}")
    rasters = getattr(result, "rasters", None)
    if (args.export_ppm or args.export_dir) and rasters is None:
        raise UsageError(f"method {method} produces no rasters")
    if args.export_ppm:
        Path(args.export_ppm).write_text(raster.to_ppm(rasters))
    if args.export_dir:
        raster.export(rasters, args.export_dir, plot.plot_id)
    return EXIT_OK


def cmd_export_raster(args) -> int:
    args.export_ppm = None
    args.export_dir = args.out
    return cmd_infer(args)


def cmd_eval(args) -> int:
    method, run = _predictor(args)
    plots = prepare(_load_data(args.data))
    report = evaluate(method, lambda p: _occ(run(p)), plots, threads=args.threads)
    print(format_table([report]), end="")
    if args.csv:
        Path(args.csv).write_text(format_csv([report]))
    return EXIT_OK


def cmd_bench(args) -> int:
    method, run = _predictor(args)
    plots = prepare(_load_data(args.data))
    if args.points:
        resized = []
        for i, p in enumerate(plots):
            idx = subsample(len(p), args.points, seed=args.seed + i)
            resized.append(Plot(p.plot_id, p.points[idx], p.radius, p.labels, p.z_norm[idx], p.center))
        plots = resized
    rate, rates = benchmark_throughput(lambda p: run(p), plots, args.repetitions)
    print(f"method {method}: {rate:.1f} plots/s (median of {len(rates)}; threads={args.threads}; "
          f"points/plot={args.points or 'all'}; K={args.K})")
    return EXIT_OK


def cmd_convert(args) -> int:
    columns = [c.strip() for c in args.columns.split(",")]
    missing = set(RAW_FEATURES) - set(columns)
    if missing:
        raise UsageError(f"--columns lacks {sorted(missing)}")
    labels = {}
    if args.labels:
        with open(args.labels, newline="") as fh:
            for row in csv.DictReader(fh):
                labels[row["plot_id"]] = (float(row["o_L"]), float(row["o_M"]), float(row["o_H"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.points:
        path = Path(path)
        delim = args.delimiter
        if delim is None and "," in path.read_text().splitlines()[int(args.skip_header)]:
            delim = ","
        table = np.loadtxt(path, delimiter=delim, skiprows=int(args.skip_header), ndmin=2)
        if table.shape[1] != len(columns):
            raise PlotFormatError(f"{path}: {table.shape[1]} columns, expected {len(columns)}")
        pts = table[:, [columns.index(c) for c in RAW_FEATURES]]
        plot = Plot(path.stem, pts, args.radius, labels.get(path.stem))
        dist = np.hypot(*plot.xy.T)
        if np.any(dist > args.radius + 1e-6):
            raise PlotFormatError(f"{path}: points up to {dist.max():.2f} m from the plot center")
        save_plot(plot, out / f"{path.stem}.txt")
    print(f"converted {len(args.points)} plots to {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "fit-gamma": cmd_fit_gamma,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-raster": cmd_export_raster,
    "convert": cmd_convert,
}


def dispatch(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=max(args.threads, 1)):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"strata {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"strata {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PlotFormatError, OSError, ValueError) as exc:
        print(f"strata {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
