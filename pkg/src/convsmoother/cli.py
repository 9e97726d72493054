"""Command-line entry point: ``convsmoother {simulate,train,smooth,benchmark,filter-design}``.

Exit codes: 0 on success, 1 on runtime or numerical failure, 2 on usage or
configuration errors. Settings resolve as built-in defaults < ``--config``
file < command-line flags; the resolved settings are printed before work starts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import evaluation as ev
from . import simulators as sim
from . import smoother as sm
from .baselines import design_butterworth_bandpass
from .errors import ConfigurationError, ConvSmootherError, FormatError, InvalidArgumentError, TrainingDivergedError

log = logging.getLogger("convsmoother")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SIMULATE_NAMES = ("gp", "gp-identity", "oscillator-gaussian", "oscillator-conditional", "alpha")


class UsageError(Exception):
    """Bad invocation detected after argument parsing."""


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return ev.parse_config_text(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror or exc}") from exc


def _echo(title, resolved):
    print(f"# {title}: {json.dumps(resolved, sort_keys=True)}", flush=True)


def _add_common(p, seed=True):
    p.add_argument("--config", metavar="FILE", help="key = value settings file (must declare config_version = 1)")
    if seed:
        p.add_argument("--seed", type=int, help="master seed; every random stream derives from it")
    p.add_argument("--threads", type=int, default=None, help="worker cap; results do not depend on it")


def _add_scale(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--paper-scale", dest="paper_scale", action="store_true", default=None,
                   help="full published sizes (long-running)")
    g.add_argument("--desk-scale", dest="paper_scale", action="store_false",
                   help="reduced sizes for CPU runs (default)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="convsmoother", description="Simulate, train, smooth and benchmark with the ConvNet smoother.",
        epilog="Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or configuration error.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", help="generate a dataset of (latent, observed) pairs")
    p.add_argument("generator", help=f"generator name ({' | '.join(SIMULATE_NAMES)}) or a generator config file")
    p.add_argument("--count", type=int, help="number of trials (default 100)")
    p.add_argument("--out", help="dataset container path (default <generator>.npz)")
    p.add_argument("--csv", metavar="PATH", help="also export the dataset as CSV")
    p.add_argument("--n", type=int, help="samples per trial (default 200)")
    p.add_argument("--dt", type=float, help="seconds per sample (default 0.01)")
    p.add_argument("--option", action="append", default=[], metavar="KEY=VALUE",
                   help="generator option such as obs_noise_std=20 or dyn_noise_std=10 (repeatable)")
    _add_common(p)

    p = sub.add_parser("train", help="train the ConvNet smoother on a dataset")
    p.add_argument("dataset", help="dataset container written by 'simulate'")
    p.add_argument("--out", default="model.npz", help="model container path (default model.npz)")
    p.add_argument("--loss-csv", help="loss history CSV (default <out>.loss.csv)")
    p.add_argument("--epochs", type=int, help="training epochs (0 returns the initialization)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epoch-unit", choices=("batch_step", "full_pass"))
    p.add_argument("--learning-rate", type=float, dest="alpha", help="Adam step size")
    p.add_argument("--channels", type=int, help="conv channels (default 60)")
    p.add_argument("--microbatch", type=int, help="gradient chunk size (fixed-order reduction)")
    p.add_argument("--checkpoint", dest="checkpoint_path", help="checkpoint file path")
    p.add_argument("--checkpoint-interval", type=int, help="epochs between checkpoints")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")
    _add_scale(p)
    _add_common(p)

    p = sub.add_parser("smooth", help="apply a trained model to observations in a CSV file")
    p.add_argument("model", help="model container written by 'train' or 'benchmark'")
    p.add_argument("input", help="CSV with an 'observed' column (optional 't' and 'trial' columns)")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.add_argument("--trial", type=int, help="select rows of this trial when the input has a 'trial' column")

    p = sub.add_parser("benchmark", help="run one experiment end to end and write its report")
    p.add_argument("experiment", help=" | ".join(ev.EXPERIMENTS))
    p.add_argument("--out", help="report directory (default reports/<experiment>)")
    p.add_argument("--model", dest="model_path", help="use this trained model instead of training")
    p.add_argument("--no-train", dest="train_enabled", action="store_false", default=None,
                   help="fail instead of training when no model is given")
    p.add_argument("--train-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--dyn-noise-std", type=float, help="oscillator dynamics noise (default 10)")
    p.add_argument("--examples", type=int, dest="example_trials", help="example trials plotted as SVG")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any experiment key, e.g. train.alpha=0.0005 (repeatable)")
    _add_scale(p)
    _add_common(p)

    p = sub.add_parser("filter-design", help="print Butterworth band-pass coefficients as text")
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--low", type=float, default=8.0, help="lower edge in Hz")
    p.add_argument("--high", type=float, default=12.0, help="upper edge in Hz")
    p.add_argument("--fs", type=float, default=100.0, help="sample rate in Hz")
    p.add_argument("--out", help="write to this file instead of stdout")
    return parser


def _key_values(items, what):
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"{what} expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------- simulate

def cmd_simulate(args):
    if args.generator in SIMULATE_NAMES:
        file_values = _read_config(args.config)
        file_values["name"] = args.generator  # the positional argument outranks the file
    elif os.path.isfile(args.generator):
        if args.config:
            raise UsageError("give either a generator file or --config, not both")
        file_values = _read_config(args.generator)
        if "name" not in file_values:
            raise UsageError(f"{args.generator}: generator file must set 'name'")
    else:
        raise UsageError(f"unknown generator {args.generator!r}; choose from {', '.join(SIMULATE_NAMES)} "
                         "or pass a generator config file")
    settings = {"name": file_values.pop("name"), "n": 200, "dt": 0.01, "count": 100, "seed": 0, "options": {}}
    for key, value in file_values.items():
        if key.startswith("option."):
            settings["options"][key[len("option."):]] = ev._coerce(value, 0.0)
        elif key in ("n", "count", "seed"):
            settings[key] = int(value)
        elif key == "dt":
            settings[key] = float(value)
        else:
            raise ConfigurationError(f"unknown generator key {key!r}")
    for key in ("n", "dt", "count", "seed"):
        if getattr(args, key) is not None:
            settings[key] = getattr(args, key)
    for key, value in _key_values(args.option, "--option").items():
        settings["options"][key] = ev._coerce(value, 0.0)
    settings["out"] = args.out or f"{settings['name']}.npz"
    _echo("resolved simulate config", settings)

    spec = sim.GeneratorSpec(settings["name"], settings["n"], settings["dt"], settings["options"])
    ds = sim.build_dataset(spec, settings["count"], settings["seed"], threads=args.threads or 1)
    sim.save_dataset(settings["out"], ds)
    if args.csv:
        sim.export_csv(args.csv, ds)
    print(json.dumps({"wrote": settings["out"], "count": ds.count, "generator": spec.to_dict(),
                      "master_seed": ds.master_seed, "content_hash": ds.content_hash()}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- train

TRAIN_FLAGS = ("epochs", "batch_size", "epoch_unit", "alpha", "channels", "microbatch", "checkpoint_path",
               "checkpoint_interval", "seed", "threads")


def resolve_train_config(args):
    values = _read_config(args.config)
    paper = args.paper_scale
    if paper is None:
        paper = ev._coerce(values.pop("paper_scale", "false"), False)
    else:
        values.pop("paper_scale", None)
    base = ev.paper_train_config() if paper else sm.TrainConfig()
    defaults = asdict(base)
    updates = {}
    for key, value in values.items():
        key = key[len("train."):] if key.startswith("train.") else key
        if key not in defaults:
            raise ConfigurationError(f"unknown training key {key!r}")
        updates[key] = ev._coerce(value, defaults[key])
    for key in TRAIN_FLAGS:
        if getattr(args, key, None) is not None:
            updates[key] = getattr(args, key)
    try:
        return replace(base, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc


def cmd_train(args):
    config = resolve_train_config(args)
    resolved = dict(config.to_dict(), dataset=args.dataset, out=args.out, resume=args.resume)
    _echo("resolved train config", resolved)
    ds = sim.load_dataset(args.dataset)
    if config.batch_size > len(ds):
        raise ConfigurationError(f"batch_size {config.batch_size} exceeds dataset size {len(ds)}")
    every = max(1, config.epochs // 20)

    def progress(epoch, loss):
        if epoch % every == 0 or epoch == config.epochs - 1:
            log.info("epoch %d loss %.6g", epoch, loss)

    try:
        model, history = sm.train(ds, config, resume_from=args.resume, progress=progress)
    except TrainingDivergedError as exc:
        kept = f"; checkpoint kept at {config.checkpoint_path}" if config.checkpoint_path else ""
        raise TrainingDivergedError(f"{exc}{kept}") from exc
    model.provenance["cli_config"] = resolved
    sm.save_model(model, args.out)
    loss_csv = args.loss_csv or os.path.splitext(args.out)[0] + ".loss.csv"
    sm.write_loss_history(loss_csv, history)
    print(json.dumps({"wrote": args.out, "loss_history": loss_csv, "epochs": len(history),
                      "initial_loss": history[0] if history else None,
                      "final_loss": history[-1] if history else None}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- smooth

def read_observed_csv(path, trial=None):
    """Parse ``observed`` (and optional ``t``) columns; comment lines start with ``#``.

    Returns ``(observed, t_or_None)``. Malformed rows raise :class:`FormatError`
    naming the line number.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror or exc}") from exc
    with fh:
        header, obs, times = None, [], []
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            cells = next(csv.reader([line]))
            if header is None:
                header = [c.strip() for c in cells]
                if "observed" not in header:
                    raise FormatError(f"{path}: line {lineno}: header lacks an 'observed' column")
                if trial is not None and "trial" not in header:
                    raise FormatError(f"{path}: --trial given but the file has no 'trial' column")
                col = {name: i for i, name in enumerate(header)}
                continue
            if len(cells) != len(header):
                raise FormatError(f"{path}: line {lineno}: expected {len(header)} fields, found {len(cells)}")
            try:
                if trial is not None and int(cells[col["trial"]]) != trial:
                    continue
                obs.append(float(cells[col["observed"]]))
                if "t" in col:
                    times.append(float(cells[col["t"]]))
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
    if header is None:
        raise FormatError(f"{path}: no header row")
    if trial is None and "trial" in header and obs:
        raise FormatError(f"{path}: file holds a 'trial' column; select one with --trial")
    return np.asarray(obs), (np.asarray(times) if times else None)


def cmd_smooth(args):
    model = sm.load_model(args.model)
    n = model.spec.signal_length
    observed, times = read_observed_csv(args.input, args.trial)
    if len(observed) != n:
        raise InvalidArgumentError(f"model expects n = {n} samples, input has {len(observed)}")
    if times is None:
        dt = model.provenance.get("dataset_manifest", {}).get("grid", {}).get("dt", 0.01)
        times = np.arange(n) * dt
    estimate = sm.smooth(model, observed).values
    rows = ["index,t,observed,estimate"]
    rows += [f"{j},{float(times[j])!r},{float(observed[j])!r},{float(estimate[j])!r}" for j in range(n)]
    text = "\n".join(rows) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- benchmark

BENCH_FLAGS = {"model_path": "model_path", "train_enabled": "train_enabled", "train_count": "train_count",
               "test_count": "test_count", "dyn_noise_std": "dyn_noise_std", "example_trials": "example_trials",
               "seed": "seed", "threads": "threads", "paper_scale": "paper_scale",
               "epochs": "train.epochs", "batch_size": "train.batch_size", "channels": "train.channels"}


def resolve_benchmark_config(args):
    if args.experiment not in ev.EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.experiment!r}; choose from {', '.join(ev.EXPERIMENTS)}")
    values = _read_config(args.config)
    values.update(_key_values(args.set, "--set"))
    for attr, key in BENCH_FLAGS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    return ev.build_config(args.experiment, values)


def cmd_benchmark(args):
    config = resolve_benchmark_config(args)
    out = args.out or os.path.join("reports", args.experiment)
    _echo("resolved benchmark config", dict(config.resolved(), out=out))
    report, model, history = ev.run_experiment(config)
    ev.emit_report(report, out)
    ev.save_artifacts(out, model if history is not None else None, history)
    for name, s in report.summary().items():
        print(f"{name}: median {s['median']:.6g}  q25 {s['q25']:.6g}  q75 {s['q75']:.6g}")
    absent = report.extra.get("absent_condition")
    if absent:
        print(f"oscillation-absent halves with lower ConvNet RMS: {absent['convnet_lower_fraction']:.3f}")
    print(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- filter design

def cmd_filter_design(args):
    design = design_butterworth_bandpass(args.order, args.low, args.high, args.fs)
    text = design.to_text()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "smooth": cmd_smooth, "benchmark": cmd_benchmark,
            "filter-design": cmd_filter_design}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        parser.print_usage(sys.stderr)
        print(f"convsmoother {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvSmootherError, ValueError, ArithmeticError, OSError) as exc:
        print(f"convsmoother {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
