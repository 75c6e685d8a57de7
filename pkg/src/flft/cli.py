"""Command-line interface: ``flft {synth,split,train,eval,impute,compare}``.

Every subcommand accepts ``--config FILE`` holding flat ``key = value`` lines
named after the long flags (``eta = 0.01``, ``alpha-i = 0.5``); flags given on
the command line win. COO paths may be ``-`` for stdin/stdout.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
import numpy as np

from . import __version__
from .errors import FLFTError
from .model import InitScheme, Model, init
from .optimizer import DEFAULT_INTEGRAL_CLAMP, PidGains
from .sparse_tensor import SparseTensor, TensorShape, load_coo, save, split, synth_lowrank
from .trainer import OPTIMIZERS, TrainConfig, compare, rmse, train

log = logging.getLogger("flft")

SUMMARY_HEADER = "name,final_val_rmse,test_rmse,epochs,seconds"
_BOOL_FLAGS = {"no_shuffle", "no_timing", "no_clamp"}


class UsageError(FLFTError):
    pass


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _shape(text):
    try:
        return TensorShape.of([int(x) for x in text.split(",")])
    except (ValueError, FLFTError) as exc:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}: {exc}") from None


def _add_training_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--rank", type=int, default=10)
    g.add_argument("--eta", type=float, default=0.01, help="learning rate")
    g.add_argument("--lambda", dest="lam", type=float, default=0.0, help="regularization")
    g.add_argument("--optimizer", choices=OPTIMIZERS, default="sgd")
    g.add_argument("--kp", type=float, default=1.0)
    g.add_argument("--ki", type=float, default=0.0)
    g.add_argument("--kd", type=float, default=0.0)
    g.add_argument("--alpha-i", type=float, default=1.0)
    g.add_argument("--alpha-d", type=float, default=1.0)
    g.add_argument("--max-epochs", type=int, default=500)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--patience", type=int, default=5)
    g.add_argument("--no-shuffle", action="store_true", help="visit entries in file order")
    g.add_argument("--integral-clamp", type=float, default=DEFAULT_INTEGRAL_CLAMP)
    g.add_argument("--no-clamp", action="store_true", help="disable PID integral clamping")
    g.add_argument("--init-low", type=float, default=0.0)
    g.add_argument("--init-high", type=float, default=0.05)
    g.add_argument("--ratios", type=_floats, default=(2.0, 2.0, 6.0))
    g.add_argument("--no-timing", action="store_true", help="write 0 in the seconds column")


def build_parser():
    parser = argparse.ArgumentParser(prog="flft", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("synth", "write a synthetic low-rank COO tensor")
    p.add_argument("--shape", type=_shape, required=True, help="I,J,K")
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--output", default="-")

    p = command("split", "split a COO file into train/val/test files")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="prefix; writes PREFIX.{train,val,test}.coo")
    p.add_argument("--ratios", type=_floats, default=(2.0, 2.0, 6.0))

    p = command("train", "fit a model and write it plus its report table")
    p.add_argument("--input", required=True, help="training COO, or full data when --val is absent")
    p.add_argument("--val", help="validation COO; without it --input is split by --ratios")
    p.add_argument("--shape", type=_shape, help="I,J,K; default covers all loaded files")
    p.add_argument("--output", required=True, help="model file")
    p.add_argument("--report", help="report table (default OUTPUT.report.csv)")
    _add_training_flags(p)

    p = command("eval", "print the RMSE of a model on a COO file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)

    p = command("impute", "predict values for i,j,k queries")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="lines i,j,k[,value]; header optional")
    p.add_argument("--output", default="-")

    p = command("compare", "train several optimizers from one shared init")
    p.add_argument("--input", required=True, help="full data COO, split by --ratios and --seed")
    p.add_argument("--output", required=True, help="directory for report tables")
    p.add_argument("--optimizers", default=",".join(OPTIMIZERS))
    _add_training_flags(p)
    return parser


def read_config(path):
    """Parse a flat ``key = value`` file into a dict keyed by argparse dest."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.lstrip("-").replace("-", "_")
            values["lam" if key == "lambda" else key] = value
    return values


def _apply_config(subparser, config):
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in config.items():
        if key not in known or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        if key in _BOOL_FLAGS:
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} needs a boolean, got {value!r}")
            defaults[key] = value.lower() in ("true", "1", "yes")
        else:
            defaults[key] = value
        known[key].required = False
    subparser.set_defaults(**defaults)


def _config_path(argv):
    for n, arg in enumerate(argv):
        if arg == "--config" and n + 1 < len(argv):
            return argv[n + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def parse_args(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    if path and argv and argv[0] in COMMANDS:
        # config values become subparser defaults so explicit flags still win
        subparser = parser._subparsers._group_actions[0].choices[argv[0]]
        try:
            config = read_config(path)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        _apply_config(subparser, config)
    return parser.parse_args(argv)


# -- helpers -------------------------------------------------------------------


def _read(path, shape=None):
    if path == "-":
        return load_coo(sys.stdin.buffer, shape)
    return load_coo(path, shape)


def _write(t, path):
    if path == "-":
        save(t, sys.stdout)
    else:
        save(t, path)


def _reshape(t, shape):
    return SparseTensor(shape, t.indices, t.values)


def _common_shape(tensors):
    return TensorShape(*np.max([t.shape for t in tensors], axis=0).tolist())


def _config(args, optimizer=None):
    gains = PidGains(args.kp, args.ki, args.kd, args.alpha_i, args.alpha_d)
    return TrainConfig(
        eta=args.eta, lam=args.lam, rank=args.rank, gains=gains,
        max_epochs=args.max_epochs, tol=args.tol, patience=args.patience,
        shuffle=not args.no_shuffle, seed=args.seed,
        optimizer_kind=optimizer or args.optimizer,
        integral_clamp=None if args.no_clamp else args.integral_clamp,
    )


def _init_scheme(args):
    return InitScheme("uniform", args.init_low, args.init_high, args.seed)


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args):
    t = synth_lowrank(args.shape, args.rank, args.density, args.noise_sd, args.seed)
    _write(t, args.output)


def cmd_split(args):
    parts = split(_read(args.input), args.ratios, args.seed)
    for name, part in zip(("train", "val", "test"), parts):
        save(part, f"{args.output}.{name}.coo")
        log.info("%s: %d entries", name, len(part))


def cmd_train(args):
    cfg = _config(args)
    data = _read(args.input)
    if args.val:
        train_set, val_set = data, _read(args.val)
    else:
        train_set, val_set, _ = split(data, args.ratios, args.seed)
    shape = args.shape or _common_shape([train_set, val_set])
    train_set, val_set = _reshape(train_set, shape), _reshape(val_set, shape)
    model = init(shape, cfg.rank, _init_scheme(args))
    report = train(model, train_set, val_set, cfg)
    model.save(args.output)
    with open(args.report or f"{args.output}.report.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_table(timing=not args.no_timing))
    log.info("%d epochs, val rmse %.6g, converged=%s",
             report.epochs_run, report.final_val_rmse, report.converged)


def cmd_eval(args):
    model = Model.load(args.model)
    print(f"{rmse(model, _read(args.input, model.shape)):.17g}")


def _read_queries(path):
    fh = sys.stdin if path == "-" else open(path, encoding="utf-8")
    queries = []
    try:
        for lineno, raw in enumerate(fh, start=1):
            fields = [f.strip() for f in raw.strip().split(",")]
            if fields == [""]:
                continue
            try:
                queries.append(tuple(int(f) for f in fields[:3]))
            except ValueError:
                if queries or lineno > 1:
                    raise UsageError(f"{path}:{lineno}: bad query {raw.strip()!r}") from None
                continue  # header
            if len(fields) not in (3, 4):
                raise UsageError(f"{path}:{lineno}: expected i,j,k[,value]")
    finally:
        if fh is not sys.stdin:
            fh.close()
    if not queries:
        raise UsageError(f"{path}: no queries")
    return np.array(queries, dtype=np.int64)


def cmd_impute(args):
    model = Model.load(args.model)
    queries = _read_queries(args.input)
    bad = np.any((queries < 0) | (queries >= np.asarray(model.shape)), axis=1)
    if bad.any():
        q = tuple(queries[np.argmax(bad)].tolist())
        raise UsageError(f"query {q} outside trained shape {tuple(model.shape)}")
    if len(np.unique(queries, axis=0)) != len(queries):
        raise UsageError("duplicate query")
    _write(SparseTensor(model.shape, queries, model.predict_many(queries)), args.output)


def cmd_compare(args):
    names = [n.strip() for n in args.optimizers.split(",") if n.strip()]
    unknown = set(names) - set(OPTIMIZERS)
    if unknown or not names:
        raise UsageError(f"--optimizers must name some of {OPTIMIZERS}")
    parts = split(_read(args.input), args.ratios, args.seed)
    results = compare([_config(args, name) for name in names], parts, _init_scheme(args))
    os.makedirs(args.output, exist_ok=True)
    lines = [SUMMARY_HEADER]
    for name, res in zip(names, results):
        with open(os.path.join(args.output, f"{name}.report.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(res.report.to_table(timing=not args.no_timing))
        seconds = res.report.seconds if not args.no_timing else 0.0
        lines.append(f"{name},{res.report.final_val_rmse:.17g},{res.test_rmse:.17g},"
                     f"{res.report.epochs_run},{seconds:.6f}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(args.output, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    sys.stdout.write(text)


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "impute": cmd_impute,
    "compare": cmd_compare,
}


def _origin(exc):
    """Name of the innermost package module the exception passed through."""
    here = os.path.dirname(os.path.abspath(__file__))
    name = None
    for frame in traceback.extract_tb(exc.__traceback__):
        if os.path.dirname(os.path.abspath(frame.filename)) == here:
            name = os.path.splitext(os.path.basename(frame.filename))[0]
    return name or "cli"


def run(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"flft: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (FLFTError, ValueError, OSError) as exc:
        print(f"flft {args.command}: error: {_origin(exc)}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
