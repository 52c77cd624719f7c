"""Command-line entry point: ``lrmc {generate,solve,train,bench}``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 numerical failure.
"""
import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import bench, problems, schedules, solver, training
from .errors import (
    ConfigurationError,
    FormatError,
    LRMCError,
    NumericalFailureError,
    SchemaError,
    SearchFailureError,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4
GLOBAL_KEYS = {"seed", "out", "threads", "reduction"}
COMMANDS = ("generate", "solve", "train", "bench")

log = logging.getLogger("lrmc")


def _rate(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"sampling rate must be in (0, 1], got {text}")
    return v


def _fraction(text):
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"outlier fraction must be in [0, 1), got {text}")
    return v


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _suite(text):
    if text not in bench.SUITES:
        raise argparse.ArgumentTypeError(f"unknown suite {text!r}; choose from {', '.join(bench.SUITES)}")
    return text


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration; flags override it")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="BLAS threads (default: $LRMC_THREADS, else library default)")
    common.add_argument("--reduction", choices=("deterministic", "fast"), default="deterministic",
                        help="deterministic blanks wall-clock columns so reruns are byte-identical")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="lrmc", description="Robust matrix completion by learned thresholding.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic instance")
    g.add_argument("--n1", type=_positive_int, default=300)
    g.add_argument("--n2", type=_positive_int, default=300)
    g.add_argument("--rank", type=_positive_int, default=5)
    g.add_argument("--p", type=_rate, default=1.0)
    g.add_argument("--alpha", type=_fraction, default=0.1)
    g.add_argument("--format", choices=("bin", "csv"), default="bin")

    s = sub.add_parser("solve", parents=[common], help="run LRMC on an observed matrix")
    s.add_argument("--input", type=Path, default=None, help="observed matrix, NaN where unobserved")
    s.add_argument("--rank", type=_positive_int, default=None)
    s.add_argument("--schedule", default="oracle", help="schedule file, fixed:ZETA,ETA or oracle")
    s.add_argument("--eta", type=float, default=0.5, help="step size of the oracle schedule")
    s.add_argument("--stop", default="iters:100", help="gt:TOL, succ:TOL or iters:K")
    s.add_argument("--max-iters", type=_positive_int, default=solver.DEFAULT_MAX_ITERS)
    s.add_argument("--truth", type=Path, default=None, help="directory written by generate")

    t = sub.add_parser("train", parents=[common], help="train an unfolded schedule")
    t.add_argument("--n1", type=_positive_int, default=100)
    t.add_argument("--n2", type=_positive_int, default=100)
    t.add_argument("--rank", type=_positive_int, default=3)
    t.add_argument("--p", type=_rate, default=1.0)
    t.add_argument("--alpha", type=_fraction, default=0.1)
    t.add_argument("--K", type=_nonneg_int, default=10)
    t.add_argument("--Kbar", type=_positive_int, default=15)
    t.add_argument("--steps", type=_positive_int, default=200, help="SGD steps per stage")
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--eval-pool", type=_positive_int, default=20)

    b = sub.add_parser("bench", parents=[common], help="run experiment suites")
    b.add_argument("suites", nargs="+", type=_suite, metavar="SUITE", help=", ".join(bench.SUITES))
    b.add_argument("--n", type=_positive_int, default=None)
    b.add_argument("--seeds", type=_positive_int, default=None)
    b.add_argument("--trials", type=_positive_int, default=None)
    b.add_argument("--schedule", default=None, help="oracle (default) or a schedule file")
    b.add_argument("--eta", type=float, default=None)
    return ap, {"generate": g, "solve": s, "train": t, "bench": b}


def load_config(path, command):
    """Read a RunConfig: global keys plus one section per command."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    extra = set(doc) - GLOBAL_KEYS - set(COMMANDS)
    if extra:
        raise ConfigurationError(f"{path}: unknown key(s) {', '.join(sorted(extra))}")
    section = doc.get(command, {})
    if not isinstance(section, dict):
        raise ConfigurationError(f"{path}: section {command!r} must be an object")
    merged = {k: doc[k] for k in GLOBAL_KEYS if k in doc}
    merged.update(section)
    return merged


def _apply_config(parser, sub, argv, command, cfg_path):
    """Reparse with config values as defaults, so explicit flags still win."""
    values = load_config(cfg_path, command)
    dests = {a.dest: a for a in sub._actions}
    defaults, extras = {}, {}
    for key, v in values.items():
        dest = key.replace("-", "_")
        if dest in dests and dest not in ("help", "config", "suites"):
            act = dests[dest]
            if act.type is not None and v is not None and not isinstance(v, (list, dict)):
                try:
                    v = act.type(str(v))
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise ConfigurationError(f"{cfg_path}: {key}: {exc}") from None
            defaults[dest] = v
        elif command == "bench":
            extras[key] = v  # passed through to BenchConfig, which rejects unknown names
        else:
            raise ConfigurationError(f"{cfg_path}: unknown {command} option {key!r}")
    sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    args.bench_extra = extras
    return args


def _thread_limit(threads):
    if threads is None:
        env = os.environ.get("LRMC_THREADS")
        if env:
            try:
                threads = _positive_int(env)
            except (ValueError, argparse.ArgumentTypeError):
                raise ConfigurationError(f"LRMC_THREADS must be a positive integer, got {env!r}") from None
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def cmd_generate(args):
    inst = problems.generate_synthetic(args.n1, args.n2, args.rank, args.p, args.alpha, args.seed)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ext = args.format
    problems.save_observed(inst.observed, out / f"Y.{ext}", ext)
    problems.save_truth(inst.truth, out, ext)
    log.info("wrote %s", out)


def _schedule(text, eta):
    if text == "oracle":
        return schedules.ParamSchedule.oracle(eta)
    if text.startswith("fixed:"):
        try:
            zeta, step = (float(v) for v in text[len("fixed:"):].split(","))
        except ValueError:
            raise ConfigurationError(f"--schedule {text!r}: expected fixed:ZETA,ETA") from None
        try:
            return schedules.ParamSchedule.fixed(zeta, step)
        except SchemaError as exc:
            raise ConfigurationError(f"--schedule {text!r}: {exc}") from None
    return schedules.load(text)


def cmd_solve(args):
    Y = problems.load_observed(args.input)
    truth = problems.load_truth(args.truth, Y) if args.truth is not None else None
    sched = _schedule(args.schedule, args.eta)
    if sched.kind == "oracle" and truth is None:
        raise ConfigurationError("the oracle schedule needs --truth")
    try:
        stop = solver.StopRule.parse(args.stop, args.max_iters)
    except (ValueError, LRMCError) as exc:
        raise ConfigurationError(f"--stop {args.stop!r}: {exc}") from None
    factors, S, trace = solver.solve(Y, args.rank, sched, stop, truth)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        trace.write_csv(fh, timings=args.reduction == "fast")
    problems.save_dense(np.vstack([factors.L, factors.R]), out / "factors.bin", "bin")
    with open(out / "sparse.csv", "w", encoding="utf-8") as fh:
        fh.write("i,j,value\n")
        keep = S.values != 0
        for i, j, v in zip(S.index.rows[keep], S.index.cols[keep], S.values[keep]):
            fh.write(f"{i},{j},{float(v)!r}\n")
    log.info("%d iterations (%s)", trace.iterations, trace.stop_reason)


def cmd_train(args):
    dist = training.ProblemDistribution(args.n1, args.n2, args.rank, args.p, args.alpha, seed=args.seed)
    try:
        cfg = training.TrainConfig(K=args.K, Kbar=args.Kbar, steps_per_stage=args.steps,
                                   learning_rate=args.lr, eval_pool_size=args.eval_pool)
    except LRMCError as exc:
        raise ConfigurationError(str(exc)) from None
    history, records = [], []
    sched = training.train(dist, cfg, history, records)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    schedules.save(sched, out / "schedule.json")
    bench.write_csv(out / "stage_loss.csv", ("stage", "step", "loss"),
                    [(h.stage, h.step, h.loss) for h in history])
    bench.write_csv(out / "grid.csv", ("beta", "phi", "mean_loss"), records)
    log.info("learned tail beta=%g phi=%g", sched.beta, sched.phi)


def cmd_bench(args):
    doc = dict(args.bench_extra)
    doc["seed"] = args.seed
    for key in ("n", "seeds", "trials", "schedule", "eta"):
        v = getattr(args, key)
        if v is not None:
            doc[key] = v
    try:
        cfg = bench.BenchConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    for name in args.suites:
        path = bench.run_suite(name, cfg, args.out, timings=args.reduction == "fast")
        log.info("wrote %s", path)


HANDLERS = {"generate": cmd_generate, "solve": cmd_solve, "train": cmd_train, "bench": cmd_bench}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None:
            args = _apply_config(parser, subs[args.command], argv, args.command, args.config)
        else:
            args.bench_extra = {}
        if args.command == "solve" and (args.input is None or args.rank is None):
            subs["solve"].error("--input and --rank are required")
        with _thread_limit(args.threads):
            HANDLERS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (NumericalFailureError, SearchFailureError) as exc:
        print(f"lrmc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, SchemaError, FormatError, LRMCError, OSError) as exc:
        print(f"lrmc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
