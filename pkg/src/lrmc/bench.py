"""Synthetic experiment suites; each one writes a single CSV.

Suites: ``conv-alpha`` (error per iteration for several outlier densities),
``iters-vs-p`` (iterations and time to tolerance against the sampling
rate), ``recoverability`` (success counts), ``runtime-alpha`` (per-iteration
and total time against the outlier density) and ``unfold-models``
(error curves of FNN, RNN and FNN+tail schedules).
"""
import csv
import math
import statistics
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import schedules, solver, training
from .errors import ConfigurationError, NumericalFailureError
from .problems import generate_synthetic

SUITES = ("conv-alpha", "iters-vs-p", "recoverability", "runtime-alpha", "unfold-models")


@dataclass
class BenchConfig:
    n: int = 300
    r: int = 5
    seeds: int = 5
    seed: int = 0
    tol: float = 1e-6
    max_iters: int = 500
    # "oracle" or the path of a schedule file
    schedule: str = "oracle"
    eta: float = 0.5
    sgd_eta: float = 0.5
    # ScaledGD keeps alpha_tilde = sgd_fraction * alpha
    sgd_fraction: float = 1.0
    p: float = 1.0
    alphas: list = field(default_factory=lambda: [0.1, 0.15, 0.2, 0.25])
    p_values: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 11)])
    iters_alpha: float = 0.1
    recover_alphas: list = field(default_factory=lambda: [0.35, 0.4, 0.45, 0.5, 0.55, 0.6])
    recover_p: list = field(default_factory=lambda: [1.0, 0.1])
    recover_tol: float = 1e-4
    trials: int = 20
    runtime_alphas: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4])
    runtime_iters: int = 100
    unfold_n: int = 100
    unfold_r: int = 3
    unfold_alpha: float = 0.1
    unfold_K: int = 10
    unfold_Kbar: int = 15
    unfold_steps: int = 200
    unfold_horizon: int = 40

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigurationError(f"unknown bench option(s): {', '.join(sorted(extra))}")
        return cls(**doc)


def _instance_seed(cfg, *parts):
    ss = np.random.SeedSequence([int(cfg.seed), *[int(round(x * 1000)) for x in parts]])
    return int(ss.generate_state(1, np.uint64)[0])


def _lrmc_schedule(cfg, truth):
    if cfg.schedule == "oracle":
        return solver.oracle_schedule(truth, cfg.eta)
    return schedules.load(cfg.schedule)


def _run(method, inst, cfg, stop, alpha):
    Y, t = inst.observed, inst.truth
    try:
        if method == "lrmc":
            return solver.solve(Y, t.rank, _lrmc_schedule(cfg, t), stop, t)[2]
        return solver.scaledgd_solve(Y, t.rank, min(1.0, cfg.sgd_fraction * alpha), cfg.sgd_eta, stop, t)[2]
    except NumericalFailureError:
        return None


def _timed(method, inst, cfg, stop, alpha):
    t0 = time.perf_counter()
    tr = _run(method, inst, cfg, stop, alpha)
    return tr, time.perf_counter() - t0


def _converged(tr, tol):
    return tr is not None and tr.records[-1].rel_err < tol


def conv_alpha(cfg, timings=True):
    header = ("alpha", "method", "seed", "k", "rel_err")
    rows = []
    stop = solver.StopRule.ground_truth(cfg.tol, cfg.max_iters)
    for alpha in cfg.alphas:
        for s in range(cfg.seeds):
            inst = generate_synthetic(cfg.n, cfg.n, cfg.r, cfg.p, alpha, _instance_seed(cfg, 1, alpha, s))
            for method in ("lrmc", "scaledgd"):
                tr = _run(method, inst, cfg, stop, alpha)
                for rec in (tr.records if tr is not None else []):
                    rows.append((alpha, method, s, rec.k, rec.rel_err))
    return header, rows


def iters_vs_p(cfg, timings=True):
    header = ("p", "method", "mean_time_s", "median_iterations", "mean_iterations", "converged", "trials")
    rows = []
    stop = solver.StopRule.ground_truth(cfg.tol, cfg.max_iters)
    for p in cfg.p_values:
        insts = [generate_synthetic(cfg.n, cfg.n, cfg.r, p, cfg.iters_alpha, _instance_seed(cfg, 2, p, s))
                 for s in range(cfg.seeds)]
        for method in ("lrmc", "scaledgd"):
            its, secs, ok = [], [], 0
            for inst in insts:
                tr, sec = _timed(method, inst, cfg, stop, cfg.iters_alpha)
                # a run that misses the tolerance is charged the full budget
                its.append(tr.iterations if _converged(tr, cfg.tol) else cfg.max_iters)
                secs.append(sec)
                ok += _converged(tr, cfg.tol)
            rows.append((p, method, float(np.mean(secs)) if timings else None,
                         statistics.median(its), float(np.mean(its)), ok, len(insts)))
    return header, rows


def recoverability(cfg, timings=True):
    header = ("alpha", "method", "p", "successes", "trials")
    rows = []
    stop = solver.StopRule.ground_truth(cfg.recover_tol, cfg.max_iters)
    for p in cfg.recover_p:
        for alpha in cfg.recover_alphas:
            insts = [generate_synthetic(cfg.n, cfg.n, cfg.r, p, alpha, _instance_seed(cfg, 3, p, alpha, s))
                     for s in range(cfg.trials)]
            for method in ("lrmc", "scaledgd"):
                ok = sum(_converged(_run(method, inst, cfg, stop, alpha), cfg.recover_tol) for inst in insts)
                rows.append((alpha, method, p, ok, cfg.trials))
    return header, rows


def runtime_alpha(cfg, timings=True):
    header = ("alpha", "method", "p", "ms_per_iter", "total_s", "iterations")
    rows = []
    fixed = solver.StopRule.iterations(cfg.runtime_iters)
    to_tol = solver.StopRule.ground_truth(cfg.tol, cfg.max_iters)
    for alpha in cfg.runtime_alphas:
        inst = generate_synthetic(cfg.n, cfg.n, cfg.r, cfg.p, alpha, _instance_seed(cfg, 4, alpha))
        for method in ("lrmc", "scaledgd"):
            tr = _run(method, inst, cfg, fixed, alpha)
            per = float(np.mean(tr.step_ms())) if tr is not None and len(tr) > 1 else math.nan
            tr2, sec = _timed(method, inst, cfg, to_tol, alpha)
            iters = tr2.iterations if _converged(tr2, cfg.tol) else None
            rows.append((alpha, method, cfg.p, per if timings else None, sec if timings else None, iters))
    return header, rows


def unfold_models(cfg, timings=True):
    """Train FNN (K layers), RNN (tail only) and FNN+tail, then trace mean error per iteration."""
    header = ("model", "k", "mean_rel_err")
    dist = training.ProblemDistribution(cfg.unfold_n, cfg.unfold_n, cfg.unfold_r, 1.0, cfg.unfold_alpha,
                                        seed=cfg.seed)
    tcfg = training.TrainConfig(K=cfg.unfold_K, Kbar=cfg.unfold_Kbar, steps_per_stage=cfg.unfold_steps)
    fnn = training.layerwise_train(dist, tcfg)
    # the recurrent model ties every layer after the initialization
    rcfg = training.TrainConfig(K=0, Kbar=cfg.unfold_Kbar, steps_per_stage=cfg.unfold_steps)
    rnn_head = training.layerwise_train(dist, rcfg)
    rnn = rnn_head.with_rnn(*training.grid_search_rnn(rnn_head, dist, rcfg))
    frmnn = fnn.with_rnn(*training.grid_search_rnn(fnn, dist, tcfg))
    pool = dist.pool(cfg.trials, "test")
    rows = []
    for name, sched in (("fnn", fnn), ("rnn", rnn), ("frmnn", frmnn)):
        horizon = min(cfg.unfold_horizon, sched.K) if not sched.unlimited else cfg.unfold_horizon
        curves = []
        for inst in pool:
            try:
                _, _, tr = solver.solve(inst.observed, inst.truth.rank, sched,
                                        solver.StopRule.iterations(horizon), inst.truth)
                curves.append(tr.rel_errs())
            except NumericalFailureError:
                curves.append(np.full(horizon + 1, np.inf))
        width = min(len(c) for c in curves)
        mean = np.mean([c[:width] for c in curves], axis=0)
        rows += [(name, k, float(v)) for k, v in enumerate(mean)]
    return header, rows


_RUNNERS = {
    "conv-alpha": conv_alpha,
    "iters-vs-p": iters_vs_p,
    "recoverability": recoverability,
    "runtime-alpha": runtime_alpha,
    "unfold-models": unfold_models,
}


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def run_suite(name, cfg, out_dir, timings=True):
    """Run one suite and write ``<out_dir>/<name>.csv``; returns the path."""
    if name not in _RUNNERS:
        raise ConfigurationError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    header, rows = _RUNNERS[name](cfg, timings)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    write_csv(path, header, rows)
    return path
