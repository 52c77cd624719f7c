"""LRMC and the ScaledGD baseline.

Both methods share a thresholded spectral initialization and the same
scaled-gradient factor update; they differ only in how the outlier
estimate is refreshed each iteration (soft-thresholding vs. keeping the
top fraction of each row and column).
"""
import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from . import schedules as sched
from .errors import (
    ConfigurationError,
    InvalidParameterError,
    RankCollapseError,
    ScheduleExhaustedError,
    SingularFactorError,
)
from .matops import (
    MaskedMatrix,
    _shrink,
    factored_fro_dist,
    factored_fro_norm,
    scaled_grad_step,
    soft_threshold,
    sparsify_top_fraction,
    truncated_svd,
)

# outlier estimate: values aligned with the observed index set, zero off its support
SparseEstimate = MaskedMatrix

DEFAULT_MAX_ITERS = 500
TRACE_HEADER = ("k", "rel_err", "succ_change", "supp_size", "supp_included", "zeta", "eta", "ms")


@dataclass(frozen=True)
class FactorPair:
    L: np.ndarray
    R: np.ndarray

    @property
    def r(self):
        return self.L.shape[1]

    def product(self):
        return self.L @ self.R.T


@dataclass(frozen=True, eq=False)
class SolverState:
    L: np.ndarray
    R: np.ndarray
    S: MaskedMatrix
    k: int
    Y: object

    def __post_init__(self):
        object.__setattr__(self, "L", np.ascontiguousarray(self.L, dtype=np.float64))
        object.__setattr__(self, "R", np.ascontiguousarray(self.R, dtype=np.float64))

    @property
    def factors(self):
        return FactorPair(self.L, self.R)


@dataclass(frozen=True)
class StopRule:
    """When to stop iterating. ``max_iters`` is enforced for every kind."""

    kind: str
    tol: float = 0.0
    K: int = 0
    max_iters: int = DEFAULT_MAX_ITERS

    def __post_init__(self):
        if self.kind not in ("iters", "gt", "succ"):
            raise InvalidParameterError(f"unknown stop rule {self.kind!r}")
        if self.kind == "iters" and self.K < 0:
            raise InvalidParameterError("iteration count must be >= 0")
        if self.kind in ("gt", "succ") and not self.tol > 0:
            raise InvalidParameterError("tolerance must be positive")
        if self.max_iters < 0:
            raise InvalidParameterError("max_iters must be >= 0")

    @classmethod
    def iterations(cls, K, max_iters=None):
        return cls("iters", K=int(K), max_iters=int(K if max_iters is None else max_iters))

    @classmethod
    def ground_truth(cls, tol, max_iters=DEFAULT_MAX_ITERS):
        return cls("gt", tol=float(tol), max_iters=int(max_iters))

    @classmethod
    def successive(cls, tol, max_iters=DEFAULT_MAX_ITERS):
        return cls("succ", tol=float(tol), max_iters=int(max_iters))

    @classmethod
    def parse(cls, text, max_iters=DEFAULT_MAX_ITERS):
        """Parse ``gt:1e-6``, ``succ:1e-2`` or ``iters:10``."""
        kind, _, arg = text.partition(":")
        try:
            if kind == "iters":
                return cls("iters", K=int(arg), max_iters=int(max_iters))
            if kind in ("gt", "succ"):
                return cls(kind, tol=float(arg), max_iters=int(max_iters))
        except ValueError:
            pass
        raise InvalidParameterError(f"cannot parse stop rule {text!r}")

    @property
    def limit(self):
        return min(self.K, self.max_iters) if self.kind == "iters" else self.max_iters


@dataclass
class TraceRecord:
    k: int
    rel_err: float | None
    succ_change: float | None
    supp_size: int
    supp_included: bool | None
    zeta: float | None
    eta: float | None
    ms: float


@dataclass
class SolveTrace:
    records: list = field(default_factory=list)
    stop_reason: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def iterations(self):
        return self.records[-1].k if self.records else 0

    def column(self, name):
        return [getattr(rec, name) for rec in self.records]

    def rel_errs(self):
        return np.array([np.nan if r.rel_err is None else r.rel_err for r in self.records])

    def step_ms(self):
        return np.array([r.ms for r in self.records[1:]])

    def write_csv(self, fh, timings=True):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for rec in self.records:
            w.writerow([
                rec.k,
                _fmt(rec.rel_err),
                _fmt(rec.succ_change),
                rec.supp_size,
                "" if rec.supp_included is None else int(rec.supp_included),
                _fmt(rec.zeta),
                _fmt(rec.eta),
                _fmt(rec.ms) if timings else "",
            ])

    def to_csv(self, timings=True):
        buf = io.StringIO()
        self.write_csv(buf, timings)
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(float(v))


# -- building blocks ----------------------------------------------------------

def initialize(Y, r, zeta0, *, svd_seed=0):
    """Threshold the observations, then take the rank-r spectral estimate of ``p^-1 (Y - S0)``."""
    S0 = soft_threshold(Y.data, zeta0)
    return _spectral_init(Y, r, S0, svd_seed)


def _spectral_init(Y, r, S0, svd_seed):
    M = Y.data.with_values((Y.values - S0.values) / Y.p)
    trip = truncated_svd(M, r, seed=svd_seed)
    # sigma_r at rounding level of sigma_1 counts as zero
    if not trip.sigma[-1] > max(M.shape) * np.finfo(float).eps * trip.sigma[0]:
        raise RankCollapseError(f"spectral initialization has sigma_r = {trip.sigma[-1]}")
    sq = np.sqrt(trip.sigma)
    return SolverState(trip.U * sq, trip.V * sq, S0, 0, Y)


def _update_factors(state, s_vals, res0, eta):
    resid = MaskedMatrix(state.Y.index, s_vals - res0)
    try:
        L, R = scaled_grad_step(state.L, state.R, resid, eta, state.Y.p)
    except SingularFactorError as exc:
        raise SingularFactorError(exc.side, exc.cond, state.k + 1) from None
    return SolverState(L, R, MaskedMatrix(state.Y.index, s_vals), state.k + 1, state.Y)


def _observed_gap(state):
    """``Y - L R^T`` on the observed set."""
    idx = state.Y.index
    x = _backend.kernels.masked_dot(state.L, state.R, idx.rows, idx.cols)
    return state.Y.values - x


def lrmc_step(state, zeta, eta):
    """Soft-threshold the observed gap into S, then one scaled-gradient step using that S."""
    zeta = float(zeta)
    if not (math.isfinite(zeta) and zeta >= 0):
        raise InvalidParameterError(f"zeta must be finite and >= 0, got {zeta}")
    res0 = _observed_gap(state)
    return _update_factors(state, _shrink(res0, zeta), res0, eta)


def scaledgd_step(state, alpha_tilde, eta):
    res0 = _observed_gap(state)
    s = sparsify_top_fraction(MaskedMatrix(state.Y.index, res0), alpha_tilde).values
    return _update_factors(state, s, res0, eta)


def loss(state, Y=None):
    """``(1/2p) ||Pi_Omega(L R^T + S - Y)||_F^2``."""
    Y = state.Y if Y is None else Y
    idx = Y.index
    x = _backend.kernels.masked_dot(state.L, state.R, idx.rows, idx.cols)
    r = x + state.S.values - Y.values
    return 0.5 / Y.p * float(np.dot(r, r))


class OracleSchedule:
    """Thresholds from the ground truth: ``zeta_0 = ||X*||_inf``, ``zeta_k = ||X_{k-1} - X*||_inf``."""

    kind = "oracle"

    def __init__(self, truth, eta=0.5):
        if truth is None:
            raise ConfigurationError("oracle schedule needs the ground truth")
        eta = float(eta)
        if not (0.25 <= eta <= 8 / 9):
            raise InvalidParameterError(f"oracle step size must lie in [1/4, 8/9], got {eta}")
        self.truth = truth
        self.eta = eta

    def zeta0(self):
        return float(np.max(np.abs(self.truth.xstar)))

    def zeta_for(self, state):
        # same accumulation as the solver's masked products, so entries off the
        # outlier support are never above the threshold through rounding
        x = _backend.kernels.full_dot(state.L, state.R)
        return float(np.max(np.abs(x - self.truth.xstar)))

    def params(self, k, state):
        return self.zeta_for(state), self.eta


def oracle_schedule(truth, eta=0.5):
    return OracleSchedule(truth, eta)


class _ScheduleAdapter:
    def __init__(self, schedule):
        self.schedule = schedule

    def zeta0(self):
        return sched.zeta0(self.schedule)

    def params(self, k, state):
        return sched.param_at(self.schedule, k)


def _provider(schedule, truth):
    if isinstance(schedule, OracleSchedule):
        return schedule
    if schedule.kind == "oracle":
        return OracleSchedule(truth, schedule.eta[0])
    return _ScheduleAdapter(schedule)


# -- drivers ------------------------------------------------------------------

def _record(state, prev, truth, zeta, eta, ms):
    rel = incl = succ = None
    if truth is not None:
        rel = factored_fro_dist(state.L, state.R, truth.Lstar, truth.Rstar) / truth.xstar_fro
        outl = state.S.values != 0
        incl = bool(np.all(truth.Sstar.values[outl] != 0))
    if prev is not None:
        base = factored_fro_norm(prev.L, prev.R)
        succ = factored_fro_dist(state.L, state.R, prev.L, prev.R) / base if base > 0 else math.inf
    return TraceRecord(state.k, rel, succ, state.S.nnz, incl, zeta, eta, ms)


def _run(Y, init, step, params, stop, truth, callback):
    if stop.kind == "gt" and truth is None:
        raise ConfigurationError("ground-truth stop rule needs the ground truth")
    trace = SolveTrace()
    t0 = time.perf_counter()
    state, zeta0 = init()
    ms = 1e3 * (time.perf_counter() - t0)
    rec = _record(state, None, truth, zeta0, None, ms)
    trace.records.append(rec)
    if callback is not None:
        callback(state, rec)
    reason = "limit"
    while state.k < stop.limit:
        if stop.kind == "gt" and rec.rel_err < stop.tol:
            reason = "tolerance"
            break
        try:
            zeta, eta = params(state.k + 1, state)
        except ScheduleExhaustedError:
            reason = "schedule-exhausted"
            break
        t0 = time.perf_counter()
        new = step(state, zeta, eta)
        ms = 1e3 * (time.perf_counter() - t0)
        rec = _record(new, state, truth, zeta, eta, ms)
        trace.records.append(rec)
        state = new
        if callback is not None:
            callback(state, rec)
        if stop.kind == "succ" and rec.succ_change < stop.tol:
            reason = "tolerance"
            break
    else:
        if stop.kind == "gt" and rec.rel_err < stop.tol:
            reason = "tolerance"
    trace.stop_reason = reason
    return state.factors, state.S, trace


def solve(Y, r, schedule, stop, truth=None, *, callback=None, svd_seed=0):
    """Run LRMC: spectral initialization, then soft-threshold / scaled-gradient iterations.

    ``schedule`` is a :class:`~lrmc.schedules.ParamSchedule` or an
    :class:`OracleSchedule`. ``callback(state, record)`` is invoked after the
    initialization and after every iteration.

    Returns ``(FactorPair, SparseEstimate, SolveTrace)``.
    """
    provider = _provider(schedule, truth)

    def init():
        z0 = provider.zeta0()
        return initialize(Y, r, z0, svd_seed=svd_seed), z0

    return _run(Y, init, lrmc_step, provider.params, stop, truth, callback)


def scaledgd_solve(Y, r, alpha_tilde, eta, stop, truth=None, *, callback=None, svd_seed=0):
    """The ScaledGD baseline: keep-top-fraction outlier updates, constant step size."""
    alpha_tilde = float(alpha_tilde)

    def init():
        S0 = sparsify_top_fraction(Y.data, alpha_tilde)
        return _spectral_init(Y, r, S0, svd_seed), None

    def params(k, state):
        return alpha_tilde, eta

    def step(state, a, e):
        return scaledgd_step(state, a, e)

    factors, S, trace = _run(Y, init, step, params, stop, truth, callback)
    for rec in trace.records[1:]:
        rec.zeta = None
    return factors, S, trace
