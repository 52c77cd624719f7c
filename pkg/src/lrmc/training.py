"""Learning per-iteration thresholds and step sizes by unrolling the solver.

Training has two phases. ``layerwise_train`` fits the K unrolled layers one
stage at a time with batch-size-1 stochastic steps, each stage extending the
active parameters by one layer. ``grid_search_rnn`` then picks the decay
pair (beta, phi) of the geometric tail by exhaustive evaluation at a
horizon Kbar > K.

Gradients are central finite differences on the scalar parameters; each
probe is a forward pass through the unrolled layers.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import solver
from .errors import (
    InvalidParameterError,
    NumericalFailureError,
    SearchFailureError,
    TrainingDivergedError,
)
from .matops import factored_fro_dist
from .problems import generate_synthetic
from .schedules import ParamSchedule, param_at

log = logging.getLogger(__name__)

_STREAM_TAGS = {"train": 0, "eval": 1, "test": 2}

# relative error below which instances count as solved to machine precision
LOSS_FLOOR_REL = 1e-12


def _draw(value, rng):
    if isinstance(value, (tuple, list)):
        lo, hi = value
        return float(rng.uniform(lo, hi))
    return value


@dataclass(frozen=True)
class ProblemDistribution:
    """Synthetic instances; ``p`` and ``alpha`` may be ``(lo, hi)`` ranges.

    ``mode="stream"`` draws a fresh instance for every training step,
    ``mode="pool"`` cycles through ``pool_size`` fixed ones.
    """

    n1: int = 100
    n2: int = 100
    r: int = 3
    p: object = 1.0
    alpha: object = 0.1
    seed: int = 0
    mode: str = "stream"
    pool_size: int = 20

    def __post_init__(self):
        if self.mode not in ("stream", "pool"):
            raise InvalidParameterError(f"mode must be 'stream' or 'pool', got {self.mode!r}")
        if self.pool_size < 1:
            raise InvalidParameterError("pool_size must be positive")

    def instance(self, i, stream="train"):
        """The ``i``-th instance of a named stream (``train``, ``eval`` or ``test``)."""
        ss = np.random.SeedSequence([int(self.seed), _STREAM_TAGS[stream], int(i)])
        inst_seed, param_seed = (int(v) for v in ss.generate_state(2, np.uint64))
        rng = np.random.Generator(np.random.Philox(param_seed))
        p = _draw(self.p, rng)
        alpha = _draw(self.alpha, rng)
        return generate_synthetic(self.n1, self.n2, self.r, p, alpha, inst_seed)

    def training_instance(self, step):
        i = step if self.mode == "stream" else step % self.pool_size
        return self.instance(i, "train")

    def pool(self, count, stream="eval"):
        return [self.instance(i, stream) for i in range(count)]


@dataclass(frozen=True)
class TrainConfig:
    K: int = 10
    Kbar: int | None = None
    steps_per_stage: int = 200
    learning_rate: float = 0.05
    fd_step: float = 1e-3
    fd_step_abs: float = 1e-8
    grid_lo: float = 0.1
    grid_hi: float = 1.0
    grid_step: float = 0.1
    eval_pool_size: int = 20
    eta_init: float = 0.5
    eta_min: float = 1e-3
    eta_max: float = 1.5
    zeta_decay_init: float = 0.65
    zeta_percentile: float = 90.0
    max_log_step: float = 0.25
    ema: float = 0.9
    max_rejections: int = 10

    def __post_init__(self):
        if self.Kbar is None:
            object.__setattr__(self, "Kbar", self.K + 5)
        if self.K < 0:
            raise InvalidParameterError("K must be >= 0")
        if self.Kbar <= self.K:
            raise InvalidParameterError(f"Kbar ({self.Kbar}) must exceed K ({self.K})")
        for name in ("steps_per_stage", "learning_rate", "fd_step", "fd_step_abs", "grid_step",
                     "eval_pool_size", "eta_init", "eta_min", "max_log_step", "max_rejections"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if not 0 < self.grid_lo <= self.grid_hi <= 1:
            raise InvalidParameterError("grid must lie inside (0, 1]")
        if not self.eta_min <= self.eta_init <= self.eta_max:
            raise InvalidParameterError("eta_init outside [eta_min, eta_max]")

    def grid(self):
        n = int(round((self.grid_hi - self.grid_lo) / self.grid_step))
        return [round(self.grid_lo + i * self.grid_step, 10) for i in range(n + 1)]


@dataclass
class StageLoss:
    stage: int
    step: int
    loss: float


@dataclass
class Gradient:
    values: np.ndarray
    loss: float
    flagged: list = field(default_factory=list)


# -- forward passes --------------------------------------------------------------

def _pack(schedule, k):
    return np.array(list(schedule.zeta[:k + 1]) + list(schedule.eta[:k]), dtype=np.float64)


def _unpack(theta, k):
    return ParamSchedule.learned(theta[:k + 1], theta[k + 1:])


def _sq_error(state, truth):
    return factored_fro_dist(state.L, state.R, truth.Lstar, truth.Rstar) ** 2


def _layers(state, zetas, etas):
    for z, e in zip(zetas, etas):
        state = solver.lrmc_step(state, z, e)
    return state


def unrolled_states(instance, schedule, k):
    """States ``0..k`` of the unrolled solver, or ``None`` past a numerical failure."""
    states = []
    try:
        st = solver.initialize(instance.observed, instance.truth.rank, schedule.zeta[0])
        states.append(st)
        for j in range(1, k + 1):
            st = solver.lrmc_step(st, schedule.zeta[j], schedule.eta[j - 1])
            states.append(st)
    except NumericalFailureError:
        states += [None] * (k + 1 - len(states))
    return states


def stage_loss(instance, schedule, k):
    """``||L_k R_k^T - X*||_F^2`` after ``k`` unrolled layers (``inf`` on failure)."""
    st = unrolled_states(instance, schedule, k)[k]
    return math.inf if st is None else _sq_error(st, instance.truth)


def _fd_step(rel, abs_floor, v):
    return max(rel * abs(v), abs_floor)


def param_gradient(instance, schedule, k, fd_step=1e-3, fd_step_abs=1e-8, loss_fn=None):
    """Central-difference gradient of the stage-``k`` loss.

    Coordinates are ordered ``zeta_0..zeta_k, eta_1..eta_k``. A probe whose
    loss is not finite gives a zero coordinate, listed in ``flagged``.
    ``loss_fn(theta)`` replaces the unrolled forward pass when given.
    """
    theta = _pack(schedule, k)
    flagged = []
    grad = np.zeros_like(theta)
    if loss_fn is not None:
        base = float(loss_fn(theta))
        for c in range(theta.size):
            h = _fd_step(fd_step, fd_step_abs, theta[c])
            up, down = theta.copy(), theta.copy()
            up[c] += h
            down[c] -= h
            lu, ld = float(loss_fn(up)), float(loss_fn(down))
            if math.isfinite(lu) and math.isfinite(ld):
                grad[c] = (lu - ld) / (2 * h)
            else:
                flagged.append(c)
        return Gradient(grad, base, flagged)

    truth = instance.truth
    states = unrolled_states(instance, schedule, k)
    base = math.inf if states[k] is None else _sq_error(states[k], truth)
    zetas = list(schedule.zeta[:k + 1])
    etas = list(schedule.eta[:k])
    for c in range(theta.size):
        h = _fd_step(fd_step, fd_step_abs, theta[c])
        if c <= k:
            layer, which = c, "zeta"
        else:
            layer, which = c - k, "eta"
        vals = []
        for sgn in (1.0, -1.0):
            z, e = list(zetas), list(etas)
            if which == "zeta":
                z[layer] = max(z[layer] + sgn * h, 0.0)
            else:
                e[layer - 1] = e[layer - 1] + sgn * h
            vals.append((_probe(instance, states, z, e, layer, k), z[layer] if which == "zeta" else e[layer - 1]))
        (lu, xu), (ld, xd) = vals
        if math.isfinite(lu) and math.isfinite(ld) and xu != xd:
            grad[c] = (lu - ld) / (xu - xd)
        else:
            flagged.append(c)
    return Gradient(grad, base, flagged)


def _probe(instance, states, zetas, etas, layer, k):
    # layers before `layer` are unaffected by the perturbation: restart from the cached state
    try:
        if any(e <= 0 for e in etas):
            return math.inf
        if layer == 0:
            st = solver.initialize(instance.observed, instance.truth.rank, zetas[0])
        else:
            prev = states[layer - 1]
            if prev is None:
                return math.inf
            st = solver.lrmc_step(prev, zetas[layer], etas[layer - 1])
        st = _layers(st, zetas[layer + 1:k + 1], etas[layer:k])
    except NumericalFailureError:
        return math.inf
    loss = _sq_error(st, instance.truth)
    return loss if math.isfinite(loss) else math.inf


# -- phase one: layer-wise training ------------------------------------------------

def initial_schedule(instance, cfg):
    """Starting point before training: percentile threshold decayed geometrically, constant steps."""
    z0 = float(np.percentile(np.abs(instance.observed.values), cfg.zeta_percentile))
    zeta = [z0 * cfg.zeta_decay_init ** k for k in range(cfg.K + 1)]
    return ParamSchedule.learned(zeta, [cfg.eta_init] * cfg.K)


def _clamp(theta, k, cfg):
    theta = theta.copy()
    theta[:k + 1] = np.maximum(theta[:k + 1], 0.0)
    theta[k + 1:] = np.clip(theta[k + 1:], cfg.eta_min, cfg.eta_max)
    return theta


def _sgd_update(theta, grad, loss, lr, cfg):
    # descend log(loss) in log(theta): multiplicative steps, invariant to the loss scale
    floor = cfg.fd_step_abs
    pos = np.maximum(theta, floor)
    g_log = pos * grad / loss
    step = np.clip(-lr * g_log, -cfg.max_log_step, cfg.max_log_step)
    return pos * np.exp(step)


def layerwise_train(dist, cfg, history=None, init=None):
    """Curriculum training of a K-layer schedule; returns it without a tail.

    Stage ``k`` optimizes every parameter of layers ``0..k`` against the
    error after ``k`` layers. ``history`` (a list) receives StageLoss rows
    holding the exponentially averaged stage loss after each step.
    """
    K = cfg.K
    step_no = 0
    full = init if init is not None else initial_schedule(dist.training_instance(0), cfg)
    if full.K != K:
        raise InvalidParameterError(f"initial schedule has {full.K} layers, expected {K}")
    zeta = np.array(full.zeta)
    eta = np.array(full.eta)
    for k in range(K + 1):
        lr = cfg.learning_rate
        ema = None
        rejections = 0
        s = 0
        while s < cfg.steps_per_stage:
            inst = dist.training_instance(step_no)
            step_no += 1
            sched = ParamSchedule.learned(zeta[:k + 1], eta[:k])
            g = param_gradient(inst, sched, k, cfg.fd_step, cfg.fd_step_abs)
            theta = _pack(sched, k)
            ok = math.isfinite(g.loss) and g.loss > 0
            if ok:
                cand = _clamp(_sgd_update(theta, g.values, g.loss, lr, cfg), k, cfg)
                ok = math.isfinite(stage_loss(inst, _unpack(cand, k), k))
            elif math.isfinite(g.loss):
                cand = theta  # exact recovery: nothing to improve on this instance
                ok = True
            if not ok:
                rejections += 1
                lr *= 0.5
                log.debug("stage %d: rejected step, lr -> %g", k, lr)
                if rejections >= cfg.max_rejections:
                    raise TrainingDivergedError(
                        f"stage {k}: {rejections} consecutive non-finite steps "
                        f"(lr {lr:g}, zeta {zeta[:k + 1].tolist()}, eta {eta[:k].tolist()})")
                continue
            rejections = 0
            zeta[:k + 1] = cand[:k + 1]
            eta[:k] = cand[k + 1:]
            ema = g.loss if ema is None else cfg.ema * ema + (1 - cfg.ema) * g.loss
            if history is not None:
                history.append(StageLoss(k, s, ema))
            s += 1
        log.info("stage %d done: loss %.3e", k, ema)
    return ParamSchedule.learned(zeta, eta)


# -- phase two: tail grid search ----------------------------------------------------

def _floored(loss, truth):
    return max(loss, (LOSS_FLOOR_REL * truth.xstar_fro) ** 2)


def grid_search_rnn(fnn, dist, cfg, records=None, pool=None):
    """Pick ``(beta, phi)`` minimizing the mean error after ``Kbar`` layers.

    Every grid point is evaluated on the same pool. Losses below the
    machine-precision floor are treated as equal; ties go to the larger
    beta, then the larger phi. ``records`` (a list) receives
    ``(beta, phi, mean_loss)`` for every grid point.
    """
    K, Kbar = fnn.K, cfg.Kbar
    if Kbar <= K:
        raise InvalidParameterError(f"Kbar ({Kbar}) must exceed the schedule depth ({K})")
    pool = pool if pool is not None else dist.pool(cfg.eval_pool_size, "eval")
    # the first K layers do not depend on the tail
    heads = [unrolled_states(inst, fnn, K)[K] for inst in pool]
    grid = cfg.grid()
    best = None
    for beta in grid:
        for phi in grid:
            tail = fnn.with_rnn(beta, phi)
            params = [param_at(tail, k) for k in range(K + 1, Kbar + 1)]
            total = 0.0
            for inst, head in zip(pool, heads):
                if head is None:
                    total = math.inf
                    break
                try:
                    st = _layers(head, [z for z, _ in params], [e for _, e in params])
                except NumericalFailureError:
                    total = math.inf
                    break
                total += _floored(_sq_error(st, inst.truth), inst.truth)
            mean = total / len(pool)
            if not math.isfinite(mean):
                mean = math.inf
            if records is not None:
                records.append((beta, phi, mean))
            # grid is ascending, so ">=" hands ties to the larger beta / phi
            if math.isfinite(mean) and (best is None or mean <= best[2]):
                best = (beta, phi, mean)
    if best is None:
        raise SearchFailureError("every grid point produced a non-finite loss")
    return best[0], best[1]


def train(dist, cfg, history=None, records=None):
    """Both phases: layer-wise FNN training, then the tail search."""
    fnn = layerwise_train(dist, cfg, history)
    beta, phi = grid_search_rnn(fnn, dist, cfg, records)
    return fnn.with_rnn(beta, phi)


# -- evaluation --------------------------------------------------------------------

@dataclass
class EvalReport:
    mean_rel_err: float
    mean_iterations: float
    success_rate: float
    trials: int
    rel_errs: list = field(default_factory=list)
    iterations: list = field(default_factory=list)


def evaluate(schedule, pool, at_k=None, tol=1e-6, max_iters=solver.DEFAULT_MAX_ITERS):
    """Solve every pool instance to ``tol`` and aggregate.

    ``mean_rel_err`` is taken at iteration ``at_k`` when given (else at the
    stopping point); ``mean_iterations`` averages the converged runs only;
    runs that never reach ``tol`` count as failures.
    """
    rel, its, ok = [], [], 0
    for inst in pool:
        try:
            _, _, tr = solver.solve(inst.observed, inst.truth.rank, schedule,
                                    solver.StopRule.ground_truth(tol, max_iters), inst.truth)
            final = tr.records[-1].rel_err
            if final < tol:
                ok += 1
                its.append(tr.iterations)
            if at_k is not None:
                if tr.iterations >= at_k:
                    rel.append(tr.records[at_k].rel_err)
                else:
                    _, _, tk = solver.solve(inst.observed, inst.truth.rank, schedule,
                                            solver.StopRule.iterations(at_k), inst.truth)
                    rel.append(tk.records[-1].rel_err if tk.iterations == at_k else math.inf)
            else:
                rel.append(final)
        except NumericalFailureError:
            rel.append(math.inf)
    n = len(pool)
    return EvalReport(
        mean_rel_err=float(np.mean(rel)) if rel else math.nan,
        mean_iterations=float(np.mean(its)) if its else math.nan,
        success_rate=ok / n if n else math.nan,
        trials=n,
        rel_errs=rel,
        iterations=its,
    )
