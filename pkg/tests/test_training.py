import math

import numpy as np
import pytest

from lrmc import solver, training
from lrmc.errors import InvalidParameterError, SearchFailureError
from lrmc.schedules import ParamSchedule, param_at
from lrmc.training import ProblemDistribution, TrainConfig


def small_cfg(**kw):
    base = dict(K=2, Kbar=4, steps_per_stage=6, eval_pool_size=3, grid_lo=0.8, grid_hi=1.0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_defaults():
    cfg = TrainConfig()
    assert cfg.K == 10 and cfg.Kbar == 15
    assert cfg.grid() == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    assert cfg.learning_rate == 0.05 and cfg.steps_per_stage == 200
    assert (cfg.fd_step, cfg.fd_step_abs) == (1e-3, 1e-8)


@pytest.mark.parametrize("kw", [dict(K=3, Kbar=3), dict(K=-1), dict(learning_rate=0), dict(grid_hi=1.5)])
def test_config_rejects(kw):
    with pytest.raises(InvalidParameterError):
        TrainConfig(**kw)


def test_distribution_streams_are_deterministic_and_distinct():
    d = ProblemDistribution(20, 20, 2, (0.5, 1.0), (0.0, 0.2), seed=4)
    a, b = d.instance(3), d.instance(3)
    assert a.observed.values.tobytes() == b.observed.values.tobytes()
    assert d.instance(3, "eval").truth.Lstar.tobytes() != a.truth.Lstar.tobytes()
    assert 0.5 <= a.observed.p <= 1.0 + 1e-12
    pooled = ProblemDistribution(20, 20, 2, 1.0, 0.1, seed=4, mode="pool", pool_size=3)
    assert pooled.training_instance(4).truth.Lstar.tobytes() == pooled.training_instance(1).truth.Lstar.tobytes()


# -- gradients -----------------------------------------------------------------

def test_fd_gradient_quadratic_self_check():
    sched = ParamSchedule.learned([0.7, 2.0, 3.5], [0.4, 1.3])
    g = training.param_gradient(None, sched, 2, loss_fn=lambda th: float(np.sum(th ** 2)))
    theta = np.array([0.7, 2.0, 3.5, 0.4, 1.3])
    np.testing.assert_allclose(g.values, 2 * theta, rtol=1e-6)
    assert g.flagged == []


def test_fd_gradient_flags_non_finite_probe():
    sched = ParamSchedule.learned([1.0, 1.0], [1.0])
    g = training.param_gradient(None, sched, 1, loss_fn=lambda th: math.inf if th[2] > 1.0 else 1.0)
    assert g.flagged == [2] and g.values[2] == 0.0


def test_gradient_flat_at_zero_residual():
    # clean, fully observed, exact rank: the spectral start is already exact
    inst = ProblemDistribution(15, 12, 2, 1.0, 0.0, seed=1).instance(0)
    sched = ParamSchedule.learned([1e6, 1e6], [0.5])
    g = training.param_gradient(inst, sched, 1)
    assert g.loss < 1e-20
    assert abs(g.values[2]) < 1e-15


def test_gradient_matches_direct_central_difference():
    inst = ProblemDistribution(20, 20, 2, 0.8, 0.1, seed=2).instance(0)
    sched = ParamSchedule.learned([3.0, 1.0, 0.4], [0.5, 0.6])
    g = training.param_gradient(inst, sched, 2)
    # recompute every coordinate by full forward passes from scratch
    theta = np.array([3.0, 1.0, 0.4, 0.5, 0.6])
    for c in range(theta.size):
        h = max(1e-3 * theta[c], 1e-8)
        up, dn = theta.copy(), theta.copy()
        up[c] += h
        dn[c] -= h
        lu = training.stage_loss(inst, ParamSchedule.learned(up[:3], up[3:]), 2)
        ld = training.stage_loss(inst, ParamSchedule.learned(dn[:3], dn[3:]), 2)
        assert g.values[c] == pytest.approx((lu - ld) / (2 * h), rel=1e-9, abs=1e-12)


def test_threshold_gradient_negative_below_oracle():
    inst = ProblemDistribution(10, 10, 1, 1.0, 0.2, seed=3).instance(0)
    t = inst.truth
    z0 = float(np.max(np.abs(t.xstar)))
    st0 = solver.initialize(inst.observed, 1, z0)
    oracle_z1 = float(np.max(np.abs(st0.L @ st0.R.T - t.xstar)))
    # far below the oracle the soft threshold eats the clean residual; raising it helps
    zs = [0.05 * oracle_z1, 0.1 * oracle_z1, 0.2 * oracle_z1]
    losses = [training.stage_loss(inst, ParamSchedule.learned([z0, z], [0.5]), 1) for z in zs]
    assert losses[0] > losses[1] > losses[2]
    g = training.param_gradient(inst, ParamSchedule.learned([z0, zs[1]], [0.5]), 1)
    assert g.values[1] < 0


# -- layer-wise training --------------------------------------------------------------

def test_k0_trains_only_initial_threshold():
    dist = ProblemDistribution(20, 20, 2, 1.0, 0.1, seed=0)
    s = training.layerwise_train(dist, small_cfg(K=0, Kbar=2, steps_per_stage=8))
    assert s.K == 0 and s.eta == () and s.rnn is None
    assert s.zeta[0] != training.initial_schedule(dist.training_instance(0), small_cfg(K=0, Kbar=2)).zeta[0]


def test_stage_never_touches_later_layers(monkeypatch):
    dist = ProblemDistribution(20, 20, 2, 1.0, 0.1, seed=0)
    cfg = small_cfg(K=3, Kbar=5, steps_per_stage=3)
    seen = []
    real = training.param_gradient

    def spy(inst, sched, k, *a, **kw):
        seen.append((k, sched.K))
        return real(inst, sched, k, *a, **kw)

    monkeypatch.setattr(training, "param_gradient", spy)
    out = training.layerwise_train(dist, cfg)
    assert all(k == depth for k, depth in seen)
    assert [k for k, _ in seen] == sorted(k for k, _ in seen)
    assert out.K == 3


def test_later_layers_keep_initial_values_until_their_stage(monkeypatch):
    dist = ProblemDistribution(20, 20, 2, 1.0, 0.1, seed=0)
    cfg3 = small_cfg(K=3, Kbar=5, steps_per_stage=4)
    init = training.initial_schedule(dist.training_instance(0), cfg3)
    calls = []
    real = training.param_gradient

    def spy(inst, sched, k, *a, **kw):
        calls.append((k, sched))
        return real(inst, sched, k, *a, **kw)

    monkeypatch.setattr(training, "param_gradient", spy)
    training.layerwise_train(dist, cfg3, init=init)
    first = {k: sched for k, sched in reversed(calls)}
    # the first gradient of stage k sees layer k exactly as initialized
    for k in range(1, 4):
        assert first[k].zeta[k] == init.zeta[k] and first[k].eta[k - 1] == init.eta[k - 1]
    # stages 0..1 do not depend on what layers 2..3 hold
    head = [c for c in calls if c[0] <= 1]
    calls.clear()
    training.layerwise_train(dist, small_cfg(K=1, Kbar=3, steps_per_stage=4), init=init.truncated(1))
    assert calls == head


def test_training_reproducible():
    dist = ProblemDistribution(20, 20, 2, 1.0, 0.1, seed=5)
    a = training.layerwise_train(dist, small_cfg())
    b = training.layerwise_train(dist, small_cfg())
    assert a == b


def test_clamps_respected():
    dist = ProblemDistribution(20, 20, 2, 1.0, 0.1, seed=5)
    s = training.layerwise_train(dist, small_cfg(eta_max=0.6, learning_rate=5.0, steps_per_stage=10))
    assert all(1e-3 <= e <= 0.6 for e in s.eta)
    assert all(z >= 0 for z in s.zeta)


def test_stage_loss_does_not_blow_up():
    hist = []
    training.layerwise_train(ProblemDistribution(seed=0), TrainConfig(K=3, Kbar=5, steps_per_stage=50), history=hist)
    for k in range(4):
        rows = [h.loss for h in hist if h.stage == k]
        assert len(rows) == 50
        assert rows[-1] <= 1.05 * rows[0]


@pytest.mark.xfail(strict=True, reason="thresholds trained without outliers stay high: the loss is flat "
                                       "once zeta exceeds every residual, so nothing pulls them down")
def test_clean_distribution_collapses_thresholds():
    cfg = TrainConfig(K=3, Kbar=6, steps_per_stage=60)
    clean = training.layerwise_train(ProblemDistribution(40, 40, 2, 1.0, 0.0, seed=0), cfg)
    dirty = training.layerwise_train(ProblemDistribution(40, 40, 2, 1.0, 0.1, seed=0), cfg)
    assert np.mean(clean.zeta[1:]) < np.mean(dirty.zeta[1:])


# -- grid search ------------------------------------------------------------------

def _enumerate(fnn, pool, Kbar, grid):
    """Brute-force oracle: full solver runs for every grid point."""
    out = {}
    for b in grid:
        for f in grid:
            tot = 0.0
            for inst in pool:
                fac, _, _ = solver.solve(inst.observed, inst.truth.rank, fnn.with_rnn(b, f),
                                         solver.StopRule.iterations(Kbar))
                err = np.linalg.norm(fac.L @ fac.R.T - inst.truth.xstar) ** 2
                tot += max(err, (training.LOSS_FLOOR_REL * inst.truth.xstar_fro) ** 2)
            out[(b, f)] = tot / len(pool)
    return out


def test_grid_search_argmin_matches_enumeration():
    dist = ProblemDistribution(25, 25, 2, 1.0, 0.1, seed=7)
    fnn = ParamSchedule.learned([5.0, 1.0, 0.3], [0.5, 0.6])
    cfg = TrainConfig(K=2, Kbar=5, grid_lo=0.5, grid_hi=0.7, eval_pool_size=3)
    rec = []
    beta, phi = training.grid_search_rnn(fnn, dist, cfg, records=rec)
    ref = _enumerate(fnn, dist.pool(3, "eval"), 5, cfg.grid())
    assert len(rec) == 9
    for b, f, m in rec:
        assert m == pytest.approx(ref[(b, f)], rel=1e-8)
    assert rec and all(dict(((b, f), m) for b, f, m in rec)[(beta, phi)] <= m for _, _, m in rec)
    best = min(ref.values())
    assert ref[(beta, phi)] == pytest.approx(best, rel=1e-8)


def test_grid_search_ties_go_to_slowest_decay():
    # clean exact-rank data: the spectral start is exact, every grid point sits at the floor
    dist = ProblemDistribution(20, 20, 2, 1.0, 0.0, seed=0)
    fnn = ParamSchedule.learned([1e6, 1e6], [0.5])
    cfg = TrainConfig(K=1, Kbar=4, eval_pool_size=2)
    rec = []
    assert training.grid_search_rnn(fnn, dist, cfg, records=rec) == (1.0, 1.0)
    assert len({m for _, _, m in rec}) == 1


def test_grid_search_all_failures(monkeypatch):
    dist = ProblemDistribution(10, 10, 2, 1.0, 0.1, seed=0)
    fnn = ParamSchedule.learned([1.0, 1.0], [0.5])
    cfg = TrainConfig(K=1, Kbar=3, eval_pool_size=1, grid_lo=0.9, grid_hi=1.0)
    monkeypatch.setattr(training, "_sq_error", lambda st, truth: math.inf)
    rec = []
    with pytest.raises(SearchFailureError):
        training.grid_search_rnn(fnn, dist, cfg, records=rec)
    assert len(rec) == 4 and all(m == math.inf for _, _, m in rec)


# -- evaluation -------------------------------------------------------------------

def test_evaluate_perfect_pool():
    pool = ProblemDistribution(20, 20, 2, 1.0, 0.0, seed=0).pool(3)
    rep = training.evaluate(ParamSchedule.fixed(1e6, 0.5), pool, tol=1e-8)
    assert rep.success_rate == 1.0 and rep.trials == 3
    assert rep.mean_iterations == 0.0


def test_evaluate_counts_failures():
    pool = ProblemDistribution(30, 30, 2, 1.0, 0.2, seed=0).pool(2)
    rep = training.evaluate(ParamSchedule.fixed(1e6, 0.5), pool, tol=1e-8, max_iters=5)
    assert rep.success_rate == 0.0 and math.isnan(rep.mean_iterations)
    assert len(rep.rel_errs) == 2


def test_evaluate_at_fixed_iteration():
    pool = ProblemDistribution(20, 20, 2, 1.0, 0.1, seed=0).pool(2)
    s = ParamSchedule.fixed(0.5, 0.5)
    rep = training.evaluate(s, pool, at_k=3, tol=1e-12, max_iters=10)
    ref = [solver.solve(i.observed, 2, s, solver.StopRule.iterations(3), i.truth)[2].records[-1].rel_err for i in pool]
    assert rep.mean_rel_err == pytest.approx(np.mean(ref), rel=1e-12)


def test_full_pipeline_tail_attached():
    dist = ProblemDistribution(20, 20, 2, 1.0, 0.1, seed=1)
    s = training.train(dist, small_cfg())
    assert s.K == 2 and s.rnn is not None
    assert s.beta in (0.8, 0.9, 1.0) and s.phi in (0.8, 0.9, 1.0)
    param_at(s, 50)
