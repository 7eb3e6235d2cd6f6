import csv
import math

import numpy as np
import pytest

from beflow import loss as L
from beflow.errors import SolverAbort, UsageError
from beflow.network import forward, init_params, load_params
from beflow.optimizer import lr_schedule
from beflow.sampling import make_samples
from beflow.trainer import (LOG_COLUMNS, METRICS_COLUMNS, TapeEngine, TrainerConfig, build_samples, dual_max_step,
                            fit_initial, primal_min_step, solve)



def tiny(**kw):
    spec = L.ProblemSpec(2, (2, 2), n_steps=kw.pop("n_steps", 2))
    base = dict(m_u=4, m_v=3, n_interior=40, n_boundary=12, epochs_init=3, epochs_dual=2, epochs_primal=2, K_max=2)
    base.update(kw)
    return TrainerConfig(spec, **base)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# -- configuration -----------------------------------------------------------------

def test_defaults_by_dimension():
    c2 = TrainerConfig(L.ProblemSpec(2, (2, 2)))
    assert (c2.m_v, c2.epochs_dual, c2.epochs_primal, c2.K_max) == (30, 500, 50, 200)
    assert c2.epochs_init == 5_000 and c2.n_interior == 10_000 and c2.n_boundary == 400
    c5 = TrainerConfig(L.ProblemSpec(5, (2, 2, 1, 2, 3)))
    assert c5.epochs_init == 50_000 and c5.n_interior == 100_000


@pytest.mark.parametrize("kw", [dict(K_max=-1), dict(epochs_dual=-1), dict(m_u=0), dict(engine="gpu"),
                                dict(dual_term_mode="other"), dict(termination="never")])
def test_config_validation(kw):
    with pytest.raises(UsageError):
        tiny(**kw)


def test_seeds_are_distinct_and_reproducible():
    s = tiny(seed=5).seeds()
    assert len(set(s.values())) == 4 and s == tiny(seed=5).seeds()


# -- initial fit -------------------------------------------------------------------

def test_fit_of_zero_target():
    cfg = TrainerConfig(L.ProblemSpec(2, (2, 2)), m_u=30, n_interior=500, n_boundary=8)
    assert cfg.epochs_init == 5_000
    S = build_samples(cfg)
    params = fit_initial(cfg, S, target=lambda X: np.zeros(len(X)))
    u = forward(params, S.interior)
    assert S.vol_omega * float(np.mean(u * u)) < 1e-6


def test_fit_without_epochs_returns_the_initialization():
    cfg = tiny(epochs_init=0)
    params = fit_initial(cfg, build_samples(cfg))
    ref = init_params(2, cfg.m_u, cfg.mu_u, cfg.seeds()["u_init"])
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), ref.arrays()))


def test_fit_is_deterministic():
    cfg = tiny(epochs_init=20)
    a = fit_initial(cfg, build_samples(cfg))
    b = fit_initial(cfg, build_samples(cfg))
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


def test_fit_reduces_the_supervised_loss():
    cfg = tiny(epochs_init=200, n_interior=200)
    S = build_samples(cfg)
    u0 = S.interior
    target = np.prod(np.sin(2 * u0), axis=1)
    start = float(L.supervised_loss_and_grad(init_params(2, cfg.m_u, cfg.mu_u, cfg.seeds()["u_init"]), target, S)[0])
    end = float(L.supervised_loss_and_grad(fit_initial(cfg, S), target, S)[0])
    assert end < start


# -- dual ascent -------------------------------------------------------------------

def test_zero_argument_gives_zero_dual_value():
    S = make_samples(2, 30, 10, 0)
    v = init_params(2, 3, seed=1)
    _, p_h = dual_max_step(v, np.zeros(30), S, L.ProblemSpec(2, (2, 2)), 5)
    assert p_h == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_dual_value_is_nonnegative_and_fresh(seed):
    S = make_samples(2, 30, 10, seed)
    spec = L.ProblemSpec(2, (2, 2))
    q = np.random.default_rng(seed).normal(size=30)
    history = []
    v, p_h = dual_max_step(init_params(2, 3, seed=seed), q, S, spec, 10, history=history)
    assert p_h >= 0.0
    assert len(history) == 11
    assert p_h == pytest.approx(float(L.dual_ratio(q, v, S, spec)), rel=1e-12)


def test_dual_ascent_does_not_lose_ground_on_average():
    S = make_samples(2, 200, 40, 3)
    spec = L.ProblemSpec(2, (2, 2))
    q = np.prod(np.sin(2 * S.interior), axis=1)
    history = []
    dual_max_step(init_params(2, 5, seed=4), q, S, spec, 200, history=history, alpha=1e-3)
    assert history[-1] > history[0]


# -- primal descent ----------------------------------------------------------------

def test_primal_without_epochs_is_identity():
    S = make_samples(2, 20, 8, 0)
    w = init_params(2, 4, seed=0)
    out = primal_min_step(w, np.zeros(20), 0.0, S, L.ProblemSpec(2, (2, 2)), 1, 0)
    assert all(np.array_equal(a, b) for a, b in zip(w.arrays(), out.arrays()))


def test_primal_descent_decreases_the_functional_for_most_seeds():
    spec = L.ProblemSpec(2, (2, 2))
    decreased = 0
    for seed in range(20):
        S = make_samples(2, 100, 20, seed)
        w = init_params(2, 5, seed=seed).scaled_output(0.1)
        u_prev = np.zeros(100)
        before = L.be_loss_and_grad(w, u_prev, 0.0, S, spec, spec.dt, need_grad=False)[0].total
        w = primal_min_step(w, u_prev, 0.0, S, spec, 1, 50)
        after = L.be_loss_and_grad(w, u_prev, 0.0, S, spec, spec.dt, need_grad=False)[0].total
        decreased += after < before
    assert decreased >= 18


def test_primal_rate_at_iteration_sixty():
    assert lr_schedule("primal_min", 60) == 1e-7


def test_both_engines_agree_on_a_primal_step():
    spec = L.ProblemSpec(2, (2, 2))
    S = make_samples(2, 9, 5, 2)
    w = init_params(2, 3, seed=1)
    v = init_params(2, 2, seed=2)
    u_prev = 0.05 * np.random.default_rng(0).normal(size=9)
    a = primal_min_step(w, u_prev, v, S, spec, 1, 3)
    b = primal_min_step(w, u_prev, v, S, spec, 1, 3, engine=TapeEngine())
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-15)


# -- the whole scheme --------------------------------------------------------------

def test_no_iterations_keeps_the_initial_fit():
    us, tlog = solve(tiny(K_max=0, n_steps=3))
    assert len(us) == 4 and not tlog.records
    for u in us[1:]:
        assert all(np.array_equal(a, b) for a, b in zip(u.arrays(), us[0].arrays()))


def test_no_time_steps():
    us, tlog = solve(tiny(n_steps=0))
    assert len(us) == 1 and len(tlog.step_metrics) == 1


def test_record_count_and_csv_schema(tmp_path):
    cfg = tiny(n_steps=3, K_max=2)
    us, tlog = solve(cfg, tmp_path)
    assert len(tlog.records) == 3 * 2
    assert [(r.n, r.k) for r in tlog.records] == [(n, k) for n in (1, 2, 3) for k in (1, 2)]
    log_rows = read_csv(tmp_path / "training_log.csv")
    assert tuple(log_rows[0]) == LOG_COLUMNS and len(log_rows) == 7
    met = read_csv(tmp_path / "metrics.csv")
    assert tuple(met[0]) == METRICS_COLUMNS and [r[0] for r in met[1:]] == ["0", "1", "2", "3"]
    for n in range(4):
        assert (tmp_path / f"u_step_{n}.params").exists()
    for r in tlog.records:
        assert r.phi_total == ((r.grad_term + r.dual_term) + r.inertia_term) + r.boundary_term
        assert r.alpha == lr_schedule("primal_min", r.k)


def test_warm_start(tmp_path):
    solve(tiny(n_steps=2, K_max=1), tmp_path)
    for n in (1, 2):
        start = load_params(tmp_path / f"u_step_{n}_km1.params")
        prev = load_params(tmp_path / f"u_step_{n - 1}.params")
        assert all(np.array_equal(a, b) for a, b in zip(start.arrays(), prev.arrays()))


def test_logged_dual_value_matches_the_returned_dual(tmp_path):
    cfg = tiny(n_steps=2, K_max=3)
    _, tlog = solve(cfg, tmp_path)
    S = build_samples(cfg)
    spec = cfg.spec
    for n in (1, 2):
        v = load_params(tmp_path / f"v_step_{n}.params")
        w = load_params(tmp_path / f"u_step_{n}_km1.params")
        prev = load_params(tmp_path / f"u_step_{n - 1}.params")
        q = L.dual_argument_values(forward(w, S.interior), forward(prev, S.interior), S, spec, spec.t(n))
        assert tlog.records_for(n)[-1].p_h == pytest.approx(float(L.dual_ratio(q, v, S, spec)), rel=1e-10)


def test_runs_are_bitwise_reproducible(tmp_path):
    cfg = tiny(n_steps=2, K_max=3, epochs_init=10)
    solve(cfg, tmp_path / "a")
    solve(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    a = read_csv(tmp_path / "a" / "training_log.csv")
    b = read_csv(tmp_path / "b" / "training_log.csv")
    assert [r[:-1] for r in a] == [r[:-1] for r in b]


def test_tape_engine_runs_the_scheme():
    us, tlog = solve(tiny(engine="tape", n_steps=1, K_max=1, n_interior=8, n_boundary=4))
    assert len(us) == 2 and len(tlog.records) == 1


def test_plateau_termination_stops_early():
    cfg = tiny(n_steps=1, K_max=30, termination="plateau", plateau_window=2, plateau_tol=1.0)
    _, tlog = solve(cfg)
    assert len(tlog.records) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_abort_keeps_the_partial_log(tmp_path):
    spec = L.ProblemSpec(2, (2, 2), n_steps=3, source=lambda t, X: np.full(len(X), math.nan if t > 1.5e-4 else 0.0))
    cfg = TrainerConfig(spec, m_u=4, m_v=3, n_interior=40, n_boundary=12, epochs_init=2, epochs_dual=2,
                        epochs_primal=2, K_max=2)
    with pytest.raises(SolverAbort) as info:
        solve(cfg, tmp_path)
    assert info.value.n == 2 and info.value.k == 1
    assert len(read_csv(tmp_path / "training_log.csv")) == 1 + 2
    assert len(read_csv(tmp_path / "metrics.csv")) == 1 + 2
