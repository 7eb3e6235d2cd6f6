"""Alternating primal-dual training over the time steps.

For each time step n the primal network starts from the previous solution
and K outer iterations alternate

1. a dual ascent on the penalized ratio with argument
   ``f - (u^{n,k-1} - u^{n-1}) / dt``, giving ``p_h^{n,k}``;
2. a primal descent on the per-step functional with that dual information.

The initial condition is obtained beforehand by a supervised fit.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import loss as L
from .autodiff import value_and_grad_wrt_params
from .errors import BeflowError, NumericalError, SolverAbort, UsageError
from .metrics_oracle import Metrics, compute_metrics, exact_solution
from .network import DEFAULT_CHUNK, DEFAULT_MU, NetworkParams, forward_trace, init_params, save_params
from .optimizer import AdamState, adam_step, lr_schedule
from .sampling import SampleSet, make_samples

log = logging.getLogger(__name__)

ENGINES = ("batched", "tape")
TERMINATIONS = ("iterations", "plateau")
METRIC_CLOUDS = ("training", "fresh")

LOG_COLUMNS = ("n", "k", "phi_total", "grad_term", "dual_term", "inertia_term", "boundary_term",
               "p_h", "alpha", "elapsed_s")
METRICS_COLUMNS = ("n", "t_n", "phi_n_final", "mse", "eps_abs_linf", "eps_rel_l2")
ITER_METRICS_COLUMNS = ("n", "k", "mse", "eps_abs_linf", "eps_rel_l2")


def default_sample_counts(d: int) -> tuple[int, int]:
    """Interior and boundary cloud sizes used for the reported experiments."""
    return (10_000 if d <= 2 else 100_000), 200 * d


def default_epochs_init(d: int) -> int:
    return 5_000 if d <= 3 else 50_000


@dataclass
class TrainerConfig:
    spec: L.ProblemSpec
    m_u: int = 60
    m_v: int = 30
    mu_u: float = DEFAULT_MU
    mu_v: float = DEFAULT_MU
    n_interior: int | None = None
    n_boundary: int | None = None
    epochs_init: int | None = None
    epochs_dual: int = 500
    epochs_primal: int = 50
    K_max: int = 200
    seed: int = 0
    dual_term_mode: str = "frozen_v"
    deterministic: bool = True
    resample_per_epoch: bool = False
    persist_adam_state: bool = False
    termination: str = "iterations"
    plateau_window: int = 10
    plateau_tol: float = 1e-3
    engine: str = "batched"
    chunk: int = DEFAULT_CHUNK
    metric_cadence: int = 0
    metrics_cloud: str = "training"

    def __post_init__(self):
        d = self.spec.d
        ni, nb = default_sample_counts(d)
        if self.n_interior is None:
            self.n_interior = ni
        if self.n_boundary is None:
            self.n_boundary = nb
        if self.epochs_init is None:
            self.epochs_init = default_epochs_init(d)
        for name in ("epochs_init", "epochs_dual", "epochs_primal", "K_max", "metric_cadence"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("m_u", "m_v", "n_interior", "plateau_window", "chunk"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_boundary < 1:
            raise UsageError("n_boundary must be >= 1")
        if self.dual_term_mode not in L.DUAL_MODES:
            raise UsageError(f"dual_term_mode must be one of {L.DUAL_MODES}")
        if self.engine not in ENGINES:
            raise UsageError(f"engine must be one of {ENGINES}")
        if self.termination not in TERMINATIONS:
            raise UsageError(f"termination must be one of {TERMINATIONS}")
        if self.metrics_cloud not in METRIC_CLOUDS:
            raise UsageError(f"metrics_cloud must be one of {METRIC_CLOUDS}")

    def seeds(self) -> dict:
        """Independent integer seeds for the sample cloud and both networks."""
        s = np.random.SeedSequence(self.seed).generate_state(4)
        return {"samples": int(s[0]), "u_init": int(s[1]), "v_init": int(s[2]), "stream": int(s[3])}


@dataclass
class IterationRecord:
    n: int
    k: int
    phi_total: float
    grad_term: float
    dual_term: float
    inertia_term: float
    boundary_term: float
    p_h: float
    alpha: float
    elapsed_s: float

    def row(self):
        return [self.n, self.k, self.phi_total, self.grad_term, self.dual_term, self.inertia_term,
                self.boundary_term, self.p_h, self.alpha, self.elapsed_s]


@dataclass
class StepMetrics:
    n: int
    t_n: float
    phi_n_final: float
    metrics: Metrics

    def row(self):
        m = self.metrics
        return [self.n, self.t_n, self.phi_n_final, m.mse, m.eps_abs_linf, m.eps_rel_l2]


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    step_metrics: list = field(default_factory=list)
    iter_metrics: list = field(default_factory=list)
    initial_fit_loss: float = math.nan
    dual_stats: list = field(default_factory=list)

    def records_for(self, n: int) -> list:
        return [r for r in self.records if r.n == n]

    def write_training_log(self, path) -> None:
        _write_csv(path, LOG_COLUMNS, (r.row() for r in self.records))

    def write_metrics(self, path) -> None:
        _write_csv(path, METRICS_COLUMNS, (s.row() for s in self.step_metrics))

    def write_iter_metrics(self, path) -> None:
        _write_csv(path, ITER_METRICS_COLUMNS, self.iter_metrics)


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(v)
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


# -- objective engines ----------------------------------------------------------

class BatchedEngine:
    """Vectorized losses with hand-derived gradients."""

    def __init__(self, chunk: int = DEFAULT_CHUNK):
        self.chunk = chunk

    def values(self, params, X):
        return forward_trace(params, X, chunk=self.chunk).u

    def supervised(self, params, target, samples):
        return L.supervised_loss_and_grad(params, target, samples, self.chunk)

    def dual(self, q, v_params, samples, spec):
        return L.dual_ratio_and_grad(q, v_params, samples, spec, self.chunk)

    def dual_value(self, q, v_params, samples, spec):
        return L.dual_ratio_value(q, v_params, samples, spec, self.chunk)

    def prepare_dual(self, dual, samples, spec):
        """Cache the frozen dual network's values for a fixed cloud."""
        if isinstance(dual, NetworkParams):
            return L.DualContext(dual, samples, spec, self.chunk)
        return dual

    def primal(self, w_params, u_prev, dual, samples, spec, t_n, need_grad=True):
        if isinstance(dual, NetworkParams):
            dual = L.DualContext(dual, samples, spec, self.chunk)
        return L.be_loss_and_grad(w_params, u_prev, dual, samples, spec, t_n, self.chunk, need_grad)


class TapeEngine:
    """Per-point scalar losses differentiated on the scalar tape; for small clouds."""

    def values(self, params, X):
        return forward_trace(params, X).u

    def supervised(self, params, target, samples):
        return value_and_grad_wrt_params(lambda p: L.supervised_loss(p, target, samples), params)

    def dual(self, q, v_params, samples, spec):
        return value_and_grad_wrt_params(lambda p: L.dual_ratio(q, p, samples, spec), v_params)

    def dual_value(self, q, v_params, samples, spec):
        return float(L.dual_ratio(q, v_params, samples, spec))

    def prepare_dual(self, dual, samples, spec):
        return dual

    def primal(self, w_params, u_prev, dual, samples, spec, t_n, need_grad=True):
        p_h = L.frozen_dual(dual, u_prev, samples, spec, t_n) if isinstance(dual, NetworkParams) else dual
        parts = {}

        def build(p):
            parts["b"] = L.be_loss(p, u_prev, p_h, samples, spec)
            return parts["b"].total

        if not need_grad:
            return L.be_loss(w_params, u_prev, p_h, samples, spec).values(), None
        _, grad = value_and_grad_wrt_params(build, w_params)
        return parts["b"].values(), grad


def make_engine(config: TrainerConfig):
    return BatchedEngine(config.chunk) if config.engine == "batched" else TapeEngine()


def _step(state: AdamState, params, grads, alpha):
    new_state, params = adam_step(state, params, grads, alpha)
    state.m, state.v, state.t = new_state.m, new_state.v, new_state.t
    return params


def _neg(grads: NetworkParams) -> NetworkParams:
    return grads.with_arrays([-a for a in grads.arrays()])


# -- the three optimization phases ---------------------------------------------

def initial_condition(spec: L.ProblemSpec):
    return lambda X: exact_solution(0.0, X, spec.a)


def fit_initial(config: TrainerConfig, samples: SampleSet, engine=None, log_obj: TrainingLog | None = None,
                cloud=None, target=None) -> NetworkParams:
    """Supervised fit of the initial condition with Adam at the initial-fit rate.

    ``target`` maps an (n, d) array of points to values; it defaults to the
    product-of-sines initial condition of the configured problem.
    """
    engine = engine or make_engine(config)
    params = init_params(config.spec.d, config.m_u, config.mu_u, config.seeds()["u_init"])
    u0 = target or initial_condition(config.spec)
    state = AdamState.zeros(params)
    alpha = lr_schedule("initial_fit")
    target = u0(samples.interior)
    value = math.nan
    for epoch in range(config.epochs_init):
        S = cloud(epoch) if cloud else samples
        if cloud:
            target = u0(S.interior)
        try:
            value, grad = engine.supervised(params, target, S)
            params = _step(state, params, grad, alpha)
        except NumericalError as exc:
            raise SolverAbort(f"initial fit failed: {exc}", n=0, epoch=epoch) from exc
    if config.epochs_init:
        value, _ = engine.supervised(params, target if not cloud else u0(samples.interior), samples)
        log.info("initial fit: %d epochs, final supervised loss %.6e", config.epochs_init, value)
    if log_obj is not None:
        log_obj.initial_fit_loss = value
    return params


def dual_max_step(v_params: NetworkParams, q_values, samples: SampleSet, spec: L.ProblemSpec, epochs_dual: int,
                  *, state: AdamState | None = None, engine=None, alpha: float | None = None,
                  history: list | None = None, cloud=None):
    """Adam ascent on the dual ratio over the dual weights.

    Returns the final weights and ``p_h``, the ratio evaluated at them.
    ``q_values`` is an array of dual-argument values at the interior points,
    or a callable producing them for a given cloud when points are resampled.
    """
    engine = engine or BatchedEngine()
    state = state if state is not None else AdamState.zeros(v_params)
    alpha = lr_schedule("dual_max") if alpha is None else alpha
    for epoch in range(epochs_dual):
        S = cloud(epoch) if cloud else samples
        q = q_values(S) if callable(q_values) else q_values
        value, grad = engine.dual(q, v_params, S, spec)
        if history is not None:
            history.append(value)
        v_params = _step(state, v_params, _neg(grad), alpha)
    q = q_values(samples) if callable(q_values) else q_values
    p_h = engine.dual_value(q, v_params, samples, spec)
    if history is not None:
        history.append(p_h)
    return v_params, p_h


def primal_min_step(w_params: NetworkParams, u_prev_values, dual, samples: SampleSet, spec: L.ProblemSpec,
                    k: int, epochs_primal: int, *, t_n: float | None = None, state: AdamState | None = None,
                    engine=None, cloud=None) -> NetworkParams:
    """Adam descent on the per-step functional at the scheduled rate for iteration ``k``.

    ``dual`` is a float ``p_h`` (constant dual term) or the frozen dual
    network, whose ratio then couples into the primal gradient.
    """
    engine = engine or BatchedEngine()
    state = state if state is not None else AdamState.zeros(w_params)
    alpha = lr_schedule("primal_min", k)
    t_n = spec.dt if t_n is None else t_n
    if cloud is None and epochs_primal:
        dual = engine.prepare_dual(dual, samples, spec)
    for epoch in range(epochs_primal):
        S = cloud(epoch) if cloud else samples
        u_prev = u_prev_values(S) if callable(u_prev_values) else u_prev_values
        _, grad = engine.primal(w_params, u_prev, dual, S, spec, t_n)
        w_params = _step(state, w_params, grad, alpha)
    return w_params


# -- the full solve -------------------------------------------------------------

class _Stopper:
    def __init__(self, config: TrainerConfig):
        self.config = config
        self.history: list[float] = []

    def done(self, k: int, phi: float | None) -> bool:
        """True once ``k`` iterations have completed and no more should run."""
        c = self.config
        if phi is not None:
            self.history.append(phi)
        if k >= c.K_max:
            return True
        if c.termination == "plateau" and len(self.history) > c.plateau_window:
            old = self.history[-1 - c.plateau_window]
            return abs(self.history[-1] - old) <= c.plateau_tol * max(abs(old), 1e-300)
        return False


def _threads(config: TrainerConfig):
    if not config.deterministic:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return nullcontext()
    return threadpool_limits(limits=1)


def build_samples(config: TrainerConfig) -> SampleSet:
    return make_samples(config.spec.d, config.n_interior, config.n_boundary, config.seeds()["samples"])


def solve(config: TrainerConfig, out_dir=None, samples: SampleSet | None = None):
    """Run the whole scheme; returns ``([u^0, ..., u^N], TrainingLog)``.

    With ``out_dir`` set, per-step checkpoints and the CSV logs are written
    there; on failure the partial logs are flushed before re-raising.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tlog = TrainingLog()
    with _threads(config):
        try:
            us = _solve(config, out, samples, tlog)
        except BeflowError as exc:
            if out is not None:
                _flush(tlog, out, config)
            if isinstance(exc, SolverAbort):
                raise
            raise SolverAbort(str(exc), n=getattr(exc, "n", None)) from exc
    if out is not None:
        _flush(tlog, out, config)
    return us, tlog


def _flush(tlog: TrainingLog, out: Path, config: TrainerConfig) -> None:
    tlog.write_training_log(out / "training_log.csv")
    tlog.write_metrics(out / "metrics.csv")
    if config.metric_cadence:
        tlog.write_iter_metrics(out / "training_metrics.csv")


def _solve(config: TrainerConfig, out: Path | None, samples: SampleSet | None, tlog: TrainingLog):
    spec = config.spec
    engine = make_engine(config)
    samples = samples or build_samples(config)
    seeds = config.seeds()
    start = time.perf_counter()

    def stream(*key):
        if not config.resample_per_epoch:
            return None
        return lambda epoch: make_samples(spec.d, config.n_interior, config.n_boundary,
                                          [seeds["stream"], *[hash_key(x) for x in key], epoch])

    metric_samples = samples
    if config.metrics_cloud == "fresh":
        metric_samples = make_samples(spec.d, config.n_interior, config.n_boundary, [seeds["stream"], 2**31 - 1])

    u = fit_initial(config, samples, engine, tlog, cloud=stream("init"))
    us = [u]
    tlog.step_metrics.append(StepMetrics(0, 0.0, math.nan, compute_metrics(u, 0.0, metric_samples, spec.a)))
    if out is not None:
        save_params(u, out / "u_step_0.params")

    v = init_params(spec.d, config.m_v, config.mu_v, seeds["v_init"])
    dual_state = AdamState.zeros(v)
    primal_state = AdamState.zeros(u)

    for n in range(1, spec.n_steps + 1):
        t_n = spec.t(n)
        u_prev = us[-1]
        u_prev_int = engine.values(u_prev, samples.interior)
        w = u_prev.copy()
        w_prev_iter = w
        stopper = _Stopper(config)
        k = 0
        p_h = 0.0
        done = stopper.done(0, None)
        while not done:
            k += 1
            try:
                if config.resample_per_epoch:
                    w_k = w

                    def q_fn(S, w_k=w_k):
                        return L.dual_argument_values(engine.values(w_k, S.interior),
                                                      engine.values(u_prev, S.interior), S, spec, t_n)
                    q = q_fn
                else:
                    q = L.dual_argument_values(engine.values(w, samples.interior), u_prev_int, samples, spec, t_n)
                history: list = []
                v, p_h = dual_max_step(
                    v, q, samples, spec, config.epochs_dual,
                    state=dual_state if config.persist_adam_state else None,
                    engine=engine, history=history, cloud=stream("dual", n, k))
                tlog.dual_stats.append(_ascent_stats(n, k, history))
                dual = v if config.dual_term_mode == "frozen_v" else p_h
                w_prev_iter = w
                u_prev_arg = (lambda S: engine.values(u_prev, S.interior)) if config.resample_per_epoch else u_prev_int
                w = primal_min_step(
                    w, u_prev_arg, dual, samples, spec, k, config.epochs_primal, t_n=t_n,
                    state=primal_state if config.persist_adam_state else None,
                    engine=engine, cloud=stream("primal", n, k))
                parts, _ = engine.primal(w, u_prev_int, p_h, samples, spec, t_n, need_grad=False)
            except BeflowError as exc:
                raise SolverAbort(f"{type(exc).__name__}: {exc}", n=n, k=k) from exc
            rec = IterationRecord(n, k, float(parts.total), float(parts.grad_term), float(parts.dual_term),
                                  float(parts.inertia_term), float(parts.boundary_term), float(p_h),
                                  lr_schedule("primal_min", k), time.perf_counter() - start)
            tlog.records.append(rec)
            if config.metric_cadence and k % config.metric_cadence == 0:
                m = compute_metrics(w, t_n, metric_samples, spec.a)
                tlog.iter_metrics.append([n, k, m.mse, m.eps_abs_linf, m.eps_rel_l2])
            if k == 1 or k % 10 == 0:
                log.info("n=%d k=%d phi=%.6e p_h=%.6e (%.0fs)", n, k, rec.phi_total, p_h, rec.elapsed_s)
            done = stopper.done(k, rec.phi_total)
        us.append(w)
        phi_final = tlog.records[-1].phi_total if k else math.nan
        tlog.step_metrics.append(StepMetrics(n, t_n, phi_final, compute_metrics(w, t_n, metric_samples, spec.a)))
        if out is not None:
            save_params(w, out / f"u_step_{n}.params")
            save_params(v, out / f"v_step_{n}.params")
            save_params(w_prev_iter, out / f"u_step_{n}_km1.params")
            (out / f"context_step_{n}.json").write_text(json.dumps({"n": n, "t_n": t_n, "k": k, "p_h": p_h}))
            _flush(tlog, out, config)
    return us


def hash_key(x) -> int:
    if isinstance(x, int):
        return x
    return sum(ord(c) * 31 ** i for i, c in enumerate(str(x))) % (2**32)


def _ascent_stats(n, k, history):
    """Fraction of dual epochs that did not decrease the ratio, plus start/end values."""
    if len(history) < 2:
        return {"n": n, "k": k, "start": math.nan, "end": math.nan, "nondecreasing": math.nan}
    diffs = np.diff(history)
    return {"n": n, "k": k, "start": history[0], "end": history[-1],
            "nondecreasing": float(np.mean(diffs >= 0))}
