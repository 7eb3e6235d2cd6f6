"""Discrete Brezis-Ekeland objectives for the heat equation.

Two routes compute every loss:

* the *reference* functions (``dual_ratio``, ``be_loss``, ``supervised_loss``)
  use scalar arithmetic per sample point, so they run on floats or on tape
  :class:`~beflow.autodiff.Var` objects and can be differentiated by the
  scalar tape;
* the ``*_and_grad`` functions evaluate the same quantities on whole point
  clouds with the batched network kernel and return hand-derived gradients.
  Training uses these.

All integrals are Monte Carlo estimates that include the measures
``|Omega| = pi^d`` and ``|dOmega| = 2 d pi^(d-1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import scalar_forward, square, value_of
from .errors import DegenerateDualError, NumericalError, UsageError
from .metrics_oracle import kappa_of
from .network import NetworkParams, accumulate, backward_chunk, forward_trace, iter_chunks
from .sampling import SampleSet

DUAL_MODES = ("frozen_v", "constant_scalar")


def zero_source(t, X):
    return np.zeros(np.shape(X)[0])


@dataclass
class ProblemSpec:
    """Heat equation ``u_t - kappa Lap u = f`` on (0, pi)^d with ``u = 0`` on the boundary.

    ``kappa`` defaults to ``1 / sum(a_i^2)`` so that the product of sines
    with frequencies ``a`` decays like ``exp(-t)``.
    """

    d: int
    a: tuple
    lam: float = 100.0
    dt: float = 1e-4
    n_steps: int = 10
    kappa: float | None = None
    source: object = None
    T: float | None = None

    def __post_init__(self):
        self.a = tuple(int(v) for v in self.a)
        if self.d < 1 or len(self.a) != self.d:
            raise UsageError(f"frequency vector {self.a} does not match d={self.d}")
        if self.kappa is None:
            self.kappa = kappa_of(self.a)
        if self.source is None:
            self.source = zero_source
        if not self.kappa > 0:
            raise UsageError(f"kappa must be > 0, got {self.kappa}")
        if not self.lam > 0:
            raise UsageError(f"lambda must be > 0, got {self.lam}")
        if not self.dt > 0:
            raise UsageError(f"dt must be > 0, got {self.dt}")
        if self.n_steps < 0:
            raise UsageError(f"number of time steps must be >= 0, got {self.n_steps}")
        if self.T is None:
            self.T = self.n_steps * self.dt
        elif abs(self.n_steps * self.dt - self.T) > 1e-12:
            raise UsageError(f"N*dt = {self.n_steps * self.dt} does not match T = {self.T}")

    def t(self, n: int) -> float:
        return n * self.dt


def denominator_floor(spec: ProblemSpec, samples: SampleSet) -> float:
    return 1e-12 * (1.0 + spec.lam * samples.area_boundary)


@dataclass
class LossBreakdown:
    """The four additive terms of the per-step functional; ``total`` sums them in order."""

    grad_term: object
    dual_term: object
    inertia_term: object
    boundary_term: object
    total: object = None

    def __post_init__(self):
        if self.total is None:
            self.total = ((self.grad_term + self.dual_term) + self.inertia_term) + self.boundary_term

    def values(self) -> "LossBreakdown":
        """Same breakdown with tape nodes replaced by their float values."""
        return LossBreakdown(*(value_of(x) for x in
                               (self.grad_term, self.dual_term, self.inertia_term, self.boundary_term, self.total)))


def _check_finite(name: str, value) -> None:
    if not math.isfinite(value_of(value)):
        raise NumericalError(f"{name} is not finite ({value_of(value)!r})")


def dual_argument_values(w, u_prev_values, samples: SampleSet, spec: ProblemSpec, t_n: float) -> np.ndarray:
    """``f(t_n, x_i) - (w(x_i) - u_prev(x_i)) / dt`` at the interior points.

    ``w`` is a network or an array of its interior values.
    """
    if not spec.dt > 0:
        raise UsageError("time step must be > 0")
    if isinstance(w, NetworkParams):
        w = forward_trace(w, samples.interior).u
    w = np.asarray(w)
    u_prev_values = np.asarray(u_prev_values, dtype=float)
    if w.shape != (samples.n_interior,) or u_prev_values.shape != (samples.n_interior,):
        raise UsageError("w and u_prev must be given at the interior points")
    f = np.asarray(spec.source(t_n, samples.interior), dtype=float)
    return f - (w - u_prev_values) / spec.dt


# -- reference route ------------------------------------------------------------

def _sum(terms):
    acc = 0.0
    for t in terms:
        acc = acc + t
    return acc


def dual_ratio(w_values, v_params, samples: SampleSet, spec: ProblemSpec):
    """Penalized dual ratio ``(w, v)^2 / (2 kappa (|grad v|^2 + lam |v|^2_bdry))``.

    ``w_values`` are the values of the dual argument at the interior points.
    ``v_params`` is a network or, for analytic test functions, a callable
    ``x -> (v(x), [dv/dx_1, ..., dv/dx_d])``.
    """
    if len(w_values) != samples.n_interior:
        raise UsageError("w_values must be given at the interior points")
    if isinstance(v_params, NetworkParams):
        def field_at(x):
            return scalar_forward(v_params, x, tangents=True)
    else:
        field_at = v_params
    vol, area = samples.vol_omega, samples.area_boundary
    ni, nb = samples.n_interior, samples.n_boundary
    num_terms, grad_terms = [], []
    for w, x in zip(w_values, samples.interior):
        v, g = field_at(x)
        num_terms.append(w * v)
        grad_terms.append(_sum(square(gj) for gj in g))
    bnd_terms = [square(field_at(x)[0]) for x in samples.boundary]
    num = _sum(num_terms) * (vol / ni)
    den = _sum(grad_terms) * (vol / ni) + _sum(bnd_terms) * (spec.lam * area / nb)
    floor = denominator_floor(spec, samples)
    if value_of(den) <= floor:
        raise DegenerateDualError(f"dual network has penalized seminorm {value_of(den)!r} <= {floor!r}")
    return square(num) / (2.0 * spec.kappa * den)


def supervised_loss(w_params: NetworkParams, target_values, samples: SampleSet):
    """Monte Carlo estimate of ``||target - w||^2`` over the cube."""
    terms = [square(t - scalar_forward(w_params, x)) for t, x in zip(target_values, samples.interior)]
    return _sum(terms) * (samples.vol_omega / samples.n_interior)


def be_loss(w_params: NetworkParams, u_prev_values, p_h, samples: SampleSet, spec: ProblemSpec) -> LossBreakdown:
    """Per-step functional split into its four terms.

    ``u_prev_values`` are the previous step's values at the interior points.
    ``p_h`` is the dual value (float or tape node) or a callable mapping the
    interior values of ``w`` to it, which couples the dual term to ``w``.
    """
    vol, area = samples.vol_omega, samples.area_boundary
    ni, nb = samples.n_interior, samples.n_boundary
    w_int, grad_terms = [], []
    for x in samples.interior:
        w, g = scalar_forward(w_params, x, tangents=True)
        w_int.append(w)
        grad_terms.append(_sum(square(gj) for gj in g))
    grad_term = _sum(grad_terms) * (spec.kappa * spec.dt / 2.0 * vol / ni)
    p = p_h(w_int) if callable(p_h) else p_h
    dual_term = spec.dt * p
    inertia_term = _sum((w - u) * w for w, u in zip(w_int, u_prev_values)) * (vol / ni)
    boundary_term = _sum(square(scalar_forward(w_params, x)) for x in samples.boundary) * (spec.lam * area / nb)
    out = LossBreakdown(grad_term, dual_term, inertia_term, boundary_term)
    for name in ("grad_term", "dual_term", "inertia_term", "boundary_term"):
        _check_finite(name, getattr(out, name))
    return out


def frozen_dual(v_params: NetworkParams, u_prev_values, samples: SampleSet, spec: ProblemSpec, t_n: float):
    """Callable for :func:`be_loss` that evaluates the dual ratio at the current ``w`` with ``v`` fixed."""
    f = np.asarray(spec.source(t_n, samples.interior), dtype=float)

    def p_h(w_values):
        q = [fi - (w - u) / spec.dt for fi, w, u in zip(f, w_values, u_prev_values)]
        return dual_ratio(q, v_params, samples, spec)

    return p_h


# -- batched route --------------------------------------------------------------

class DualContext:
    """Interior values and penalized seminorm of a fixed dual network.

    The dual ratio is quadratic in its argument ``q`` once ``v`` is fixed,
    which is what the coupled primal step differentiates.
    """

    def __init__(self, v_params: NetworkParams, samples: SampleSet, spec: ProblemSpec, chunk=None):
        kw = {} if chunk is None else {"chunk": chunk}
        tr = forward_trace(v_params, samples.interior, input_grad=True, **kw)
        vb = forward_trace(v_params, samples.boundary, **kw).u if samples.n_boundary else np.zeros(0)
        self.spec = spec
        self.samples = samples
        self.v_int = tr.u
        self.v_bnd = vb
        self.grad_sq = np.einsum("ij,ij->i", tr.G, tr.G)
        vol, area = samples.vol_omega, samples.area_boundary
        self.den = vol * float(self.grad_sq.sum()) / samples.n_interior + (
            spec.lam * area * float(vb @ vb) / vb.size if vb.size else 0.0)
        floor = denominator_floor(spec, samples)
        if not self.den > floor:
            raise DegenerateDualError(f"dual network has penalized seminorm {self.den!r} <= {floor!r}")

    def numerator(self, q) -> float:
        return self.samples.vol_omega * float(np.dot(q, self.v_int)) / self.samples.n_interior

    def ratio(self, q) -> float:
        num = self.numerator(q)
        return num * num / (2.0 * self.spec.kappa * self.den)

    def ratio_grad_q(self, q) -> np.ndarray:
        num = self.numerator(q)
        return (num / (self.spec.kappa * self.den)) * (self.samples.vol_omega / self.samples.n_interior) * self.v_int


def dual_ratio_and_grad(q, v_params: NetworkParams, samples: SampleSet, spec: ProblemSpec, chunk=None):
    """Dual ratio for argument values ``q`` and its gradient w.r.t. the dual weights.

    The ratio depends on the point cloud only through the sums ``(q, v)``,
    ``sum |grad v|^2`` and ``sum v^2`` on the boundary, so one pass
    accumulates the sums together with their separate weight gradients and
    the chain rule is applied at the end.
    """
    kw = {} if chunk is None else {"chunk": chunk}
    q = np.asarray(q, dtype=float)
    vol, area = samples.vol_omega, samples.area_boundary
    ni, nb = samples.n_interior, samples.n_boundary
    if q.shape != (ni,):
        raise UsageError("dual argument must be given at the interior points")
    qv = gsq = bsq = 0.0
    g_num = g_grad = g_bnd = None
    for lo, hi, v, G, cache in iter_chunks(v_params, samples.interior, True, **kw):
        qv += float(q[lo:hi] @ v)
        gsq += float(np.einsum("ij,ij->", G, G))
        g_num = accumulate(g_num, backward_chunk(v_params, cache, du=q[lo:hi]))
        g_grad = accumulate(g_grad, backward_chunk(v_params, cache, dG=G))
    if nb:
        for _, _, vb, _, cache in iter_chunks(v_params, samples.boundary, False, **kw):
            bsq += float(vb @ vb)
            g_bnd = accumulate(g_bnd, backward_chunk(v_params, cache, du=vb))
    num = vol * qv / ni
    den = vol * gsq / ni + (spec.lam * area * bsq / nb if nb else 0.0)
    floor = denominator_floor(spec, samples)
    if not den > floor:
        raise DegenerateDualError(f"dual network has penalized seminorm {den!r} <= {floor!r}")
    R = num * num / (2.0 * spec.kappa * den)
    _check_finite("dual ratio", R)
    # g_grad and g_bnd hold half the gradients of their sums of squares
    c_num = num / (spec.kappa * den) * vol / ni
    c_den = -R / den
    grad = [c_num * a + (2.0 * c_den * vol / ni) * b for a, b in zip(g_num, g_grad)]
    if nb:
        grad = [a + (2.0 * c_den * spec.lam * area / nb) * b for a, b in zip(grad, g_bnd)]
    return R, v_params.with_arrays(grad)


def dual_ratio_value(q, v_params: NetworkParams, samples: SampleSet, spec: ProblemSpec, chunk=None) -> float:
    return DualContext(v_params, samples, spec, chunk).ratio(q)


def supervised_loss_and_grad(w_params: NetworkParams, target_values, samples: SampleSet, chunk=None):
    kw = {} if chunk is None else {"chunk": chunk}
    target = np.asarray(target_values, dtype=float)
    if target.shape != (samples.n_interior,):
        raise UsageError("targets must be given at the interior points")
    c = samples.vol_omega / samples.n_interior
    sq = 0.0
    grad = None
    for lo, hi, w, _, cache in iter_chunks(w_params, samples.interior, False, **kw):
        r = w - target[lo:hi]
        sq += float(r @ r)
        grad = accumulate(grad, backward_chunk(w_params, cache, du=(2.0 * c) * r))
    L = c * sq
    _check_finite("supervised loss", L)
    return L, w_params.with_arrays(grad)


def be_loss_and_grad(w_params: NetworkParams, u_prev_values, dual, samples: SampleSet, spec: ProblemSpec,
                     t_n: float, chunk=None, need_grad: bool = True):
    """Batched per-step functional and its gradient w.r.t. the primal weights.

    ``dual`` is either a float ``p_h`` (constant dual term, no gradient) or a
    :class:`DualContext`, in which case the dual term is the ratio evaluated
    at ``f - (w - u_prev)/dt`` with the dual network frozen.
    """
    kw = {} if chunk is None else {"chunk": chunk}
    vol, area = samples.vol_omega, samples.area_boundary
    ni, nb = samples.n_interior, samples.n_boundary
    u_prev_values = np.asarray(u_prev_values, dtype=float)
    if u_prev_values.shape != (ni,):
        raise UsageError("u_prev must be given at the interior points")
    coupled = isinstance(dual, DualContext)
    c_int = vol / ni
    c_grad = spec.kappa * spec.dt * c_int
    ws = []
    gsq = 0.0
    g_local = g_dual = None
    for lo, hi, w, G, cache in iter_chunks(w_params, samples.interior, True, **kw):
        ws.append(w)
        gsq += float(np.einsum("ij,ij->", G, G))
        if need_grad:
            du = (2.0 * c_int) * w - c_int * u_prev_values[lo:hi]
            g_local = accumulate(g_local, backward_chunk(w_params, cache, du, c_grad * G))
            if coupled:
                g_dual = accumulate(g_dual, backward_chunk(w_params, cache, du=dual.v_int[lo:hi]))
    w = np.concatenate(ws)
    bsq = 0.0
    if nb:
        for _, _, wb, _, cache in iter_chunks(w_params, samples.boundary, False, **kw):
            bsq += float(wb @ wb)
            if need_grad:
                g_local = accumulate(g_local, backward_chunk(w_params, cache, du=(2.0 * spec.lam * area / nb) * wb))
    grad_term = c_grad / 2.0 * gsq
    if coupled:
        q = dual_argument_values(w, u_prev_values, samples, spec, t_n)
        dual_term = spec.dt * dual.ratio(q)
    else:
        dual_term = spec.dt * float(dual)
    inertia_term = c_int * float((w - u_prev_values) @ w)
    boundary_term = spec.lam * area / nb * bsq if nb else 0.0
    out = LossBreakdown(grad_term, dual_term, inertia_term, boundary_term)
    for name in ("grad_term", "dual_term", "inertia_term", "boundary_term"):
        _check_finite(name, getattr(out, name))
    if not need_grad:
        return out, None
    if coupled:
        # d(dt * R(q(w)))/dw = dt * dR/dq * (-1/dt), and dR/dq is a multiple of v
        coef = dual.numerator(q) / (spec.kappa * dual.den) * vol / ni
        g_local = [a - coef * b for a, b in zip(g_local, g_dual)]
    return out, w_params.with_arrays(g_local)
