"""Exact solution of the product-of-sines test problem and error metrics.

For ``u0(x) = prod_i sin(a_i x_i)`` on (0, pi)^d with ``kappa = 1 / sum(a_i^2)``
the heat equation is solved by ``u(t, x) = exp(-t) u0(x)``.  Nothing here
depends on the training code, so these functions serve as independent
oracles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .network import forward_trace


def kappa_of(a) -> float:
    """Diffusivity ``1 / sum(a_i^2)``."""
    s = sum(int(v) ** 2 for v in a)
    if s == 0:
        raise UsageError("frequency vector must not be all zero")
    return 1.0 / s


def _points(x, a):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != len(a):
        raise UsageError(f"points have dimension {X.shape[1]}, frequency vector has {len(a)}")
    return X, np.asarray(a, dtype=float), single


def exact_solution(t: float, x, a):
    """``exp(-t) * prod_i sin(a_i x_i)`` at one point or an (n, d) array."""
    X, a, single = _points(x, a)
    u = math.exp(-t) * np.prod(np.sin(a * X), axis=1)
    return float(u[0]) if single else u


def exact_gradient(t: float, x, a) -> np.ndarray:
    """Spatial gradient of :func:`exact_solution`, shape (n, d) (or (d,) for one point)."""
    X, a, single = _points(x, a)
    s = np.sin(a * X)
    c = a * np.cos(a * X)
    G = np.empty_like(X)
    for j in range(X.shape[1]):
        G[:, j] = c[:, j] * np.prod(np.delete(s, j, axis=1), axis=1)
    G *= math.exp(-t)
    return G[0] if single else G


def be_residual_integrand(t: float, x, a):
    """Pointwise integrand of the continuous functional at the exact solution.

    ``kappa/2 |grad u|^2 + phi*(-u_t) density + u_t u`` with the conjugate
    evaluated along its closed-form maximizer ``v = u``: since ``-u_t = u`` and
    ``u`` is a Laplace eigenfunction, ``(u, v) / |grad v|^2 = kappa``, so the
    conjugate contributes ``(1/2kappa) * kappa * u v = u^2 / 2``.  The terms do
    not cancel pointwise; only the integral over the cube is zero.
    """
    X, a_arr, single = _points(x, a)
    kappa = kappa_of(a)
    u = exact_solution(t, X, a)
    G = exact_gradient(t, X, a)
    u_t = -u
    w = -u_t
    v = u
    ratio = kappa  # closed form of (w, v) / |grad v|^2 for this eigenfunction
    conj = ratio * w * v / (2.0 * kappa)
    out = 0.5 * kappa * np.einsum("ij,ij->i", G, G) + conj + u_t * u
    return float(out[0]) if single else out


@dataclass
class Metrics:
    """Error quantities over the N_s sample points at one time level.

    ``rel_defined`` is False (and ``eps_rel_l2`` NaN) when the exact solution
    vanishes at every evaluation point.
    """

    mse: float
    eps_abs_linf: float
    eps_rel_l2: float
    rel_defined: bool = True


def metrics_from_values(exact, approx) -> Metrics:
    exact = np.asarray(exact, dtype=float)
    err = exact - np.asarray(approx, dtype=float)
    if err.size == 0:
        raise UsageError("no evaluation points")
    sq = float(err @ err)
    ref = float(exact @ exact)
    mse = sq / err.size
    eps_abs = float(np.max(np.abs(err)))
    if ref == 0.0:
        return Metrics(mse, eps_abs, math.nan, rel_defined=False)
    return Metrics(mse, eps_abs, math.sqrt(sq / ref))


def compute_metrics(u_params, t_n: float, samples, a) -> Metrics:
    """MSE, max error and relative L2 error of a network over all sample points."""
    if u_params.d != len(a):
        raise UsageError(f"network has d={u_params.d}, frequency vector has {len(a)} entries")
    X = samples.all_points
    return metrics_from_values(exact_solution(t_n, X, a), forward_trace(u_params, X).u)
