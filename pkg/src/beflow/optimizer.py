"""Adam and the learning-rate policies of the three training phases."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, UsageError
from .network import NetworkParams

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

PHASES = ("initial_fit", "dual_max", "primal_min")

# (upper bound on k, learning rate) for the primal minimization; last entry open-ended
PRIMAL_SCHEDULE = ((5, 1e-5), (50, 1e-6), (120, 1e-7), (140, 1e-8), (180, 1e-9), (math.inf, 1e-10))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def zeros(cls, params: NetworkParams) -> "AdamState":
        return cls([np.zeros(np.shape(a)) for a in params.arrays()],
                   [np.zeros(np.shape(a)) for a in params.arrays()])


def adam_step(state: AdamState, params: NetworkParams, grads: NetworkParams, alpha: float):
    """One Adam update; returns new ``(state, params)`` and leaves the inputs untouched."""
    if not alpha > 0:
        raise UsageError(f"learning rate must be > 0, got {alpha}")
    g_arrays = grads.arrays()
    p_arrays = params.arrays()
    if [np.shape(g) for g in g_arrays] != [np.shape(p) for p in p_arrays]:
        raise UsageError("gradient shapes do not match the parameters")
    for i, g in enumerate(g_arrays):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter array {i}; step not applied")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_p.append(p - alpha * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return AdamState(new_m, new_v, t, b1, b2, state.eps), params.with_arrays(new_p)


def lr_schedule(phase: str, k: int = 1) -> float:
    """Learning rate for a training phase; ``k`` is the outer iteration index (1-based)."""
    if phase == "initial_fit":
        return 1e-3
    if phase == "dual_max":
        return 1e-5
    if phase == "primal_min":
        if k < 1:
            raise UsageError(f"outer iteration index must be >= 1, got {k}")
        for upper, alpha in PRIMAL_SCHEDULE:
            if k <= upper:
                return alpha
    raise UsageError(f"unknown phase {phase!r}; expected one of {PHASES}")
