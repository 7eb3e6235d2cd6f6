"""Scalar-tape reverse-mode differentiation.

Every arithmetic step on a :class:`Var` appends one node to its
:class:`Tape`: the operation kind, the parent node indices and the local
partial derivatives.  :func:`backward` sweeps the tape once in reverse to
accumulate adjoints.

Losses that contain the spatial gradient of a network are handled by pushing
forward-mode tangents through the network with ordinary Var arithmetic
(:func:`input_gradient`), so the gradient components are themselves tape
nodes and can be differentiated again with respect to the weights.

The network code below is written against plain Python arithmetic, so the
same functions evaluate with floats or with Vars.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, NumericalError, UsageError
from .network import NetworkParams, leaky_relu, leaky_slope

# op kind -> replay function of (parent values, aux)
_REPLAY = {
    "input": lambda p, aux: aux,
    "const": lambda p, aux: aux,
    "add": lambda p, aux: p[0] + p[1],
    "add_const": lambda p, aux: p[0] + aux,
    "sub": lambda p, aux: p[0] - p[1],
    "rsub_const": lambda p, aux: aux - p[0],
    "mul": lambda p, aux: p[0] * p[1],
    "mul_const": lambda p, aux: p[0] * aux,
    "div": lambda p, aux: p[0] / p[1],
    "div_const": lambda p, aux: p[0] / aux,
    "rdiv_const": lambda p, aux: aux / p[0],
    "neg": lambda p, aux: -p[0],
    "square": lambda p, aux: p[0] * p[0],
    "sqrt": lambda p, aux: math.sqrt(p[0]),
    "leaky": lambda p, aux: max(0.0, p[0]) + aux * min(0.0, p[0]),
}


class Tape:
    """Append-only list of scalar nodes in topological order."""

    def __init__(self):
        self.kinds: list[str] = []
        self.parents: list[tuple] = []
        self.partials: list[tuple] = []
        self.values: list[float] = []
        self.aux: list = []

    def __len__(self):
        return len(self.values)

    def variable(self, value: float) -> "Var":
        """A new independent input."""
        return record("input", [], float(value), [], aux=float(value), tape=self)

    def constant(self, value: float) -> "Var":
        return record("const", [], float(value), [], aux=float(value), tape=self)

    def replay(self) -> list[float]:
        """Recompute every node value from the op kinds and parents."""
        out: list[float] = []
        for kind, parents, aux in zip(self.kinds, self.parents, self.aux):
            out.append(_REPLAY[kind]([out[p] for p in parents], aux))
        return out


class Var:
    """A scalar node on a tape."""

    __slots__ = ("tape", "index", "value")
    # make numpy scalars defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int, value: float):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Var({self.value!r}, node={self.index})"

    def _binary(self, other, kind, value, partials):
        return record(kind, [self, other], value, partials)

    def __add__(self, other):
        if isinstance(other, Var):
            return self._binary(other, "add", self.value + other.value, [1.0, 1.0])
        other = float(other)
        return record("add_const", [self], self.value + other, [1.0], aux=other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return self._binary(other, "sub", self.value - other.value, [1.0, -1.0])
        other = float(other)
        return record("add_const", [self], self.value + (-other), [1.0], aux=-other)

    def __rsub__(self, other):
        other = float(other)
        return record("rsub_const", [self], other - self.value, [-1.0], aux=other)

    def __mul__(self, other):
        if isinstance(other, Var):
            if other is self:
                return square(self)
            return self._binary(other, "mul", self.value * other.value, [other.value, self.value])
        other = float(other)
        return record("mul_const", [self], self.value * other, [other], aux=other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            if other.value == 0.0:
                raise DomainError("division by zero", node=len(self.tape))
            q = self.value / other.value
            return self._binary(other, "div", q, [1.0 / other.value, -q / other.value])
        other = float(other)
        if other == 0.0:
            raise DomainError("division by zero", node=len(self.tape))
        return record("div_const", [self], self.value / other, [1.0 / other], aux=other)

    def __rtruediv__(self, other):
        other = float(other)
        if self.value == 0.0:
            raise DomainError("division by zero", node=len(self.tape))
        q = other / self.value
        return record("rdiv_const", [self], q, [-q / self.value], aux=other)

    def __neg__(self):
        return record("neg", [self], -self.value, [-1.0])

    def __pos__(self):
        return self

    def __float__(self):
        return float(self.value)


def record(op_kind: str, inputs, value: float, partials, aux=None, tape: Tape | None = None) -> Var:
    """Append a node computed from ``inputs`` with the given local partials."""
    if len(inputs) != len(partials):
        raise UsageError(f"{op_kind}: {len(inputs)} inputs but {len(partials)} partials")
    if tape is None:
        if not inputs:
            raise UsageError(f"{op_kind}: leaf nodes need an explicit tape")
        tape = inputs[0].tape
    for v in inputs:
        if not isinstance(v, Var):
            raise UsageError(f"{op_kind}: inputs must be Vars, got {type(v).__name__}")
        if v.tape is not tape:
            raise UsageError(f"{op_kind}: inputs belong to different tapes")
    index = len(tape.values)
    tape.kinds.append(op_kind)
    tape.parents.append(tuple(v.index for v in inputs))
    tape.partials.append(tuple(float(p) for p in partials))
    tape.values.append(value)
    tape.aux.append(aux)
    return Var(tape, index, value)


def square(x):
    if isinstance(x, Var):
        return record("square", [x], x.value * x.value, [2.0 * x.value])
    return x * x


def sqrt(x):
    if isinstance(x, Var):
        if x.value < 0.0:
            raise DomainError(f"sqrt of negative value {x.value!r}", node=len(x.tape))
        r = math.sqrt(x.value)
        if r == 0.0:
            raise DomainError("sqrt is not differentiable at 0", node=len(x.tape))
        return record("sqrt", [x], r, [0.5 / r])
    if x < 0.0:
        raise DomainError(f"sqrt of negative value {x!r}")
    return math.sqrt(x)


def leaky(x, mu):
    """Leaky rectifier; the derivative at exactly 0 is taken as ``mu``."""
    if isinstance(x, Var):
        return record("leaky", [x], leaky_relu(x.value, mu), [leaky_slope(x.value, mu)], aux=mu)
    return leaky_relu(x, mu)


def value_of(x) -> float:
    return x.value if isinstance(x, Var) else float(x)


def backward(tape: Tape, output: Var) -> list[float]:
    """Adjoints d(output)/d(node) for every node on the tape."""
    if not isinstance(output, Var) or output.tape is not tape:
        raise UsageError("output does not belong to this tape")
    adj = [0.0] * len(tape.values)
    adj[output.index] = 1.0
    parents, partials = tape.parents, tape.partials
    for i in range(output.index, -1, -1):
        a = adj[i]
        if a == 0.0:
            continue
        for p, dp in zip(parents[i], partials[i]):
            adj[p] += a * dp
    return adj


# -- networks on the tape ----------------------------------------------------

def lift_params(params: NetworkParams, tape: Tape) -> NetworkParams:
    """Copy of ``params`` whose entries are independent tape inputs.

    Inputs are created in flattening order, so node ``i`` of a fresh tape is
    entry ``i`` of ``params.to_vector()``.
    """
    arrays = []
    for a in params.arrays():
        a = np.asarray(a, dtype=float)
        lifted = np.empty(a.shape, dtype=object)
        for idx in np.ndindex(a.shape):
            lifted[idx] = tape.variable(a[idx])
        arrays.append(lifted)
    return params.with_arrays(arrays)


def _affine(W, s, b):
    rows = []
    for i in range(W.shape[0]):
        acc = b[i]
        for j in range(W.shape[1]):
            acc = acc + W[i, j] * s[j]
        rows.append(acc)
    return rows


def _linear(W, s):
    rows = []
    for i in range(W.shape[0]):
        acc = W[i, 0] * s[0]
        for j in range(1, W.shape[1]):
            acc = acc + W[i, j] * s[j]
        rows.append(acc)
    return rows


def _check_dim(params: NetworkParams, x):
    x = [float(v) for v in x]
    if len(x) != params.d:
        raise UsageError(f"point has dimension {len(x)}, network expects {params.d}")
    return x


def scalar_forward(params: NetworkParams, x, tangents: bool = False):
    """Network output at one point using scalar arithmetic.

    With ``tangents`` set, also returns the list of partial derivatives
    ``du/dx_j`` propagated in forward mode.  Works for float params and for
    params lifted onto a tape.
    """
    x = _check_dim(params, x)
    W1, W2, W3, W4, W5 = params.weights
    b1, b2, b3, b4, b5 = params.biases
    mu = params.mu
    s = _affine(W1, x, b1)
    T = [[W1[i, j] for i in range(W1.shape[0])] for j in range(len(x))] if tangents else []
    for W, b in ((W2, b2), (W3, b3), (W4, b4)):
        a = _affine(W, s, b)
        slopes = [leaky_slope(value_of(ai), mu) for ai in a]
        s = [leaky(ai, mu) for ai in a]
        # the slope is piecewise constant in the weights, so it enters as a constant factor
        T = [[sl * ti for sl, ti in zip(slopes, _linear(W, t))] for t in T]
    u = _affine(W5, s, [b5[()]])[0]
    if not tangents:
        return u
    return u, [_linear(W5, t)[0] for t in T]


def input_gradient(params: NetworkParams, x, as_vars: bool = False):
    """Spatial gradient of the network output at ``x``.

    With ``as_vars`` set the components are tape nodes depending on the
    weights.  Float params are then lifted onto a fresh tape first (its first
    ``params.size`` nodes are the weights in flattening order); params that are
    already on a tape are used as they are.
    """
    on_tape = isinstance(params.weights[0].flat[0], Var)
    if as_vars and not on_tape:
        params = lift_params(params, Tape())
    _, grad = scalar_forward(params, x, tangents=True)
    if as_vars:
        return grad
    return [value_of(g) for g in grad]


def value_and_grad_wrt_params(loss_builder, params: NetworkParams):
    """``(loss value, gradient)`` of ``loss_builder(lifted params)`` on a fresh tape."""
    tape = Tape()
    lifted = lift_params(params, tape)
    out = loss_builder(lifted)
    if not isinstance(out, Var):
        if not math.isfinite(float(out)):
            raise NumericalError(f"loss is not finite: {out!r}")
        return float(out), params.zeros_like()
    if not math.isfinite(out.value):
        bad = next(i for i, v in enumerate(tape.values) if not math.isfinite(v))
        raise NumericalError(
            f"loss is not finite ({out.value!r}); first non-finite node {bad} ({tape.kinds[bad]})"
        )
    adj = backward(tape, out)
    return out.value, params.from_vector(np.asarray(adj[: params.size]))


def grad_wrt_params(loss_builder, params: NetworkParams) -> NetworkParams:
    """Reverse-mode gradient of ``loss_builder(lifted params)`` w.r.t. the weights."""
    return value_and_grad_wrt_params(loss_builder, params)[1]


# -- finite-difference checks -------------------------------------------------

def central_difference(f, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def relative_errors(approx, reference, floor: float = 1e-8) -> np.ndarray:
    """``|a - r| / max(|a|, |r|)`` on components with magnitude above ``floor``.

    Components where both are at most ``floor`` are reported as 0.
    """
    a = np.asarray(approx, dtype=float)
    r = np.asarray(reference, dtype=float)
    scale = np.maximum(np.abs(a), np.abs(r))
    out = np.zeros_like(scale)
    big = scale > floor
    out[big] = np.abs(a - r)[big] / scale[big]
    return out
