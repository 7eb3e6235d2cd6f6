"""Five-layer densely connected scalar network and its batched backprop.

Layer structure (m nodes per hidden layer, one output node)::

    S1 = W1 x + b1
    Sk = sigma(Wk S(k-1) + bk),   k = 2, 3, 4
    u  = W5 S4 + b5

with the leaky rectifier ``sigma(s) = max(0, s) + mu * min(0, s)``.

The batched kernel evaluates ``u`` and, optionally, the spatial gradient
``grad_x u`` at a whole point cloud by pushing the d input tangents through
the network alongside the primal values (forward mode), stacked into one
matrix per layer.  :meth:`Trace.vjp` then back-propagates adjoints of both
``u`` and ``grad_x u`` to the weights, which is what the Dirichlet-energy and
dual-norm losses need.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UsageError

N_LAYERS = 5
DEFAULT_MU = 0.03
# points per chunk in batched evaluation; sized so the stacked tangent
# buffers of one layer stay in cache
DEFAULT_CHUNK = 1024
# clouds above this size rebuild chunk caches during back-propagation
KEEP_LIMIT = 0


def leaky_relu(s, mu=DEFAULT_MU):
    """``max(0, s) + mu * min(0, s)``, elementwise for arrays."""
    if isinstance(s, np.ndarray):
        return np.where(s > 0, s, mu * s)
    return max(0.0, s) + mu * min(0.0, s)


def leaky_slope(s, mu=DEFAULT_MU):
    """Derivative of :func:`leaky_relu`; ``mu`` is used at ``s == 0``."""
    if isinstance(s, np.ndarray):
        return np.where(s > 0, 1.0, mu)
    return 1.0 if s > 0 else mu


@dataclass
class NetworkParams:
    """Weights ``W1..W5`` and biases ``b1..b5`` of one network.

    ``W1`` is m x d, ``W2..W4`` are m x m, ``W5`` is 1 x m, ``b1..b4`` have
    length m and ``b5`` is a 0-d array.  Entries may be floats or, for the
    scalar tape, object arrays of :class:`~beflow.autodiff.Var`.
    """

    weights: list
    biases: list
    mu: float = DEFAULT_MU

    def __post_init__(self):
        if len(self.weights) != N_LAYERS or len(self.biases) != N_LAYERS:
            raise UsageError("need exactly five weight matrices and five bias vectors")
        m, d = np.shape(self.weights[0])
        expected_w = [(m, d), (m, m), (m, m), (m, m), (1, m)]
        expected_b = [(m,), (m,), (m,), (m,), ()]
        for i, (W, shape) in enumerate(zip(self.weights, expected_w), 1):
            if np.shape(W) != shape:
                raise UsageError(f"W{i} has shape {np.shape(W)}, expected {shape}")
        for i, (b, shape) in enumerate(zip(self.biases, expected_b), 1):
            if np.shape(b) != shape:
                raise UsageError(f"b{i} has shape {np.shape(b)}, expected {shape}")
        if self.mu < 0:
            raise UsageError(f"leak coefficient must be >= 0, got {self.mu}")

    @property
    def d(self) -> int:
        return np.shape(self.weights[0])[1]

    @property
    def m(self) -> int:
        return np.shape(self.weights[0])[0]

    def arrays(self) -> list:
        """``[W1, b1, W2, b2, ..., W5, b5]``, the order used for flattening."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @classmethod
    def from_arrays(cls, arrays, mu=DEFAULT_MU) -> "NetworkParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), mu)

    def with_arrays(self, arrays) -> "NetworkParams":
        return NetworkParams.from_arrays(arrays, self.mu)

    def copy(self) -> "NetworkParams":
        return self.with_arrays([np.array(a, copy=True) for a in self.arrays()])

    @property
    def size(self) -> int:
        return sum(np.size(a) for a in self.arrays())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(np.asarray(a, dtype=float)) for a in self.arrays()])

    def from_vector(self, vec) -> "NetworkParams":
        """Same shapes as ``self``, entries taken from a flat vector."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise UsageError(f"vector has shape {vec.shape}, expected ({self.size},)")
        out, pos = [], 0
        for a in self.arrays():
            n = np.size(a)
            out.append(vec[pos:pos + n].reshape(np.shape(a)))
            pos += n
        return self.with_arrays(out)

    def zeros_like(self) -> "NetworkParams":
        return self.with_arrays([np.zeros(np.shape(a)) for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def scaled_output(self, c: float) -> "NetworkParams":
        """Network computing ``c * u(x)``: W5 and b5 multiplied by ``c``."""
        arrays = [np.array(a, copy=True) for a in self.arrays()]
        arrays[8] = arrays[8] * c
        arrays[9] = arrays[9] * c
        return self.with_arrays(arrays)

    def coordinate_index(self, kind: str, layer: int, row: int, col: int | None = None) -> int:
        """Flat index of ``W<layer>[row, col]`` or ``b<layer>[row]`` (1-based, as written).

        ``b5`` is addressed as row 1.
        """
        if not 1 <= layer <= N_LAYERS:
            raise UsageError(f"layer {layer} out of range 1..{N_LAYERS}")
        slot = 2 * (layer - 1) + (0 if kind == "W" else 1)
        arrays = self.arrays()
        offset = sum(np.size(a) for a in arrays[:slot])
        shape = np.shape(arrays[slot])
        if kind == "W":
            if col is None or not (1 <= row <= shape[0] and 1 <= col <= shape[1]):
                raise UsageError(f"W{layer}[{row},{col}] out of range for shape {shape}")
            return offset + (row - 1) * shape[1] + (col - 1)
        if kind != "b":
            raise UsageError(f"coordinate kind must be 'W' or 'b', got {kind!r}")
        n = shape[0] if shape else 1
        if col is not None or not 1 <= row <= n:
            raise UsageError(f"b{layer}[{row}] out of range for length {n}")
        return offset + row - 1


def init_params(d: int, m: int, mu: float = DEFAULT_MU, seed: int = 0) -> NetworkParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    if d < 1 or m < 1:
        raise UsageError(f"input dimension and width must be >= 1, got d={d}, m={m}")
    if mu < 0:
        raise UsageError(f"leak coefficient must be >= 0, got {mu}")
    rng = np.random.default_rng(seed)
    shapes = [(m, d), (m, m), (m, m), (m, m), (1, m)]
    weights = []
    for fan_out, fan_in in shapes:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
    biases = [np.zeros(m) for _ in range(4)] + [np.zeros(())]
    return NetworkParams(weights, biases, mu)


def _check_points(params: NetworkParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise UsageError(f"points have shape {X.shape}, network expects (n, {params.d})")
    return X


def forward(params: NetworkParams, x):
    """Network output at one point (returns float) or at an (n, d) array of points."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != params.d:
            raise UsageError(f"point has dimension {x.shape[0]}, network expects {params.d}")
        W1, W2, W3, W4, W5 = params.weights
        b1, b2, b3, b4, b5 = params.biases
        s = W1 @ x + b1
        for W, b in ((W2, b2), (W3, b3), (W4, b4)):
            s = leaky_relu(W @ s + b, params.mu)
        return float((W5 @ s)[0] + b5)
    return forward_trace(params, x).u


class Trace:
    """Batched forward pass over a point cloud.

    Attributes ``u`` (n,) and, when ``input_grad`` is set, ``G`` (n, d) hold
    the network values and spatial gradients.  No activations are retained;
    :meth:`vjp` recomputes them chunk by chunk, which keeps the working set
    small enough to stay in cache.
    """

    def __init__(self, params: NetworkParams, X, input_grad: bool = False, chunk: int = DEFAULT_CHUNK):
        self.params = params
        self.X = _check_points(params, X)
        self.input_grad = input_grad
        self.chunk = max(1, int(chunk))
        us, Gs = [], []
        for _, _, u, G, _ in iter_chunks(params, self.X, input_grad, self.chunk):
            us.append(u)
            Gs.append(G)
        self.u = np.concatenate(us)
        self.G = np.concatenate(Gs) if input_grad else None

    def vjp(self, du, dG=None) -> NetworkParams:
        """Gradient w.r.t. the weights of ``sum(du * u) + sum(dG * G)``."""
        du = np.asarray(du, dtype=float)
        if dG is not None and not self.input_grad:
            raise UsageError("trace was built without input gradients")
        total = None
        for lo, hi, _, _, cache in iter_chunks(self.params, self.X, self.input_grad, self.chunk):
            part = backward_chunk(self.params, cache, du[lo:hi], None if dG is None else dG[lo:hi])
            total = accumulate(total, part)
        return self.params.with_arrays(total)


def forward_trace(params: NetworkParams, X, input_grad: bool = False, chunk: int = DEFAULT_CHUNK) -> Trace:
    return Trace(params, X, input_grad, chunk)


def iter_chunks(params: NetworkParams, X, input_grad: bool = False, chunk: int = DEFAULT_CHUNK):
    """Yield ``(lo, hi, u, G, cache)`` for consecutive chunks of ``X``.

    ``cache`` feeds :func:`backward_chunk`.  Callers that consume each chunk
    before requesting the next get forward and backward passes on data that
    is still in cache.
    """
    X = _check_points(params, X)
    n = X.shape[0]
    chunk = max(1, int(chunk))
    if n == 0:
        u, G, cache = _forward_chunk(params, X, input_grad)
        yield 0, 0, u, G, cache
        return
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        u, G, cache = _forward_chunk(params, X[lo:hi], input_grad)
        yield lo, hi, u, G, cache


def accumulate(total, part):
    """Running sum of gradient array lists (``total`` may be None)."""
    if total is None:
        return [np.array(a, dtype=float) for a in part]
    for a, b in zip(total, part):
        a += b
    return total


def _forward_chunk(params, X, input_grad):
    # S1 is affine, so W2 S1 + b2 = (W2 W1) x + (W2 b1 + b2); the first
    # nonlinearity sees a single affine map of x.
    W1, W2, W3, W4, W5 = params.weights
    b1, b2, b3, b4, b5 = params.biases
    mu = params.mu
    n, d = X.shape
    A = W2 @ W1
    c = W2 @ b1 + b2
    a2 = X @ A.T + c
    D2 = np.where(a2 > 0, 1.0, mu)
    k = 1 + d if input_grad else 1
    H = np.empty((k, n, A.shape[0]))
    np.multiply(D2, a2, out=H[0])
    for j in range(1, k):
        np.multiply(D2, A[:, j - 1], out=H[j])
    layers = [(D2, H)]
    for W, b in ((W3, b3), (W4, b4)):
        Q = (H.reshape(k * n, -1) @ W.T).reshape(k, n, -1)
        Q[0] += b
        D = np.where(Q[0] > 0, 1.0, mu)
        Q *= D
        H = Q
        layers.append((D, H))
    O = (H.reshape(k * n, -1) @ W5[0]).reshape(k, n)
    u = O[0] + b5
    G = O[1:].T.copy() if input_grad else None
    return u, G, (X, A, layers)


def backward_chunk(params, cache, du=None, dG=None) -> list:
    """Weight gradient of ``sum(du * u) + sum(dG * G)`` over one chunk.

    The slopes of the leaky ReLU are piecewise constant, so adjoints of the
    value slot and of the tangent slots never mix.  Passing only ``du`` (or
    only ``dG``) back-propagates through that part alone, and the two partial
    results add up to the full gradient.
    """
    W1, W2, W3, W4, W5 = params.weights
    b1 = params.biases[0]
    X, A, layers = cache
    (D2, H2), (D3, H3), (D4, H4) = layers
    k, n, m = H4.shape
    if dG is not None and k == 1:
        raise UsageError("chunk was evaluated without input gradients")
    lo = 0 if du is not None else 1
    hi = k if dG is not None else 1
    s = hi - lo
    if s == 0:
        raise UsageError("backward pass needs du or dG")
    dO = np.empty((s, n))
    if du is not None:
        dO[0] = du
    if dG is not None:
        dO[1 - lo:] = dG.T
    zeros_b = np.zeros(m)
    gW5 = (dO.reshape(-1) @ H4[lo:hi].reshape(s * n, m))[None, :]
    gb5 = np.asarray(float(du.sum()) if du is not None else 0.0)
    # adjoint of the layer-4 pre-activation (bias added on the value slot only)
    dQ = dO[:, :, None] * W5[0]
    dQ *= D4
    gW4 = dQ.reshape(s * n, m).T @ H3[lo:hi].reshape(s * n, m)
    gb4 = dQ[0].sum(axis=0) if lo == 0 else zeros_b
    dH = (dQ.reshape(s * n, m) @ W4).reshape(s, n, m)
    dH *= D3
    gW3 = dH.reshape(s * n, m).T @ H2[lo:hi].reshape(s * n, m)
    gb3 = dH[0].sum(axis=0) if lo == 0 else zeros_b.copy()
    dH = (dH.reshape(s * n, m) @ W3).reshape(s, n, m)
    # H2[0] = D2 * (X A^T + c), H2[j] = D2 * A[:, j-1]
    gA = np.zeros_like(A)
    gc = np.zeros(m)
    if lo == 0:
        da2 = dH[0] * D2
        gA += da2.T @ X
        gc += da2.sum(axis=0)
    for j in range(max(lo, 1), hi):
        gA[:, j - 1] += np.einsum("nm,nm->m", dH[j - lo], D2)
    gW2 = gA @ W1.T + np.outer(gc, b1)
    gW1 = W2.T @ gA
    gb1 = W2.T @ gc
    return [gW1, gb1, gW2, gc, gW3, gb3, gW4, gb4, gW5, gb5]


# -- checkpoint files -------------------------------------------------------

_HEADER = "# beflow-params v1"


def save_params(params: NetworkParams, path) -> None:
    """Write a textual checkpoint; values use repr() so loading is exact.

    Layout: a header line with shapes, one ``d m mu`` line, then
    ``W1 b1 ... W5 b5`` one array per line in row-major order.
    """
    path = Path(path)
    shapes = " ".join(
        f"{name}{i}={'x'.join(map(str, np.shape(a))) or '1'}"
        for i, (W, b) in enumerate(zip(params.weights, params.biases), 1)
        for name, a in (("W", W), ("b", b))
    )
    lines = [f"{_HEADER} {shapes}", f"{params.d} {params.m} {params.mu!r}"]
    for a in params.arrays():
        lines.append(" ".join(repr(float(v)) for v in np.ravel(a)))
    path.write_text("\n".join(lines) + "\n")


def load_params(path) -> NetworkParams:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(_HEADER):
        raise UsageError(f"{path}: not a parameter checkpoint")
    d_str, m_str, mu_str = lines[1].split()
    d, m, mu = int(d_str), int(m_str), float(mu_str)
    shapes = [(m, d), (m,), (m, m), (m,), (m, m), (m,), (m, m), (m,), (1, m), ()]
    rows = lines[2:]
    if len(rows) != len(shapes):
        raise UsageError(f"{path}: expected {len(shapes)} arrays, found {len(rows)}")
    arrays = []
    for row, shape in zip(rows, shapes):
        vals = np.array([float(v) for v in row.split()])
        if vals.size != int(np.prod(shape)):
            raise UsageError(f"{path}: array of shape {shape} has {vals.size} entries")
        arrays.append(vals.reshape(shape))
    return NetworkParams.from_arrays(arrays, mu)
