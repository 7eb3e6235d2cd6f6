"""Monte Carlo point clouds on the cube (0, pi)^d and its boundary."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UsageError

RNG_ALGORITHM = "PCG64"


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_interior(d: int, n: int, seed) -> np.ndarray:
    """``n`` i.i.d. uniform points with every coordinate strictly inside (0, pi)."""
    if d < 1:
        raise UsageError(f"dimension must be >= 1, got {d}")
    rng = make_rng(seed)
    X = math.pi * rng.random((n, d))
    bad = (X <= 0.0) | (X >= math.pi)
    while bad.any():
        X[bad] = math.pi * rng.random(int(bad.sum()))
        bad = (X <= 0.0) | (X >= math.pi)
    return X


def sample_boundary(d: int, n: int, seed) -> np.ndarray:
    """``n`` uniform points on the boundary of (0, pi)^d.

    A face is drawn uniformly among the 2d faces (all have area pi^(d-1)),
    the fixed coordinate is set to 0 or pi and the rest are uniform.
    """
    if d < 1:
        raise UsageError(f"dimension must be >= 1, got {d}")
    rng = make_rng(seed)
    faces = rng.integers(0, 2 * d, size=n)
    X = math.pi * rng.random((n, d))
    rows = np.arange(n)
    X[rows, faces // 2] = np.where(faces % 2 == 0, 0.0, math.pi)
    return X


def boundary_faces(X: np.ndarray) -> np.ndarray:
    """Face index (2 * axis + side) of each boundary point; first match wins."""
    on_lo = X == 0.0
    on_hi = X == math.pi
    faces = np.full(X.shape[0], -1)
    for axis in range(X.shape[1] - 1, -1, -1):
        faces[on_hi[:, axis]] = 2 * axis + 1
        faces[on_lo[:, axis]] = 2 * axis
    return faces


@dataclass(frozen=True)
class SampleSet:
    """Fixed interior and boundary point clouds plus the quadrature measures."""

    interior: np.ndarray
    boundary: np.ndarray
    d: int
    seed: object = None
    vol_omega: float = field(init=False)
    area_boundary: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "vol_omega", math.pi ** self.d)
        object.__setattr__(self, "area_boundary", 2 * self.d * math.pi ** (self.d - 1))

    @property
    def n_interior(self) -> int:
        return self.interior.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary.shape[0]

    @property
    def n_total(self) -> int:
        return self.n_interior + self.n_boundary

    @property
    def all_points(self) -> np.ndarray:
        return np.concatenate([self.interior, self.boundary])

    def integrate_interior(self, values) -> float:
        return mc_mean_interior(values, self)

    def integrate_boundary(self, values) -> float:
        return mc_mean_boundary(values, self)


def make_samples(d: int, n_interior: int, n_boundary: int, seed=0) -> SampleSet:
    """Sample set fully determined by ``(d, n_interior, n_boundary, seed)``."""
    s_int, s_bnd = np.random.SeedSequence(seed).spawn(2)
    return SampleSet(sample_interior(d, n_interior, s_int), sample_boundary(d, n_boundary, s_bnd), d, seed)


def _mean(values, expected: int, where: str) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise UsageError(f"cannot integrate over an empty {where} cloud")
    if values.shape != (expected,):
        raise UsageError(f"got {values.shape[0]} {where} values for {expected} points")
    return float(values.mean())


def mc_mean_interior(values, samples: SampleSet) -> float:
    """Estimate of the integral over the cube: ``|Omega| * mean(values)``."""
    return samples.vol_omega * _mean(values, samples.n_interior, "interior")


def mc_mean_boundary(values, samples: SampleSet) -> float:
    """Estimate of the surface integral: ``|dOmega| * mean(values)``."""
    return samples.area_boundary * _mean(values, samples.n_boundary, "boundary")


def mc_standard_error(values, measure: float) -> float:
    """Estimated standard error of ``measure * mean(values)``."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise UsageError("need at least two values for a standard error")
    return measure * float(values.std(ddof=1)) / math.sqrt(values.size)


def dump_samples(samples: SampleSet, path) -> None:
    """CSV with columns ``kind, x1, ..., xd``."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind"] + [f"x{i}" for i in range(1, samples.d + 1)])
        for kind, pts in (("interior", samples.interior), ("boundary", samples.boundary)):
            for p in pts:
                w.writerow([kind] + [repr(float(v)) for v in p])
