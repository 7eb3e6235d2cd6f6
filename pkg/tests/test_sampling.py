import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beflow.errors import UsageError
from beflow.sampling import (boundary_faces, dump_samples, make_samples, mc_mean_boundary, mc_mean_interior,
                             mc_standard_error, sample_boundary, sample_interior)


def test_interior_points_strictly_inside():
    X = sample_interior(2, 5, seed=1)
    assert X.shape == (5, 2)
    assert np.all((X > 0) & (X < math.pi))


def test_interior_is_deterministic():
    assert np.array_equal(sample_interior(3, 20, 4), sample_interior(3, 20, 4))


def test_single_point_in_seven_dimensions():
    assert sample_interior(7, 1, 0).shape == (1, 7)


def test_zero_points_give_empty_cloud():
    assert sample_interior(2, 0, 0).shape == (0, 2)
    assert sample_boundary(2, 0, 0).shape == (0, 2)


def test_boundary_points_lie_on_a_face():
    X = sample_boundary(2, 4, seed=2)
    on_face = (X == 0.0) | (X == math.pi)
    assert np.all(on_face.sum(axis=1) >= 1)
    assert np.all((X >= 0) & (X <= math.pi))


def test_one_dimensional_boundary_is_the_endpoints():
    X = sample_boundary(1, 2, seed=3)
    assert set(np.ravel(X)) <= {0.0, math.pi}


@pytest.mark.parametrize("d", [2, 3, 5])
def test_face_frequencies_are_uniform(d):
    n = 10_000
    faces = boundary_faces(sample_boundary(d, n, seed=d))
    counts = np.bincount(faces, minlength=2 * d)
    p = 1.0 / (2 * d)
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_rejects_bad_dimension():
    with pytest.raises(UsageError):
        sample_interior(0, 3, 0)
    with pytest.raises(UsageError):
        sample_boundary(0, 3, 0)


@settings(max_examples=20, deadline=None)
@given(d=st.integers(1, 7), ni=st.integers(1, 50), nb=st.integers(1, 50), seed=st.integers(0, 2**32 - 1))
def test_sample_set_invariants(d, ni, nb, seed):
    S = make_samples(d, ni, nb, seed)
    assert S.n_total == ni + nb == S.all_points.shape[0]
    assert np.all((S.interior > 0) & (S.interior < math.pi))
    assert np.all(((S.boundary == 0) | (S.boundary == math.pi)).any(axis=1))
    assert S.vol_omega == pytest.approx(math.pi ** d)
    assert S.area_boundary == pytest.approx(2 * d * math.pi ** (d - 1))
    T = make_samples(d, ni, nb, seed)
    assert np.array_equal(S.interior, T.interior) and np.array_equal(S.boundary, T.boundary)


def test_interior_and_boundary_streams_are_independent():
    S = make_samples(2, 10, 10, 0)
    T = make_samples(2, 10, 20, 0)
    assert np.array_equal(S.interior, T.interior)


def test_mean_of_one_is_the_volume():
    S = make_samples(2, 100, 10, 0)
    assert mc_mean_interior(np.ones(100), S) == pytest.approx(math.pi ** 2, rel=1e-15)
    assert mc_mean_interior(np.zeros(100), S) == 0.0
    assert mc_mean_boundary(np.ones(10), S) == pytest.approx(4 * math.pi, rel=1e-15)


def test_integral_of_squared_sines():
    S = make_samples(2, 100_000, 10, 5)
    f = (np.sin(2 * S.interior[:, 0]) * np.sin(2 * S.interior[:, 1])) ** 2
    est = mc_mean_interior(f, S)
    assert abs(est - (math.pi / 2) ** 2) <= 3 * mc_standard_error(f, S.vol_omega)


def test_unbiased_on_a_linear_function():
    ests = [mc_mean_interior(S.interior[:, 0], S) for S in (make_samples(2, 500, 1, s) for s in range(200))]
    se = np.std(ests, ddof=1) / math.sqrt(len(ests))
    assert abs(np.mean(ests) - math.pi ** 3 / 2) <= 3 * se


def test_empty_or_mismatched_values_rejected():
    S = make_samples(2, 5, 3, 0)
    with pytest.raises(UsageError):
        mc_mean_interior([], S)
    with pytest.raises(UsageError):
        mc_mean_interior(np.ones(4), S)
    with pytest.raises(UsageError):
        mc_mean_boundary(np.ones(5), S)


def test_dump_writes_one_row_per_point(tmp_path):
    S = make_samples(3, 4, 2, 1)
    path = tmp_path / "pts.csv"
    dump_samples(S, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "kind,x1,x2,x3"
    assert len(lines) == 7
    assert [l.split(",")[0] for l in lines[1:]] == ["interior"] * 4 + ["boundary"] * 2
