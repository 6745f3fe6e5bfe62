import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evtlab.decay import (PAD, DecayKind, DecaySpec, GridCoords, decay_matrix_1d_axis, decay_matrix_2d,
                          decay_submatrix, distance_matrix, gamma_schedule, group_decay, head_decay_stack)

KINDS = list(DecayKind)


def test_gamma_schedule_values():
    assert gamma_schedule(3, 3) == [0.875, 0.9375, 0.96875]
    assert gamma_schedule(1, 7) == [0.9921875]
    g = gamma_schedule(16, 3)
    assert all(a < b for a, b in zip(g, g[1:])) and all(0 < x < 1 for x in g)
    with pytest.raises(ValueError):
        gamma_schedule(0)


def test_grid_coords_roundtrip():
    grid = GridCoords(3, 5)
    for n in range(grid.n_tokens):
        x, y = grid.position(n)
        assert grid.index(x, y) == n and 0 <= x < 5 and 0 <= y < 3
    assert grid.coords()[7].tolist() == [2.0, 1.0]


def test_distance_examples():
    assert distance_matrix(GridCoords(1, 2), "euclidean").tolist() == [[0, 1], [1, 0]]
    grid = GridCoords(2, 2)
    assert distance_matrix(grid, "manhattan")[0, 3] == 2.0
    assert distance_matrix(grid, "euclidean")[0, 3] == math.sqrt(2)
    corner = distance_matrix(GridCoords(3, 3), "minkowski", p=3.0)[0, 8]
    assert corner == pytest.approx(16 ** (1 / 3), rel=1e-15)
    assert corner == pytest.approx(2.5198, abs=1e-4)


def test_decay_examples():
    grid = GridCoords(2, 2)
    assert np.array_equal(decay_matrix_2d(grid, DecaySpec("none")), np.ones((4, 4)))
    assert decay_matrix_2d(GridCoords(1, 2), DecaySpec("euclidean", 0.875)).tolist() == [[1, 0.875], [0.875, 1]]
    e = decay_matrix_2d(grid, DecaySpec("euclidean", 0.875))[0, 3]
    assert e == 0.875 ** math.sqrt(2)
    assert e == pytest.approx(0.82792, abs=5e-6)


def test_rbf_formulas():
    grid = GridCoords(1, 4)
    r = np.abs(np.arange(4)[:, None] - np.arange(4)[None, :]).astype(float)
    s = 1.5
    g = decay_matrix_2d(grid, DecaySpec("gaussian_rbf", 0.875, rbf_scale=s))
    assert np.allclose(g, np.exp(-r ** 2 / (2 * s * s)), rtol=1e-15)
    mq = decay_matrix_2d(grid, DecaySpec("multiquadric_rbf", 0.875, rbf_scale=s))
    assert np.allclose(mq, 0.875 ** np.sqrt(1 + (r / s) ** 2), rtol=1e-15)
    imq = decay_matrix_2d(grid, DecaySpec("inverse_multiquadric_rbf", 0.875, rbf_scale=s))
    assert np.allclose(imq, 1 / np.sqrt(1 + (r / s) ** 2), rtol=1e-15)


def test_spec_validation():
    for bad in (dict(gamma=0.0), dict(gamma=1.0), dict(kind="minkowski", p=0.5), dict(rbf_scale=0.0)):
        args = {"kind": "euclidean", "gamma": 0.5, **bad}
        with pytest.raises(ValueError):
            DecaySpec(**args)
    with pytest.raises(ValueError):
        DecayKind.parse("chebyshev")


def test_axis_decay():
    assert decay_matrix_1d_axis(1, 0.5).tolist() == [[1.0]]
    assert decay_matrix_1d_axis(3, 0.5).tolist() == [[1, .5, .25], [.5, 1, .5], [.25, .5, 1]]
    assert np.array_equal(decay_matrix_1d_axis(7, 0.9375), decay_matrix_2d(GridCoords(1, 7), DecaySpec("euclidean", 0.9375)))


def test_submatrix():
    full = decay_matrix_2d(GridCoords(1, 8), DecaySpec("euclidean", 0.875))
    assert np.array_equal(decay_submatrix(full, range(8)), full)
    assert decay_submatrix(full, [0]).tolist() == [[1.0]]
    sub = decay_submatrix(full, [0, 2, 4, 6])
    d = np.abs(np.arange(0, 8, 2)[:, None] - np.arange(0, 8, 2)[None, :])
    assert np.array_equal(sub, 0.875 ** d.astype(float))
    padded = decay_submatrix(full, [1, 3, PAD])
    assert np.all(padded[2] == 0) and np.all(padded[:, 2] == 0) and padded[0, 1] == 0.875 ** 2
    with pytest.raises(IndexError):
        decay_submatrix(full, [0, 8])


@pytest.mark.parametrize("kind", KINDS)
def test_group_decay_agrees_with_submatrix(kind):
    grid = GridCoords(3, 4)
    spec = DecaySpec(kind, 0.9, p=3.0, rbf_scale=2.0)
    groups = np.array([[0, 5, 11, 2], [7, 1, PAD, PAD]])
    assert np.allclose(group_decay(grid, spec, groups), decay_submatrix(decay_matrix_2d(grid, spec), groups), rtol=1e-15)


def test_head_stack_uses_schedule():
    grid = GridCoords(2, 3)
    gammas = gamma_schedule(2)
    stack = head_decay_stack(grid, DecaySpec("manhattan", 0.5), tuple(gammas))
    assert stack.shape == (2, 6, 6)
    assert stack[1, 0, 5] == gammas[1] ** 3


def test_decay_matrix_is_cached_and_read_only():
    grid, spec = GridCoords(4, 4), DecaySpec("euclidean", 0.875)
    a = decay_matrix_2d(grid, spec)
    assert a is decay_matrix_2d(grid, spec)
    with pytest.raises(ValueError):
        a[0, 0] = 2.0


def test_rotational_symmetry_of_euclidean():
    grid = GridCoords(6, 6)
    c = grid.coords()
    sq = ((c[:, None] - c[None]) ** 2).sum(-1)
    E = decay_matrix_2d(grid, DecaySpec("euclidean", 0.9))
    for value in np.unique(sq):
        assert np.unique(E[sq == value]).size == 1


def test_manhattan_anisotropy_witness():
    grid = GridCoords(6, 6)
    a, b, c = grid.index(0, 0), grid.index(5, 0), grid.index(3, 4)
    eu = decay_matrix_2d(grid, DecaySpec("euclidean", 0.875))
    ma = decay_matrix_2d(grid, DecaySpec("manhattan", 0.875))
    assert eu[a, b] == eu[a, c]
    assert ma[a, b] != ma[a, c] and ma[a, b] > ma[a, c]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from(KINDS), st.floats(0.05, 0.995),
       st.floats(1.0, 4.0), st.floats(0.25, 4.0))
def test_decay_invariants(h, w, kind, gamma, p, scale):
    grid = GridCoords(h, w)
    spec = DecaySpec(kind, gamma, p, scale)
    E = decay_matrix_2d(grid, spec)
    assert np.array_equal(E, E.T)
    if kind is not DecayKind.MULTIQUADRIC_RBF:
        assert np.all(np.diag(E) == 1.0)
    dist = distance_matrix(grid, kind, p)
    if kind is not DecayKind.NONE:
        order = np.argsort(dist, axis=None)
        d, e = dist.reshape(-1)[order], E.reshape(-1)[order]
        closer = d[:-1] < d[1:]
        assert np.all(e[:-1][closer] > e[1:][closer])
    if kind.is_distance:
        assert np.all((E > 0) & (E <= 1))
    eu = decay_matrix_2d(grid, DecaySpec("euclidean", gamma))
    ma = decay_matrix_2d(grid, DecaySpec("manhattan", gamma))
    assert np.all(eu >= ma)
