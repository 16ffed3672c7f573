import numpy as np
import pytest
from hypothesis import given, strategies as st

from jointrecon import Grid, ProjectionStack, Volume, fit_detector, make_geometry
from jointrecon.errors import GeometryVolumeMismatch, ShapeMismatch
from jointrecon.projector import (Projector, back_project, forward_project, get_projector,
                                  residual_gradient, set_threads)
from oracles import central_difference, dense_system_matrix


def _geometry(grid, views=3, beam="cone", span=(-25, 25)):
    return fit_detector(grid, views, span, (600, 60), margin_px=1, beam=beam)


def test_zero_volume_projects_to_zero(small_grid, small_geometry):
    p = forward_project(small_grid.zeros(), small_geometry)
    assert not p.data.any()
    assert not back_project(ProjectionStack(np.zeros(p.data.shape), small_geometry), small_grid).data.any()


def test_parallel_slab_reads_its_thickness():
    # one vertical parallel view through a 3-voxel slab along z
    g = make_geometry(1, (-10, 10), (600, 60), ((12, 12), (1.0, 1.0)), beam="parallel")
    f = np.zeros((10, 10, 10))
    f[:, :, 4:7] = 1.0
    p = forward_project(Volume(f), g).data[0]
    inside = p[1:11, 1:11]
    np.testing.assert_allclose(inside, 3.0, rtol=1e-12)
    assert np.all(p[0, :] == 0) and np.all(p[:, 0] == 0)


@pytest.mark.parametrize("beam", ["cone", "parallel"])
def test_matches_dense_oracle(beam, rng):
    grid = Grid((6, 5, 4), (1.0, 1.5, 2.0))
    g = _geometry(grid, 2, beam, span=(-30, 20))
    A = dense_system_matrix(g, grid)
    P = get_projector(g, grid).matrix().toarray()
    assert np.abs(P - A).max() <= 1e-10 * np.abs(A).max()
    f = rng.standard_normal(grid.dims)
    np.testing.assert_allclose(forward_project(Volume(f, grid.spacing_mm), g).data.ravel(),
                               A @ f.ravel(order="F"), rtol=1e-10, atol=1e-10)


def test_impulse_backprojects_along_one_ray():
    grid = Grid((6, 6, 6))
    g = _geometry(grid, 1, "parallel", span=(-20, 20))
    A = dense_system_matrix(g, grid)
    ray = int(np.argmax(np.count_nonzero(A, axis=1)))
    p = np.zeros(A.shape[0])
    p[ray] = 1.0
    b = back_project(ProjectionStack(p, g), grid).flat()
    np.testing.assert_allclose(b, A[ray], atol=1e-12)
    assert np.count_nonzero(b) == np.count_nonzero(A[ray]) > 0


@given(seed=st.integers(0, 2**31 - 1))
def test_adjoint_dot_product(seed):
    rng = np.random.default_rng(seed)
    grid = Grid((16, 16, 16))
    g = _geometry(grid)
    A = get_projector(g, grid)
    f = rng.standard_normal(grid.size)
    p = rng.standard_normal(A.shape[0])
    Af = A.forward(f)
    assert abs(Af @ p - f @ A.adjoint(p)) <= 1e-10 * np.linalg.norm(Af) * np.linalg.norm(p)


@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    grid = Grid((8, 8, 8))
    A = get_projector(_geometry(grid), grid)
    f, h = rng.standard_normal((2, grid.size))
    lhs = A.forward(a * f + b * h)
    rhs = a * A.forward(f) + b * A.forward(h)
    scale = abs(a) * np.linalg.norm(A.forward(f)) + abs(b) * np.linalg.norm(A.forward(h)) + 1e-300
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * scale
    p, q = rng.standard_normal((2, A.shape[0]))
    lhs = A.adjoint(a * p + b * q)
    rhs = a * A.adjoint(p) + b * A.adjoint(q)
    scale = abs(a) * np.linalg.norm(A.adjoint(p)) + abs(b) * np.linalg.norm(A.adjoint(q)) + 1e-300
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * scale


def test_matrix_free_agrees_with_cached(rng):
    grid = Grid((9, 8, 7))
    g = _geometry(grid)
    cached, free = Projector(g, grid), Projector(g, grid, matrix_free=True)
    f = rng.standard_normal(grid.size)
    p = rng.standard_normal(cached.shape[0])
    np.testing.assert_allclose(free.forward(f), cached.forward(f), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(free.adjoint(p), cached.adjoint(p), rtol=1e-12, atol=1e-12)


def test_nonnegative_volume_gives_nonnegative_projections(rng):
    grid = Grid((10, 10, 10))
    p = forward_project(Volume(rng.random(grid.dims)), _geometry(grid))
    assert p.data.min() >= 0


def test_single_thread_is_bit_deterministic(rng):
    grid = Grid((10, 10, 10))
    g = _geometry(grid)
    f = Volume(rng.standard_normal(grid.dims))
    set_threads(1)
    a = Projector(g, grid, matrix_free=True)
    assert np.array_equal(a.forward(f.flat()), a.forward(f.flat()))
    p = a.forward(f.flat())
    assert np.array_equal(a.adjoint(p), a.adjoint(p))


def test_residual_gradient(rng):
    grid = Grid((12, 12, 12))
    g = _geometry(grid)
    A = get_projector(g, grid)
    f = Volume(rng.standard_normal(grid.dims))
    p = ProjectionStack(rng.standard_normal(A.shape[0]), g)
    r = residual_gradient(f, p)
    expected = back_project(ProjectionStack(forward_project(f, g).data - p.data, g), grid)
    assert np.array_equal(r.data, expected.data)
    zero = residual_gradient(grid.zeros(), p)
    np.testing.assert_allclose(zero.data, -back_project(p, grid).data, atol=1e-12)

    def objective(x):
        res = A.forward(x) - p.data.ravel()
        return 0.5 * res @ res

    idx = rng.choice(grid.size, 20, replace=False)
    x = f.flat()
    for i in idx:
        e = np.zeros(grid.size)
        e[i] = 1e-3
        fd = (objective(x + e) - objective(x - e)) / 2e-3
        assert fd == pytest.approx(r.flat()[i], rel=1e-5, abs=1e-8)


def test_consistent_data_gives_zero_gradient(rng):
    grid = Grid((8, 8, 8))
    g = _geometry(grid)
    f = Volume(rng.standard_normal(grid.dims))
    assert not residual_gradient(f, forward_project(f, g)).data.any()


def test_volume_outside_every_ray():
    far = Grid((4, 4, 4), (1.0, 1.0, 1.0), origin_mm=(500.0, 500.0, 0.0))
    g = make_geometry(1, (-1, 1), (600, 60), ((4, 4), (1.0, 1.0)), beam="parallel")
    with pytest.raises(GeometryVolumeMismatch):
        Projector(g, far)
    with pytest.raises(GeometryVolumeMismatch):
        Projector(g, far, matrix_free=True)


def test_wrong_sizes_rejected(small_grid, small_geometry):
    A = get_projector(small_geometry, small_grid)
    with pytest.raises(ShapeMismatch):
        A.forward(np.zeros(7))
    with pytest.raises(ShapeMismatch):
        A.adjoint(np.zeros(7))


def test_vectorised_oracle_matches_scalar_slab():
    from oracles import oracle_rays, segment_box_length
    grid = Grid((4, 3, 5), (1.5, 1.0, 0.75))
    g = _geometry(grid, views=2)
    D = dense_system_matrix(g, grid)
    lo = np.asarray(grid.bounds_mm[0])
    sp = np.asarray(grid.spacing_mm)
    rays = oracle_rays(g)
    rng = np.random.default_rng(0)
    hits = np.argwhere(D > 0)
    pairs = list(hits[rng.choice(len(hits), 30, replace=False)])
    pairs += list(zip(rng.integers(0, len(rays), 30), rng.integers(0, grid.size, 30)))
    for r, n in pairs:
        i, j, k = n % 4, (n // 4) % 3, n // 12
        blo = lo + sp * np.array([i, j, k])
        assert D[r, n] == pytest.approx(segment_box_length(*rays[r], blo, blo + sp), abs=1e-12)
