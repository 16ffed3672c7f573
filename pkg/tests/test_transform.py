import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jointrecon import Grid, Volume
from jointrecon.errors import DimensionTooSmall, InvalidParameter, OutOfDomain, ShapeMismatch
from jointrecon.transform import (AffineTransform, BSplineTransform, affine_build, bspline_basis,
                                  bspline_displacement, displacement_field, fdm_columns_dot,
                                  fdm_transform_derivative, image_gradient, registration_gradient,
                                  ssd, warp, warp_adjoint)
from oracles import (brute_force_warp, bspline_displacement_sum, central_difference,
                     dense_warp_matrix, trilinear)


def _smooth(dims, spacing=(1.0, 1.0, 1.0), width=0.25):
    g = Grid(dims, spacing)
    x, y, z = np.meshgrid(*g.axes_mm(), indexing="ij")
    r = np.array([n * s for n, s in zip(dims, spacing)]) * width
    data = np.exp(-((x - 0.6) / r[0]) ** 2 - ((y + 0.3) / r[1]) ** 2 - (z / r[2]) ** 2)
    return Volume(data, spacing)


def _random_affine(rng, size=0.08, shift=1.5):
    m = np.eye(3) + size * rng.standard_normal((3, 3))
    return AffineTransform(np.column_stack([m, shift * rng.standard_normal(3)]).ravel())


# --------------------------------------------------------------------------
# construction

def test_identity_build():
    assert affine_build((0, 0, 0), (0, 0, 0), (1, 1, 1), (0, 0, 0)).params == AffineTransform.identity().params


def test_ground_truth_matrix():
    t = affine_build((10, 0, -20), (0, -30, 0))
    m = t.matrix
    c = math.cos(math.radians(30))
    assert m[0, 0] == pytest.approx(c) and m[2, 2] == pytest.approx(c)
    assert m[0, 2] == pytest.approx(-0.5) and m[2, 0] == pytest.approx(0.5)
    assert (t.params[3], t.params[7], t.params[11]) == (10.0, 0.0, -20.0)


def test_pure_scale():
    np.testing.assert_array_equal(affine_build(scale=(2, 2, 2)).matrix[:, :3], 2 * np.eye(3))


def test_zero_scale_rejected():
    with pytest.raises(InvalidParameter):
        affine_build(scale=(1, 0, 1))


def test_affine_validation():
    with pytest.raises(InvalidParameter):
        AffineTransform((1.0,) * 11)
    with pytest.raises(InvalidParameter):
        AffineTransform((math.nan,) + (0.0,) * 11)


def test_affine_inverse_roundtrip(rng):
    t = _random_affine(rng)
    comp = t.inverse().inverse()
    np.testing.assert_allclose(comp.vector(), t.vector(), atol=1e-12)
    m = np.vstack([t.matrix, [0, 0, 0, 1]]) @ np.vstack([t.inverse().matrix, [0, 0, 0, 1]])
    np.testing.assert_allclose(m, np.eye(4), atol=1e-12)


# --------------------------------------------------------------------------
# warp

def test_identity_warp_is_exact(rng):
    f = Volume(rng.standard_normal((7, 6, 5)))
    assert np.array_equal(warp(f, AffineTransform.identity()).data, f.data)
    assert np.array_equal(warp_adjoint(f, AffineTransform.identity()).data, f.data)


def test_integer_translation_moves_impulse():
    data = np.zeros((9, 9, 9))
    data[4, 4, 4] = 1.0
    out = warp(Volume(data), affine_build((2, -1, 0))).data
    # pull convention: out(x) = f(x + d), so the impulse moves to v - d
    assert out[2, 5, 4] == pytest.approx(1.0)
    assert out.sum() == pytest.approx(1.0)


def test_constant_under_translation_pads_with_zero():
    out = warp(Volume(np.ones((6, 6, 6))), affine_build((2, 0, 0))).data
    np.testing.assert_allclose(out[:4], 1.0)
    np.testing.assert_allclose(out[4:], 0.0)
    back = warp_adjoint(Volume(np.ones((6, 6, 6))), affine_build((2, 0, 0))).data
    np.testing.assert_allclose(back[2:], 1.0)
    np.testing.assert_allclose(back[:2], 0.0)


def test_warp_matches_brute_force(rng):
    spacing = (1.0, 1.25, 0.8)
    f = rng.standard_normal((16, 16, 16))
    t = _random_affine(rng)
    m = t.matrix
    expected = brute_force_warp(f, spacing, lambda x: m[:, :3] @ x + m[:, 3])
    np.testing.assert_allclose(warp(Volume(f, spacing), t).data, expected, rtol=1e-12, atol=1e-12)


def test_bspline_warp_matches_brute_force(rng):
    grid = Grid((10, 9, 8), (1.0, 1.2, 0.9))
    t = BSplineTransform.for_grid(grid, (4, 4, 4))
    t = t.with_params(0.8 * rng.standard_normal(t.nparams))
    f = rng.standard_normal(grid.dims)

    def mapping(x):
        return x + bspline_displacement_sum(t.coefficients, t.lattice_origin_mm, t.control_spacing_mm, x)

    np.testing.assert_allclose(warp(Volume(f, grid.spacing_mm), t).data,
                               brute_force_warp(f, grid.spacing_mm, mapping), rtol=1e-11, atol=1e-11)


def test_adjoint_matches_dense_transpose(rng):
    dims, spacing = (4, 5, 3), (1.0, 1.0, 1.0)
    t = _random_affine(rng, 0.1, 0.7)
    m = t.matrix
    W = dense_warp_matrix(dims, spacing, lambda x: m[:, :3] @ x + m[:, 3])
    h = rng.standard_normal(dims)
    np.testing.assert_allclose(warp_adjoint(Volume(h, spacing), t).data.ravel(), W.T @ h.ravel(),
                               rtol=1e-12, atol=1e-12)


@given(seed=st.integers(0, 2**31 - 1), bspline=st.booleans())
def test_warp_adjoint_dot_product(seed, bspline):
    rng = np.random.default_rng(seed)
    grid = Grid((12, 12, 12))
    if bspline:
        t = BSplineTransform.for_grid(grid, (5, 5, 5))
        t = t.with_params(2.0 * rng.standard_normal(t.nparams))
    else:
        t = _random_affine(rng, 0.1, 2.0)
    f, h = (Volume(rng.standard_normal(grid.dims)) for _ in range(2))
    wf = warp(f, t).data
    lhs = float(np.sum(wf * h.data))
    rhs = float(np.sum(f.data * warp_adjoint(h, t).data))
    assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(wf) * np.linalg.norm(h.data) + 1e-300


@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_warp_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    f, h = rng.standard_normal((2, 8, 8, 8))
    t = _random_affine(rng)
    lhs = warp(Volume(a * f + b * h), t).data
    rhs = a * warp(Volume(f), t).data + b * warp(Volume(h), t).data
    assert np.abs(lhs - rhs).max() <= 1e-12 * (abs(a) + abs(b) + 1) * max(np.abs(f).max(), np.abs(h).max())


# --------------------------------------------------------------------------
# spatial gradient

def test_ramp_gradient():
    g = Grid((8, 7, 6), (0.5, 1.0, 2.0))
    x = np.meshgrid(*g.axes_mm(), indexing="ij")[0]
    gx, gy, gz = image_gradient(Volume(2 * x, g.spacing_mm))
    np.testing.assert_allclose(gx.data, 2.0)
    np.testing.assert_allclose(gy.data, 0.0, atol=1e-12)
    np.testing.assert_allclose(gz.data, 0.0, atol=1e-12)


def test_constant_gradient_is_zero():
    assert all(not g.data.any() for g in image_gradient(Volume(np.full((4, 4, 4), 3.0))))


def test_gradient_matches_interpolant_slopes(rng):
    f = rng.standard_normal((8, 8, 8))
    grads = image_gradient(Volume(f))
    for idx in [(3, 4, 2), (1, 1, 1), (6, 2, 5)]:
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = 1.0
            q = np.array(idx, dtype=float)
            # mean of the left and right slopes of the piecewise-linear interpolant
            left = trilinear(f, q) - trilinear(f, q - e)
            right = trilinear(f, q + e) - trilinear(f, q)
            assert grads[axis].data[idx] == pytest.approx(0.5 * (left + right), abs=1e-6)


def test_gradient_needs_two_voxels():
    with pytest.raises(DimensionTooSmall):
        image_gradient(Volume(np.zeros((1, 4, 4))))


# --------------------------------------------------------------------------
# registration gradient

def test_aligned_pair_has_zero_gradient():
    f = _smooth((10, 10, 10))
    assert not registration_gradient(f, f, AffineTransform.identity()).any()


def test_registration_gradient_affine_fd(rng):
    fixed = _smooth((12, 12, 12))
    moving = warp(fixed, _random_affine(rng, 0.05, 1.0))
    t = _random_affine(rng, 0.03, 0.5)
    g = registration_gradient(fixed, moving, t)
    fd = central_difference(lambda v: ssd(fixed, moving, t.with_params(v)), t.vector(), 1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-4 * np.abs(fd).max())


def test_registration_gradient_bspline_fd(rng):
    grid = Grid((12, 12, 12))
    fixed = _smooth(grid.dims)
    t = BSplineTransform.for_grid(grid, (4, 4, 4))
    moving = warp(fixed, t.with_params(0.5 * rng.standard_normal(t.nparams)))
    t = t.with_params(0.2 * rng.standard_normal(t.nparams))
    g = registration_gradient(fixed, moving, t)
    fd = central_difference(lambda v: ssd(fixed, moving, t.with_params(v)), t.vector(), 1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-4 * np.abs(fd).max())


def test_x_shift_dominates_gradient():
    fixed = _smooth((14, 14, 14))
    moving = warp(fixed, affine_build((1.5, 0, 0)))
    g = registration_gradient(fixed, moving, AffineTransform.identity())
    assert int(np.argmax(np.abs(g))) == 3


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        registration_gradient(Volume(np.zeros((4, 4, 4))), Volume(np.zeros((4, 4, 5))), AffineTransform())


# --------------------------------------------------------------------------
# finite-difference transform derivative

def test_fdm_constant_volume_translation_is_zero():
    f = Volume(np.full((8, 8, 8), 5.0))
    t = affine_build((0.3, 0, 0))
    for i in (3, 7, 11):
        d = fdm_transform_derivative(f, t, i).data
        assert np.abs(d[2:-2, 2:-2, 2:-2]).max() <= 1e-8


def test_fdm_ramp_translation():
    g = Grid((10, 10, 10))
    x = np.meshgrid(*g.axes_mm(), indexing="ij")[0]
    d = fdm_transform_derivative(Volume(2 * x), affine_build((0.25, 0, 0)), 3).data
    # d/dt f(x + t) = +2 for f = 2x
    np.testing.assert_allclose(d[1:-2], 2.0, rtol=1e-9)


def test_fdm_matches_analytic_pathway(rng):
    fixed = _smooth((10, 10, 10))
    moving = warp(fixed, _random_affine(rng, 0.05, 0.8))
    t = _random_affine(rng, 0.02, 0.3)
    resid = warp(moving, t).with_data(warp(moving, t).data - fixed.data)
    g_fdm = fdm_columns_dot(moving, t, resid, 1e-5)
    g = registration_gradient(fixed, moving, t)
    np.testing.assert_allclose(g_fdm, g, rtol=1e-5, atol=1e-5 * np.abs(g).max())


@pytest.mark.parametrize("kind", ["affine", "bspline"])
def test_batched_fdm_equals_per_parameter(kind, rng):
    grid = Grid((9, 8, 7))
    f = Volume(rng.standard_normal(grid.dims))
    w = Volume(rng.standard_normal(grid.dims))
    if kind == "affine":
        t = _random_affine(rng, 0.05, 0.7)
    else:
        t = BSplineTransform.for_grid(grid, (4, 4, 4))
        t = t.with_params(0.5 * rng.standard_normal(t.nparams))
    batched = fdm_columns_dot(f, t, w)
    literal = np.array([np.sum(fdm_transform_derivative(f, t, i).data * w.data) for i in range(t.nparams)])
    np.testing.assert_allclose(batched, literal, rtol=1e-10, atol=1e-10 * np.abs(literal).max())


def test_fdm_argument_checks():
    f = Volume(np.zeros((4, 4, 4)))
    with pytest.raises(InvalidParameter):
        fdm_transform_derivative(f, AffineTransform(), 12)
    with pytest.raises(InvalidParameter):
        fdm_transform_derivative(f, AffineTransform(), 0, epsilon=0)


# --------------------------------------------------------------------------
# B-spline model

def test_zero_coefficients_give_zero_displacement():
    t = BSplineTransform.for_grid(Grid((10, 10, 10)))
    assert t.is_identity()
    np.testing.assert_array_equal(bspline_displacement(t, (0.5, -1.0, 2.0)), 0.0)


def test_single_control_point_weight(rng):
    grid = Grid((13, 13, 13))
    t = BSplineTransform.for_grid(grid, (5, 5, 5))
    coef = np.zeros(t.coefficients.shape)
    offset = np.array([1.5, -2.0, 0.5])
    coef[3, 2, 4] = offset
    t = t.with_params(coef)
    at = np.asarray(t.lattice_origin_mm) + np.array([3, 2, 4]) * np.asarray(t.control_spacing_mm)
    np.testing.assert_allclose(bspline_displacement(t, at), offset * (2 / 3) ** 3, rtol=1e-12)
    p = at + rng.uniform(-1, 1, 3)
    np.testing.assert_allclose(bspline_displacement(t, p),
                               bspline_displacement_sum(t.coefficients, t.lattice_origin_mm,
                                                        t.control_spacing_mm, p), atol=1e-14)


def test_uniform_coefficients_translate():
    grid = Grid((11, 11, 11))
    t = BSplineTransform.for_grid(grid, (5, 5, 5))
    t = t.with_params(np.tile([0.7, -0.2, 1.1], t.nparams // 3))
    u = displacement_field(t, grid)
    np.testing.assert_allclose(u, np.broadcast_to([0.7, -0.2, 1.1], u.shape), atol=1e-12)


@given(u=st.floats(-50, 50))
def test_basis_partition_of_unity(u):
    k = np.arange(math.floor(u) - 3, math.floor(u) + 4)
    assert abs(bspline_basis(u - k).sum() - 1.0) <= 1e-12


def test_displacement_field_matches_direct_sum(rng):
    grid = Grid((9, 8, 7), (1.0, 1.5, 0.75))
    t = BSplineTransform.for_grid(grid, (4, 5, 4))
    t = t.with_params(rng.standard_normal(t.nparams))
    u = displacement_field(t, grid)
    axes = grid.axes_mm()
    for idx in [(0, 0, 0), (4, 3, 2), (8, 7, 6)]:
        p = [axes[a][idx[a]] for a in range(3)]
        np.testing.assert_allclose(u[idx], bspline_displacement(t, p), atol=1e-12)


def test_displacement_outside_domain():
    grid = Grid((10, 10, 10))
    t = BSplineTransform.for_grid(grid)
    with pytest.raises(OutOfDomain):
        bspline_displacement(t, (100.0, 0.0, 0.0))


def test_bspline_validation():
    with pytest.raises(InvalidParameter):
        BSplineTransform((3, 5, 5), (1, 1, 1), (0, 0, 0))
    with pytest.raises(InvalidParameter):
        BSplineTransform((5, 5, 5), (1, 1, 1), (0, 0, 0), np.zeros(10))
