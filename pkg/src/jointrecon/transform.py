"""Parametric spatial transforms and trilinear resampling.

Convention: a transform maps *output* voxel positions to the positions at
which the source volume is sampled (pull warping), so
``warp(f, t)(x) = f(T(x))``.  A pure translation by ``+d`` therefore moves
image content by ``-d``.

Interpolation is trilinear on a zero-extended lattice: samples more than
one voxel outside the grid read 0, and the interpolant is continuous
everywhere, including across the grid boundary.

Affine transforms act on coordinates in mm relative to the volume centre;
``params`` holds the 3x4 matrix ``[M | t]`` row-major.  B-spline
transforms add a cubic B-spline displacement (mm) interpolated from a
control lattice that extends one control spacing beyond each face.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DimensionTooSmall, InvalidParameter, OutOfDomain, ShapeMismatch
from .volume import Grid, Volume, same_grid


# --------------------------------------------------------------------------
# transform types

@dataclass(frozen=True)
class AffineTransform:
    params: tuple = (1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    kind = "affine"

    def __post_init__(self):
        p = tuple(float(v) for v in np.asarray(self.params, dtype=np.float64).ravel())
        if len(p) != 12:
            raise InvalidParameter(f"affine transform needs 12 parameters, got {len(p)}")
        if not all(math.isfinite(v) for v in p):
            raise InvalidParameter("affine parameters must be finite")
        object.__setattr__(self, "params", p)

    @classmethod
    def identity(cls):
        return cls()

    @property
    def matrix(self):
        return np.array(self.params).reshape(3, 4)

    @property
    def nparams(self):
        return 12

    def vector(self):
        return np.array(self.params)

    def with_params(self, vec):
        return AffineTransform(tuple(vec))

    def is_identity(self):
        return self.params == AffineTransform().params

    def inverse(self):
        """The map ``y -> M^-1 (y - t)``; raises InvalidParameter if singular."""
        m = self.matrix
        if abs(np.linalg.det(m[:, :3])) < 1e-12:
            raise InvalidParameter("affine matrix is singular")
        inv = np.linalg.inv(m[:, :3])
        return AffineTransform(np.hstack([inv, -(inv @ m[:, 3])[:, None]]).ravel())


@dataclass(frozen=True, eq=False)
class BSplineTransform:
    control_dims: tuple
    control_spacing_mm: tuple
    lattice_origin_mm: tuple
    coefficients: np.ndarray = field(repr=False, default=None)
    kind = "bspline"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.control_dims)
        if len(dims) != 3 or min(dims) < 4:
            raise InvalidParameter(f"control_dims must be 3 integers >= 4, got {self.control_dims}")
        spacing = tuple(float(s) for s in self.control_spacing_mm)
        if not all(math.isfinite(s) and s > 0 for s in spacing):
            raise InvalidParameter("control spacing must be positive")
        coef = self.coefficients
        if coef is None:
            coef = np.zeros(dims + (3,))
        coef = np.asarray(coef, dtype=np.float64)
        if coef.size != int(np.prod(dims)) * 3:
            raise InvalidParameter(f"expected {int(np.prod(dims)) * 3} coefficients, got {coef.size}")
        coef = coef.reshape(dims + (3,))
        if not np.all(np.isfinite(coef)):
            raise InvalidParameter("B-spline coefficients must be finite")
        object.__setattr__(self, "control_dims", dims)
        object.__setattr__(self, "control_spacing_mm", spacing)
        object.__setattr__(self, "lattice_origin_mm", tuple(float(o) for o in self.lattice_origin_mm))
        object.__setattr__(self, "coefficients", coef)

    @classmethod
    def for_grid(cls, grid, interior=(9, 9, 9), coefficients=None):
        """Lattice with ``interior`` control points spanning the voxel
        centres of ``grid`` plus one ring outside every face."""
        interior = tuple(int(m) for m in interior)
        if min(interior) < 2:
            raise InvalidParameter("interior control dims must be >= 2")
        spacing = tuple((n - 1) * s / (m - 1) if n > 1 else s
                        for n, s, m in zip(grid.dims, grid.spacing_mm, interior))
        origin = tuple(o - d for o, d in zip(grid.origin_mm, spacing))
        dims = tuple(m + 2 for m in interior)
        return cls(dims, spacing, origin, coefficients)

    @property
    def nparams(self):
        return self.coefficients.size

    def vector(self):
        return self.coefficients.ravel().copy()

    def with_params(self, vec):
        return BSplineTransform(self.control_dims, self.control_spacing_mm, self.lattice_origin_mm,
                                np.asarray(vec, dtype=np.float64).reshape(self.coefficients.shape))

    def is_identity(self):
        return not np.any(self.coefficients)


def identity_like(t):
    return t.with_params(np.zeros(t.nparams)) if t.kind == "bspline" else AffineTransform.identity()


# --------------------------------------------------------------------------
# affine construction

def _rot(axis, deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    if axis == 0:
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == 1:
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def affine_build(translation_mm=(0, 0, 0), rotation_deg=(0, 0, 0), scale=(1, 1, 1), shear=(0, 0, 0)):
    """Compose ``[Rz Ry Rx . S . H | t]``.

    ``shear = (xy, xz, yz)`` fills the upper triangle of ``H``.
    """
    vals = [np.asarray(v, dtype=np.float64) for v in (translation_mm, rotation_deg, scale, shear)]
    if not all(v.shape == (3,) and np.all(np.isfinite(v)) for v in vals):
        raise InvalidParameter("affine_build needs four finite 3-vectors")
    t, r, s, h = vals
    if np.any(s == 0):
        raise InvalidParameter("scale components must be nonzero")
    R = _rot(2, r[2]) @ _rot(1, r[1]) @ _rot(0, r[0])
    H = np.array([[1.0, h[0], h[1]], [0.0, 1.0, h[2]], [0.0, 0.0, 1.0]])
    M = R @ np.diag(s) @ H
    return AffineTransform(tuple(np.column_stack([M, t]).ravel()))


# --------------------------------------------------------------------------
# B-spline basis

def bspline_basis(u):
    """Cubic B-spline kernel, vectorised."""
    a = np.abs(np.asarray(u, dtype=np.float64))
    out = np.zeros_like(a)
    m1 = a < 1
    m2 = (a >= 1) & (a < 2)
    out[m1] = 2.0 / 3.0 - a[m1] ** 2 + 0.5 * a[m1] ** 3
    out[m2] = (2.0 - a[m2]) ** 3 / 6.0
    return out


def _lattice_coords(t, grid):
    """Per-axis lattice coordinates of the voxel centres."""
    return [(ax - o) / d for ax, o, d in zip(grid.axes_mm(), t.lattice_origin_mm, t.control_spacing_mm)]


def _basis_matrices(t, grid):
    mats = []
    for u, c in zip(_lattice_coords(t, grid), t.control_dims):
        mats.append(bspline_basis(u[:, None] - np.arange(c)[None, :]))
    return mats


def _support_tables(t, grid):
    """First support index and the four weights per voxel, per axis."""
    starts, weights = [], []
    for u, c in zip(_lattice_coords(t, grid), t.control_dims):
        k0 = np.floor(u).astype(np.int64) - 1
        ks = k0[:, None] + np.arange(4)[None, :]
        w = bspline_basis(u[:, None] - ks)
        w[(ks < 0) | (ks >= c)] = 0.0
        starts.append(k0)
        weights.append(np.ascontiguousarray(w))
    return starts, weights


def displacement_field(t, grid):
    """B-spline displacement (mm) at every voxel centre, shape ``dims + (3,)``."""
    bx, by, bz = _basis_matrices(t, grid)
    out = np.einsum("ia,abcd->ibcd", bx, t.coefficients, optimize=True)
    out = np.einsum("jb,ibcd->ijcd", by, out, optimize=True)
    return np.einsum("kc,ijcd->ijkd", bz, out, optimize=True)


def bspline_displacement(t, point_mm, grid=None):
    """Displacement at one point by direct summation over its 4x4x4 support."""
    p = np.asarray(point_mm, dtype=np.float64)
    u = (p - np.asarray(t.lattice_origin_mm)) / np.asarray(t.control_spacing_mm)
    dims = np.asarray(t.control_dims)
    # valid region: between the first and last interior control points
    if np.any(u < 1 - 1e-9) or np.any(u > dims - 2 + 1e-9) or not np.all(np.isfinite(u)):
        raise OutOfDomain(f"point {tuple(p)} is outside the B-spline domain")
    k0 = np.floor(u).astype(int) - 1
    out = np.zeros(3)
    for a in range(4):
        ka = k0[0] + a
        if not 0 <= ka < dims[0]:
            continue
        wa = bspline_basis(u[0] - ka)
        for b in range(4):
            kb = k0[1] + b
            if not 0 <= kb < dims[1]:
                continue
            wb = bspline_basis(u[1] - kb)
            for c in range(4):
                kc = k0[2] + c
                if not 0 <= kc < dims[2]:
                    continue
                out += wa * wb * bspline_basis(u[2] - kc) * t.coefficients[ka, kb, kc]
    return out


def _apply_basis_transpose(t, grid, W):
    """``sum_x beta_k(x) W(x, d)`` for every control point ``k`` and axis ``d``."""
    bx, by, bz = _basis_matrices(t, grid)
    out = np.einsum("ia,ijkd->ajkd", bx, W, optimize=True)
    out = np.einsum("jb,ajkd->abkd", by, out, optimize=True)
    return np.einsum("kc,abkd->abcd", bz, out, optimize=True)


# --------------------------------------------------------------------------
# sampling coordinates

def _centered_mm(grid):
    return [(np.arange(n) - 0.5 * (n - 1)) * s for n, s in zip(grid.dims, grid.spacing_mm)]


def sample_coords(t, grid):
    """Continuous source voxel indices ``T(x)`` for every output voxel."""
    dims = grid.dims
    sp = np.asarray(grid.spacing_mm)
    if t.kind == "affine":
        M = t.matrix
        cx, cy, cz = np.meshgrid(*_centered_mm(grid), indexing="ij")
        q = np.empty(dims + (3,))
        for r in range(3):
            mm = M[r, 0] * cx + M[r, 1] * cy + M[r, 2] * cz + M[r, 3]
            q[..., r] = mm / sp[r] + 0.5 * (dims[r] - 1)
        return q
    u = displacement_field(t, grid)
    ii = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    q = np.empty(dims + (3,))
    for r in range(3):
        q[..., r] = ii[r] + u[..., r] / sp[r]
    return q


# --------------------------------------------------------------------------
# numba kernels

@njit(cache=True, inline="always")
def _at(f, i, j, k):
    if 0 <= i < f.shape[0] and 0 <= j < f.shape[1] and 0 <= k < f.shape[2]:
        return f[i, j, k]
    return 0.0


@njit(cache=True)
def _tri(f, x, y, z):
    i = math.floor(x)
    j = math.floor(y)
    k = math.floor(z)
    if i < -1 or j < -1 or k < -1 or i >= f.shape[0] or j >= f.shape[1] or k >= f.shape[2]:
        return 0.0
    i = int(i)
    j = int(j)
    k = int(k)
    fx = x - i
    fy = y - j
    fz = z - k
    c00 = _at(f, i, j, k) * (1 - fx) + _at(f, i + 1, j, k) * fx
    c10 = _at(f, i, j + 1, k) * (1 - fx) + _at(f, i + 1, j + 1, k) * fx
    c01 = _at(f, i, j, k + 1) * (1 - fx) + _at(f, i + 1, j, k + 1) * fx
    c11 = _at(f, i, j + 1, k + 1) * (1 - fx) + _at(f, i + 1, j + 1, k + 1) * fx
    return (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz


@njit(cache=True)
def _warp_kernel(f, q, out):
    nx, ny, nz = out.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                out[i, j, k] = _tri(f, q[i, j, k, 0], q[i, j, k, 1], q[i, j, k, 2])


@njit(cache=True)
def _warp_adjoint_kernel(h, q, out):
    nx, ny, nz = h.shape
    sx, sy, sz = out.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                v = h[i, j, k]
                if v == 0.0:
                    continue
                x = q[i, j, k, 0]
                y = q[i, j, k, 1]
                z = q[i, j, k, 2]
                a = math.floor(x)
                b = math.floor(y)
                c = math.floor(z)
                if a < -1 or b < -1 or c < -1 or a >= sx or b >= sy or c >= sz:
                    continue
                a = int(a)
                b = int(b)
                c = int(c)
                fx = x - a
                fy = y - b
                fz = z - c
                for da in range(2):
                    ii = a + da
                    if ii < 0 or ii >= sx:
                        continue
                    wx = fx if da else 1 - fx
                    for db in range(2):
                        jj = b + db
                        if jj < 0 or jj >= sy:
                            continue
                        wy = fy if db else 1 - fy
                        for dc in range(2):
                            kk = c + dc
                            if kk < 0 or kk >= sz:
                                continue
                            wz = fz if dc else 1 - fz
                            out[ii, jj, kk] += wx * wy * wz * v


@njit(cache=True)
def _grad_kernel(f, q, val, grad):
    """Interpolated value and its exact derivative w.r.t. the index coords."""
    nx, ny, nz = val.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x = q[i, j, k, 0]
                y = q[i, j, k, 1]
                z = q[i, j, k, 2]
                a = math.floor(x)
                b = math.floor(y)
                c = math.floor(z)
                if a < -1 or b < -1 or c < -1 or a >= f.shape[0] or b >= f.shape[1] or c >= f.shape[2]:
                    val[i, j, k] = 0.0
                    grad[i, j, k, 0] = 0.0
                    grad[i, j, k, 1] = 0.0
                    grad[i, j, k, 2] = 0.0
                    continue
                a = int(a)
                b = int(b)
                c = int(c)
                fx = x - a
                fy = y - b
                fz = z - c
                v000 = _at(f, a, b, c)
                v100 = _at(f, a + 1, b, c)
                v010 = _at(f, a, b + 1, c)
                v110 = _at(f, a + 1, b + 1, c)
                v001 = _at(f, a, b, c + 1)
                v101 = _at(f, a + 1, b, c + 1)
                v011 = _at(f, a, b + 1, c + 1)
                v111 = _at(f, a + 1, b + 1, c + 1)
                c00 = v000 * (1 - fx) + v100 * fx
                c10 = v010 * (1 - fx) + v110 * fx
                c01 = v001 * (1 - fx) + v101 * fx
                c11 = v011 * (1 - fx) + v111 * fx
                c0 = c00 * (1 - fy) + c10 * fy
                c1 = c01 * (1 - fy) + c11 * fy
                val[i, j, k] = c0 * (1 - fz) + c1 * fz
                grad[i, j, k, 2] = c1 - c0
                grad[i, j, k, 1] = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
                d00 = v100 - v000
                d10 = v110 - v010
                d01 = v101 - v001
                d11 = v111 - v011
                grad[i, j, k, 0] = (d00 * (1 - fy) + d10 * fy) * (1 - fz) + (d01 * (1 - fy) + d11 * fy) * fz


@njit(cache=True)
def _axis_slices(f, x, y, z, axis):
    """Interpolated values on the two lattice planes bracketing the sample
    along ``axis``; returns (floor index, lower, upper)."""
    q0 = (x, y, z)
    base = math.floor(q0[axis])
    lo = _tri_fixed(f, x, y, z, axis, base)
    hi = _tri_fixed(f, x, y, z, axis, base + 1)
    return base, lo, hi


@njit(cache=True)
def _tri_fixed(f, x, y, z, axis, plane):
    if axis == 0:
        return _tri(f, plane, y, z)
    if axis == 1:
        return _tri(f, x, plane, z)
    return _tri(f, x, y, plane)


@njit(cache=True, inline="always")
def _sample_axis(f, x, y, z, axis, s, base, lo, hi):
    # trilinear value with the ``axis`` coordinate replaced by ``s``
    if math.floor(s) == base:
        return lo + (s - base) * (hi - lo)
    if axis == 0:
        return _tri(f, s, y, z)
    if axis == 1:
        return _tri(f, x, s, z)
    return _tri(f, x, y, s)


@njit(cache=True)
def _fdm_affine_kernel(f, q, cx, cy, cz, sp, eps, w, out):
    nx, ny, nz = w.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                wv = w[i, j, k]
                if wv == 0.0:
                    continue
                x = q[i, j, k, 0]
                y = q[i, j, k, 1]
                z = q[i, j, k, 2]
                coords = (cx[i], cy[j], cz[k], 1.0)
                for r in range(3):
                    qr = q[i, j, k, r]
                    base, lo, hi = _axis_slices(f, x, y, z, r)
                    for col in range(4):
                        h = eps * coords[col] / sp[r]
                        if h == 0.0:
                            continue
                        fp = _sample_axis(f, x, y, z, r, qr + h, base, lo, hi)
                        fm = _sample_axis(f, x, y, z, r, qr - h, base, lo, hi)
                        out[r * 4 + col] += (fp - fm) / (2.0 * eps) * wv


@njit(cache=True)
def _fdm_bspline_kernel(f, q, k0x, k0y, k0z, wx, wy, wz, sp, eps, w, out):
    nx, ny, nz = w.shape
    cxn, cyn, czn = out.shape[0], out.shape[1], out.shape[2]
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                wv = w[i, j, k]
                if wv == 0.0:
                    continue
                x = q[i, j, k, 0]
                y = q[i, j, k, 1]
                z = q[i, j, k, 2]
                for r in range(3):
                    qr = q[i, j, k, r]
                    base, lo, hi = _axis_slices(f, x, y, z, r)
                    for a in range(4):
                        ka = k0x[i] + a
                        ba = wx[i, a]
                        if ba == 0.0 or ka < 0 or ka >= cxn:
                            continue
                        for b in range(4):
                            kb = k0y[j] + b
                            bb = ba * wy[j, b]
                            if bb == 0.0 or kb < 0 or kb >= cyn:
                                continue
                            for c in range(4):
                                kc = k0z[k] + c
                                beta = bb * wz[k, c]
                                if beta == 0.0 or kc < 0 or kc >= czn:
                                    continue
                                h = eps * beta / sp[r]
                                fp = _sample_axis(f, x, y, z, r, qr + h, base, lo, hi)
                                fm = _sample_axis(f, x, y, z, r, qr - h, base, lo, hi)
                                out[ka, kb, kc, r] += (fp - fm) / (2.0 * eps) * wv


# --------------------------------------------------------------------------
# public operations

class Resampler:
    """``warp`` and its adjoint for one transform on one grid, with the
    sampling coordinates computed once."""

    def __init__(self, t, grid):
        self.t = t
        self.grid = grid
        self.identity = t.is_identity()
        self.q = None if self.identity else sample_coords(t, grid)

    def apply(self, data):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if self.identity:
            return data.copy()
        out = np.empty(self.grid.dims)
        _warp_kernel(data, self.q, out)
        return out

    def adjoint(self, data):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if self.identity:
            return data.copy()
        out = np.zeros(self.grid.dims)
        _warp_adjoint_kernel(data, self.q, out)
        return out


def warp(f: Volume, t) -> Volume:
    """Resample ``f`` at ``T(x)`` for every voxel ``x`` (trilinear, zero padding)."""
    return f.with_data(Resampler(t, f.grid).apply(f.data))


def warp_adjoint(h: Volume, t) -> Volume:
    """Adjoint of ``f -> warp(f, t)``: scatter each sample's weights back."""
    return h.with_data(Resampler(t, h.grid).adjoint(h.data))


def image_gradient(f: Volume):
    """Spatial gradient in intensity/mm: central differences inside,
    one-sided at the faces."""
    if min(f.dims) < 2:
        raise DimensionTooSmall(f"image_gradient needs >= 2 voxels per axis, got {f.dims}")
    grads = np.gradient(f.data, *f.spacing_mm, edge_order=1)
    return [f.with_data(g) for g in grads]


def warp_with_gradient(f: Volume, t, spatial="interpolant"):
    """Warped volume and the moving-image gradient (per mm) at ``T(x)``.

    ``spatial="interpolant"`` differentiates the trilinear interpolant of
    ``f`` exactly; ``"central"`` interpolates the lattice central
    differences of :func:`image_gradient` instead.
    """
    q = sample_coords(t, f.grid)
    val = np.empty(f.dims)
    grad = np.empty(f.dims + (3,))
    sp = np.asarray(f.spacing_mm)
    if spatial == "interpolant":
        _grad_kernel(np.ascontiguousarray(f.data), q, val, grad)
        grad /= sp
    elif spatial == "central":
        _warp_kernel(f.data, q, val)
        for r, g in enumerate(image_gradient(f)):
            tmp = np.empty(f.dims)
            _warp_kernel(np.ascontiguousarray(g.data), q, tmp)
            grad[..., r] = tmp
    else:
        raise InvalidParameter(f"unknown spatial derivative {spatial!r}")
    return val, grad


def jacobian_transpose_apply(t, grid, W):
    """``sum_x W(x) . dT(x)/dzeta`` for a per-voxel mm-vector field ``W``."""
    if t.kind == "affine":
        cx, cy, cz = _centered_mm(grid)
        g = np.empty((3, 4))
        for r in range(3):
            Wr = W[..., r]
            g[r, 0] = np.einsum("ijk,i->", Wr, cx)
            g[r, 1] = np.einsum("ijk,j->", Wr, cy)
            g[r, 2] = np.einsum("ijk,k->", Wr, cz)
            g[r, 3] = Wr.sum()
        return g.ravel()
    return _apply_basis_transpose(t, grid, W).ravel()


def ssd_with_gradient(fixed: Volume, moving: Volume, t, spatial="interpolant"):
    """``0.5 * ||warp(moving, t) - fixed||^2`` and its parameter gradient."""
    same_grid(fixed, moving)
    val, grad = warp_with_gradient(moving, t, spatial)
    resid = val - fixed.data
    g = jacobian_transpose_apply(t, moving.grid, resid[..., None] * grad)
    return 0.5 * float(np.sum(resid * resid)), g


def registration_gradient(fixed: Volume, moving: Volume, t, spatial="interpolant"):
    """Gradient of ``0.5 * ||warp(moving, t) - fixed||^2`` w.r.t. ``t``'s parameters.

    Image difference times the moving-image derivative at ``T(x)`` (taken
    on the original, unwarped moving image) times ``dT(x)/dzeta``.
    """
    return ssd_with_gradient(fixed, moving, t, spatial)[1]


def ssd(fixed: Volume, moving: Volume, t):
    same_grid(fixed, moving)
    d = warp(moving, t).data - fixed.data
    return 0.5 * float(np.sum(d * d))


def fdm_transform_derivative(f: Volume, t, param_index, epsilon=1e-3) -> Volume:
    """Central difference of the warp w.r.t. one transform parameter."""
    if not epsilon > 0:
        raise InvalidParameter("epsilon must be positive")
    if not 0 <= param_index < t.nparams:
        raise InvalidParameter(f"param_index {param_index} outside [0, {t.nparams})")
    base = t.vector()
    up, dn = base.copy(), base.copy()
    up[param_index] += epsilon
    dn[param_index] -= epsilon
    diff = warp(f, t.with_params(up)).data - warp(f, t.with_params(dn)).data
    return f.with_data(diff / (2.0 * epsilon))


def fdm_columns_dot(f: Volume, t, weights: Volume, epsilon=1e-3):
    """``<fdm_transform_derivative(f, t, i, eps), weights>`` for every ``i``.

    Evaluates the same central differences as
    :func:`fdm_transform_derivative` voxel by voxel, visiting only the
    parameters that can move each voxel.
    """
    if not epsilon > 0:
        raise InvalidParameter("epsilon must be positive")
    same_grid(f, weights)
    grid = f.grid
    q = sample_coords(t, grid)
    sp = np.asarray(grid.spacing_mm)
    fd = np.ascontiguousarray(f.data)
    w = np.ascontiguousarray(weights.data)
    if t.kind == "affine":
        cx, cy, cz = _centered_mm(grid)
        out = np.zeros(12)
        _fdm_affine_kernel(fd, q, cx, cy, cz, sp, float(epsilon), w, out)
        return out
    starts, wts = _support_tables(t, grid)
    out = np.zeros(t.coefficients.shape)
    _fdm_bspline_kernel(fd, q, starts[0], starts[1], starts[2], wts[0], wts[1], wts[2],
                        sp, float(epsilon), w, out)
    return out.ravel()
