"""Slow, independent reference implementations used only by the tests.

Nothing here imports the numba kernels; each oracle recomputes its
quantity from first principles so agreement is meaningful.
"""

import math

import numpy as np


# --------------------------------------------------------------------------
# ray/box system matrix

def oracle_rays(geometry):
    """(start, end) pairs for every detector pixel, built from the
    geometry fields directly (supersampling 1 only)."""
    assert geometry.supersampling == 1
    nu, nv = geometry.detector_size_px
    du, dv = geometry.detector_spacing_mm
    zdet = -geometry.origin_to_detector_mm
    n = geometry.num_views
    lo, hi = geometry.angular_span_deg
    angles = [0.5 * (lo + hi)] if n == 1 else [lo + (hi - lo) * k / (n - 1) for k in range(n)]
    rays = []
    for a in angles:
        th = math.radians(a)
        if geometry.rotation_axis == "y":
            direction = np.array([math.sin(th), 0.0, math.cos(th)])
        else:
            direction = np.array([0.0, math.sin(th), math.cos(th)])
        src = geometry.source_to_origin_mm * direction
        for iv in range(nv):
            for iu in range(nu):
                pix = np.array([(iu - 0.5 * (nu - 1)) * du, (iv - 0.5 * (nv - 1)) * dv, zdet])
                if geometry.beam == "cone":
                    rays.append((src, pix))
                else:
                    rays.append((pix + 1e4 * direction, pix))
    return rays


def segment_box_length(p0, p1, box_lo, box_hi):
    """Length of the segment p0->p1 inside an axis-aligned box (slab method).

    Boxes are half-open, so a segment lying on a shared face is counted
    once, by the box above it.
    """
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for a in range(3):
        if d[a] == 0.0:
            if not box_lo[a] <= p0[a] < box_hi[a]:
                return 0.0
            continue
        ta = (box_lo[a] - p0[a]) / d[a]
        tb = (box_hi[a] - p0[a]) / d[a]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    return max(0.0, t1 - t0) * float(np.linalg.norm(d))


def dense_system_matrix(geometry, grid):
    """Explicit ``A`` with columns in x-fastest voxel order.

    Same slab method as :func:`segment_box_length`, vectorised over voxels.
    """
    nx, ny, nz = grid.dims
    sp = np.asarray(grid.spacing_mm)
    lo = np.asarray(grid.bounds_mm[0])
    idx = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), -1)
    blo = (lo + sp * idx).reshape(-1, 3, order="F")
    bhi = blo + sp
    rays = oracle_rays(geometry)
    A = np.zeros((len(rays), grid.size))
    for r, (p0, p1) in enumerate(rays):
        d = p1 - p0
        t0 = np.zeros(grid.size)
        t1 = np.ones(grid.size)
        inside = np.ones(grid.size, dtype=bool)
        for a in range(3):
            if d[a] == 0.0:
                inside &= (blo[:, a] <= p0[a]) & (p0[a] < bhi[:, a])
                continue
            ta = (blo[:, a] - p0[a]) / d[a]
            tb = (bhi[:, a] - p0[a]) / d[a]
            t0 = np.maximum(t0, np.minimum(ta, tb))
            t1 = np.minimum(t1, np.maximum(ta, tb))
        A[r] = np.where(inside, np.maximum(0.0, t1 - t0), 0.0) * float(np.linalg.norm(d))
    return A


# --------------------------------------------------------------------------
# resampling

def brute_force_warp(data, spacing, mapping):
    """``out(x) = f(mapping(x))`` by explicit trilinear interpolation.

    ``mapping`` takes a centred mm point and returns a centred mm point.
    Samples outside the grid contribute zero.
    """
    dims = data.shape
    sp = np.asarray(spacing, dtype=float)
    half = 0.5 * (np.asarray(dims) - 1)
    out = np.zeros(dims)
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                x = (np.array([i, j, k]) - half) * sp
                q = np.asarray(mapping(x)) / sp + half
                out[i, j, k] = trilinear(data, q)
    return out


def trilinear(data, q):
    base = np.floor(q).astype(int)
    frac = q - base
    val = 0.0
    for corner in np.ndindex(2, 2, 2):
        idx = base + np.array(corner)
        if np.all(idx >= 0) and np.all(idx < data.shape):
            w = np.prod(np.where(np.array(corner) == 1, frac, 1 - frac))
            val += w * data[tuple(idx)]
    return val


def dense_warp_matrix(dims, spacing, mapping):
    """Explicit warp operator: column ``n`` is the warp of the n-th unit volume."""
    size = int(np.prod(dims))
    W = np.zeros((size, size))
    for n in range(size):
        e = np.zeros(size)
        e[n] = 1.0
        W[:, n] = brute_force_warp(e.reshape(dims), spacing, mapping).ravel()
    return W


def cubic_bspline(u):
    u = abs(u)
    if u < 1:
        return (4 - 6 * u ** 2 + 3 * u ** 3) / 6
    if u < 2:
        return (2 - u) ** 3 / 6
    return 0.0


def bspline_displacement_sum(coefficients, origin, spacing, point):
    """Displacement at ``point`` summing every control point (no support trick)."""
    u = (np.asarray(point) - np.asarray(origin)) / np.asarray(spacing)
    out = np.zeros(3)
    for idx in np.ndindex(*coefficients.shape[:3]):
        w = cubic_bspline(u[0] - idx[0]) * cubic_bspline(u[1] - idx[1]) * cubic_bspline(u[2] - idx[2])
        if w:
            out += w * coefficients[idx]
    return out


# --------------------------------------------------------------------------
# optimisation

def dense_bfgs(fun, grad, x0, iters=200, tol=1e-10, exact_step=None):
    """Textbook BFGS with a dense inverse Hessian.

    Steps come from Armijo backtracking, or from ``exact_step(x, p)``
    when given (e.g. the closed-form minimiser on a quadratic).  The
    first inverse Hessian is ``I``; after the first step it is rescaled
    by ``s'y / y'y`` as in the usual limited-memory initialisation.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    H = np.eye(n)
    first = True
    g = grad(x)
    for _ in range(iters):
        if np.linalg.norm(g) < tol:
            break
        p = -H @ g
        if exact_step is not None:
            step = exact_step(x, p)
        else:
            step, fx = 1.0, fun(x)
            while fun(x + step * p) > fx + 1e-4 * step * (g @ p) and step > 1e-16:
                step *= 0.5
        s = step * p
        x_new = x + s
        g_new = grad(x_new)
        y = g_new - g
        sy = s @ y
        if sy > 1e-12:
            rho = 1.0 / sy
            I = np.eye(n)
            if first:
                H = (sy / (y @ y)) * I
                first = False
            H = (I - rho * np.outer(s, y)) @ H @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)
        x, g = x_new, g_new
    return x


def central_difference(fun, x, h):
    x = np.asarray(x, dtype=float)
    g = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g
