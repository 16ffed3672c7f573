"""Ray-driven forward projection and its exact adjoint.

Each detector pixel casts one ray (or ``s*s`` sub-rays when the geometry
asks for supersampling) and accumulates exact voxel intersection lengths
found by a Siddon traversal.  The back projection scatters the very same
weights, so ``<A f, p> == <f, A^T p>`` holds up to rounding.

Two execution paths share the traversal kernel:

* ``cached`` (default): the ray weights are traced once per
  ``(geometry, grid)`` pair into a sparse CSR matrix and reused.
* ``matrix_free``: rays are re-traced on every call; forward projection
  runs in parallel over rays, back projection over views with one
  accumulator per view reduced in view order.

Both paths are deterministic for a given thread count; the cached path
is bit-identical regardless of threads.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numba
import numpy as np
import scipy.sparse as sp
from numba import njit, prange

from .errors import GeometryVolumeMismatch, ShapeMismatch
from .geometry import ray_endpoints
from .volume import Grid, ProjectionStack, Volume

_CHUNK = 256


def set_threads(n):
    """Set kernel parallelism; ``1`` gives the deterministic serial mode."""
    if n is not None and n > 0:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


@njit(cache=True, nogil=True)
def _trace(p0, p1, lo, sp_, nx, ny, nz, out_idx, out_len, off, write):
    d0 = p1[0] - p0[0]
    d1 = p1[1] - p0[1]
    d2 = p1[2] - p0[2]
    d = (d0, d1, d2)
    dims = (nx, ny, nz)
    length = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    amin = 0.0
    amax = 1.0
    for a in range(3):
        hi = lo[a] + dims[a] * sp_[a]
        if d[a] == 0.0:
            # half-open cells: a ray on a face belongs to the upper voxel
            if p0[a] < lo[a] or p0[a] >= hi:
                return 0
        else:
            t1 = (lo[a] - p0[a]) / d[a]
            t2 = (hi - p0[a]) / d[a]
            if t1 > t2:
                t1, t2 = t2, t1
            amin = max(amin, t1)
            amax = min(amax, t2)
    if amax <= amin:
        return 0

    nxt = np.empty(3)
    plane = np.empty(3, np.int64)
    sgn = np.empty(3, np.int64)
    for a in range(3):
        pos = (p0[a] + amin * d[a] - lo[a]) / sp_[a]
        if d[a] > 0.0:
            plane[a] = int(math.floor(pos)) + 1
            sgn[a] = 1
            nxt[a] = (lo[a] + plane[a] * sp_[a] - p0[a]) / d[a]
        elif d[a] < 0.0:
            plane[a] = int(math.ceil(pos)) - 1
            sgn[a] = -1
            nxt[a] = (lo[a] + plane[a] * sp_[a] - p0[a]) / d[a]
        else:
            plane[a] = 0
            sgn[a] = 0
            nxt[a] = np.inf

    n = 0
    acur = amin
    while acur < amax:
        anew = min(nxt[0], nxt[1], nxt[2], amax)
        if anew < acur:
            anew = acur
        seg = anew - acur
        if seg > 0.0:
            mid = acur + 0.5 * seg
            ix = int(math.floor((p0[0] + mid * d0 - lo[0]) / sp_[0]))
            iy = int(math.floor((p0[1] + mid * d1 - lo[1]) / sp_[1]))
            iz = int(math.floor((p0[2] + mid * d2 - lo[2]) / sp_[2]))
            if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                if write:
                    out_idx[off + n] = ix + nx * (iy + ny * iz)
                    out_len[off + n] = seg * length
                n += 1
        for a in range(3):
            if nxt[a] <= anew:
                plane[a] += sgn[a]
                nxt[a] = (lo[a] + plane[a] * sp_[a] - p0[a]) / d[a]
        acur = anew
    return n


@njit(cache=True, parallel=True)
def _count_rays(starts, ends, lo, sp_, nx, ny, nz):
    nrays, nsub = starts.shape[0], starts.shape[1]
    counts = np.zeros(nrays, np.int64)
    dummy_i = np.empty(0, np.int64)
    dummy_l = np.empty(0)
    for r in prange(nrays):
        c = 0
        for s in range(nsub):
            c += _trace(starts[r, s], ends[r, s], lo, sp_, nx, ny, nz, dummy_i, dummy_l, 0, False)
        counts[r] = c
    return counts


@njit(cache=True, parallel=True)
def _fill_rays(starts, ends, lo, sp_, nx, ny, nz, indptr, indices, weights):
    nrays, nsub = starts.shape[0], starts.shape[1]
    inv = 1.0 / nsub
    for r in prange(nrays):
        off = indptr[r]
        for s in range(nsub):
            off += _trace(starts[r, s], ends[r, s], lo, sp_, nx, ny, nz, indices, weights, off, True)
        for k in range(indptr[r], indptr[r + 1]):
            weights[k] *= inv


@njit(cache=True, parallel=True)
def _forward_mf(starts, ends, lo, sp_, nx, ny, nz, vol, out):
    nrays, nsub = starts.shape[0], starts.shape[1]
    maxlen = nx + ny + nz + 4
    nchunks = (nrays + _CHUNK - 1) // _CHUNK
    for c in prange(nchunks):
        idx = np.empty(maxlen, np.int64)
        wts = np.empty(maxlen)
        for r in range(c * _CHUNK, min(nrays, (c + 1) * _CHUNK)):
            acc = 0.0
            for s in range(nsub):
                n = _trace(starts[r, s], ends[r, s], lo, sp_, nx, ny, nz, idx, wts, 0, True)
                part = 0.0
                for k in range(n):
                    part += wts[k] * vol[idx[k]]
                acc += part
            out[r] = acc / nsub


@njit(cache=True, parallel=True)
def _back_mf(starts, ends, lo, sp_, nx, ny, nz, proj, nviews, acc):
    nrays, nsub = starts.shape[0], starts.shape[1]
    per_view = nrays // nviews
    maxlen = nx + ny + nz + 4
    for v in prange(nviews):
        idx = np.empty(maxlen, np.int64)
        wts = np.empty(maxlen)
        for r in range(v * per_view, (v + 1) * per_view):
            val = proj[r] / nsub
            if val == 0.0:
                continue
            for s in range(nsub):
                n = _trace(starts[r, s], ends[r, s], lo, sp_, nx, ny, nz, idx, wts, 0, True)
                for k in range(n):
                    acc[v, idx[k]] += wts[k] * val


class Projector:
    """System matrix ``A`` for one geometry and voxel grid.

    Parameters
    ----------
    geometry : Geometry
    grid : Grid
    matrix_free : bool
        Re-trace rays on every call instead of caching the weights.
    """

    def __init__(self, geometry, grid, matrix_free=False):
        self.geometry = geometry
        self.grid = grid
        self.matrix_free = matrix_free
        lo, hi = grid.bounds_mm
        extent = float(np.max(np.abs(np.concatenate([lo, hi]))) * math.sqrt(3.0))
        starts, ends = ray_endpoints(geometry, extent)
        nsub = starts.shape[-2]
        self._starts = np.ascontiguousarray(starts.reshape(-1, nsub, 3))
        self._ends = np.ascontiguousarray(ends.reshape(-1, nsub, 3))
        self._lo = np.asarray(lo, dtype=np.float64)
        self._sp = np.asarray(grid.spacing_mm, dtype=np.float64)
        self.shape = (self._starts.shape[0], grid.size)
        self._matrix = None
        if not matrix_free:
            self._matrix = self._assemble()
            if self._matrix.nnz == 0:
                raise GeometryVolumeMismatch("no ray intersects the volume")
            self._matrix_t = self._matrix.T.tocsr()
        elif not np.any(self._counts()):
            raise GeometryVolumeMismatch("no ray intersects the volume")

    def _counts(self):
        nx, ny, nz = self.grid.dims
        return _count_rays(self._starts, self._ends, self._lo, self._sp, nx, ny, nz)

    def _assemble(self):
        nx, ny, nz = self.grid.dims
        counts = self._counts()
        indptr = np.zeros(counts.size + 1, np.int64)
        np.cumsum(counts, out=indptr[1:])
        indices = np.empty(indptr[-1], np.int64)
        weights = np.empty(indptr[-1])
        _fill_rays(self._starts, self._ends, self._lo, self._sp, nx, ny, nz, indptr, indices, weights)
        idx_dtype = np.int32 if self.grid.size < 2**31 else np.int64
        return sp.csr_matrix((weights, indices.astype(idx_dtype), indptr), shape=self.shape)

    def matrix(self):
        """The cached sparse system matrix (assembled on demand)."""
        if self._matrix is None:
            self._matrix = self._assemble()
        return self._matrix

    def forward(self, flat):
        """``A @ flat`` for an x-fastest flat volume."""
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.size != self.grid.size:
            raise ShapeMismatch(f"expected {self.grid.size} voxels, got {flat.size}")
        if not self.matrix_free:
            return self._matrix @ flat
        nx, ny, nz = self.grid.dims
        out = np.empty(self.shape[0])
        _forward_mf(self._starts, self._ends, self._lo, self._sp, nx, ny, nz, flat, out)
        return out

    def adjoint(self, flat):
        """``A.T @ flat`` for a flat projection vector."""
        flat = np.ascontiguousarray(flat, dtype=np.float64).ravel()
        if flat.size != self.shape[0]:
            raise ShapeMismatch(f"expected {self.shape[0]} detector values, got {flat.size}")
        if not self.matrix_free:
            return self._matrix_t @ flat
        nx, ny, nz = self.grid.dims
        nviews = self.geometry.num_views
        acc = np.zeros((nviews, self.grid.size))
        _back_mf(self._starts, self._ends, self._lo, self._sp, nx, ny, nz, flat, nviews, acc)
        out = acc[0].copy()
        for v in range(1, nviews):
            out += acc[v]
        return out


@lru_cache(maxsize=8)
def get_projector(geometry, grid, matrix_free=False):
    return Projector(geometry, grid, matrix_free=matrix_free)


def forward_project(f: Volume, geometry, matrix_free=False) -> ProjectionStack:
    """Line integrals of ``f`` along every detector ray."""
    A = get_projector(geometry, f.grid, matrix_free)
    return ProjectionStack(A.forward(f.flat()), geometry, check=False)


def back_project(p: ProjectionStack, grid: Grid, matrix_free=False) -> Volume:
    """Exact adjoint of :func:`forward_project`."""
    A = get_projector(p.geometry, grid, matrix_free)
    return Volume.on(grid, A.adjoint(p.data), check=False)


def residual_gradient(f: Volume, p: ProjectionStack, matrix_free=False) -> Volume:
    """Gradient of ``0.5 * ||A f - p||^2``, i.e. ``A^T (A f - p)``."""
    A = get_projector(p.geometry, f.grid, matrix_free)
    r = A.forward(f.flat()) - p.data.ravel()
    return Volume.on(f.grid, A.adjoint(r), check=False)
