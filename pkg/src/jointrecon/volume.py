"""Volume and projection-stack containers.

Volumes are stored as ``float64`` arrays of shape ``(nx, ny, nz)``; the
flat layout used on disk and by the projector is Fortran order, i.e. x
fastest.  ``origin_mm`` is the world position of the centre of voxel
``(0, 0, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteValue, ShapeMismatch
from .geometry import Geometry


@dataclass(frozen=True)
class Grid:
    """Voxel lattice description without data."""

    dims: tuple
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(dims) != 3 or min(dims) < 1:
            raise ShapeMismatch(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ShapeMismatch(f"spacing must be 3 positive reals, got {self.spacing_mm}")
        if self.origin_mm is None:
            origin = tuple(-0.5 * (n - 1) * s for n, s in zip(dims, spacing))
        else:
            origin = tuple(float(o) for o in self.origin_mm)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def size(self):
        return int(np.prod(self.dims))

    @property
    def center_mm(self):
        return tuple(o + 0.5 * (n - 1) * s for o, n, s in zip(self.origin_mm, self.dims, self.spacing_mm))

    @property
    def bounds_mm(self):
        """Outer faces of the voxel lattice, ``(lo, hi)`` per axis."""
        lo = tuple(o - 0.5 * s for o, s in zip(self.origin_mm, self.spacing_mm))
        hi = tuple(o + (n - 0.5) * s for o, n, s in zip(self.origin_mm, self.dims, self.spacing_mm))
        return lo, hi

    def axes_mm(self):
        return [o + s * np.arange(n) for o, s, n in zip(self.origin_mm, self.spacing_mm, self.dims)]

    def zeros(self):
        return Volume(np.zeros(self.dims), self.spacing_mm, self.origin_mm)


class Volume:
    """A 3D scalar field on a regular grid."""

    __slots__ = ("data", "grid")

    def __init__(self, data, spacing_mm=(1.0, 1.0, 1.0), origin_mm=None, check=True):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeMismatch(f"volume data must be 3D, got shape {data.shape}")
        self.grid = Grid(data.shape, spacing_mm, origin_mm)
        if check and not np.all(np.isfinite(data)):
            raise NonFiniteValue("volume contains NaN or Inf")
        self.data = data

    @classmethod
    def on(cls, grid, data, check=True):
        return cls(np.asarray(data).reshape(grid.dims, order="F") if np.ndim(data) == 1 else data,
                   grid.spacing_mm, grid.origin_mm, check=check)

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing_mm(self):
        return self.grid.spacing_mm

    @property
    def origin_mm(self):
        return self.grid.origin_mm

    def flat(self):
        """x-fastest flat view of the data."""
        return self.data.ravel(order="F")

    def copy(self):
        return Volume(self.data.copy(), self.spacing_mm, self.origin_mm, check=False)

    def with_data(self, data, check=False):
        return Volume.on(self.grid, data, check=check)

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing_mm={self.spacing_mm})"


def same_grid(a, b):
    if a.dims != b.dims:
        raise ShapeMismatch(f"volume dims differ: {a.dims} vs {b.dims}")


class ProjectionStack:
    """Detector images for every view, shape ``(views, nv, nu)``."""

    __slots__ = ("data", "geometry")

    def __init__(self, data, geometry: Geometry, check=True):
        data = np.asarray(data, dtype=np.float64)
        expected = (geometry.num_views,) + geometry.detector_shape
        if data.size != int(np.prod(expected)):
            raise ShapeMismatch(f"stack has {data.size} values, geometry needs {expected}")
        data = data.reshape(expected)
        if check and not np.all(np.isfinite(data)):
            raise NonFiniteValue("projection stack contains NaN or Inf")
        self.data = data
        self.geometry = geometry

    def copy(self):
        return ProjectionStack(self.data.copy(), self.geometry, check=False)

    def __sub__(self, other):
        return ProjectionStack(self.data - other.data, self.geometry, check=False)

    def __repr__(self):
        return f"ProjectionStack(views={self.geometry.num_views}, detector={self.geometry.detector_shape})"
