"""Synthetic test objects, random ground-truth transforms and data simulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import InvalidSpec, KindMismatch
from .projector import forward_project
from .transform import AffineTransform, BSplineTransform, affine_build, warp
from .volume import Grid, ProjectionStack, Volume

AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class ToroidSpec:
    """Solid torus; ``axis`` names the torus symmetry axis.

    For ``axis="y"`` a voxel is inside when
    ``(sqrt(x^2 + z^2) - R)^2 + y^2 <= r^2`` with coordinates in mm
    relative to ``center_mm``.
    """

    volume_dims: tuple = (70, 70, 70)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    center_mm: tuple = (0.0, 0.0, 0.0)
    major_radius_mm: float = 20.0
    minor_radius_mm: float = 8.0
    inside_value: float = 4000.0
    outside_value: float = 0.0
    axis: str = "y"

    def __post_init__(self):
        if not 0 < self.minor_radius_mm < self.major_radius_mm:
            raise InvalidSpec("need 0 < minor_radius_mm < major_radius_mm")
        if self.inside_value == self.outside_value:
            raise InvalidSpec("inside_value must differ from outside_value")
        if self.axis not in AXES:
            raise InvalidSpec(f"axis must be one of {tuple(AXES)}")
        _check_grid(self.volume_dims, self.spacing_mm)

    @property
    def grid(self):
        return Grid(self.volume_dims, self.spacing_mm)


def _check_grid(dims, spacing):
    if len(dims) != 3 or min(dims) < 1:
        raise InvalidSpec(f"volume_dims must be 3 positive integers, got {dims}")
    if len(spacing) != 3 or not all(s > 0 for s in spacing):
        raise InvalidSpec(f"spacing_mm must be 3 positive reals, got {spacing}")


def load_ellipsoids():
    """The bundled modified Shepp-Logan table, shape ``(10, 10)``."""
    text = resources.files("jointrecon").joinpath("data/shepp_logan_3d.txt").read_text()
    return np.loadtxt(text.splitlines(), comments="#")


@dataclass(frozen=True)
class SheppLoganSpec:
    """Columns of ``ellipsoids``: ``A a b c x0 y0 z0 phi theta psi``."""

    volume_dims: tuple = (65, 65, 65)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    ellipsoids: np.ndarray = field(default=None, repr=False, compare=False)
    intensity_scale: float = 1.0

    def __post_init__(self):
        _check_grid(self.volume_dims, self.spacing_mm)
        table = load_ellipsoids() if self.ellipsoids is None else np.asarray(self.ellipsoids, dtype=float)
        if table.ndim != 2 or table.shape[1] != 10:
            raise InvalidSpec("ellipsoid table must have 10 columns")
        if np.any(table[:, 1:4] <= 0):
            raise InvalidSpec("ellipsoid semi-axes must be positive")
        object.__setattr__(self, "ellipsoids", table)

    @property
    def grid(self):
        return Grid(self.volume_dims, self.spacing_mm)


def make_toroid(spec: ToroidSpec = ToroidSpec()) -> Volume:
    grid = spec.grid
    x, y, z = np.meshgrid(*[ax - c for ax, c in zip(grid.axes_mm(), spec.center_mm)], indexing="ij")
    coords = [x, y, z]
    along = coords.pop(AXES[spec.axis])
    ring = np.hypot(*coords) - spec.major_radius_mm
    inside = ring ** 2 + along ** 2 <= spec.minor_radius_mm ** 2
    data = np.where(inside, float(spec.inside_value), float(spec.outside_value))
    return Volume(data, grid.spacing_mm, grid.origin_mm)


def euler_matrix(phi, theta, psi):
    """z-x-z rotation (degrees) applied to coordinates before the
    ellipsoid membership test."""
    p, t, s = np.radians([phi, theta, psi])
    cp, sp, ct, st, cs, ss = np.cos(p), np.sin(p), np.cos(t), np.sin(t), np.cos(s), np.sin(s)
    return np.array([
        [cs * cp - ct * sp * ss, cs * sp + ct * cp * ss, ss * st],
        [-ss * cp - ct * sp * cs, -ss * sp + ct * cp * cs, cs * st],
        [st * sp, -st * cp, ct],
    ])


def normalised_axes(dims):
    # voxel centres mapped so the first/last voxel sit at -1/+1
    return [(np.arange(n) - 0.5 * (n - 1)) / max(0.5 * (n - 1), 0.5) for n in dims]


def make_shepp_logan(spec: SheppLoganSpec = SheppLoganSpec()) -> Volume:
    grid = spec.grid
    x, y, z = np.meshgrid(*normalised_axes(grid.dims), indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()])
    out = np.zeros(pts.shape[1])
    for A, a, b, c, x0, y0, z0, phi, theta, psi in spec.ellipsoids:
        q = euler_matrix(phi, theta, psi) @ pts
        r = ((q[0] - x0) / a) ** 2 + ((q[1] - y0) / b) ** 2 + ((q[2] - z0) / c) ** 2
        out[r <= 1.0] += A * spec.intensity_scale
    return Volume(out.reshape(grid.dims), grid.spacing_mm, grid.origin_mm)


@dataclass(frozen=True)
class AffineRanges:
    translation_mm: tuple = (-10.0, 10.0)
    rotation_deg: tuple = (-15.0, 15.0)
    scale: tuple = (0.9, 1.1)
    shear: tuple = (-0.05, 0.05)


@dataclass(frozen=True)
class BSplineRanges:
    control_dims: tuple = (9, 9, 9)
    # per-axis (low, high) offsets in voxels
    offset_range_voxels: tuple = ((-8.0, 8.0), (-4.0, 4.0), (-2.0, 2.0))


@dataclass(frozen=True)
class RandomTransformSpec:
    seed: int = 0
    kind: object = field(default_factory=AffineRanges)

    def __post_init__(self):
        if isinstance(self.kind, AffineRanges):
            pairs = [self.kind.translation_mm, self.kind.rotation_deg, self.kind.scale, self.kind.shear]
        elif isinstance(self.kind, BSplineRanges):
            if len(self.kind.control_dims) != 3 or min(self.kind.control_dims) < 2:
                raise InvalidSpec("control_dims must be 3 integers >= 2")
            pairs = list(self.kind.offset_range_voxels)
            if len(pairs) != 3:
                raise InvalidSpec("need one offset range per axis")
        else:
            raise InvalidSpec(f"unknown transform kind {type(self.kind).__name__}")
        for lo, hi in pairs:
            if not lo <= hi:
                raise InvalidSpec(f"invalid range ({lo}, {hi})")
        if isinstance(self.kind, AffineRanges) and self.kind.scale[0] <= 0 <= self.kind.scale[1]:
            raise InvalidSpec("scale range must exclude 0")


def random_affine_batch(spec: RandomTransformSpec, count: int):
    """``count`` affine transforms drawn from one seeded generator.

    Per transform the draw order is translation (x, y, z), rotation,
    scale, shear, each uniform on its range.
    """
    if not isinstance(spec.kind, AffineRanges):
        raise KindMismatch("random_affine_batch needs affine ranges")
    rng = np.random.default_rng(spec.seed)
    k = spec.kind
    out = []
    for _ in range(count):
        draws = [rng.uniform(lo, hi, 3) for lo, hi in (k.translation_mm, k.rotation_deg, k.scale, k.shear)]
        out.append(affine_build(*draws))
    return out


def random_bspline(spec: RandomTransformSpec, grid: Grid) -> BSplineTransform:
    """Random offsets on the interior control points; the outer ring stays 0.

    Offsets are drawn per axis (x, then y, then z) in voxels and
    converted to mm with the grid spacing.
    """
    if not isinstance(spec.kind, BSplineRanges):
        raise KindMismatch("random_bspline needs B-spline ranges")
    rng = np.random.default_rng(spec.seed)
    t = BSplineTransform.for_grid(grid, spec.kind.control_dims)
    coef = np.zeros(t.coefficients.shape)
    m = tuple(spec.kind.control_dims)
    for axis, (lo, hi) in enumerate(spec.kind.offset_range_voxels):
        coef[1:-1, 1:-1, 1:-1, axis] = rng.uniform(lo, hi, m) * grid.spacing_mm[axis]
    return t.with_params(coef)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0


def simulate_pair(f: Volume, t, geometry, noise: NoiseSpec = None, matrix_free=False):
    """Projections of ``f`` and of ``warp(f, t)``, optionally with additive
    Gaussian noise (p1 noise drawn before p2 noise)."""
    p1 = forward_project(f, geometry, matrix_free)
    p2 = forward_project(warp(f, t), geometry, matrix_free)
    if noise is not None and noise.sigma > 0:
        rng = np.random.default_rng(noise.seed)
        p1 = ProjectionStack(p1.data + rng.normal(0.0, noise.sigma, p1.data.shape), geometry)
        p2 = ProjectionStack(p2.data + rng.normal(0.0, noise.sigma, p2.data.shape), geometry)
    return p1, p2


def toroid_ground_truth():
    """Translation (10, 0, -20) mm with a -30 degree rotation about y."""
    return affine_build((10.0, 0.0, -20.0), (0.0, -30.0, 0.0))


def torus_volume_mm3(spec: ToroidSpec):
    return 2.0 * math.pi ** 2 * spec.major_radius_mm * spec.minor_radius_mm ** 2
