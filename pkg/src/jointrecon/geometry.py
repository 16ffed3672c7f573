"""Limited-angle acquisition geometry.

World frame (mm): the volume sits around the origin, the detector is a
stationary plane at ``z = -origin_to_detector_mm`` with its u axis along
+x and v axis along +y, and the source moves on an arc of radius
``source_to_origin_mm`` about the rotation axis (``y`` by default, so the
source sweeps along the detector u axis; ``x`` is also supported).  At angle
0 the source sits on the +z axis directly above the volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import IndexOutOfRange, InvalidGeometry

BEAMS = ("cone", "parallel")
AXES = ("x", "y")


@dataclass(frozen=True)
class View:
    index: int
    angle_deg: float
    source_position_mm: tuple
    detector_origin_mm: tuple
    detector_axes_mm: tuple
    # unit vector of the central ray, pointing from the source toward the detector
    ray_direction: tuple


@dataclass(frozen=True)
class Geometry:
    num_views: int = 11
    angular_span_deg: tuple = (-25.0, 25.0)
    source_to_origin_mm: float = 600.0
    origin_to_detector_mm: float = 60.0
    detector_size_px: tuple = (128, 128)
    detector_spacing_mm: tuple = (1.0, 1.0)
    rotation_axis: str = "y"
    beam: str = "cone"
    supersampling: int = 1

    def __post_init__(self):
        # normalise sequences to hashable tuples of the right type
        object.__setattr__(self, "angular_span_deg", tuple(float(a) for a in self.angular_span_deg))
        object.__setattr__(self, "detector_size_px", tuple(int(a) for a in self.detector_size_px))
        object.__setattr__(self, "detector_spacing_mm", tuple(float(a) for a in self.detector_spacing_mm))
        object.__setattr__(self, "source_to_origin_mm", float(self.source_to_origin_mm))
        object.__setattr__(self, "origin_to_detector_mm", float(self.origin_to_detector_mm))
        _validate(self)

    @property
    def angles_deg(self):
        n = self.num_views
        lo, hi = self.angular_span_deg
        mid = 0.5 * (lo + hi)
        if n == 1:
            return np.array([mid])
        step = (hi - lo) / (n - 1)
        # symmetric about the midpoint so mirrored views negate exactly
        return mid + (np.arange(n) - 0.5 * (n - 1)) * step

    @property
    def detector_shape(self):
        """(nv, nu): row-major shape of one detector image."""
        nu, nv = self.detector_size_px
        return (nv, nu)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _validate(g):
    if not isinstance(g.num_views, (int, np.integer)) or g.num_views < 1:
        raise InvalidGeometry("num_views", f"must be a positive integer, got {g.num_views!r}")
    if len(g.angular_span_deg) != 2:
        raise InvalidGeometry("angular_span_deg", "must be a (min, max) pair")
    lo, hi = g.angular_span_deg
    if not (-90.0 < lo < hi < 90.0):
        raise InvalidGeometry("angular_span_deg", f"need -90 < min < max < 90, got {g.angular_span_deg}")
    if not (math.isfinite(g.source_to_origin_mm) and g.source_to_origin_mm > 0):
        raise InvalidGeometry("source_to_origin_mm", "must be strictly positive")
    if not (math.isfinite(g.origin_to_detector_mm) and g.origin_to_detector_mm >= 0):
        raise InvalidGeometry("origin_to_detector_mm", "must be non-negative")
    if len(g.detector_size_px) != 2 or min(g.detector_size_px) < 1:
        raise InvalidGeometry("detector_size_px", "must be two positive integers")
    if len(g.detector_spacing_mm) != 2 or not all(math.isfinite(s) and s > 0 for s in g.detector_spacing_mm):
        raise InvalidGeometry("detector_spacing_mm", "must be two strictly positive reals")
    if g.rotation_axis not in AXES:
        raise InvalidGeometry("rotation_axis", f"must be one of {AXES}")
    if g.beam not in BEAMS:
        raise InvalidGeometry("beam", f"must be one of {BEAMS}")
    if int(g.supersampling) < 1:
        raise InvalidGeometry("supersampling", "must be >= 1")


def make_geometry(num_views=11, span_deg=(-25.0, 25.0), distances=(600.0, 60.0),
                  detector=((128, 128), (1.0, 1.0)), **kwargs):
    """Build a validated :class:`Geometry`.

    Parameters
    ----------
    num_views : int
        Number of projections, sampled inclusive of both span endpoints.
    span_deg : (float, float)
        Angular span of the source arc in degrees.
    distances : (float, float)
        ``(source_to_origin_mm, origin_to_detector_mm)``.
    detector : ((int, int), (float, float))
        ``((nu, nv), (du, dv))`` pixel counts and spacing.
    **kwargs
        ``rotation_axis``, ``beam`` and ``supersampling``.
    """
    size, spacing = detector
    return Geometry(num_views=num_views, angular_span_deg=tuple(span_deg),
                    source_to_origin_mm=distances[0], origin_to_detector_mm=distances[1],
                    detector_size_px=tuple(size), detector_spacing_mm=tuple(spacing), **kwargs)


def _source_direction(axis, theta):
    s, c = math.sin(theta), math.cos(theta)
    if axis == "y":
        return np.array([s, 0.0, c])
    return np.array([0.0, s, c])


def view(geometry, index):
    """Resolve the source/detector frame of one view."""
    if not (0 <= index < geometry.num_views):
        raise IndexOutOfRange(f"view index {index} outside [0, {geometry.num_views})")
    angle = float(geometry.angles_deg[index])
    direction = _source_direction(geometry.rotation_axis, math.radians(angle))
    source = geometry.source_to_origin_mm * direction
    nu, nv = geometry.detector_size_px
    du, dv = geometry.detector_spacing_mm
    det0 = np.array([-0.5 * (nu - 1) * du, -0.5 * (nv - 1) * dv, -geometry.origin_to_detector_mm])
    axes = (np.array([du, 0.0, 0.0]), np.array([0.0, dv, 0.0]))
    return View(index=index, angle_deg=angle,
                source_position_mm=tuple(source), detector_origin_mm=tuple(det0),
                detector_axes_mm=tuple(tuple(a) for a in axes),
                ray_direction=tuple(-direction))


def pixel_centers(geometry, index, supersampling=None):
    """World coordinates of (sub)pixel centres for one view.

    Returns an array of shape ``(nv, nu, s*s, 3)`` with ``s`` the
    supersampling factor.
    """
    s = geometry.supersampling if supersampling is None else supersampling
    v = view(geometry, index)
    nu, nv = geometry.detector_size_px
    du, dv = geometry.detector_spacing_mm
    offs = (np.arange(s) + 0.5) / s - 0.5
    ou, ov = np.meshgrid(offs, offs, indexing="xy")
    iu = np.arange(nu)[None, :, None] + ou.ravel()[None, None, :]
    iv = np.arange(nv)[:, None, None] + ov.ravel()[None, None, :]
    iu, iv = np.broadcast_arrays(iu, iv)
    x0, y0, z0 = v.detector_origin_mm
    pts = np.empty(iu.shape + (3,))
    pts[..., 0] = x0 + iu * du
    pts[..., 1] = y0 + iv * dv
    pts[..., 2] = z0
    return pts


def ray_endpoints(geometry, extent_mm):
    """Start/end points of every ray, shaped ``(views, nv, nu, s*s, 3)``.

    ``extent_mm`` bounds the scene radius so parallel rays are long enough
    to cross the whole volume.
    """
    starts, ends = [], []
    for i in range(geometry.num_views):
        v = view(geometry, i)
        pix = pixel_centers(geometry, i)
        if geometry.beam == "cone":
            src = np.broadcast_to(np.asarray(v.source_position_mm), pix.shape)
            starts.append(np.array(src))
        else:
            length = 2.0 * (extent_mm + geometry.origin_to_detector_mm + 1.0)
            starts.append(pix - length * np.asarray(v.ray_direction))
        ends.append(pix)
    return np.stack(starts), np.stack(ends)


def fit_detector(grid, num_views=11, span_deg=(-25.0, 25.0), distances=(600.0, 60.0),
                 spacing_mm=None, margin_px=2, **kwargs):
    """Geometry whose detector covers the volume footprint over every view.

    Detector spacing defaults to the in-plane voxel spacing of ``grid``.
    """
    if spacing_mm is None:
        spacing_mm = (grid.spacing_mm[0], grid.spacing_mm[1])
    probe = make_geometry(num_views, span_deg, distances, ((1, 1), spacing_mm), **kwargs)
    lo, hi = grid.bounds_mm
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    zdet = -probe.origin_to_detector_mm
    ext_u, ext_v = 0.0, 0.0
    for i in range(probe.num_views):
        v = view(probe, i)
        if probe.beam == "cone":
            src = np.asarray(v.source_position_mm)
            t = (zdet - src[2]) / (corners[:, 2] - src[2])
            hit = src + t[:, None] * (corners - src)
        else:
            d = np.asarray(v.ray_direction)
            t = (zdet - corners[:, 2]) / d[2]
            hit = corners + t[:, None] * d
        ext_u = max(ext_u, np.abs(hit[:, 0]).max())
        ext_v = max(ext_v, np.abs(hit[:, 1]).max())
    nu = 2 * int(math.ceil(ext_u / spacing_mm[0])) + 2 * margin_px
    nv = 2 * int(math.ceil(ext_v / spacing_mm[1])) + 2 * margin_px
    return make_geometry(num_views, span_deg, distances, ((nu, nv), spacing_mm), **kwargs)
