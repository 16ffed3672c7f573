"""Raw binary volumes and projection stacks with text sidecars.

A dataset ``name`` is two files:

``name.meta``
    ``key = value`` lines: kind, dims, spacing/origin (volumes) or the
    geometry fields (stacks), scalar type, byte order and the data file
    name.  Lines starting with ``#`` are comments.
``name.raw``
    An 8-byte magic number followed by the samples, x fastest for
    volumes and ``(view, v, u)`` row-major for stacks.  The magic is
    written in the declared byte order, so a sidecar whose byte order
    does not match the data is detected on load.

Transforms are single ``key = value`` text files as well.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import CorruptFile, ShapeMismatch
from .geometry import Geometry
from .transform import AffineTransform, BSplineTransform
from .volume import ProjectionStack, Volume

MAGIC = 0x4A52454330303031
SCALARS = {"float32": np.float32, "float64": np.float64}
ORDERS = {"little": "<", "big": ">"}
VOLUME_KEYS = {"kind", "dims", "spacing_mm", "origin_mm", "scalar_type", "byte_order", "data_file"}
GEOMETRY_KEYS = {f"geometry.{k}" for k in Geometry.__dataclass_fields__}
STACK_KEYS = {"kind", "dims", "scalar_type", "byte_order", "data_file"} | GEOMETRY_KEYS


def _paths(path):
    p = Path(path)
    base = p.with_suffix("") if p.suffix in (".meta", ".raw") else p
    return base.with_suffix(".meta"), base.with_suffix(".raw")


def _fmt(v):
    if isinstance(v, (tuple, list, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_meta(path, items):
    with open(path, "w") as fh:
        for k, v in items:
            fh.write(f"{k} = {_fmt(v)}\n")


def read_meta(path, allowed=None):
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CorruptFile(f"cannot read {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CorruptFile(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if allowed is not None and k not in allowed:
            raise CorruptFile(f"{path}:{n}: unknown field {k!r}")
        out[k] = v
    return out


def _require(meta, keys, path):
    missing = sorted(set(keys) - set(meta))
    if missing:
        raise CorruptFile(f"{path}: missing fields {missing}")


def _write_payload(raw_path, data, scalar_type, byte_order):
    order = ORDERS[byte_order]
    dtype = np.dtype(SCALARS[scalar_type]).newbyteorder(order)
    with open(raw_path, "wb") as fh:
        fh.write(np.array([MAGIC], dtype=np.dtype(np.uint64).newbyteorder(order)).tobytes())
        fh.write(np.ascontiguousarray(data, dtype=dtype).tobytes())


def _read_payload(raw_path, count, scalar_type, byte_order):
    if scalar_type not in SCALARS:
        raise CorruptFile(f"unsupported scalar_type {scalar_type!r}")
    if byte_order not in ORDERS:
        raise CorruptFile(f"unsupported byte_order {byte_order!r}")
    order = ORDERS[byte_order]
    dtype = np.dtype(SCALARS[scalar_type]).newbyteorder(order)
    try:
        blob = Path(raw_path).read_bytes()
    except OSError as exc:
        raise CorruptFile(f"cannot read {raw_path}: {exc}") from exc
    expected = 8 + count * dtype.itemsize
    if len(blob) != expected:
        raise CorruptFile(f"{raw_path}: {len(blob)} bytes, expected {expected}")
    magic = int(np.frombuffer(blob[:8], dtype=np.dtype(np.uint64).newbyteorder(order))[0])
    if magic != MAGIC:
        if magic == int(np.array([MAGIC], np.uint64).byteswap()[0]):
            raise CorruptFile(f"{raw_path}: byte order differs from the declared {byte_order!r}")
        raise CorruptFile(f"{raw_path}: bad magic number")
    return np.frombuffer(blob[8:], dtype=dtype).astype(SCALARS[scalar_type])


def save_volume(path, f: Volume, scalar_type="float64", byte_order="little"):
    """Write ``f`` as ``path.meta`` + ``path.raw``; returns the meta path."""
    if scalar_type not in SCALARS:
        raise ValueError(f"scalar_type must be one of {tuple(SCALARS)}")
    meta, raw = _paths(path)
    os.makedirs(meta.parent, exist_ok=True)
    _write_payload(raw, f.data.ravel(order="F"), scalar_type, byte_order)
    write_meta(meta, [("kind", "volume"), ("dims", f.dims), ("spacing_mm", f.spacing_mm),
                      ("origin_mm", f.origin_mm), ("scalar_type", scalar_type),
                      ("byte_order", byte_order), ("data_file", raw.name)])
    return meta


def load_volume(path) -> Volume:
    meta_path, _ = _paths(path)
    meta = read_meta(meta_path, VOLUME_KEYS)
    _require(meta, VOLUME_KEYS, meta_path)
    if meta["kind"] != "volume":
        raise CorruptFile(f"{meta_path}: kind is {meta['kind']!r}, expected 'volume'")
    try:
        dims = tuple(int(x) for x in meta["dims"].split())
        spacing = tuple(float(x) for x in meta["spacing_mm"].split())
        origin = tuple(float(x) for x in meta["origin_mm"].split())
    except ValueError as exc:
        raise CorruptFile(f"{meta_path}: {exc}") from exc
    if len(dims) != 3:
        raise CorruptFile(f"{meta_path}: dims must have 3 entries")
    data = _read_payload(meta_path.parent / meta["data_file"], int(np.prod(dims)),
                         meta["scalar_type"], meta["byte_order"])
    return Volume(data.reshape(dims, order="F"), spacing, origin)


def _geometry_items(g):
    return [(f"geometry.{k}", v) for k, v in g.to_dict().items()]


def _parse_geometry(meta):
    fields = Geometry.__dataclass_fields__
    kw = {}
    for name in fields:
        raw = meta[f"geometry.{name}"]
        if name in ("rotation_axis", "beam"):
            kw[name] = raw
        elif name in ("num_views", "supersampling"):
            kw[name] = int(raw)
        elif name == "detector_size_px":
            kw[name] = tuple(int(x) for x in raw.split())
        elif name in ("angular_span_deg", "detector_spacing_mm"):
            kw[name] = tuple(float(x) for x in raw.split())
        else:
            kw[name] = float(raw)
    return Geometry(**kw)


def save_stack(path, p: ProjectionStack, scalar_type="float64", byte_order="little"):
    meta, raw = _paths(path)
    os.makedirs(meta.parent, exist_ok=True)
    _write_payload(raw, p.data.ravel(), scalar_type, byte_order)
    write_meta(meta, [("kind", "stack"), ("dims", p.data.shape), ("scalar_type", scalar_type),
                      ("byte_order", byte_order), ("data_file", raw.name)] + _geometry_items(p.geometry))
    return meta


def load_stack(path, geometry: Geometry = None) -> ProjectionStack:
    """Load a stack; if ``geometry`` is given it must equal the stored one."""
    meta_path, _ = _paths(path)
    meta = read_meta(meta_path, STACK_KEYS)
    _require(meta, STACK_KEYS, meta_path)
    if meta["kind"] != "stack":
        raise CorruptFile(f"{meta_path}: kind is {meta['kind']!r}, expected 'stack'")
    try:
        stored = _parse_geometry(meta)
        dims = tuple(int(x) for x in meta["dims"].split())
    except (ValueError, TypeError) as exc:
        raise CorruptFile(f"{meta_path}: bad geometry: {exc}") from exc
    if dims != (stored.num_views,) + stored.detector_shape:
        raise CorruptFile(f"{meta_path}: dims {dims} disagree with the stored geometry")
    if geometry is not None and geometry != stored:
        raise ShapeMismatch(f"{meta_path}: stored geometry differs from the expected one")
    data = _read_payload(meta_path.parent / meta["data_file"], int(np.prod(dims)),
                         meta["scalar_type"], meta["byte_order"])
    return ProjectionStack(data.reshape(dims), stored)


def save_transform(path, t):
    if t.kind == "affine":
        items = [("kind", "affine"), ("params", t.params)]
    else:
        items = [("kind", "bspline"), ("control_dims", t.control_dims),
                 ("control_spacing_mm", t.control_spacing_mm),
                 ("lattice_origin_mm", t.lattice_origin_mm),
                 ("coefficients", [float(c) for c in t.coefficients.ravel()])]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_meta(path, items)


def load_transform(path):
    meta = read_meta(path, {"kind", "params", "control_dims", "control_spacing_mm",
                            "lattice_origin_mm", "coefficients"})
    _require(meta, {"kind"}, path)
    try:
        if meta["kind"] == "affine":
            _require(meta, {"params"}, path)
            return AffineTransform(tuple(float(x) for x in meta["params"].split()))
        if meta["kind"] == "bspline":
            _require(meta, {"control_dims", "control_spacing_mm", "lattice_origin_mm", "coefficients"}, path)
            return BSplineTransform(tuple(int(x) for x in meta["control_dims"].split()),
                                    tuple(float(x) for x in meta["control_spacing_mm"].split()),
                                    tuple(float(x) for x in meta["lattice_origin_mm"].split()),
                                    np.array([float(x) for x in meta["coefficients"].split()]))
    except ValueError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    raise CorruptFile(f"{path}: unknown transform kind {meta['kind']!r}")
