"""Experiment configuration files.

Configs are INI-style (``configparser``) with the sections below.
Values are Python literals (numbers, tuples, strings, booleans); bare
words are read as strings.  Unknown sections or keys are rejected before
anything runs.

.. code-block:: ini

    [run]
    seed = 0

    [geometry]
    num_views = 11
    span_deg = (-25, 25)
    detector = auto

    [phantom]
    kind = toroid
    dims = (48, 48, 48)

    [transform]
    kind = affine
    translation_mm = (10, 0, -20)
    rotation_deg = (0, -30, 0)

    [method]
    name = sequential

    [output]
    directory = runs/toroid_sequential
"""

from __future__ import annotations

import ast
import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigInvalid, InvalidGeometry, InvalidParameter, InvalidSpec


def _literal(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip()


def _tuple(section, key, value, n=None, cast=float):
    if not isinstance(value, (tuple, list)):
        value = (value,)
    try:
        out = tuple(cast(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigInvalid(section, f"{key} must be a sequence of numbers, got {value!r}") from None
    if n is not None and len(out) != n:
        raise ConfigInvalid(section, f"{key} needs {n} entries, got {len(out)}")
    return out


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1


@dataclass
class GeometryConfig:
    num_views: int = 11
    span_deg: tuple = (-25.0, 25.0)
    source_to_origin_mm: float = 600.0
    origin_to_detector_mm: float = 60.0
    # "auto" sizes the detector to the volume footprint
    detector: object = "auto"
    detector_spacing_mm: tuple = None
    rotation_axis: str = "y"
    beam: str = "cone"
    supersampling: int = 1


@dataclass
class PhantomConfig:
    kind: str = "toroid"
    dims: tuple = (70, 70, 70)
    spacing_mm: tuple = None
    extent_mm: float = None
    major_radius_mm: float = 20.0
    minor_radius_mm: float = 8.0
    inside_value: float = 4000.0
    outside_value: float = 0.0
    axis: str = "y"
    intensity_scale: float = 1.0
    path: str = None


@dataclass
class TransformConfig:
    kind: str = "affine"
    mode: str = "explicit"
    translation_mm: tuple = (0.0, 0.0, 0.0)
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)
    shear: tuple = (0.0, 0.0, 0.0)
    seed: int = None
    index: int = 0
    translation_range_mm: tuple = (-10.0, 10.0)
    rotation_range_deg: tuple = (-15.0, 15.0)
    scale_range: tuple = (0.9, 1.1)
    shear_range: tuple = (-0.05, 0.05)
    control_dims: tuple = (9, 9, 9)
    offset_range_voxels: tuple = ((-8.0, 8.0), (-4.0, 4.0), (-2.0, 2.0))


@dataclass
class NoiseConfig:
    sigma: float = 0.0
    seed: int = None


@dataclass
class MethodConfig:
    name: str = "sequential"
    model: str = "affine"
    control_dims: tuple = (9, 9, 9)
    total_budget: int = 1000
    recon_iters: int = 400
    reg_iters: int = 200
    outer_iters: int = 10
    inner_recon_iters: int = 20
    iterative_reg_iters: int = 60
    update_rule: str = "replace"
    inner_f_iters: int = 20
    inner_zeta_iters: int = 10
    outer_sweeps: int = None
    fdm_epsilon: float = 1e-3
    scale_params: bool = True
    clamp_negative: bool = False
    freeze_transform: bool = False


@dataclass
class OptimizerConfig:
    name: str = "lbfgs"
    history: int = 10
    line_search: str = "strong_wolfe"
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9


@dataclass
class OutputConfig:
    directory: str = "runs/out"
    save_volumes: bool = True
    save_stacks: bool = False


SECTIONS = {
    "run": RunConfig, "geometry": GeometryConfig, "phantom": PhantomConfig,
    "transform": TransformConfig, "noise": NoiseConfig, "method": MethodConfig,
    "optimizer": OptimizerConfig, "output": OutputConfig,
}
REQUIRED = ("geometry", "phantom", "transform", "method", "output")


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source_text: str = ""

    @property
    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def to_text(self):
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: repr(getattr(sec, f.name)) for f in fields(sec)}
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)


def parse_config(text, overrides=None):
    """Parse and validate config text.

    ``overrides`` maps ``"section.key"`` to literal strings and is
    applied on top of the file.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid("file", str(exc).splitlines()[0]) from exc
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigInvalid("override", f"expected section.key, got {dotted!r}")
        sec, key = dotted.split(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][key] = str(value)
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigInvalid(sec, "unknown section")
    for sec in REQUIRED:
        if not cp.has_section(sec):
            raise ConfigInvalid(sec, "missing section")
    parts = {}
    for name, cls in SECTIONS.items():
        known = {f.name for f in fields(cls)}
        values = {}
        if cp.has_section(name):
            for key, raw in cp[name].items():
                if key not in known:
                    raise ConfigInvalid(name, f"unknown key {key!r}")
                values[key] = _literal(raw)
        try:
            parts[name] = cls(**values)
        except TypeError as exc:
            raise ConfigInvalid(name, str(exc)) from exc
    cfg = ExperimentConfig(**parts, source_text=text)
    validate(cfg)
    return cfg


def load_config(path, overrides=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid("file", f"cannot read {path}: {exc}") from exc
    return parse_config(text, overrides)


def _choice(section, key, value, options):
    if value not in options:
        raise ConfigInvalid(section, f"{key} must be one of {options}, got {value!r}")


def _positive_int(section, key, value, allow_none=False):
    if value is None and allow_none:
        return
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigInvalid(section, f"{key} must be a positive integer, got {value!r}")


def validate(cfg: ExperimentConfig):
    """Normalise field types in place and check ranges."""
    r = cfg.run
    _positive_int("run", "threads", r.threads)
    if not isinstance(r.seed, int):
        raise ConfigInvalid("run", f"seed must be an integer, got {r.seed!r}")

    g = cfg.geometry
    _positive_int("geometry", "num_views", g.num_views)
    g.span_deg = _tuple("geometry", "span_deg", g.span_deg, 2)
    if g.detector != "auto":
        g.detector = _tuple("geometry", "detector", g.detector, 2, int)
    if g.detector_spacing_mm is not None:
        g.detector_spacing_mm = _tuple("geometry", "detector_spacing_mm", g.detector_spacing_mm, 2)
    _choice("geometry", "rotation_axis", g.rotation_axis, ("x", "y"))
    _choice("geometry", "beam", g.beam, ("cone", "parallel"))
    _positive_int("geometry", "supersampling", g.supersampling)

    p = cfg.phantom
    _choice("phantom", "kind", p.kind, ("toroid", "shepp_logan", "file"))
    if p.kind == "file":
        if not p.path:
            raise ConfigInvalid("phantom", "kind = file needs a path")
    else:
        p.dims = _tuple("phantom", "dims", p.dims, 3, int)
        if min(p.dims) < 2:
            raise ConfigInvalid("phantom", "dims must be >= 2")
        if p.spacing_mm is not None and p.extent_mm is not None:
            raise ConfigInvalid("phantom", "give spacing_mm or extent_mm, not both")
        if p.spacing_mm is not None:
            p.spacing_mm = _tuple("phantom", "spacing_mm", p.spacing_mm, 3)
        _choice("phantom", "axis", p.axis, ("x", "y", "z"))

    t = cfg.transform
    _choice("transform", "kind", t.kind, ("affine", "bspline"))
    _choice("transform", "mode", t.mode, ("explicit", "random", "identity"))
    if t.kind == "bspline" and t.mode == "explicit":
        raise ConfigInvalid("transform", "B-spline transforms must be random or identity")
    for key in ("translation_mm", "rotation_deg", "scale", "shear"):
        setattr(t, key, _tuple("transform", key, getattr(t, key), 3))
    for key in ("translation_range_mm", "rotation_range_deg", "scale_range", "shear_range"):
        setattr(t, key, _tuple("transform", key, getattr(t, key), 2))
    t.control_dims = _tuple("transform", "control_dims", t.control_dims, 3, int)
    t.offset_range_voxels = tuple(_tuple("transform", "offset_range_voxels", v, 2)
                                  for v in t.offset_range_voxels)
    if len(t.offset_range_voxels) != 3:
        raise ConfigInvalid("transform", "offset_range_voxels needs one range per axis")
    if t.index < 0:
        raise ConfigInvalid("transform", "index must be >= 0")

    m = cfg.method
    _choice("method", "name", m.name, ("sequential", "iterative", "simultaneous"))
    _choice("method", "model", m.model, ("affine", "bspline"))
    _choice("method", "update_rule", m.update_rule, ("replace", "average"))
    m.control_dims = _tuple("method", "control_dims", m.control_dims, 3, int)
    for key in ("total_budget", "recon_iters", "reg_iters", "outer_iters", "inner_recon_iters",
                "iterative_reg_iters", "inner_f_iters", "inner_zeta_iters"):
        _positive_int("method", key, getattr(m, key))
    _positive_int("method", "outer_sweeps", m.outer_sweeps, allow_none=True)
    if not m.fdm_epsilon > 0:
        raise ConfigInvalid("method", "fdm_epsilon must be positive")

    o = cfg.optimizer
    _choice("optimizer", "name", o.name, ("lbfgs", "cg"))
    _choice("optimizer", "line_search", o.line_search, ("strong_wolfe", "backtracking"))
    _positive_int("optimizer", "history", o.history)
    if not 0 < o.wolfe_c1 < o.wolfe_c2 < 1:
        raise ConfigInvalid("optimizer", "need 0 < wolfe_c1 < wolfe_c2 < 1")

    if cfg.noise.sigma < 0:
        raise ConfigInvalid("noise", "sigma must be >= 0")
    return cfg


__all__ = ["ExperimentConfig", "parse_config", "load_config", "validate", "SECTIONS",
           "ConfigInvalid", "InvalidGeometry", "InvalidParameter", "InvalidSpec"]
