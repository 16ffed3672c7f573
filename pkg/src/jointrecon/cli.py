"""Command-line driver.

``jointrecon run CONFIG`` executes the full recipe (phantom, simulate,
method, metrics) and writes into the configured output directory:

``fixed_truth``, ``estimate`` and the per-method volumes
    raw volumes (``.meta`` + ``.raw``)
``transform.txt`` / ``true_transform.txt``
    recovered and ground-truth transforms
``traces.csv``
    ``stage,solve,iteration,f,grad_norm,tau`` for every sub-solve
``objective.csv``
    ``sweep,objective`` (simultaneous only)
``metrics.csv``
    ``metric,value``; deterministic, no timings
``manifest.txt``
    config hash, seed, version, budget note and per-stage wall clock

The other subcommands run one stage each.  Every subcommand accepts
``--set section.key=value`` overrides on top of the config file.

Exit codes: 0 ok, 2 config error, 3 pipeline error, 4 I/O error.  On
failure a single JSON object describing the error is printed to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigInvalid, CorruptFile, JointReconError, PipelineError
from .geometry import fit_detector, make_geometry
from .io import load_stack, load_transform, load_volume, save_stack, save_transform, save_volume
from .metrics import MetricsSummary
from .optimize import LineSearch, OptimizerOptions
from .phantom import (AffineRanges, BSplineRanges, NoiseSpec, RandomTransformSpec, SheppLoganSpec,
                      ToroidSpec, make_shepp_logan, make_toroid, random_affine_batch, random_bspline,
                      simulate_pair)
from .pipeline import (IterativeOptions, SequentialOptions, SimultaneousOptions, budget_options,
                       iterative, reconstruct_ls, register_ssd, sequential, simultaneous)
from .projector import set_threads
from .transform import AffineTransform, affine_build, warp
from .volume import Grid

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_IO = 0, 2, 3, 4


# --------------------------------------------------------------------------
# building experiment pieces from a config

def build_grid(cfg: ExperimentConfig) -> Grid:
    p = cfg.phantom
    if p.kind == "file":
        return load_volume(p.path).grid
    if p.spacing_mm is not None:
        spacing = p.spacing_mm
    elif p.extent_mm is not None:
        spacing = tuple(float(p.extent_mm) / n for n in p.dims)
    else:
        spacing = (1.0, 1.0, 1.0)
    return Grid(p.dims, spacing)


def build_phantom(cfg: ExperimentConfig):
    p = cfg.phantom
    if p.kind == "file":
        return load_volume(p.path)
    grid = build_grid(cfg)
    try:
        if p.kind == "toroid":
            return make_toroid(ToroidSpec(grid.dims, grid.spacing_mm, major_radius_mm=p.major_radius_mm,
                                          minor_radius_mm=p.minor_radius_mm, inside_value=p.inside_value,
                                          outside_value=p.outside_value, axis=p.axis))
        return make_shepp_logan(SheppLoganSpec(grid.dims, grid.spacing_mm, intensity_scale=p.intensity_scale))
    except JointReconError as exc:
        raise ConfigInvalid("phantom", str(exc)) from exc


def build_geometry(cfg: ExperimentConfig, grid: Grid):
    g = cfg.geometry
    kw = dict(rotation_axis=g.rotation_axis, beam=g.beam, supersampling=g.supersampling)
    distances = (g.source_to_origin_mm, g.origin_to_detector_mm)
    try:
        if g.detector == "auto":
            return fit_detector(grid, g.num_views, g.span_deg, distances, spacing_mm=g.detector_spacing_mm, **kw)
        spacing = g.detector_spacing_mm or (grid.spacing_mm[0], grid.spacing_mm[1])
        return make_geometry(g.num_views, g.span_deg, distances, (g.detector, spacing), **kw)
    except JointReconError as exc:
        raise ConfigInvalid("geometry", str(exc)) from exc


def build_truth(cfg: ExperimentConfig, grid: Grid):
    t = cfg.transform
    seed = cfg.run.seed if t.seed is None else t.seed
    try:
        if t.mode == "identity":
            return AffineTransform.identity() if t.kind == "affine" else random_bspline(
                RandomTransformSpec(seed, BSplineRanges(t.control_dims, ((0, 0),) * 3)), grid)
        if t.kind == "bspline":
            return random_bspline(RandomTransformSpec(seed, BSplineRanges(t.control_dims, t.offset_range_voxels)), grid)
        if t.mode == "random":
            ranges = AffineRanges(t.translation_range_mm, t.rotation_range_deg, t.scale_range, t.shear_range)
            return random_affine_batch(RandomTransformSpec(seed, ranges), t.index + 1)[t.index]
        return affine_build(t.translation_mm, t.rotation_deg, t.scale, t.shear)
    except JointReconError as exc:
        raise ConfigInvalid("transform", str(exc)) from exc


def optimizer_options(cfg: ExperimentConfig) -> OptimizerOptions:
    o = cfg.optimizer
    try:
        return OptimizerOptions(history=o.history, line_search=LineSearch(o.line_search),
                                wolfe_c1=o.wolfe_c1, wolfe_c2=o.wolfe_c2)
    except (JointReconError, ValueError) as exc:
        raise ConfigInvalid("optimizer", str(exc)) from exc


def method_options(cfg: ExperimentConfig):
    m = cfg.method
    common = dict(model=m.model, control_dims=m.control_dims, optimizer=cfg.optimizer.name,
                  optimizer_options=optimizer_options(cfg), scale_params=m.scale_params)
    try:
        if m.name == "sequential":
            return SequentialOptions(recon_iters=m.recon_iters, reg_iters=m.reg_iters, **common)
        if m.name == "iterative":
            return IterativeOptions(outer_iters=m.outer_iters, inner_recon_iters=m.inner_recon_iters,
                                    reg_iters=m.iterative_reg_iters, update_rule=m.update_rule,
                                    clamp_negative=m.clamp_negative, **common)
        return SimultaneousOptions(inner_f_iters=m.inner_f_iters, inner_zeta_iters=m.inner_zeta_iters,
                                   total_budget=m.total_budget, outer_sweeps=m.outer_sweeps,
                                   fdm_epsilon=m.fdm_epsilon, clamp_negative=m.clamp_negative,
                                   freeze_transform=m.freeze_transform, **common)
    except JointReconError as exc:
        raise ConfigInvalid("method", str(exc)) from exc


def run_method(cfg: ExperimentConfig, p1, p2, grid):
    opts = method_options(cfg)
    fn = {"sequential": sequential, "iterative": iterative, "simultaneous": simultaneous}[cfg.method.name]
    try:
        return fn(p1, p2, grid, opts)
    except PipelineError:
        raise
    except JointReconError as exc:
        raise PipelineError(cfg.method.name, exc) from exc


def forward_transform(result, truth):
    """The recovered transform expressed in the ground-truth direction.

    Sequential and iterative register the moving volume onto the fixed
    one, which estimates the inverse of the simulated deformation; affine
    estimates are inverted here so parameter errors compare like with
    like.  B-spline estimates are returned unchanged.
    """
    t = result.transform
    if result.method in ("sequential", "iterative") and t.kind == "affine" and truth.kind == "affine":
        return t.inverse()
    return t


def summarize(result, truth_volume, truth_transform):
    recovered = forward_transform(result, truth_transform)
    extra = {"budget": result.info.get("budget", 0)}
    if result.objective_history:
        extra["initial_objective"] = result.objective_history[0]
        extra["final_objective"] = result.objective_history[-1]
    return MetricsSummary.evaluate(result.estimate, truth_volume, recovered, truth_transform, **extra)


def write_traces(path, traces):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "solve", "iteration", "f", "grad_norm", "tau"])
        for stage in sorted(traces):
            for k, tr in enumerate(traces[stage]):
                for r in tr.records:
                    w.writerow([stage, k, r.iteration, repr(float(r.value)), repr(float(r.grad_norm)),
                                repr(float(r.step))])


def version_string():
    """``git describe``-style version, falling back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(path, cfg, timings, result):
    lines = [f"config_hash = {cfg.hash}", f"seed = {cfg.run.seed}", f"version = {version_string()}",
             f"numpy = {np.__version__}", f"method = {cfg.method.name}",
             f"budget = {result.info.get('budget', 0)}"]
    if cfg.method.name == "sequential":
        lines.append(f"budget_note = {cfg.method.recon_iters} iterations per reconstruction "
                     f"+ {cfg.method.reg_iters} registration iterations")
    lines += [f"wall_clock_s.{k} = {v:.3f}" for k, v in timings.items()]
    Path(path).write_text("\n".join(lines) + "\n")


class _Clock:
    def __init__(self):
        self.timings = {}

    def stage(self, name, fn, *args):
        t0 = time.perf_counter()
        try:
            return fn(*args)
        finally:
            self.timings[name] = time.perf_counter() - t0


def run_experiment(cfg: ExperimentConfig, output_dir=None):
    """Execute the full recipe for ``cfg``; returns ``(result, summary, out_dir)``."""
    out = Path(output_dir or cfg.output.directory)
    set_threads(cfg.run.threads)
    clock = _Clock()
    truth = clock.stage("phantom", build_phantom, cfg)
    grid = truth.grid
    geometry = build_geometry(cfg, grid)
    t_true = build_truth(cfg, grid)
    noise = NoiseSpec(cfg.noise.sigma, cfg.run.seed if cfg.noise.seed is None else cfg.noise.seed)
    p1, p2 = clock.stage("simulate", simulate_pair, truth, t_true, geometry, noise)
    result = clock.stage("method", run_method, cfg, p1, p2, grid)
    summary = clock.stage("metrics", summarize, result, truth, t_true)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if cfg.output.save_volumes:
            save_volume(out / "fixed_truth", truth)
            save_volume(out / "estimate", result.estimate)
            for name, vol in result.volumes().items():
                save_volume(out / name, vol)
        if cfg.output.save_stacks:
            save_stack(out / "p1", p1)
            save_stack(out / "p2", p2)
        save_transform(out / "transform.txt", result.transform)
        save_transform(out / "true_transform.txt", t_true)
        write_traces(out / "traces.csv", result.traces)
        if result.objective_history:
            with open(out / "objective.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["sweep", "objective"])
                w.writerows([k, repr(float(v))] for k, v in enumerate(result.objective_history))
        summary.to_csv(out / "metrics.csv")
        (out / "config.cfg").write_text(cfg.source_text)
        write_manifest(out / "manifest.txt", cfg, clock.timings, result)
    except OSError as exc:
        raise CorruptFile(f"cannot write outputs to {out}: {exc}") from exc
    return result, summary, out


# --------------------------------------------------------------------------
# argument parsing

def _overrides(args):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigInvalid("override", f"expected section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        out["run.seed"] = str(args.seed)
    if getattr(args, "method", None):
        out["method.name"] = repr(args.method)
    if getattr(args, "beam", None):
        out["geometry.beam"] = repr(args.beam)
    if args.threads is not None:
        out["run.threads"] = str(args.threads)
    return out


def _config(args):
    return load_config(args.config, _overrides(args))


def _out_dir(args, cfg):
    return Path(args.out or cfg.output.directory)


def cmd_run(args):
    cfg = _config(args)
    _, summary, out = run_experiment(cfg, args.out)
    print(f"final_mse={summary.mse!r} relative_error={summary.relative_error!r} output={out}")


def cmd_phantom(args):
    cfg = _config(args)
    f = build_phantom(cfg)
    path = save_volume(_out_dir(args, cfg) / "phantom", f)
    print(path)


def cmd_simulate(args):
    cfg = _config(args)
    f = build_phantom(cfg)
    geometry = build_geometry(cfg, f.grid)
    t = build_truth(cfg, f.grid)
    noise = NoiseSpec(cfg.noise.sigma, cfg.run.seed if cfg.noise.seed is None else cfg.noise.seed)
    p1, p2 = simulate_pair(f, t, geometry, noise)
    out = _out_dir(args, cfg)
    save_volume(out / "phantom", f)
    save_volume(out / "moving_truth", warp(f, t))
    save_stack(out / "p1", p1)
    save_stack(out / "p2", p2)
    save_transform(out / "true_transform.txt", t)
    print(out)


def cmd_reconstruct(args):
    cfg = _config(args)
    p = load_stack(args.stack)
    grid = build_grid(cfg)
    opts = budget_options(args.iters or cfg.method.recon_iters, optimizer_options(cfg))
    try:
        f, trace = reconstruct_ls(p, grid, opts, method=cfg.optimizer.name)
    except JointReconError as exc:
        raise PipelineError("reconstruct", exc) from exc
    out = _out_dir(args, cfg)
    save_volume(out / args.name, f)
    write_traces(out / f"{args.name}_trace.csv", {"reconstruct": [trace]})
    print(out / args.name)


def cmd_register(args):
    cfg = _config(args)
    fixed, moving = load_volume(args.fixed), load_volume(args.moving)
    init = load_transform(args.init) if args.init else None
    opts = budget_options(args.iters or cfg.method.reg_iters, optimizer_options(cfg))
    try:
        t, trace = register_ssd(fixed, moving, cfg.method.model, init, opts, cfg.method.control_dims,
                                cfg.optimizer.name, cfg.method.scale_params)
    except JointReconError as exc:
        raise PipelineError("register", exc) from exc
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_transform(out / "transform.txt", t)
    save_volume(out / "registered", warp(moving, t))
    write_traces(out / "register_trace.csv", {"register": [trace]})
    print(out / "transform.txt")


def cmd_joint(args):
    cfg = _config(args)
    p1, p2 = load_stack(args.p1), load_stack(args.p2)
    grid = build_grid(cfg)
    result = run_method(cfg, p1, p2, grid)
    out = _out_dir(args, cfg)
    save_volume(out / "estimate", result.estimate)
    for name, vol in result.volumes().items():
        save_volume(out / name, vol)
    save_transform(out / "transform.txt", result.transform)
    write_traces(out / "traces.csv", result.traces)
    print(out)


def cmd_metrics(args):
    result, truth = load_volume(args.result), load_volume(args.truth)
    recovered = load_transform(args.transform) if args.transform else None
    true_t = load_transform(args.true_transform) if args.true_transform else None
    if recovered is not None and true_t is not None and args.inverse:
        recovered = recovered.inverse()
    summary = MetricsSummary.evaluate(result, truth, recovered, true_t)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        summary.to_csv(args.out)
    for k, v in summary.rows():
        print(f"{k},{float(v)!r}")


def build_parser():
    ap = argparse.ArgumentParser(prog="jointrecon", description="Joint reconstruction and registration "
                                 "for limited-angle tomosynthesis.")
    ap.add_argument("--version", action="version", version=f"jointrecon {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("config", help="experiment config (.cfg)")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                           help="override a config key (repeatable)")
            p.add_argument("--seed", type=int, help="same as --set run.seed=N")
            p.add_argument("--beam", choices=("cone", "parallel"), help="same as --set geometry.beam=...")
        p.add_argument("--threads", type=int, help="kernel threads; 1 is deterministic")
        p.add_argument("--out", help="output directory (default: [output] directory)")
        p.set_defaults(func=fn)
        return p

    p = add("run", cmd_run, "phantom, simulate, method and metrics in one go")
    p.add_argument("--method", choices=("sequential", "iterative", "simultaneous"))
    add("phantom", cmd_phantom, "write the configured phantom volume")
    add("simulate", cmd_simulate, "write the phantom, ground truth transform and both projection stacks")
    p = add("reconstruct", cmd_reconstruct, "least-squares reconstruction of one stack")
    p.add_argument("--stack", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--name", default="reconstruction")
    p = add("register", cmd_register, "SSD registration of two volumes")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--init", help="initial transform file")
    p.add_argument("--iters", type=int)
    p = add("joint", cmd_joint, "run the configured joint method on two stacks")
    p.add_argument("--p1", required=True)
    p.add_argument("--p2", required=True)
    p.add_argument("--method", choices=("sequential", "iterative", "simultaneous"))
    p = add("metrics", cmd_metrics, "fidelity metrics of a result volume", config=False)
    p.add_argument("--result", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--transform")
    p.add_argument("--true-transform")
    p.add_argument("--inverse", action="store_true",
                   help="invert the recovered affine transform before comparing")
    return ap


def _fail(code, exc, **fields):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, **fields}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        set_threads(args.threads)
    try:
        args.func(args)
    except ConfigInvalid as exc:
        return _fail(EXIT_CONFIG, exc, section=exc.section)
    except PipelineError as exc:
        return _fail(EXIT_PIPELINE, exc, stage=exc.stage)
    except (CorruptFile, OSError) as exc:
        return _fail(EXIT_IO, exc)
    except JointReconError as exc:
        return _fail(EXIT_PIPELINE, exc, stage=args.command)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
