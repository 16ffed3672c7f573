"""Reconstruction, registration and the three joint pipelines.

* ``sequential``: reconstruct both stacks independently, then register.
* ``iterative``: alternate a few reconstruction iterations per stack with
  a registration solve and feed the warped moving volume back.
* ``simultaneous``: minimise
  ``0.5 * (||A f - p1||^2 + ||A T(f) - p2||^2)`` over ``f`` and the
  transform by alternating sub-solves.

Every sub-solve runs a fixed number of optimizer iterations (tolerances
0) so methods can be compared on equal iteration budgets.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidParameter, NonFiniteObjective, PipelineError, ShapeMismatch
from .optimize import OptimizerOptions, minimize
from .projector import get_projector
from .transform import (AffineTransform, BSplineTransform, Resampler, fdm_columns_dot,
                        ssd_with_gradient, warp)
from .volume import Grid, ProjectionStack, Volume

MODELS = ("affine", "bspline")


def budget_options(iters, base=None):
    """Optimizer options that spend exactly ``iters`` iterations."""
    base = base or OptimizerOptions()
    return replace(base, max_iters=int(iters), grad_tol=0.0, f_tol=0.0)


def initial_transform(model, grid, control_dims=(9, 9, 9)):
    """Identity affine matrix, or a B-spline with all-zero coefficients."""
    if model == "affine":
        return AffineTransform.identity()
    if model == "bspline":
        return BSplineTransform.for_grid(grid, control_dims)
    raise InvalidParameter(f"unknown transform model {model!r}")


def parameter_scale(t, grid):
    """Diagonal rescaling of the transform parameters.

    The optimizer works on ``u = zeta / scale``.  Affine matrix entries
    are scaled by the inverse RMS centred coordinate of their column so
    they move image content on the same mm scale as the translations;
    B-spline coefficients are left alone.
    """
    if t.kind != "affine":
        return np.ones(t.nparams)
    rms = [s * math.sqrt((n * n - 1) / 12.0) if n > 1 else s for n, s in zip(grid.dims, grid.spacing_mm)]
    col = np.array([1.0 / max(r, 1e-12) for r in rms] + [1.0])
    return np.tile(col, 3)


def _check_stacks(p1, p2):
    if p1.geometry != p2.geometry:
        raise ShapeMismatch("p1 and p2 must share one geometry")


def _flat(f):
    return f.data.ravel()


# --------------------------------------------------------------------------
# building blocks

def reconstruct_ls(p: ProjectionStack, grid: Grid, opts: OptimizerOptions = None, x0: Volume = None,
                   method="lbfgs", matrix_free=False):
    """Minimise ``0.5 * ||A f - p||^2`` starting from zero (or ``x0``).

    Returns
    -------
    Volume, OptimizerTrace
    """
    A = get_projector(p.geometry, grid, matrix_free)
    rhs = p.data.ravel()
    dims = grid.dims

    def objective(x):
        r = A.forward(x.reshape(dims).ravel(order="F")) - rhs
        g = A.adjoint(r).reshape(dims, order="F")
        return 0.5 * float(r @ r), g.ravel()

    start = np.zeros(grid.size) if x0 is None else _flat(x0)
    x, trace = minimize(objective, start, method, opts or OptimizerOptions())
    return Volume.on(grid, x.reshape(dims), check=False), trace


def register_ssd(fixed: Volume, moving: Volume, model="affine", init=None, opts: OptimizerOptions = None,
                 control_dims=(9, 9, 9), method="lbfgs", scale_params=True, spatial="interpolant"):
    """Minimise ``0.5 * ||warp(moving, t) - fixed||^2`` over ``t``.

    Starts from ``init`` or the identity of ``model``.

    Returns
    -------
    transform, OptimizerTrace
    """
    if fixed.dims != moving.dims:
        raise ShapeMismatch(f"fixed {fixed.dims} and moving {moving.dims} differ")
    t0 = init if init is not None else initial_transform(model, fixed.grid, control_dims)
    scale = parameter_scale(t0, fixed.grid) if scale_params else np.ones(t0.nparams)

    def objective(u):
        v, g = ssd_with_gradient(fixed, moving, t0.with_params(u * scale), spatial)
        return v, g * scale

    u, trace = minimize(objective, t0.vector() / scale, method, opts or OptimizerOptions())
    return t0.with_params(u * scale), trace


# --------------------------------------------------------------------------
# results

@dataclass
class JointResult:
    """Outputs of one pipeline run.

    ``estimate`` is the volume compared with the fixed ground truth: the
    warped moving reconstruction (sequential), ``f1`` after the final
    update (iterative) or ``f`` (simultaneous).
    """

    method: str
    transform: object
    f1: Volume = None
    f2: Volume = None
    warped: Volume = None
    f: Volume = None
    traces: dict = field(default_factory=dict)
    objective_history: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def estimate(self):
        if self.method == "sequential":
            return self.warped
        if self.method == "iterative":
            return self.f1
        return self.f

    def volumes(self):
        names = ("f1", "f2", "warped", "f")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


# --------------------------------------------------------------------------
# sequential

@dataclass
class SequentialOptions:
    recon_iters: int = 400
    reg_iters: int = 200
    model: str = "affine"
    control_dims: tuple = (9, 9, 9)
    optimizer: str = "lbfgs"
    optimizer_options: OptimizerOptions = field(default_factory=OptimizerOptions)
    scale_params: bool = True

    def __post_init__(self):
        if self.recon_iters < 1 or self.reg_iters < 1:
            raise InvalidParameter("iteration counts must be >= 1")
        if self.model not in MODELS:
            raise InvalidParameter(f"model must be one of {MODELS}")


def sequential(p1, p2, grid: Grid, opts: SequentialOptions = None):
    opts = opts or SequentialOptions()
    _check_stacks(p1, p2)
    ropts = budget_options(opts.recon_iters, opts.optimizer_options)
    f1, tr1 = reconstruct_ls(p1, grid, ropts, method=opts.optimizer)
    f2, tr2 = reconstruct_ls(p2, grid, ropts, method=opts.optimizer)
    t, trr = register_ssd(f1, f2, opts.model, None, budget_options(opts.reg_iters, opts.optimizer_options),
                          opts.control_dims, opts.optimizer, opts.scale_params)
    return JointResult("sequential", t, f1=f1, f2=f2, warped=warp(f2, t),
                       traces={"recon_fixed": [tr1], "recon_moving": [tr2], "registration": [trr]},
                       info={"budget": 2 * opts.recon_iters + opts.reg_iters})


# --------------------------------------------------------------------------
# iterative

class UpdateRule(str, enum.Enum):
    REPLACE_WITH_WARPED = "replace"
    AVERAGE_WITH_WARPED = "average"


@dataclass
class IterativeOptions:
    outer_iters: int = 10
    inner_recon_iters: int = 20
    reg_iters: int = 60
    update_rule: UpdateRule = UpdateRule.REPLACE_WITH_WARPED
    model: str = "affine"
    control_dims: tuple = (9, 9, 9)
    optimizer: str = "lbfgs"
    optimizer_options: OptimizerOptions = field(default_factory=OptimizerOptions)
    scale_params: bool = True
    clamp_negative: bool = False

    def __post_init__(self):
        self.update_rule = UpdateRule(self.update_rule)
        if min(self.outer_iters, self.inner_recon_iters, self.reg_iters) < 1:
            raise InvalidParameter("iteration counts must be >= 1")
        if self.model not in MODELS:
            raise InvalidParameter(f"model must be one of {MODELS}")


def iterative(p1, p2, grid: Grid, opts: IterativeOptions = None):
    """Alternate partial reconstructions with registration.

    Each outer iteration runs ``inner_recon_iters`` iterations on each
    stack (warm-started), registers the two partial volumes starting from
    the previous transform, then sets ``f1`` to the warped moving volume
    (or to its average with the fixed one) while ``f2`` keeps its value.
    """
    opts = opts or IterativeOptions()
    _check_stacks(p1, p2)
    ropts = budget_options(opts.inner_recon_iters, opts.optimizer_options)
    gopts = budget_options(opts.reg_iters, opts.optimizer_options)
    f1 = f2 = None
    t = initial_transform(opts.model, grid, opts.control_dims)
    traces = {"recon_fixed": [], "recon_moving": [], "registration": []}
    for _ in range(opts.outer_iters):
        f1_hat, tr1 = reconstruct_ls(p1, grid, ropts, x0=f1, method=opts.optimizer)
        f2_hat, tr2 = reconstruct_ls(p2, grid, ropts, x0=f2, method=opts.optimizer)
        t, trr = register_ssd(f1_hat, f2_hat, opts.model, t, gopts, opts.control_dims,
                              opts.optimizer, opts.scale_params)
        warped = warp(f2_hat, t)
        if opts.update_rule is UpdateRule.REPLACE_WITH_WARPED:
            f1 = warped
        else:
            f1 = f1_hat.with_data(0.5 * (f1_hat.data + warped.data))
        f2 = f2_hat
        if opts.clamp_negative:
            f1 = f1.with_data(np.maximum(f1.data, 0.0))
            f2 = f2.with_data(np.maximum(f2.data, 0.0))
        traces["recon_fixed"].append(tr1)
        traces["recon_moving"].append(tr2)
        traces["registration"].append(trr)
    return JointResult("iterative", t, f1=f1, f2=f2, warped=warp(f2, t), traces=traces,
                       info={"budget": opts.outer_iters * (2 * opts.inner_recon_iters + opts.reg_iters)})


# --------------------------------------------------------------------------
# simultaneous

def simultaneous_objective(f: Volume, t, p1, p2, matrix_free=False):
    """``0.5 * (||A f - p1||^2 + ||A T(f) - p2||^2)``."""
    A = get_projector(p1.geometry, f.grid, matrix_free)
    r1 = A.forward(f.flat()) - p1.data.ravel()
    r2 = A.forward(warp(f, t).flat()) - p2.data.ravel()
    return 0.5 * float(r1 @ r1 + r2 @ r2)


def simultaneous_grad_f(f: Volume, t, p1, p2, matrix_free=False) -> Volume:
    """``A^T (A f - p1) + T^* A^T (A T f - p2)``."""
    A = get_projector(p1.geometry, f.grid, matrix_free)
    R = Resampler(t, f.grid)
    r1 = A.forward(f.flat()) - p1.data.ravel()
    wf = R.apply(f.data)
    r2 = A.forward(wf.ravel(order="F")) - p2.data.ravel()
    g = A.adjoint(r1).reshape(f.dims, order="F") + R.adjoint(A.adjoint(r2).reshape(f.dims, order="F"))
    return f.with_data(g)


def simultaneous_grad_zeta(f: Volume, t, p2, epsilon=1e-3, matrix_free=False, projected=False):
    """Transform gradient of the coupled objective via central differences.

    Entry ``i`` is ``<A D_i, A T f - p2>`` with ``D_i`` the central
    difference of ``warp(f, .)`` in parameter ``i``.  The default path
    evaluates ``<D_i, A^T (A T f - p2)>``, which is the same number;
    ``projected=True`` forward-projects every ``D_i`` instead (slow).
    """
    A = get_projector(p2.geometry, f.grid, matrix_free)
    r2 = A.forward(warp(f, t).flat()) - p2.data.ravel()
    if projected:
        from .transform import fdm_transform_derivative
        return np.array([A.forward(fdm_transform_derivative(f, t, i, epsilon).flat()) @ r2
                         for i in range(t.nparams)])
    back = Volume.on(f.grid, A.adjoint(r2), check=False)
    return fdm_columns_dot(f, t, back, epsilon)


@dataclass
class SimultaneousOptions:
    inner_f_iters: int = 20
    inner_zeta_iters: int = 10
    total_budget: int = 1000
    outer_sweeps: int = None
    model: str = "affine"
    control_dims: tuple = (9, 9, 9)
    fdm_epsilon: float = 1e-3
    optimizer: str = "lbfgs"
    optimizer_options: OptimizerOptions = field(default_factory=OptimizerOptions)
    scale_params: bool = True
    clamp_negative: bool = False
    freeze_transform: bool = False

    def __post_init__(self):
        if min(self.inner_f_iters, self.inner_zeta_iters, self.total_budget) < 1:
            raise InvalidParameter("iteration counts must be >= 1")
        if not self.fdm_epsilon > 0:
            raise InvalidParameter("fdm_epsilon must be positive")
        if self.model not in MODELS:
            raise InvalidParameter(f"model must be one of {MODELS}")
        if self.outer_sweeps is None:
            self.outer_sweeps = max(1, self.total_budget // (self.inner_f_iters + self.inner_zeta_iters))
        if self.outer_sweeps < 1:
            raise InvalidParameter("outer_sweeps must be >= 1")


def simultaneous(p1, p2, grid: Grid, opts: SimultaneousOptions = None, matrix_free=False, callback=None):
    """Alternating minimisation of the coupled objective.

    Each sweep runs ``inner_f_iters`` iterations over the volume with the
    transform fixed, then ``inner_zeta_iters`` over the transform with
    the just-updated volume fixed.  ``freeze_transform`` skips the second
    half and keeps the identity, giving the no-registration baseline.
    ``callback(sweep, f, transform, objective)`` runs after every sweep.
    """
    opts = opts or SimultaneousOptions()
    _check_stacks(p1, p2)
    A = get_projector(p1.geometry, grid, matrix_free)
    b1, b2 = p1.data.ravel(), p2.data.ravel()
    dims = grid.dims
    fopts = budget_options(opts.inner_f_iters, opts.optimizer_options)
    zopts = budget_options(opts.inner_zeta_iters, opts.optimizer_options)
    t = initial_transform(opts.model, grid, opts.control_dims)
    scale = parameter_scale(t, grid) if opts.scale_params else np.ones(t.nparams)
    x = np.zeros(grid.size)
    traces = {"f": [], "zeta": []}
    history = []

    def full_objective(xf, tt):
        f = Volume.on(grid, xf.reshape(dims), check=False)
        return simultaneous_objective(f, tt, p1, p2, matrix_free)

    history.append(full_objective(x, t))
    for sweep in range(opts.outer_sweeps):
        R = Resampler(t, grid)

        def f_objective(xf):
            v = xf.reshape(dims)
            r1 = A.forward(v.ravel(order="F")) - b1
            wv = R.apply(v)
            r2 = A.forward(wv.ravel(order="F")) - b2
            g = A.adjoint(r1).reshape(dims, order="F") + R.adjoint(A.adjoint(r2).reshape(dims, order="F"))
            return 0.5 * float(r1 @ r1 + r2 @ r2), g.ravel()

        try:
            x, tr = minimize(f_objective, x, opts.optimizer, fopts)
        except NonFiniteObjective as exc:
            raise PipelineError("simultaneous.f", exc) from exc
        traces["f"].append(tr)
        if opts.clamp_negative:
            x = np.maximum(x, 0.0)
        f = Volume.on(grid, x.reshape(dims), check=False)

        if not opts.freeze_transform:
            r1 = A.forward(f.flat()) - b1
            const = 0.5 * float(r1 @ r1)

            def z_objective(u):
                tt = t.with_params(u * scale)
                wf = Resampler(tt, grid).apply(f.data)
                r2 = A.forward(wf.ravel(order="F")) - b2
                back = Volume.on(grid, A.adjoint(r2), check=False)
                g = fdm_columns_dot(f, tt, back, opts.fdm_epsilon)
                return const + 0.5 * float(r2 @ r2), g * scale

            try:
                u, tr = minimize(z_objective, t.vector() / scale, opts.optimizer, zopts)
            except NonFiniteObjective as exc:
                raise PipelineError("simultaneous.zeta", exc) from exc
            t = t.with_params(u * scale)
            traces["zeta"].append(tr)
        history.append(full_objective(x, t))
        if not math.isfinite(history[-1]):
            raise PipelineError("simultaneous", NonFiniteObjective(f"objective became {history[-1]} at sweep {sweep}"))
        if callback is not None:
            callback(sweep, f, t, history[-1])
    f = Volume.on(grid, x.reshape(dims), check=False)
    budget = opts.outer_sweeps * (opts.inner_f_iters + (0 if opts.freeze_transform else opts.inner_zeta_iters))
    return JointResult("simultaneous", t, f=f, traces=traces, objective_history=history,
                       info={"budget": budget, "sweeps": opts.outer_sweeps})


METHODS = {"sequential": sequential, "iterative": iterative, "simultaneous": simultaneous}
