"""Unconstrained smooth minimisers: L-BFGS and nonlinear conjugate gradient.

Objectives are callables ``objective(x) -> ObjectiveEval`` (or any
``(value, gradient)`` pair) on flat float64 vectors.  Both solvers share
:func:`line_search`, which offers strong-Wolfe bracketing/zoom with
safeguarded cubic interpolation and Armijo backtracking by halving.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameter, LineSearchFailure, NonFiniteObjective

MAX_TRIALS = 40


class LineSearch(str, enum.Enum):
    BACKTRACKING = "backtracking"
    STRONG_WOLFE = "strong_wolfe"


class Termination(str, enum.Enum):
    GRAD_TOL = "GradTol"
    F_TOL = "FTol"
    MAX_ITERS = "MaxIters"
    LINE_SEARCH_FAILURE = "LineSearchFailure"


@dataclass(frozen=True)
class ObjectiveEval:
    value: float
    gradient: np.ndarray

    def __iter__(self):
        return iter((self.value, self.gradient))


@dataclass
class OptimizerOptions:
    """Stopping rules and line-search constants.

    A run stops after ``max_iters`` iterations, when
    ``||g||_inf <= grad_tol * (1 + |f|)``, or when one step lowers ``f``
    by no more than ``f_tol * max(|f|, 1)``.  With both tolerances at 0
    the budget is spent in full unless the line search fails.
    """

    max_iters: int = 100
    grad_tol: float = 1e-6
    f_tol: float = 1e-9
    history: int = 10
    line_search: LineSearch = LineSearch.STRONG_WOLFE
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    scaling: bool = True

    def __post_init__(self):
        try:
            self.line_search = LineSearch(self.line_search)
        except ValueError:
            raise InvalidParameter(f"unknown line search {self.line_search!r}") from None
        if int(self.max_iters) < 1:
            raise InvalidParameter("max_iters must be >= 1")
        if int(self.history) < 1:
            raise InvalidParameter("history must be >= 1")
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise InvalidParameter("need 0 < wolfe_c1 < wolfe_c2 < 1")
        if self.grad_tol < 0 or self.f_tol < 0:
            raise InvalidParameter("tolerances must be non-negative")
        self.max_iters = int(self.max_iters)
        self.history = int(self.history)


@dataclass
class IterationRecord:
    iteration: int
    value: float
    grad_norm: float
    step: float


@dataclass
class OptimizerTrace:
    records: list = field(default_factory=list)
    termination: Termination = None
    message: str = ""
    evaluations: int = 0

    def append(self, iteration, value, grad, step):
        self.records.append(IterationRecord(iteration, float(value),
                                            float(np.max(np.abs(grad))) if grad.size else 0.0,
                                            float(step)))

    @property
    def values(self):
        return np.array([r.value for r in self.records])

    @property
    def iterations(self):
        return self.records[-1].iteration if self.records else 0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "f", "grad_norm", "tau"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.value), repr(r.grad_norm), repr(r.step)])


def _evaluate(objective, x):
    v, g = objective(x)
    return float(v), np.asarray(g, dtype=np.float64).ravel()


def _finite(v, g):
    return math.isfinite(v) and bool(np.all(np.isfinite(g)))


def _cubic_min(a, fa, da, b, fb, db):
    # minimiser of the cubic through (a, fa, da) and (b, fb, db), or None
    d1 = da + db - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return None
    d2 = math.copysign(math.sqrt(rad), b - a)
    denom = db - da + 2 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def line_search(phi, tau0=1.0, mode=LineSearch.STRONG_WOLFE, c1=1e-4, c2=0.9, phi0=None):
    """Step length along a search direction.

    Parameters
    ----------
    phi : callable
        ``phi(tau) -> (value, slope)``; ``phi(0)`` must have negative slope.
    tau0 : float
        First trial step.
    mode : LineSearch
        ``STRONG_WOLFE`` returns a step meeting both strong Wolfe
        conditions; ``BACKTRACKING`` halves from ``tau0`` until the
        Armijo condition holds.
    phi0 : (float, float), optional
        Known ``phi(0)``, saving one evaluation.

    Returns
    -------
    float

    Raises
    ------
    LineSearchFailure
        On a non-descent direction or after 40 trials.
    """
    mode = LineSearch(mode)
    f0, s0 = phi(0.0) if phi0 is None else phi0
    if not s0 < 0:
        raise LineSearchFailure(f"not a descent direction (slope {s0:.3e})")
    trials = 0

    def trial(t):
        nonlocal trials
        trials += 1
        v, s = phi(t)
        if not (math.isfinite(v) and math.isfinite(s)):
            return math.inf, math.nan
        return v, s

    if mode is LineSearch.BACKTRACKING:
        t = tau0
        while trials < MAX_TRIALS:
            v, _ = trial(t)
            if v <= f0 + c1 * t * s0:
                return t
            t *= 0.5
        raise LineSearchFailure(f"Armijo condition not met after {trials} halvings")

    def zoom(lo, flo, slo, hi, fhi, shi):
        while trials < MAX_TRIALS:
            t = None
            if math.isfinite(fhi) and math.isfinite(shi):
                t = _cubic_min(lo, flo, slo, hi, fhi, shi)
            a, b = min(lo, hi), max(lo, hi)
            # stay away from the interval ends
            if t is None or not (a + 0.1 * (b - a) <= t <= b - 0.1 * (b - a)):
                t = 0.5 * (lo + hi)
            ft, st = trial(t)
            if ft > f0 + c1 * t * s0 or ft >= flo:
                hi, fhi, shi = t, ft, st
            else:
                if abs(st) <= -c2 * s0:
                    return t
                if st * (hi - lo) >= 0:
                    hi, fhi, shi = lo, flo, slo
                lo, flo, slo = t, ft, st
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        raise LineSearchFailure(f"zoom failed after {trials} trials")

    prev, fprev, sprev = 0.0, f0, s0
    t = tau0
    while trials < MAX_TRIALS:
        ft, st = trial(t)
        if ft > f0 + c1 * t * s0 or (prev > 0 and ft >= fprev):
            return zoom(prev, fprev, sprev, t, ft, st)
        if abs(st) <= -c2 * s0:
            return t
        if st >= 0:
            return zoom(t, ft, st, prev, fprev, sprev)
        prev, fprev, sprev = t, ft, st
        t *= 4.0
    raise LineSearchFailure(f"no acceptable step after {trials} trials")


class _Ray:
    """``phi(tau) = f(x + tau d)``, remembering every evaluation."""

    def __init__(self, objective, x, d, trace):
        self.objective, self.x, self.d, self.trace = objective, x, d, trace
        self.cache = {}

    def __call__(self, tau):
        self.trace.evaluations += 1
        v, g = _evaluate(self.objective, self.x + tau * self.d)
        self.cache[tau] = (v, g)
        return v, float(g @ self.d) if np.all(np.isfinite(g)) else math.nan


def _start(objective, x0, trace):
    x = np.array(x0, dtype=np.float64).ravel()
    trace.evaluations += 1
    f, g = _evaluate(objective, x)
    if not _finite(f, g):
        raise NonFiniteObjective(f"objective or gradient not finite at the starting point (f={f})")
    if g.shape != x.shape:
        raise InvalidParameter(f"gradient length {g.size} differs from iterate length {x.size}")
    trace.append(0, f, g, 0.0)
    return x, f, g


def _step(objective, x, f, g, d, tau0, opts, trace):
    ray = _Ray(objective, x, d, trace)
    tau = line_search(ray, tau0, opts.line_search, opts.wolfe_c1, opts.wolfe_c2, phi0=(f, float(g @ d)))
    fn, gn = ray.cache[tau]
    return tau, fn, gn


def _grad_small(opts, f, g):
    return np.max(np.abs(g)) <= opts.grad_tol * (1.0 + abs(f))


def lbfgs(objective, x0, opts=None, callback=None):
    """Limited-memory BFGS with the two-loop recursion.

    The first direction is steepest descent.  With ``opts.scaling`` the
    initial inverse Hessian is ``gamma * I``, ``gamma = s'z / z'z`` from
    the newest pair, otherwise ``I``.  Pairs with
    ``s'z <= 1e-10 ||s|| ||z||`` are not stored.

    Returns
    -------
    x : ndarray
        Final iterate.
    trace : OptimizerTrace
    """
    opts = opts or OptimizerOptions()
    trace = OptimizerTrace()
    x, f, g = _start(objective, x0, trace)
    S, Z, rho = [], [], []
    it = 0
    while True:
        if _grad_small(opts, f, g):
            trace.termination = Termination.GRAD_TOL
            break
        if it >= opts.max_iters:
            trace.termination = Termination.MAX_ITERS
            break
        q = g.copy()
        alphas = []
        for s, z, r in zip(reversed(S), reversed(Z), reversed(rho)):
            a = r * (s @ q)
            alphas.append(a)
            q -= a * z
        if S and opts.scaling:
            q *= (S[-1] @ Z[-1]) / (Z[-1] @ Z[-1])
        for s, z, r, a in zip(S, Z, rho, reversed(alphas)):
            q += (a - r * (z @ q)) * s
        d = -q
        if not g @ d < 0:
            S, Z, rho = [], [], []
            d = -g
        tau0 = 1.0 if S else min(1.0, 1.0 / np.linalg.norm(g))
        try:
            tau, fn, gn = _step(objective, x, f, g, d, tau0, opts, trace)
        except LineSearchFailure as exc:
            trace.termination = Termination.LINE_SEARCH_FAILURE
            trace.message = str(exc)
            break
        s = tau * d
        z = gn - g
        sz = s @ z
        if sz > 1e-10 * np.linalg.norm(s) * np.linalg.norm(z):
            S.append(s)
            Z.append(z)
            rho.append(1.0 / sz)
            if len(S) > opts.history:
                del S[0], Z[0], rho[0]
        decrease = f - fn
        x, f, g = x + s, fn, gn
        it += 1
        trace.append(it, f, g, tau)
        if callback is not None:
            callback(it, x, f)
        if decrease <= opts.f_tol * max(abs(f), 1.0):
            trace.termination = Termination.F_TOL
            break
    return x, trace


def nonlinear_cg(objective, x0, opts=None, callback=None):
    """Polak-Ribiere nonlinear CG with ``beta = max(0, beta_PR)``.

    Restarts along ``-g`` whenever the new direction does not descend.
    The initial trial step reuses the previous first-order decrease.
    Pass ``wolfe_c2`` around 0.1 for CG; the default 0.9 suits L-BFGS.
    """
    opts = opts or OptimizerOptions(wolfe_c2=0.1)
    trace = OptimizerTrace()
    x, f, g = _start(objective, x0, trace)
    d = -g
    it = 0
    prev = None
    while True:
        if _grad_small(opts, f, g):
            trace.termination = Termination.GRAD_TOL
            break
        if it >= opts.max_iters:
            trace.termination = Termination.MAX_ITERS
            break
        slope = float(g @ d)
        tau0 = min(1.0, 1.0 / np.linalg.norm(g)) if prev is None else prev[0] * prev[1] / slope
        try:
            tau, fn, gn = _step(objective, x, f, g, d, tau0, opts, trace)
        except LineSearchFailure as exc:
            trace.termination = Termination.LINE_SEARCH_FAILURE
            trace.message = str(exc)
            break
        decrease = f - fn
        x = x + tau * d
        beta = max(0.0, float(gn @ (gn - g)) / float(g @ g))
        prev = (tau, slope)
        f, g = fn, gn
        d = -g + beta * d
        if not g @ d < 0:
            d = -g
        it += 1
        trace.append(it, f, g, tau)
        if callback is not None:
            callback(it, x, f)
        if decrease <= opts.f_tol * max(abs(f), 1.0):
            trace.termination = Termination.F_TOL
            break
    return x, trace


SOLVERS = {"lbfgs": lbfgs, "cg": nonlinear_cg}


def minimize(objective, x0, method="lbfgs", opts=None, callback=None):
    try:
        solver = SOLVERS[method]
    except KeyError:
        raise InvalidParameter(f"unknown optimizer {method!r}") from None
    return solver(objective, x0, opts, callback)
