"""Fidelity metrics: MSE, relative error, parameter errors, profiles."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRange, InvalidParameter, KindMismatch, ZeroReference
from .volume import Volume, same_grid

AXES = {"x": 0, "y": 1, "z": 2}


def mse(a: Volume, b: Volume) -> float:
    """Mean of squared voxel differences."""
    same_grid(a, b)
    d = a.data - b.data
    return float(np.mean(d * d))


def relative_error(result: Volume, truth: Volume) -> float:
    """``||result - truth||^2 / ||truth||^2``."""
    same_grid(result, truth)
    ref = float(np.sum(truth.data * truth.data))
    if ref == 0.0:
        raise ZeroReference("truth volume has zero norm")
    d = result.data - truth.data
    return float(np.sum(d * d)) / ref


def param_abs_error(recovered, truth):
    """Entrywise ``|recovered - truth|`` of the affine parameter vectors."""
    if recovered.kind != truth.kind:
        raise KindMismatch(f"cannot compare {recovered.kind} with {truth.kind}")
    return np.abs(recovered.vector() - truth.vector())


def param_error_stats(errors):
    """Mean and (population) standard deviation per parameter over cases."""
    e = np.asarray(errors, dtype=np.float64)
    return e.mean(axis=0), e.std(axis=0)


def write_param_stats_csv(path, errors):
    mean, std = param_error_stats(errors)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "mean_abs_error", "std_abs_error"])
        for i, (m, s) in enumerate(zip(mean, std), start=1):
            w.writerow([i, repr(float(m)), repr(float(s))])


def line_profile(f: Volume, axis, fixed_coords):
    """Voxel values along ``axis`` with the two other indices fixed.

    ``fixed_coords`` lists the remaining indices in x, y, z order.
    """
    ax = AXES[axis] if isinstance(axis, str) else int(axis)
    if ax not in (0, 1, 2):
        raise InvalidParameter(f"axis must be x, y or z, got {axis!r}")
    others = [i for i in range(3) if i != ax]
    if len(fixed_coords) != 2:
        raise InvalidParameter("need exactly two fixed coordinates")
    index = [slice(None)] * 3
    for o, c in zip(others, fixed_coords):
        if not 0 <= c < f.dims[o]:
            raise IndexOutOfRange(f"coordinate {c} outside axis {o} of length {f.dims[o]}")
        index[o] = int(c)
    return f.data[tuple(index)].copy()


def difference_image(a: Volume, b: Volume) -> Volume:
    same_grid(a, b)
    return a.with_data(a.data - b.data)


@dataclass
class MetricsSummary:
    mse: float
    relative_error: float
    initial_mse: float
    param_abs_error: np.ndarray = field(default=None)
    extra: dict = field(default_factory=dict)

    @classmethod
    def evaluate(cls, result: Volume, truth: Volume, recovered=None, true_transform=None, **extra):
        """Metrics of ``result`` against ``truth``; the initial MSE is that of
        the all-zero starting volume."""
        pe = None
        if recovered is not None and true_transform is not None and recovered.kind == "affine":
            pe = param_abs_error(recovered, true_transform)
        return cls(mse(result, truth), relative_error(result, truth),
                   float(np.mean(truth.data ** 2)), pe, dict(extra))

    def rows(self):
        out = [("initial_mse", self.initial_mse), ("final_mse", self.mse),
               ("initial_relative_error", 1.0), ("final_relative_error", self.relative_error)]
        out += sorted(self.extra.items())
        if self.param_abs_error is not None:
            out += [(f"param_abs_error_{i}", v) for i, v in enumerate(self.param_abs_error, start=1)]
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.rows():
                w.writerow([k, repr(float(v))])
