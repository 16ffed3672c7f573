import csv

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from jointrecon import Volume
from jointrecon.errors import IndexOutOfRange, KindMismatch, ShapeMismatch, ZeroReference
from jointrecon.metrics import (MetricsSummary, difference_image, line_profile, mse, param_abs_error,
                                param_error_stats, relative_error, write_param_stats_csv)
from jointrecon.phantom import ToroidSpec, make_toroid
from jointrecon.transform import AffineTransform, BSplineTransform, affine_build

finite = st.floats(-1e3, 1e3, allow_nan=False)
vols = arrays(np.float64, (4, 3, 5), elements=finite)


def test_mse_basics(rng):
    a = Volume(rng.standard_normal((5, 5, 5)))
    assert mse(a, a) == 0.0
    assert mse(a.with_data(a.data + 3.0), a) == pytest.approx(9.0)
    with pytest.raises(ShapeMismatch):
        mse(a, Volume(np.zeros((5, 5, 4))))


@given(a=vols, b=vols)
def test_mse_symmetric_nonnegative(a, b):
    va, vb = Volume(a), Volume(b)
    assert mse(va, vb) == mse(vb, va) >= 0
    assert (mse(va, vb) == 0) == np.array_equal(a, b)


def test_relative_error_basics(rng):
    t = Volume(rng.standard_normal((4, 4, 4)))
    assert relative_error(t, t) == 0.0
    assert relative_error(t.with_data(np.zeros(t.dims)), t) == pytest.approx(1.0)
    with pytest.raises(ZeroReference):
        relative_error(t, Volume(np.zeros((4, 4, 4))))


@given(a=vols, b=vols, s=st.floats(0.01, 100).flatmap(lambda v: st.sampled_from([v, -v])))
def test_relative_error_scale_invariant(a, b, s):
    assume(np.linalg.norm(b) > 1e-6)
    r1 = relative_error(Volume(a), Volume(b))
    r2 = relative_error(Volume(s * a), Volume(s * b))
    assert r2 == pytest.approx(r1, rel=1e-9, abs=1e-12)


def test_param_abs_error():
    assert not param_abs_error(AffineTransform(), AffineTransform()).any()
    e = param_abs_error(AffineTransform(), affine_build((10, 0, -20)))
    assert e[3] == 10 and e[7] == 0 and e[11] == 20
    assert np.delete(e, [3, 7, 11]).sum() == 0
    grid_t = BSplineTransform((4, 4, 4), (1, 1, 1), (0, 0, 0))
    with pytest.raises(KindMismatch):
        param_abs_error(AffineTransform(), grid_t)


@given(p=arrays(np.float64, (3, 12), elements=finite))
def test_param_error_triangle(p):
    a, b, c = (AffineTransform(tuple(row)) for row in p)
    assert np.all(param_abs_error(a, c) <= param_abs_error(a, b) + param_abs_error(b, c) + 1e-9)


def test_param_stats_csv(tmp_path):
    errors = [np.arange(12.0), np.arange(12.0) + 2]
    mean, std = param_error_stats(errors)
    np.testing.assert_allclose(mean, np.arange(12.0) + 1)
    np.testing.assert_allclose(std, 1.0)
    write_param_stats_csv(tmp_path / "s.csv", errors)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["parameter", "mean_abs_error", "std_abs_error"]
    assert len(rows) == 13 and float(rows[1][1]) == 1.0


def test_line_profile():
    f = Volume(np.full((5, 6, 7), 2.5))
    p = line_profile(f, "y", (1, 3))
    assert p.shape == (6,) and np.all(p == 2.5)
    assert line_profile(f, "z", (0, 0)).shape == (7,)
    with pytest.raises(IndexOutOfRange):
        line_profile(f, "x", (6, 0))


def test_toroid_profile_is_symmetric():
    f = make_toroid(ToroidSpec((41, 41, 41), spacing_mm=(70 / 41,) * 3))
    p = line_profile(f, "x", (20, 20))
    assert np.abs(p - p[::-1]).max() <= 1e-12
    # two plateaus separated by the hole
    edges = np.flatnonzero(np.diff(p != 0))
    assert len(edges) == 4


def test_difference_image(rng):
    a, b = (Volume(rng.standard_normal((3, 4, 5))) for _ in range(2))
    assert not difference_image(a, a).data.any()
    np.testing.assert_array_equal(difference_image(a, a.with_data(np.zeros(a.dims))).data, a.data)
    np.testing.assert_array_equal(difference_image(a, b).data, -difference_image(b, a).data)


def test_summary_csv(tmp_path, rng):
    truth = Volume(rng.random((4, 4, 4)))
    result = truth.with_data(truth.data + 0.1)
    s = MetricsSummary.evaluate(result, truth, affine_build((1, 0, 0)), AffineTransform(), budget=7)
    assert s.mse == pytest.approx(0.01)
    assert s.initial_mse == pytest.approx(np.mean(truth.data ** 2))
    s.to_csv(tmp_path / "m.csv")
    rows = dict(list(csv.reader(open(tmp_path / "m.csv")))[1:])
    assert {"initial_mse", "final_mse", "final_relative_error", "param_abs_error_4", "budget"} <= set(rows)
    assert float(rows["param_abs_error_4"]) == 1.0
