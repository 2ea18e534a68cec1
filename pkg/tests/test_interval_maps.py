import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asipdyn import interval_maps as im

BUILTINS = {
    "doubling": im.doubling(),
    "tent": im.tent(),
    "piecewise_linear": im.piecewise_linear([1.5, 3.0]),
    "lsv_0.25": im.lsv(0.25),
    "lsv_0.5": im.lsv(0.5),
}


def test_eval_examples():
    assert im.eval_map(im.doubling(), 0.3) == pytest.approx(0.6, abs=1e-15)
    expected = 0.25 * (1.0 + math.sqrt(2.0) * 0.5)
    assert im.eval_map(im.lsv(0.5), 0.25) == pytest.approx(expected, abs=1e-15)
    for g in (0.1, 0.25, 0.5, 0.9):
        assert im.eval_map(im.lsv(g), 0.75) == 0.5


def test_right_branch_owns_endpoints():
    lsv = im.lsv(0.25)
    assert im.eval_map(lsv, 0.5) == 0.0
    assert im.eval_map(lsv, np.nextafter(0.5, 0.0)) == pytest.approx(1.0, abs=1e-12)
    assert im.branch_index(im.doubling(), 0.5) == 1


def test_domain_errors():
    with pytest.raises(im.MapDomainError):
        im.eval_map(im.doubling(), 1.5)
    with pytest.raises(im.MapDomainError):
        im.derivative(im.doubling(), 0.5)
    with pytest.raises(im.MapDomainError):
        im.inverse_branch(im.lsv(0.5), 1, -0.1)


def test_derivative_examples():
    assert im.derivative(im.doubling(), 0.3) == 2.0
    assert im.derivative(im.tent(), 0.7) == -2.0
    v = im.derivative(im.lsv(0.5), 1e-8)
    assert 1.0 < v < 1.001
    assert im.derivative(im.lsv(0.25), 1e-12) < 1.0 + 1e-2


def test_second_derivative_closed_form():
    g, x = 0.25, 0.1
    expected = g * (1 + g) * 2 ** g * x ** (g - 1)
    assert im.second_derivative(im.lsv(g), x) == pytest.approx(expected, rel=1e-12)


def test_inverse_examples():
    assert im.inverse_branch(im.doubling(), 0, 0.6) == pytest.approx(0.3, abs=1e-15)
    assert im.inverse_branch(im.lsv(0.5), 1, 0.5) == pytest.approx(0.75, abs=1e-15)
    y = im.eval_map(im.lsv(0.5), 0.25)
    assert im.inverse_branch(im.lsv(0.5), 0, y) == pytest.approx(0.25, abs=1e-12)


def test_orbit_examples():
    np.testing.assert_allclose(im.orbit(im.doubling(), 1 / 3, 4), [1 / 3, 2 / 3, 1 / 3, 2 / 3],
                               atol=1e-15)
    np.testing.assert_array_equal(im.orbit(im.doubling(), 0.0, 3), [0.0, 0.0, 0.0])
    lsv = im.lsv(0.25)
    x = [0.9]
    for _ in range(2):
        x.append(float(im.eval_map(lsv, x[-1])))
    np.testing.assert_array_equal(im.orbit(lsv, 0.9, 3), x)


def test_orbit_floor_for_gpm():
    out = im.orbit(im.lsv(0.25), 0.0, 3)
    assert np.all(out > 0.0)
    assert out[0] == im.ORBIT_FLOOR


def test_validate_examples():
    rep = im.validate(im.doubling())
    assert rep.ok and rep.coverage_ok
    assert min(rep.min_abs_derivative) == 2.0
    assert rep.adler_ratio == 0.0

    rep = im.validate(im.lsv(0.25))
    assert 0.24 <= rep.gamma_hat <= 0.26
    assert rep.neutral_ok and not rep.gaps
    assert "unverified" in rep.transitivity

    rep = im.validate(im.piecewise_linear([1.5, 3.0]))
    assert min(rep.min_abs_derivative) == pytest.approx(1.5)


def test_doubling_exact_on_dyadics():
    k = np.arange(0, 2 ** 12)
    x = k / 2.0 ** 12
    y = im.eval_map(im.doubling(), x)
    np.testing.assert_array_equal(y, np.mod(2 * x, 1.0))


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_inverse_roundtrip(name):
    m = BUILTINS[name]
    rng = np.random.default_rng(7)
    x = rng.random(10_000)
    k = im.branch_index(m, x)
    y = im.eval_map(m, x)
    back = np.empty_like(x)
    for j in range(len(m.branches)):
        sel = k == j
        back[sel] = im.inverse_branch(m, j, y[sel])
    assert np.max(np.abs(back - x)) <= 1e-10


@pytest.mark.parametrize("gamma", [0.1, 0.25, 0.5, 0.75])
def test_neutral_branch_expands(gamma):
    x = np.geomspace(1e-10, 0.49, 500)
    assert np.all(im.derivative(im.lsv(gamma), x) > 1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(1e-9, 0.4999))
def test_lsv_inverse_property(gamma, x):
    m = im.lsv(gamma)
    y = float(im.eval_map(m, x))
    assert abs(float(im.inverse_branch(m, 0, y)) - x) <= 1e-12
