import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asipdyn import interval_maps as im
from asipdyn import observables as ob
from asipdyn import transfer as tr

E = ob.eval_observable
M_LEVELS = [1.0, 2.0, 5.0, 10.0, 100.0]


def builtin_observables():
    return {
        "power_law": ob.power_law(0.25),
        "power_law_shift": ob.power_law(0.5, shift=0.1),
        "log_damped_power": ob.log_damped_power(0.3, 1.0),
        "cosine": ob.cosine(1),
        "cosine3": ob.cosine(3),
        "indicator": ob.indicator(0.2, 0.6),
        "centered_linear": ob.centered_linear(),
        "constant": ob.constant(0.7),
    }


@pytest.fixture(scope="module")
def lsv_op():
    return tr.build_ulam(im.lsv(0.25), tr.BinGrid.geometric(8192, 1e-8))


def dense_tv(f, extra=()):
    """Total variation of ``f`` padded with zeros, sampled on a fine grid."""
    pts = {0.0, 1.0, *extra}
    for _, p in f.terms:
        pts.update((p.lo, p.hi))
    x = np.unique(np.concatenate([np.linspace(0.0, 1.0, 1_000_001), sorted(pts)]))
    x = x[(x >= 0) & (x <= 1)]
    vals = np.concatenate([[0.0], E(f, x), [0.0]])
    # one-sided limits at breakpoints are approached by neighbouring samples
    return float(np.abs(np.diff(vals)).sum())


def test_eval_examples():
    assert E(ob.centered_linear(), 0.5) == 0.0
    assert E(ob.power_law(0.25), 1e-4) == pytest.approx(10.0, rel=1e-14)
    f = ob.combine([(0.5, ob.indicator(0, 0.5)), (0.5, ob.indicator(0.5, 1))])
    assert E(f, 0.7) == 0.5


def test_cosine_pieces_reproduce_cosine():
    x = np.linspace(0, 1, 10_001)
    for k in (1, 2, 5):
        f = ob.cosine(k)
        assert f.weight_sum == pytest.approx(1.0)
        np.testing.assert_allclose(E(f, x), np.cos(2 * np.pi * k * x), atol=1e-13)


def test_variation_examples():
    assert ob.variation_norm(ob.indicator(0.2, 0.6)) == pytest.approx(2.0, abs=1e-14)
    assert ob.variation_norm(ob.centered_linear()) == pytest.approx(2.0, abs=1e-14)
    bv, _ = ob.decompose_H(ob.power_law(0.25), 10.0)
    v = ob.variation_norm(bv)
    assert v <= 30.0
    assert v == pytest.approx(dense_tv(bv), abs=1e-6)
    with pytest.raises(ob.UnboundedVariationError):
        ob.variation_norm(ob.power_law(0.25))


@pytest.mark.parametrize("name", ["cosine", "cosine3", "indicator", "centered_linear",
                                  "constant", "power_law_shift"])
def test_variation_matches_dense_oracle(name):
    f = builtin_observables()[name]
    assert ob.variation_norm(f) == pytest.approx(dense_tv(f), abs=1e-6)


def test_lil_condition_examples():
    assert ob.lil_condition_integral(ob.TailFunction.power(6.0), 0.25) == pytest.approx(1.0, abs=1e-6)
    assert math.isinf(ob.lil_condition_integral(ob.TailFunction.power(3.0), 0.25))
    # bounded observable: int_0^m x dx
    assert ob.lil_condition_integral(ob.TailFunction.step(5.0), 0.25) == pytest.approx(12.5, rel=1e-9)


def test_tail_function_invariants():
    t = np.linspace(0.0, 1e6, 10_000)
    for H in (ob.TailFunction.power(4.0), ob.TailFunction.step(3.0),
              ob.TailFunction.table([0, 1, 10], [1.0, 0.5, 0.0]),
              ob.TailFunction.power(4.0).capped(2.0)):
        v = H(t)
        assert np.all(np.diff(v) <= 0)
        assert H(1e6) <= 1e-6 or H.kind == "capped"
    big = ob.lil_condition_integral(ob.TailFunction.power(6.0, 1.0), 0.25)
    small = ob.lil_condition_integral(ob.TailFunction.power(6.0, 0.5), 0.25)
    assert small <= big


def test_decompose_H_examples():
    _, rem = ob.decompose_H(ob.cosine(1), 4.0)
    assert np.all(E(rem, np.linspace(0, 1, 1001)) == 0.0)
    _, rem = ob.decompose_H(ob.power_law(0.25), 10.0)
    x = np.array([1e-6, 9.9e-5, 1.01e-4, 0.5])
    assert np.all(E(rem, x)[:2] > 10.0)
    assert np.all(E(rem, x)[2:] == 0.0)


def test_decompose_H_remainder_tag():
    f = ob.power_law(0.25, tag=ob.TailClass(ob.TailFunction.power(4.0)))
    _, rem = ob.decompose_H(f, 10.0)
    H = rem.tag.H
    assert H(100.0) == pytest.approx(min(10.0 ** -4, 100.0 ** -4))
    assert H(0.5) == pytest.approx(10.0 ** -4)


@pytest.mark.parametrize("name", sorted(builtin_observables()))
@pytest.mark.parametrize("m", M_LEVELS)
def test_decompose_H_properties(name, m):
    f = builtin_observables()[name]
    bv, rem = ob.decompose_H(f, m)
    x = np.random.default_rng(3).random(1000)
    assert np.max(np.abs(E(bv, x) + E(rem, x) - E(f, x))) <= 1e-12
    assert ob.variation_norm(bv) <= 3 * m + 1e-9


@pytest.mark.parametrize("name", sorted(builtin_observables()))
def test_decompose_H_remainder_monotone_in_m(name):
    f = builtin_observables()[name]
    x = np.geomspace(1e-12, 1.0, 200_001)
    dx = np.diff(x)
    norms = []
    for m in M_LEVELS:
        _, rem = ob.decompose_H(f, m)
        r = np.abs(E(rem, x))
        norms.append(float(np.sum(0.5 * (r[1:] + r[:-1]) * dx)))
    assert all(b <= a + 1e-15 for a, b in zip(norms, norms[1:]))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.9), st.floats(0.5, 1e3), st.floats(0.0, 1.0))
def test_decompose_H_reconstruction_property(a, m, x):
    f = ob.power_law(a)
    bv, rem = ob.decompose_H(f, m)
    if x == 0.0:
        return
    assert abs(E(bv, x) + E(rem, x) - E(f, x)) <= 1e-12 * max(1.0, abs(E(f, x)))


def _mu_sq_above_oracle(a, K, edges, h):
    """mu(g^2 1{g >= K}) for g = x^-a, integrated bin by bin in closed form."""
    xk = 1.0 if K <= 0 else min(1.0, K ** (-1.0 / a))
    lo, hi = edges[:-1], np.minimum(edges[1:], xk)
    sel = hi > lo
    e = 1.0 - 2.0 * a
    return float(np.sum(h[sel] * (hi[sel] ** e - lo[sel] ** e) / e))


def test_decompose_L2_threshold_against_grid_scan(lsv_op):
    a, eps = 0.2, 0.1
    g = ob.power_law(a, tag=ob.L2Class(2.0))
    _, _, info = ob.decompose_L2(g, eps, lsv_op.edges, lsv_op.h)
    K = info["K"][0]
    step = 1e-3
    grid = np.arange(0.0, 100.0, step)
    vals = np.array([_mu_sq_above_oracle(a, k, lsv_op.edges, lsv_op.h) for k in grid])
    K_scan = grid[np.argmax(vals <= eps ** 2)]
    assert abs(K - K_scan) <= step


def test_decompose_L2_reconstruction_and_tag(lsv_op):
    f = ob.combine([(0.5, ob.power_law(0.2)), (0.5, ob.cosine(1))])
    f = f.with_tag(ob.L2Class(3.0))
    bv, rem, info = ob.decompose_L2(f, 0.1, lsv_op.edges, lsv_op.h)
    x = np.random.default_rng(1).random(1000)
    np.testing.assert_allclose(E(bv, x) + E(rem, x), E(f, x), atol=1e-12)
    assert rem.tag.M <= 0.2 + 1e-15
    assert rem.weight_sum <= 1.0 + 1e-12


def test_decompose_L2_degenerate(lsv_op):
    g = ob.centered_linear(tag=ob.L2Class(0.5))
    bv, rem, info = ob.decompose_L2(g, 10.0, lsv_op.edges, lsv_op.h)
    assert info["degenerate"]
    assert not bv.terms
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(E(rem, x), E(g, x), atol=1e-15)


def test_decompose_L2_needs_tag(lsv_op):
    with pytest.raises(ValueError):
        ob.decompose_L2(ob.centered_linear(), 0.1, lsv_op.edges, lsv_op.h)


def test_truncate_gn_examples():
    f = ob.truncate_gn(ob.centered_linear(), 16, 1.0)
    assert f.meta["truncation_level"] == pytest.approx(4.0 / math.sqrt(math.log(math.log(16))),
                                                       rel=1e-14)
    assert f.meta["truncation_level"] == pytest.approx(3.961, abs=1e-3)
    x = np.linspace(0, 1, 101)
    np.testing.assert_array_equal(E(f, x), E(ob.centered_linear(), x))
    tiny = ob.truncate_gn(ob.centered_linear(), 16, 1e-12)
    assert np.all(E(tiny, x) == 0.0)
    with pytest.raises(ValueError):
        ob.truncate_gn(ob.centered_linear(), 8, 1.0)


def test_loglog_guard():
    assert ob.loglog(1) == 1.0
    assert ob.loglog(16) == pytest.approx(math.log(math.log(16)))


def test_check_class_reports(lsv_op):
    ok = ob.power_law(0.2, tag=ob.L2Class(5.0))
    bad = ob.power_law(0.2, tag=ob.L2Class(0.1))
    assert ob.check_class(ok, lsv_op.edges, lsv_op.h)["ok"]
    assert not ob.check_class(bad, lsv_op.edges, lsv_op.h)["ok"]
