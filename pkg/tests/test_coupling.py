import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

from asipdyn import coupling as cp
from asipdyn.observables import loglog


def _g(a):
    return math.sqrt(a * loglog(a))


def test_schedule_powers_of_two():
    eps = 2.0 ** -np.arange(1, 11)
    A = cp.schedule(eps)
    assert A[:4] == [2, 4, 2048, 2 ** 21]
    assert all(isinstance(a, int) for a in A)
    assert all(a & (a - 1) == 0 for a in A)
    assert all(b > a for a, b in zip(A, A[1:]))
    assert cp.verify_decay(eps, A) == (True, None)


def test_schedule_single_level():
    assert cp.schedule([0.5]) == [2]


@pytest.mark.parametrize("eps", [[0.5, 0.5, 0.5], [0.5, 0.6], [0.5, -0.1], []])
def test_schedule_rejects_bad_eps(eps):
    with pytest.raises(cp.CouplingContractError):
        cp.schedule(eps)


def test_schedule_stalls_on_finite_set():
    with pytest.raises(cp.ScheduleStallError) as err:
        cp.schedule(2.0 ** -np.arange(1, 6), block_set=[2, 4, 8, 16])
    assert err.value.m >= 3


@settings(max_examples=40, deadline=None)
@given(rates=hs.lists(hs.floats(0.05, 0.95), min_size=2, max_size=7))
def test_schedule_satisfies_inequality(rates):
    eps = np.cumprod(rates)
    A = cp.schedule(eps, block_set="all")
    for m in range(1, len(A) + 1):
        for j in range(1, m - 1):
            assert eps[j - 1] * _g(A[j]) < 2.0 ** (j - m) * eps[m - 1] * _g(A[m - 1])


def test_verify_decay_detects_violation():
    eps = 2.0 ** -np.arange(1, 5)
    ok, bad = cp.verify_decay(eps, [2, 4, 8, 16])
    assert not ok and bad == (1, 3)
    inp = cp.synthetic_harness(0, 4, 100)
    with pytest.raises(cp.CouplingContractError):
        cp.build_Z(inp, [2, 4, 8, 16], 0)


def test_build_Z_recovers_W_when_sigma_m_equals_sigma():
    n = 5000
    inp = cp.synthetic_harness(3, 4, n, sigma=1.7, sigma_m=[1.7] * 4)
    A = cp.schedule(inp.eps)
    Z, lev, dm = cp.build_Z(inp, A, 0)
    W = inp.partner(1)
    np.testing.assert_allclose(Z, W, rtol=1e-15)
    assert not dm.any()
    assert lev[0] == 1 and lev.max() <= inp.levels


def test_build_Z_uses_delta_for_degenerate_level():
    n = 4000
    inp = cp.synthetic_harness(1, 3, n, sigma_m=[0.0, 0.5, 0.9])
    A = cp.schedule(inp.eps)
    Z, lev, dm = cp.build_Z(inp, A, 7)
    np.testing.assert_array_equal(dm, lev == 1)
    Z2, _, _ = cp.build_Z(inp, A, 7)
    np.testing.assert_array_equal(Z, Z2)
    # outside level 1 the output is the rescaled partner
    sel = lev == 2
    np.testing.assert_allclose(Z[sel], inp.partner(2)[sel] / 0.5)


def test_discrepancy_zero_and_shift():
    rng = np.random.default_rng(0)
    X = rng.standard_normal(1000)
    res = cp.asip_discrepancy(X, X)
    assert np.all(res["D"] == 0.0) and math.isnan(res["theil_sen_slope"])
    assert res["checkpoints"][0] == 16 and res["checkpoints"][-1] == 1000
    Y = rng.standard_normal(1000)
    a = cp.asip_discrepancy(X, Y)["D"]
    b = cp.asip_discrepancy(X + 3.0, Y + 3.0)["D"]
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
    with pytest.raises(ValueError):
        cp.asip_discrepancy(X[:10], Y[:10])


def test_harness_assumptions_hold():
    inp = cp.synthetic_harness(0, 5, 200_000)
    chk = cp.check_assumptions(inp)
    assert chk["all"]
    assert chk["eps_effective_ratio"] == pytest.approx(math.sqrt(2))
    assert inp.meta["U_sup"] <= inp.eps[-1] / 4


def test_harness_rejects_bad_arguments():
    with pytest.raises(cp.CouplingContractError):
        cp.synthetic_harness(0, 0, 10)
    with pytest.raises(cp.CouplingContractError):
        cp.synthetic_harness(0, 3, 10, perturbation="other")
    with pytest.raises(cp.CouplingContractError):
        cp.synthetic_harness(0, 3, 10, eps=[0.5, 0.25])


def test_coupling_run_iid_output():
    inp = cp.synthetic_harness(2, 5, 200_000)
    run = cp.coupling_run(inp, 2)
    assert run.decay_verified
    chk = cp.iid_normal_checks(run.Z, inp.sigma)
    assert chk["ks_pass"] and chk["autocorr_pass"]
    assert run.theil_sen_slope < 0
    assert run.rows()[-1]["n"] == 200_000


def test_iid_checks_flag_dependence():
    rng = np.random.default_rng(5)
    e = rng.standard_normal(100_001)
    ar = (e[1:] + 0.5 * e[:-1]) / math.sqrt(1.25)
    chk = cp.iid_normal_checks(ar, 1.0)
    assert chk["ks_pass"] and not chk["autocorr_pass"]
    assert not cp.iid_normal_checks(2.0 * e, 1.0)["ks_pass"]
