import math

import numpy as np
import pytest

from asipdyn import interval_maps as im
from asipdyn import observables as ob
from asipdyn import statistics as st
from asipdyn import transfer as tr


@pytest.fixture(scope="module")
def dbl():
    return tr.build_ulam(im.doubling(), tr.BinGrid.uniform(1024))


@pytest.fixture(scope="module")
def cos_ens(dbl):
    return st.birkhoff_ensemble(im.doubling(), ob.cosine(1), 4096, 1000, 0, op=dbl,
                                times=(0.25, 0.5, 1.0))


def synthetic_ensemble(paths, checkpoints, n):
    """Ensemble built from explicit increments: ``paths`` is (R, n)."""
    S = np.cumsum(paths, axis=1)
    run = np.maximum.accumulate(np.abs(S), axis=1)
    cols = np.asarray(checkpoints) - 1
    return st.TrajectoryEnsemble("synthetic", "synthetic", n, paths.shape[0], 0, 0.0,
                                 "synthetic", np.asarray(checkpoints), S[:, cols], run[:, cols])


def test_checkpoints(cos_ens):
    n = cos_ens.n
    cps = set(cos_ens.checkpoints.tolist())
    assert n in cps and n // 2 in cps and 16 in cps
    for t in (0.25, 0.5, 1.0):
        k = st.checkpoint_index(n, t)
        assert k == math.floor((n - 1) * t) + 1
        assert k in cps


def test_constant_observable_gives_zero_paths(dbl):
    ens = st.birkhoff_ensemble(im.doubling(), ob.constant(2.5), 256, 50, 1, op=dbl)
    assert np.all(ens.S == 0.0) and np.all(ens.running_max == 0.0)
    res = st.clt_ks(ens, 1.0)
    assert res["ks_distance"] == pytest.approx(0.5) and not res["pass"]
    assert st.lil_statistic(ens)["median"] == 0.0
    assert st.wip_marginals(ens, 0.0, (0.5, 1.0))["cov_error"] == 0.0


def test_ensemble_variance_cosine(cos_ens):
    v = cos_ens.S_n.var(ddof=1) / cos_ens.n
    # R = 1000: relative standard error of a variance is about sqrt(2/R) = 0.045
    assert v == pytest.approx(0.5, abs=0.07)


def test_ensemble_determinism_and_threads(dbl):
    a = st.birkhoff_ensemble(im.doubling(), ob.cosine(1), 512, 600, 9, op=dbl)
    b = st.birkhoff_ensemble(im.doubling(), ob.cosine(1), 512, 600, 9, op=dbl, threads=3)
    np.testing.assert_array_equal(a.S, b.S)
    np.testing.assert_array_equal(a.running_max, b.running_max)
    # trajectory streams do not depend on R
    c = st.birkhoff_ensemble(im.doubling(), ob.cosine(1), 512, 300, 9, op=dbl)
    np.testing.assert_array_equal(a.S[:300], c.S)


def test_lebesgue_burnin_init(dbl):
    ens = st.birkhoff_ensemble(im.doubling(), ob.cosine(1), 256, 200, 2, op=dbl,
                               init=("lebesgue_burnin", 100))
    assert ens.init.startswith("lebesgue")
    assert np.all(np.isfinite(ens.S))


@pytest.mark.parametrize("mname,f", [
    ("doubling", ob.centered_linear()),
    ("doubling", ob.indicator(0.1, 0.4)),
    ("tent", ob.cosine(2)),
    ("lsv", ob.power_law(0.15)),
])
def test_centering(mname, f):
    m = {"doubling": im.doubling(), "tent": im.tent(), "lsv": im.lsv(0.25)}[mname]
    ens = st.birkhoff_ensemble(m, f, 2048, 400, 4)
    x = ens.S_n / ens.n
    se = x.std(ddof=1) / math.sqrt(len(x))
    assert abs(x.mean()) <= 3 * se + 1e-12


def test_sigma2_examples(dbl):
    c = ob.cosine(1)
    est = st.sigma2(dbl, c)
    assert est.sigma2_hat == pytest.approx(0.5, abs=0.02)
    assert st.sigma2(dbl, ob.constant(1.0)).sigma2_hat == pytest.approx(0.0, abs=1e-12)
    # u - u o T for u = cos(2 pi x) on the doubling map
    cob = ob.combine([(1.0, ob.cosine(1)), (-1.0, ob.cosine(2))])
    assert st.sigma2(dbl, cob).sigma2_hat == pytest.approx(0.0, abs=0.02)


def test_sigma2_rules_agree(dbl):
    f = ob.centered_linear()
    a = st.sigma2(dbl, f, ("adaptive", 1e-10))
    b = st.sigma2(dbl, f, ("fixed", 60))
    # exact value: 1/12 (1 + 2 sum 2^-k) = 1/4
    assert a.sigma2_hat == pytest.approx(0.25, abs=1e-4)
    assert abs(a.sigma2_hat - b.sigma2_hat) <= 2 * (a.standard_error + b.standard_error) + 1e-9
    rows = a.rows()
    assert rows[0]["lag"] == 0 and rows[-1]["cumsum"] == pytest.approx(a.raw - a.tail_estimate)


def test_sigma2_coboundary_invariance(dbl):
    f = ob.centered_linear()
    g = ob.combine([(1.0, f), (1.0, ob.cosine(1)), (-1.0, ob.cosine(2))])
    a, b = st.sigma2(dbl, f), st.sigma2(dbl, g)
    assert abs(a.sigma2_hat - b.sigma2_hat) <= 2 * (a.standard_error + b.standard_error) + 1e-6


def test_sigma2_scaling(dbl):
    f = ob.centered_linear()
    base = st.sigma2(dbl, f).sigma2_hat
    for c in (2.0, -0.5, 3.0):
        scaled = st.sigma2(dbl, ob.combine([(c, f)])).sigma2_hat
        assert scaled == pytest.approx(c * c * base, rel=1e-12)


def test_running_max_scaling(dbl):
    f = ob.cosine(1)
    a = st.birkhoff_ensemble(im.doubling(), f, 512, 100, 3, op=dbl)
    b = st.birkhoff_ensemble(im.doubling(), ob.combine([(-2.0, f)]), 512, 100, 3, op=dbl)
    np.testing.assert_array_equal(st.lil_statistic(b)["U"], 2.0 * st.lil_statistic(a)["U"])


def test_clt_and_wip_on_cosine(cos_ens):
    sigma = math.sqrt(0.5)
    res = st.clt_ks(cos_ens, sigma, tol=0.05)
    assert res["pass"]
    w = st.wip_marginals(cos_ens, sigma, (0.25, 0.5, 1.0))
    assert w["cov_error"] <= 0.1 * 0.5
    with pytest.raises(ValueError):
        st.clt_ks(cos_ens, 0.0)


def test_ks_normal_against_scipy():
    from scipy import stats
    z = np.random.default_rng(0).standard_normal(5000)
    assert st.ks_normal(z) == pytest.approx(stats.kstest(z, "norm").statistic, abs=1e-12)


def test_clt_ks_null_case():
    rng = np.random.default_rng(2)
    R, n = 4000, 64
    ens = synthetic_ensemble(rng.standard_normal((R, n)) * 2.0, [16, 32, 64], n)
    ks = st.clt_ks(ens, 2.0)["ks_distance"]
    assert ks <= 1.63 / math.sqrt(R)   # 99% Kolmogorov quantile


def test_wip_null_case():
    rng = np.random.default_rng(4)
    n = 64
    errs = []
    for R in (500, 8000):
        ens = synthetic_ensemble(rng.standard_normal((R, n)), [16, 32, 64], n)
        errs.append(st.wip_marginals(ens, 1.0, (0.25, 0.5, 1.0))["cov_error"])
    assert errs[1] < errs[0]
    assert errs[1] <= 4 / math.sqrt(8000) * 2


def _sup_abs_bm_cdf(x):
    """P(max_{t<=1} |B_t| < x) by the classical alternating series."""
    k = np.arange(0, 60)
    return float(4 / np.pi * np.sum((-1.0) ** k / (2 * k + 1)
                                    * np.exp(-((2 * k + 1) ** 2) * np.pi ** 2 / (8 * x * x))))


def test_lil_iid_normal_median():
    from scipy.optimize import brentq
    rng = np.random.default_rng(8)
    n, R = 100_000, 200
    S = np.empty((R, 1))
    M = np.empty((R, 1))
    for r in range(R):
        s = np.cumsum(rng.standard_normal(n))
        S[r, 0] = s[-1]
        M[r, 0] = np.abs(s).max()
    ens = st.TrajectoryEnsemble("iid", "normal", n, R, 8, 0.0, "synthetic",
                                np.array([n]), S, M)
    med = st.lil_statistic(ens)["median"]
    # U = max|S_k| / sqrt(n LLn) has median med(sup|B|) / sqrt(LLn) at a fixed n.
    oracle = brentq(lambda x: _sup_abs_bm_cdf(x) - 0.5, 0.3, 5.0) / math.sqrt(ob.loglog(n))
    assert med == pytest.approx(oracle, rel=0.1)


def test_lil_threshold_series(cos_ens):
    res = st.lil_statistic(cos_ens, threshold=3.0)
    assert 0.0 <= res["exceedance_rate"] <= 1.0
    assert len(res["series_partial"]) == len(cos_ens.checkpoints)
    assert np.all(np.diff(res["series_partial"]) >= 0)


def test_normalization_scan_doubling(dbl):
    ns = [256, 512, 1024, 2048, 4096]
    res = st.normalization_scan(im.doubling(), ob.cosine(1), ns, 800, 1, op=dbl)
    assert res["model"] == "linear"
    assert res["fit"]["linear_level"] == pytest.approx(0.5, abs=0.05)
    with pytest.raises(ValueError):
        st.normalization_scan(im.doubling(), ob.cosine(1), ns[:4], 10, 1, op=dbl)
