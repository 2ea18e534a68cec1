"""Monte Carlo and operator-based checks of the limit theorems.

Ensembles store, per trajectory, the centered Birkhoff sums
``S_k = sum_{i<k} (f(T^i x) - nu(f))`` at a set of checkpoints together with
the running maximum of ``|S_k|``.  Trajectory ``r`` draws its start point
and its refresh bits from streams derived from ``(seed, r)`` only, and
trajectories are processed in fixed chunks whose results are written back by
index, so the output does not depend on the number of worker threads.

Affine maps lose one bit of the orbit per step in floating point (the
doubling map reaches 0 after about 53 steps).  The orbit kernel therefore
adds a random bit at ``2^-53`` after each step for affine maps; for the
doubling map this is exactly the Bernoulli shift on 53-bit expansions.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from . import kernels
from .interval_maps import IntervalMap
from .observables import Observable, eval_observable, loglog
from .transfer import _GL8, BinGrid, UlamOperator, build_ulam, correlations

__all__ = [
    "TrajectoryEnsemble",
    "VarianceEstimate",
    "birkhoff_ensemble",
    "default_operator",
    "sigma2",
    "clt_ks",
    "wip_marginals",
    "lil_statistic",
    "normalization_scan",
    "checkpoint_index",
    "ks_normal",
]

CHUNK = 256
BLOCK = 4096


def checkpoint_index(n: int, t: float) -> int:
    """Number of summands at time ``t``: ``floor((n - 1) t) + 1``."""
    return int(math.floor((n - 1) * t)) + 1


def default_operator(m: IntervalMap) -> UlamOperator:
    """Ulam operator used when none is supplied (geometric grid for GPM maps)."""
    if m.is_gpm:
        return build_ulam(m, BinGrid.geometric(8192, 1e-8))
    return build_ulam(m, BinGrid.uniform(1024))


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """Checkpointed Birkhoff sums of ``R`` trajectories.

    Attributes
    ----------
    checkpoints : ndarray of int
        Increasing summand counts ``k``.
    S : ndarray (R, C)
        ``S_k`` at each checkpoint.
    running_max : ndarray (R, C)
        ``max_{j <= k} |S_j|`` at each checkpoint.
    """

    map_name: str
    observable_name: str
    n: int
    R: int
    seed: int
    nu_f: float
    init: str
    checkpoints: np.ndarray
    S: np.ndarray
    running_max: np.ndarray
    backend: str = field(default="")

    def column(self, k: int) -> int:
        idx = np.flatnonzero(self.checkpoints == k)
        if len(idx) == 0:
            raise KeyError(f"no checkpoint at k={k}")
        return int(idx[0])

    @property
    def S_n(self) -> np.ndarray:
        return self.S[:, self.column(self.n)]

    @property
    def max_n(self) -> np.ndarray:
        return self.running_max[:, self.column(self.n)]

    def summary_rows(self) -> list[dict]:
        rows = []
        for j, k in enumerate(self.checkpoints):
            s = self.S[:, j]
            rows.append({
                "k": int(k),
                "t": float(k) / self.n,
                "mean_S": float(s.mean()),
                "var_S": float(s.var(ddof=1)) if self.R > 1 else 0.0,
                "var_over_k": float(s.var(ddof=1)) / float(k) if self.R > 1 else 0.0,
                "mean_running_max": float(self.running_max[:, j].mean()),
            })
        return rows


def _start_points(R: int, seed: int, init: str, op: UlamOperator | None):
    x0 = np.empty(R)
    states = np.empty(R, dtype=np.uint64)
    cdf = np.cumsum(op.pi) if op is not None else None
    for r in range(R):
        ss = np.random.SeedSequence(seed, spawn_key=(r,))
        rng = np.random.default_rng(ss)
        if init == "stationary":
            u = rng.random(2)
            i = min(int(np.searchsorted(cdf, u[0] * cdf[-1], side="right")), op.B - 1)
            x0[r] = op.edges[i] + u[1] * (op.edges[i + 1] - op.edges[i])
        else:
            x0[r] = rng.random()
        states[r] = np.random.SeedSequence(seed, spawn_key=(r, 1)).generate_state(1, np.uint64)[0]
    return x0, states


def _run_chunk(code, params, refresh, f, nu_f, x, states, n, burnin, cps):
    c = len(x)
    x = x.copy()
    states = states.copy()
    if burnin:
        tmp = np.empty((c, min(burnin, BLOCK)))
        left = burnin
        while left > 0:
            step = min(left, BLOCK)
            buf = tmp[:, :step] if step < tmp.shape[1] else tmp
            kernels.orbit_block(code, params, x, states, np.ascontiguousarray(buf), refresh)
            left -= step
    S = np.zeros((c, len(cps)))
    M = np.zeros((c, len(cps)))
    carry = np.zeros(c)
    runmax = np.zeros(c)
    t0 = 0
    ci = 0
    buf = np.empty((c, BLOCK))
    while t0 < n:
        L = min(BLOCK, n - t0)
        out = buf if L == BLOCK else np.empty((c, L))
        kernels.orbit_block(code, params, x, states, out, refresh)
        fx = eval_observable(f, out) - nu_f
        cs = np.cumsum(fx, axis=1)
        cs += carry[:, None]
        acs = np.abs(cs)
        # running max at every checkpoint inside the block
        start = 0
        while ci < len(cps) and cps[ci] <= t0 + L:
            j = cps[ci] - 1 - t0
            if j + 1 > start:
                runmax = np.maximum(runmax, acs[:, start:j + 1].max(axis=1))
                start = j + 1
            S[:, ci] = cs[:, j]
            M[:, ci] = runmax
            ci += 1
        if start < L:
            runmax = np.maximum(runmax, acs[:, start:].max(axis=1))
        carry = cs[:, -1].copy()
        t0 += L
    return S, M


def birkhoff_ensemble(m: IntervalMap, f: Observable, n: int, R: int, seed: int,
                      init: str | tuple = "stationary", op: UlamOperator | None = None,
                      checkpoints: Sequence[int] | None = None,
                      times: Sequence[float] = (), threads: int = 1) -> TrajectoryEnsemble:
    """Simulate ``R`` independent trajectories of length ``n``.

    Parameters
    ----------
    m, f : IntervalMap, Observable
    n : int
        Horizon (at least 16).
    R : int
        Number of trajectories.
    seed : int
    init : "stationary" or ("lebesgue_burnin", b)
        Start from the Ulam invariant measure, or from Lebesgue measure after
        ``b`` discarded steps.
    op : UlamOperator, optional
        Supplies ``nu(f)`` and the stationary law; built on demand.
    checkpoints : sequence of int, optional
        Extra summand counts to record (``n`` and ``n / 2^j`` are always kept).
    times : sequence of float
        Times ``t`` whose checkpoints ``floor((n - 1) t) + 1`` are added.
    threads : int
        Worker threads; results do not depend on it.
    """
    if n < 16:
        raise ValueError("birkhoff_ensemble needs n >= 16")
    if R < 1:
        raise ValueError("R must be positive")
    if op is None:
        op = default_operator(m)
    if isinstance(init, str):
        kind, burnin = init, 0
    else:
        kind, burnin = init[0], int(init[1])
    if kind not in ("stationary", "lebesgue_burnin"):
        raise ValueError(f"unknown init {init!r}")
    nu_f = op.nu(f)
    cps = {n}
    j = 1
    while n >> j >= 16:
        cps.add(n >> j)
        j += 1
    cps.update(int(k) for k in (checkpoints or ()))
    cps.update(checkpoint_index(n, t) for t in times)
    cps = np.array(sorted(k for k in cps if 1 <= k <= n), dtype=np.int64)

    code, params = m.kernel_spec()
    params = np.ascontiguousarray(params, dtype=float)
    refresh = code != 3
    x0, states = _start_points(R, seed, kind, op)
    chunks = [(s, min(R, s + CHUNK)) for s in range(0, R, CHUNK)]

    def work(bounds):
        a, b = bounds
        return _run_chunk(code, params, refresh, f, nu_f, x0[a:b], states[a:b], n, burnin, cps)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    S = np.concatenate([r[0] for r in results], axis=0)
    M = np.concatenate([r[1] for r in results], axis=0)
    init_label = kind if not burnin else f"{kind}({burnin})"
    return TrajectoryEnsemble(m.name, f.name, n, R, int(seed), float(nu_f), init_label,
                              cps, S, M, kernels.BACKEND)


# ---------------------------------------------------------------------------
# Variance series
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceEstimate:
    """Asymptotic variance from the correlation series.

    ``standard_error`` combines the tail estimate with the projection error
    of the lag-0 term (Galerkin value against direct quadrature).
    """

    sigma2_hat: float
    raw: float
    lags_used: int
    correlations: np.ndarray
    rule: str
    standard_error: float
    tail_estimate: float
    flags: tuple = ()

    def rows(self) -> list[dict]:
        cum = self.correlations[0] + 2.0 * np.concatenate([[0.0], np.cumsum(self.correlations[1:])])
        return [{"lag": k, "correlation": float(c), "cumsum": float(s)}
                for k, (c, s) in enumerate(zip(self.correlations, cum))]


def _lag0_direct(op: UlamOperator, f: Observable) -> float:
    G = op.galerkin
    x, wq, _ = G.nodes(_GL8)
    fv = eval_observable(f, x)
    fv = np.where(np.isfinite(fv), fv, 0.0)
    hv = G.values(G.h, _GL8)
    mu = float((wq * fv * hv).sum())
    return float((wq * (fv - mu) ** 2 * hv).sum())


def sigma2(op: UlamOperator, f: Observable, rule: tuple = ("adaptive", 1e-10),
           max_lag: int = 2000) -> VarianceEstimate:
    """``nu((f - nu f)^2) + 2 sum_{k=1}^{K} correlation(f, f, k)``.

    Parameters
    ----------
    rule : ("fixed", K) or ("adaptive", threshold)
        The adaptive rule stops once ``|correlation| < threshold`` for three
        consecutive lags and adds a geometric tail fitted to the last lags.
    """
    name, par = rule
    if name == "fixed":
        K = int(par)
        c = correlations(op, f, f, K)
        tail = 0.0
    elif name == "adaptive":
        thr = float(par)
        c = correlations(op, f, f, max_lag)
        small = np.abs(c[1:]) < thr
        K = max_lag
        for k in range(1, max_lag - 1):
            if small[k - 1] and small[k] and small[k + 1]:
                K = k + 2
                break
        c = c[: K + 1]
        tail = 0.0
        seg = np.abs(c[max(1, K - 10):])
        floor = 1e-13 * max(abs(c[0]), 1e-300)
        if len(seg) >= 2 and np.all(seg > 0) and seg[-1] > floor:
            ratio = math.exp(np.polyfit(np.arange(len(seg)), np.log(seg), 1)[0])
            if ratio < 1.0:
                tail = 2.0 * c[-1] * ratio / (1.0 - ratio)
    else:
        raise ValueError(f"unknown rule {rule!r}")
    raw = float(c[0] + 2.0 * c[1:].sum() + tail)
    disc = abs(c[0] - _lag0_direct(op, f))
    se = abs(tail) + disc + 1e-12 * max(1.0, abs(c[0]))
    flags = []
    if name == "adaptive" and K == max_lag:
        flags.append("adaptive rule hit max_lag")
    if op.map.is_gpm and abs(tail) > 0.1 * abs(raw):
        flags.append("tail estimate dominates (polynomial decay)")
        warnings.warn("sigma2: tail estimate dominates the series", RuntimeWarning, stacklevel=2)
    if raw < 0:
        flags.append("negative estimate clamped to 0")
    return VarianceEstimate(max(raw, 0.0), raw, K, c, f"{name}({par})", se, float(tail), tuple(flags))


# ---------------------------------------------------------------------------
# CLT, WIP, LIL
# ---------------------------------------------------------------------------


def ks_normal(z: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between a sample and the standard normal law."""
    z = np.sort(np.asarray(z, dtype=float))
    R = len(z)
    cdf = special.ndtr(z)
    i = np.arange(1, R + 1)
    return float(max(np.max(i / R - cdf), np.max(cdf - (i - 1) / R)))


def clt_ks(ens: TrajectoryEnsemble, sigma: float, tol: float = 0.02) -> dict:
    """KS distance of ``S_n / (sigma sqrt(n))`` to ``N(0, 1)``."""
    if not sigma > 0:
        raise ValueError("clt_ks needs sigma > 0")
    z = ens.S_n / (sigma * math.sqrt(ens.n))
    ks = ks_normal(z)
    return {"ks_distance": ks, "pass": bool(ks <= tol), "tol": tol, "R": ens.R, "n": ens.n,
            "sigma": sigma}


def wip_marginals(ens: TrajectoryEnsemble, sigma: float,
                  times: Sequence[float] = (0.25, 0.5, 1.0)) -> dict:
    """Compare ``Cov(S_{k(s)}, S_{k(t)}) / n`` with ``sigma^2 min(s, t)``."""
    cols = [ens.column(checkpoint_index(ens.n, t)) for t in times]
    X = ens.S[:, cols] / math.sqrt(ens.n)
    emp = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    tt = np.asarray(times, dtype=float)
    target = sigma ** 2 * np.minimum(tt[:, None], tt[None, :])
    err = float(np.max(np.abs(emp - target)))
    return {"times": list(map(float, times)), "empirical": emp.tolist(), "target": target.tolist(),
            "cov_error": err}


def lil_statistic(ens: TrajectoryEnsemble, threshold: float | None = None) -> dict:
    """Normalized running maxima ``U_r = max_{k<=n} |S_k| / sqrt(n LLn)``.

    With a threshold ``A`` the exceedance rate of ``U_r`` above ``A`` is
    reported, together with the terms ``(1/k) P(max_{j<=k} |S_j| >= A sqrt(k LLk))``
    at the checkpoints and their partial sums.  ``A_hat`` is the smallest
    ``A`` for which every checkpoint's exceedance frequency is at most 1%.
    """
    U = ens.max_n / math.sqrt(ens.n * loglog(ens.n))
    q = np.quantile(U, [0.05, 0.25, 0.5, 0.75, 0.95, 0.99])
    out = {"U": U, "quantiles": dict(zip(["q05", "q25", "q50", "q75", "q95", "q99"], map(float, q))),
           "median": float(np.median(U))}
    norm = np.sqrt(ens.checkpoints * np.array([loglog(k) for k in ens.checkpoints]))
    Uk = ens.running_max / norm[None, :]
    out["A_hat"] = float(np.max(np.quantile(Uk, 0.99, axis=0)))
    if threshold is not None:
        out["threshold"] = float(threshold)
        out["exceedance_rate"] = float(np.mean(U > threshold))
        probs = np.mean(Uk >= threshold, axis=0)
        terms = probs / ens.checkpoints
        out["series_terms"] = terms.tolist()
        out["series_partial"] = np.cumsum(terms).tolist()
        out["checkpoints"] = ens.checkpoints.tolist()
    return out


# ---------------------------------------------------------------------------
# Normalization scan
# ---------------------------------------------------------------------------


def normalization_scan(m: IntervalMap, f: Observable, ns: Sequence[int], R: int, seed: int,
                       init="stationary", op: UlamOperator | None = None, threads: int = 1,
                       ratio_threshold: float = 1.5) -> dict:
    """Decide between ``Var(S_n) ~ sigma^2 n`` and ``Var(S_n) ~ a n ln n``.

    One trajectory set of horizon ``max(ns)`` supplies ``Var(S_n) / n`` at
    every ``n``.  Two one-parameter models are fitted by least squares on
    ``ln(Var(S_n) / n)``: ``linear`` (constant level ``b``) and ``n_log_n``
    (level ``a ln n``).  The preferred model has the smaller residual sum of
    squares, provided the other model's is at least ``ratio_threshold`` times
    larger; otherwise the verdict is ``inconclusive``.  The two-parameter fit
    ``a ln n + b`` is reported as well (slope and its standard error).
    """
    ns = sorted(int(v) for v in ns)
    if len(ns) < 5:
        raise ValueError("normalization_scan needs at least 5 horizons")
    ens = birkhoff_ensemble(m, f, ns[-1], R, seed, init=init, op=op, checkpoints=ns,
                            threads=threads)
    v = np.array([ens.S[:, ens.column(k)].var(ddof=1) / k for k in ns])
    ln = np.log(np.asarray(ns, dtype=float))
    y = np.log(v)
    b = float(np.mean(y))
    rss_lin = float(((y - b) ** 2).sum())
    a = float(np.mean(y - np.log(ln)))
    rss_nln = float(((y - a - np.log(ln)) ** 2).sum())
    X = np.column_stack([ln, np.ones_like(ln)])
    coef, res, _, _ = np.linalg.lstsq(X, v, rcond=None)
    dof = len(ns) - 2
    s2 = float(((v - X @ coef) ** 2).sum()) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    if rss_lin <= rss_nln:
        pref, ratio = "linear", rss_nln / max(rss_lin, 1e-300)
    else:
        pref, ratio = "n_log_n", rss_lin / max(rss_nln, 1e-300)
    model = pref if ratio >= ratio_threshold else "inconclusive"
    return {
        "ns": ns,
        "var_over_n": v.tolist(),
        "model": model,
        "residual_ratio": float(ratio),
        "rss": {"linear": rss_lin, "n_log_n": rss_nln},
        "fit": {"linear_level": math.exp(b), "n_log_n_coef": math.exp(a),
                "affine_slope": float(coef[0]), "affine_intercept": float(coef[1]),
                "affine_slope_se": float(math.sqrt(cov[0, 0]))},
        "R": R, "seed": int(seed), "nu_f": ens.nu_f, "init": ens.init,
    }
