"""Truncation, martingale-coboundary decomposition and the associated bounds.

Everything here lives on the discretized inverse-branch chain ``Y`` of an
Ulam operator: observables become bin vectors of conditional means
``fbar_i = E(f(x) | x in bin i)`` under the piecewise-constant invariant
density, and ``K`` acts as the reversed chain matrix ``R``.

With ``f0 = fbar - nu(f)`` the coboundary vector is
``h_n = sum_{k>=0} K^k f0`` and ``H = K h_n = h_n - f0``.  The increments
``d_j = f0(Y_j) + H(Y_j) - H(Y_{j-1})`` satisfy ``E(d_j | Y_{j-1}) = 0`` and

    S_k = M_k + h_n(Y_1) - h_n(Y_{k+1}) + S''_k,   M_k = sum_{j=2}^{k+1} d_j,

where ``S_k`` sums ``f(x_i) - nu(f)`` over ``i = 1..k`` with ``x_i`` a point
inside bin ``Y_i``.  The identity is exact for bin means, so its residual
measures only the within-bin variation of ``f``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .observables import (
    Observable,
    bin_integrals,
    decompose_H,
    eval_observable,
    loglog,
    mu_mean,
    truncate_gn,
)
from .transfer import (
    _GL8,
    BinGrid,
    DivergentProfileError,
    MixingProfile,
    UlamOperator,
    _fit_decay,
    build_ulam,
    phi_coefficients,
    sum_sqrt_phi1,
)

__all__ = [
    "CoboundaryResult",
    "DecompositionContext",
    "bin_means",
    "l2_norm",
    "coboundary_vector",
    "build_context",
    "simulate_chain",
    "chain_positions",
    "martingale_path",
    "conditional_mean_test",
    "pinelis_h",
    "pinelis_bound",
    "constants",
    "constants_from_sum",
    "ddm_condition",
    "DDM_EXPONENT",
    "remainder_bound_check",
]

DDM_EXPONENT = 1.0 / math.sqrt(3.0) - 0.5


def bin_means(op: UlamOperator, f: Observable) -> np.ndarray:
    """Bin averages of ``f`` (conditional means under a piecewise-constant density)."""
    return bin_integrals(f, op.edges, 1) / op.grid.widths


@dataclass(frozen=True)
class CoboundaryResult:
    """``h_n = sum_{k=0}^{N} K^k f0`` with its tail bound.

    ``certified`` is false when the geometric tail fit failed or the map is
    GPM; the vector is then a heuristic truncation.
    """

    h: np.ndarray
    f0: np.ndarray
    N: int
    tail_bound: float
    rho_hat: float
    sup_norm: float
    certified: bool
    term_sup: np.ndarray = field(repr=False)

    @property
    def H(self) -> np.ndarray:
        return self.h - self.f0


def coboundary_vector(op: UlamOperator, f_trunc: Observable, N: int | None = None,
                      tol: float = 1e-10, max_terms: int = 20_000) -> CoboundaryResult:
    """Sum ``K^k (f_trunc - nu f_trunc)`` for ``k = 0..N``.

    With ``N=None`` the sum stops at the first ``N`` whose fitted geometric
    tail ``sup|K^N f0| rho / (1 - rho)`` is below ``tol``.
    """
    fbar = bin_means(op, f_trunc)
    if not np.all(np.isfinite(fbar)):
        raise ValueError("coboundary_vector needs a bounded observable (apply truncate_gn)")
    f0 = fbar - float(np.dot(op.pi, fbar))
    R = op.R
    v = f0.copy()
    h = f0.copy()
    sups = [float(np.max(np.abs(v)))]
    limit = max_terms if N is None else N
    rho, tail = 0.0, 0.0
    k = 0
    while k < limit:
        if sups[-1] == 0.0:
            break
        v = R @ v
        h += v
        sups.append(float(np.max(np.abs(v))))
        k += 1
        if N is None and k >= 5:
            rho, tail = _tail(sups)
            if tail < tol:
                break
    rho, tail = _tail(sups)
    certified = math.isfinite(tail) and not op.map.is_gpm and (N is not None or tail < tol)
    if not certified:
        warnings.warn("coboundary_vector: geometric tail not certified; h_n is heuristic",
                      RuntimeWarning, stacklevel=2)
    return CoboundaryResult(h, f0, k, float(tail), float(rho), float(np.max(np.abs(h))),
                            bool(certified), np.asarray(sups))


def _tail(sups: list) -> tuple[float, float]:
    s = np.asarray(sups)
    if s[-1] == 0.0:
        return 0.0, 0.0
    last = s[-min(10, len(s)):]
    if np.any(last <= 0):
        return 0.0, 0.0
    rho = math.exp(np.polyfit(np.arange(len(last)), np.log(last), 1)[0]) if len(last) > 1 else 1.0
    if rho >= 1.0:
        return rho, math.inf
    return rho, float(s[-1] * rho / (1.0 - rho))


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------


def constants_from_sum(s: float, M: float, n: int) -> dict:
    """Constants from ``s = sum_k phi1(k)^(1/2)``.

    ``C = 16 s``, ``c_n = 8 M sqrt(n) s / sqrt(LLn)``,
    ``y_n = 32 n s^2 M^2`` and ``x_n = C M sqrt(n LLn)``.
    """
    if n < 16:
        raise ValueError("constants need n >= 16")
    L = loglog(n)
    C = 16.0 * s
    c_n = 8.0 * M * math.sqrt(n) * s / math.sqrt(L)
    y_n = 32.0 * n * s * s * M * M
    x_n = C * M * math.sqrt(n * L)
    for lhs, rhs, what in ((x_n, 4.0 * y_n / c_n, "x_n = 4 y_n / c_n"),
                           (2.0 * y_n, c_n * c_n * L, "2 y_n = c_n^2 LLn")):
        if abs(lhs - rhs) > 1e-10 * abs(rhs):
            raise ArithmeticError(f"constant identity {what} violated")
    return {"sum_sqrt_phi1": s, "C": C, "c_n": c_n, "y_n": y_n, "x_n": x_n, "LLn": L, "M": M, "n": n}


def constants(profile: MixingProfile, M: float, n: int) -> dict:
    """:func:`constants_from_sum` with ``s`` from a profile (certified tail required)."""
    s, idx = sum_sqrt_phi1(profile)
    out = constants_from_sum(s, M, n)
    out["truncation_index"] = idx
    out["label"] = profile.label
    return out


# ---------------------------------------------------------------------------
# Context
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DecompositionContext:
    """Truncated observable, coboundary vector and constants for horizon ``n``."""

    op: UlamOperator
    f: Observable
    f_trunc: Observable
    n: int
    M: float
    level: float
    cob: CoboundaryResult
    consts: dict
    sup_bound: float
    nu_f: float
    nu_f_trunc: float

    @property
    def h(self) -> np.ndarray:
        return self.cob.h

    def summary(self) -> dict:
        return {"n": self.n, "M": self.M, "truncation_level": self.level, "N": self.cob.N,
                "tail_bound": self.cob.tail_bound, "certified": self.cob.certified,
                "sup_h": self.cob.sup_norm, "sup_bound": self.sup_bound,
                **{k: v for k, v in self.consts.items() if k not in ("n", "M")}}


def l2_norm(op: UlamOperator, f: Observable) -> float:
    """``||f||_{L2(nu)}`` by 8-point quadrature against the Galerkin density."""
    G = op.galerkin
    x, wq, _ = G.nodes(_GL8)
    fv = eval_observable(f, x)
    fv = np.where(np.isfinite(fv), fv, 0.0)
    return float(math.sqrt(max((wq * fv * fv * G.values(G.h, _GL8)).sum(), 0.0)))


def _coarse_profile(op: UlamOperator, kmax: int) -> MixingProfile:
    if op.B <= 512:
        return phi_coefficients(op, kmax)
    grid = BinGrid.geometric(64, 1e-6) if op.map.is_gpm else BinGrid.uniform(64)
    return phi_coefficients(build_ulam(op.map, grid), kmax)


def build_context(op: UlamOperator, f: Observable, n: int, M: float | None = None,
                  profile: MixingProfile | None = None, tol: float = 1e-10,
                  kmax: int = 30) -> DecompositionContext:
    """Truncate ``f`` at ``M sqrt(n)/sqrt(LLn)`` and assemble the decomposition.

    ``M`` defaults to ``||f||_{L2(nu)}``.  The phi profile defaults to the
    operator's own chain when ``B <= 512`` and to a 64-bin surrogate
    otherwise.  When the profile has no certified tail the constants are NaN.
    """
    if M is None:
        M = l2_norm(op, f)
    if not M > 0:
        M = 1.0
    f_trunc = truncate_gn(f, n, M)
    level = f_trunc.meta["truncation_level"]
    cob = coboundary_vector(op, f_trunc, tol=tol)
    if profile is None:
        profile = _coarse_profile(op, kmax)
    try:
        consts = constants(profile, M, n)
        sum_phi = float(profile.phi1.sum())
        sup_bound = 4.0 * M * sum_phi * math.sqrt(n) / math.sqrt(loglog(n))
    except DivergentProfileError:
        consts = {k: math.nan for k in ("sum_sqrt_phi1", "C", "c_n", "y_n", "x_n")}
        consts["label"] = "uncertified"
        sup_bound = math.nan
    fb = bin_means(op, f)
    ft = bin_means(op, f_trunc)
    nu_f = float(np.dot(op.pi, np.where(np.isfinite(fb), fb, 0.0)))
    nu_t = float(np.dot(op.pi, ft))
    return DecompositionContext(op, f, f_trunc, n, float(M), float(level), cob, consts,
                                float(sup_bound), nu_f, nu_t)


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


def simulate_chain(op: UlamOperator, length: int, seed: int, paths: int = 1) -> np.ndarray:
    """Stationary paths ``Y_0..Y_{length-1}`` of the reversed chain (shape ``paths x length``).

    Path ``p`` uses the stream ``SeedSequence(seed, spawn_key=(p,))``.
    """
    R = op.R.tocsr()
    R.sort_indices()
    # Within-row cumulative sums shifted by the row index: the state after
    # row i is found by searching i + u in one global sorted array.
    cum = np.empty(len(R.data))
    for i in range(R.shape[0]):
        a, b = R.indptr[i], R.indptr[i + 1]
        if b > a:
            c = np.cumsum(R.data[a:b])
            cum[a:b] = i + c / c[-1]
    cum = np.maximum.accumulate(cum)
    cdf = np.cumsum(op.pi)
    out = np.empty((paths, length), dtype=np.int64)
    for p in range(paths):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(p,)))
        u = rng.random(length)
        y = min(int(np.searchsorted(cdf, u[0] * cdf[-1], side="right")), op.B - 1)
        out[p, 0] = y
        for t in range(1, length):
            if R.indptr[y + 1] == R.indptr[y]:
                out[p, t] = y
                continue
            j = int(np.searchsorted(cum, y + u[t], side="left"))
            j = min(max(j, R.indptr[y]), R.indptr[y + 1] - 1)
            y = int(R.indices[j])
            out[p, t] = y
    return out


def chain_positions(op: UlamOperator, chain_path: np.ndarray, seed: int, path_index: int = 0) -> np.ndarray:
    """Uniform points inside the visited bins.

    The uniforms come from ``SeedSequence(seed, spawn_key=(path_index, 1))``
    and do not depend on the grid, so refining the grid rescales the
    within-bin offsets without changing them.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(path_index, 1)))
    u = rng.random(len(chain_path))
    y = np.asarray(chain_path)
    return op.edges[y] + u * op.grid.widths[y]


def martingale_path(ctx: DecompositionContext, chain_path, positions=None, seed: int = 0) -> dict:
    """Martingale increments, remainder and identity residual along one path.

    Parameters
    ----------
    ctx : DecompositionContext
    chain_path : sequence of int
        Bins ``Y_0, ..., Y_{n+1}`` (at least ``n + 2`` states).
    positions : array, optional
        Points ``x_i`` in bin ``Y_i``; drawn by :func:`chain_positions` if omitted.
    """
    Y = np.asarray(chain_path, dtype=np.int64)
    n = ctx.n
    if len(Y) < n + 2:
        raise ValueError("chain_path must contain Y_0..Y_{n+1}")
    Y = Y[: n + 2]
    x = chain_positions(ctx.op, Y, seed) if positions is None else np.asarray(positions)[: n + 2]
    g = ctx.cob.h
    f0 = ctx.cob.f0
    H = g - f0
    d = f0[Y[1:]] + H[Y[1:]] - H[Y[:-1]]  # d_j for j = 1..n+1
    M = np.cumsum(d[1:])  # M_k = sum_{j=2}^{k+1} d_j, k = 1..n
    xs = x[1: n + 1]
    ft = eval_observable(ctx.f_trunc, xs)
    fv = eval_observable(ctx.f, xs)
    X1 = ft - ctx.nu_f_trunc
    X2 = (fv - ft) - (ctx.nu_f - ctx.nu_f_trunc)
    S = np.cumsum(X1 + X2)
    S2 = np.cumsum(X2)
    recon = M + g[Y[1]] - g[Y[2: n + 2]] + S2
    resid = float(np.max(np.abs(S - recon)))
    return {"d": d, "M": M, "S": S, "S2": S2, "identity_residual": resid, "Y": Y}


def conditional_mean_test(d: np.ndarray, y_prev: np.ndarray, B: int, groups: int = 16,
                          min_visits: int = 30, z_max: float = 3.0) -> dict:
    """Binned regression of ``d_j`` on ``Y_{j-1}``.

    Bins are merged into ``groups`` contiguous blocks; every block with at
    least ``min_visits`` observations must have ``|mean| <= z_max * SE``.
    """
    d = np.asarray(d, dtype=float).ravel()
    g = (np.asarray(y_prev).ravel() * groups) // B
    rows = []
    ok = True
    for k in range(groups):
        sel = g == k
        cnt = int(sel.sum())
        if cnt < min_visits:
            continue
        v = d[sel]
        se = float(v.std(ddof=1) / math.sqrt(cnt))
        mean = float(v.mean())
        z = abs(mean) / se if se > 0 else (0.0 if mean == 0 else math.inf)
        ok &= z <= z_max
        rows.append({"group": k, "visits": cnt, "mean": mean, "se": se, "z": z})
    return {"pass": bool(ok), "groups": rows, "tested": len(rows)}


# ---------------------------------------------------------------------------
# Exponential bound
# ---------------------------------------------------------------------------


def pinelis_h(u):
    """``h(u) = (1 + u) ln(1 + u) - u``."""
    u = np.asarray(u, dtype=float)
    return (1.0 + u) * np.log1p(u) - u


def pinelis_bound(x: float, y: float, c: float, form: str = "exact") -> float:
    """Exponential bound for the maximum of a martingale with increments bounded by ``c``.

    ``form="exact"`` gives ``2 exp(-(2y/c^2) h(xc/(2y)))``; ``form="relaxed"``
    replaces ``h(u)`` by its lower bound ``u ln(1+u)/2``.
    """
    if not (x >= 0 and y > 0 and c > 0):
        raise ValueError("pinelis_bound needs x >= 0 and y, c > 0")
    u = x * c / (2.0 * y)
    if form == "exact":
        hu = float(pinelis_h(u))
    elif form == "relaxed":
        hu = 0.5 * u * math.log1p(u)
    else:
        raise ValueError(f"unknown form {form!r}")
    return float(min(2.0, 2.0 * math.exp(-(2.0 * y / (c * c)) * hu)))


# ---------------------------------------------------------------------------
# Summability condition on phi2
# ---------------------------------------------------------------------------


def _series_with_tail(k: np.ndarray, terms: np.ndarray, fit: dict, weight_exp: float,
                      power: float) -> tuple[float, float]:
    """Sum of ``k^w phi(k)^p`` with a geometric tail from the fitted rate."""
    head = float(terms.sum())
    rho = fit.get("rho_hat", math.nan)
    if fit["model"] != "exponential" or not rho < 1.0:
        return head, math.inf
    K = int(k[-1])
    r = rho ** power
    if terms[-1] == 0.0 or r == 0.0:
        return head, 0.0
    # k^w r^k is eventually decreasing with ratio -> r; bound the tail by a
    # geometric series from the last term with the worst ratio beyond K.
    ratio = ((K + 1) / K) ** max(weight_exp, 0.0) * r
    if ratio >= 1.0:
        ratio = r ** 0.5
    return head, float(terms[-1] * ratio / (1.0 - ratio))


def ddm_condition(profile: MixingProfile, kmax: int | None = None, r2_min: float = 0.9) -> dict:
    """Partial sums of ``k^(1/sqrt3 - 1/2) phi2(k)^(1/2)`` and a convergence verdict.

    The verdict comes from a decay model fitted to ``phi2``: exponential
    decay converges; ``phi2 ~ k^-q`` converges iff ``q/2 - (1/sqrt3 - 1/2) > 1``.
    A poor fit (R^2 below ``r2_min``) gives ``inconclusive``.  For
    exponential fits the two derived series weighted by ``k^(sqrt3/2 - 1/4)``
    on ``phi1^(3/4)`` and by ``k^(1/sqrt3 - 1/2)`` on ``phi2^(1/2)`` are
    reported with their tails.
    """
    phi2 = np.asarray(profile.phi2, dtype=float)
    K = len(phi2) - 1 if kmax is None else min(int(kmax), len(phi2) - 1)
    k = np.arange(1, K + 1, dtype=float)
    p2 = phi2[1: K + 1]
    terms = k ** DDM_EXPONENT * np.sqrt(np.maximum(p2, 0.0))
    partial = np.cumsum(terms)
    fit = _fit_decay(phi2[: K + 1], "auto")
    out = {"k": k.astype(int).tolist(), "terms": terms.tolist(), "partial_sums": partial.tolist(),
           "fit": fit, "driver": "fitted model"}
    if np.all(p2[1:] == 0.0):
        out.update(verdict="convergent", driver="lower bound (phi2 vanishes beyond lag 1)",
                   total=float(partial[-1]) if len(partial) else 0.0)
        return out
    if fit["r2"] < r2_min:
        out.update(verdict="inconclusive", total=math.nan)
        return out
    if fit["model"] == "exponential":
        verdict = "convergent" if fit["rho_hat"] < 1.0 else "divergent"
    else:
        q = fit["poly_exponent_hat"]
        verdict = "convergent" if q / 2.0 - DDM_EXPONENT > 1.0 else "divergent"
        out["series_exponent"] = DDM_EXPONENT - q / 2.0
    out["verdict"] = verdict
    if fit["model"] == "exponential" and verdict == "convergent":
        head, tail = _series_with_tail(k, terms, fit, DDM_EXPONENT, 0.5)
        out["total"] = head + tail
        phi1 = np.asarray(profile.phi1, dtype=float)[1: K + 1]
        fit1 = _fit_decay(np.asarray(profile.phi1, dtype=float)[: K + 1], "exponential")
        w1 = math.sqrt(3.0) / 2.0 - 0.25
        t1 = k ** w1 * np.maximum(phi1, 0.0) ** 0.75
        h1, tl1 = _series_with_tail(k, t1, fit1, w1, 0.75)
        out["derived_series"] = {
            "phi1_three_quarters": {"weight_exponent": w1, "value": h1 + tl1, "tail": tl1},
            "phi2_half": {"weight_exponent": DDM_EXPONENT, "value": head + tail, "tail": tail},
        }
    else:
        out["total"] = math.inf if verdict == "divergent" else math.nan
    return out


# ---------------------------------------------------------------------------
# Remainder bound
# ---------------------------------------------------------------------------


def remainder_bound_check(op: UlamOperator, f: Observable, n: int, M: float, x: float,
                          R: int, seed: int) -> dict:
    """Compare ``P(max_k |S''_k| >= x)`` with ``(2n/x) sum_l |a_l| E(|f_l| 1{|f_l| > level})``.

    The left side is a Monte Carlo frequency over ``R`` stationary
    trajectories; the right side uses exact bin integrals.
    """
    from .statistics import birkhoff_ensemble  # noqa: PLC0415  (avoids an import cycle)

    level = M * math.sqrt(n) / math.sqrt(loglog(n))
    _, rem = decompose_H(f, level)
    rhs = 0.0
    for w, p in rem.terms:
        single = Observable(((1.0, p),), None, "piece")
        rhs += abs(w) * abs(mu_mean(single, op.edges, op.h))
    rhs *= 2.0 * n / x
    if rem.terms:
        ens = birkhoff_ensemble(op.map, rem, n, R, seed, op=op)
        lhs = float(np.mean(ens.max_n >= x))
        se = math.sqrt(max(lhs * (1 - lhs), 1.0 / R) / R)
    else:
        lhs, se = 0.0, 0.0
    return {"level": level, "probability": lhs, "probability_se": se, "bound": rhs,
            "holds": bool(lhs <= rhs + 3.0 * se)}
