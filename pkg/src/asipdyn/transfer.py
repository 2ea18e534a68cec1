"""Ulam discretization of the transfer operator and quantities derived from it.

Two discretizations share one bin partition:

* the Ulam matrix ``P[i, j] = Leb(I_i & T^-1 I_j) / Leb(I_i)``, computed
  exactly from preimages of bin edges.  It gives the invariant density
  (piecewise constant), stationary sampling, the reversed chain
  ``R[i, j] = pi_j P[j, i] / pi_i`` that stands in for the inverse-branch
  chain, and the phi-mixing coefficients of that chain;
* a discontinuous piecewise-linear Galerkin projection of the transfer
  operator (basis ``1`` and ``(x - c_i) / (w_i / 2)`` on each bin).  It is
  exact on affine maps with dyadic bins and is used for ``K^n f``,
  correlations, variance series and Gordin sums, where the first-order
  Ulam error would swamp the quantities of interest.

Integrals of an observable against the Galerkin basis use Gauss-Legendre
rules on the exact preimage sub-intervals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize, sparse
from scipy.sparse import linalg as splinalg

from .interval_maps import IntervalMap
from .observables import Observable, bin_integrals, eval_observable

__all__ = [
    "BinGrid",
    "UlamOperator",
    "UlamConvergenceError",
    "MixingProfile",
    "KernelResult",
    "build_ulam",
    "apply_kernel",
    "gordin_sum",
    "correlation",
    "phi_coefficients",
    "phi_profile_from_chain",
    "sample_stationary",
    "density_l1_distance",
    "reversed_chain",
    "sum_sqrt_phi1",
    "l2nu_distance",
    "correlations",
    "DivergentProfileError",
]

_GL4 = np.polynomial.legendre.leggauss(4)
_GL8 = np.polynomial.legendre.leggauss(8)
_ROUNDOFF = 1e-13


class UlamConvergenceError(RuntimeError):
    """Power iteration did not reach the tolerance (or the grid cannot be certified)."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DivergentProfileError(ValueError):
    """A mixing profile has no certified summable tail."""


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinGrid:
    """Strictly increasing bin edges ``0 = e_0 < ... < e_B = 1``."""

    edges: np.ndarray
    scheme: str = "uniform"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.ndim != 1 or len(e) < 2 or e[0] != 0.0 or e[-1] != 1.0 or np.any(np.diff(e) <= 0):
            raise ValueError("bin edges must increase strictly from 0 to 1")
        object.__setattr__(self, "edges", e)

    @property
    def B(self) -> int:
        return len(self.edges) - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @classmethod
    def uniform(cls, B: int) -> "BinGrid":
        e = np.arange(B + 1, dtype=float) / B
        return cls(e, "uniform", {"B": int(B)})

    @classmethod
    def geometric(cls, B: int, first_width: float = 1e-8) -> "BinGrid":
        """Widths ``w_0 r^i`` summing to 1, with ``r`` solved for ``B`` bins."""
        if B < 2:
            raise ValueError("geometric grids need B >= 2")
        if first_width * B >= 1.0:
            return cls.uniform(B)

        lw = math.log(first_width)

        def log_total(L):
            # log of first_width * (r^B - 1) / (r - 1) with r = exp(L)
            return lw + B * L + math.log(-math.expm1(-B * L)) - math.log(math.expm1(L))

        hi = (10.0 - lw) / B
        logr = optimize.brentq(log_total, 1e-300, hi, xtol=1e-16, rtol=1e-15, maxiter=500)
        r = math.exp(logr)
        w = first_width * r ** np.arange(B)
        e = np.concatenate([[0.0], np.cumsum(w)])
        e = e / e[-1]
        e[-1] = 1.0
        return cls(e, "geometric", {"B": int(B), "first_width": float(first_width), "ratio": r})

    def as_dict(self) -> dict:
        return {"scheme": self.scheme, **self.params}


# ---------------------------------------------------------------------------
# Exact preimage segments
# ---------------------------------------------------------------------------


def _segments(m: IntervalMap, edges: np.ndarray):
    """Elementary segments ``[x_s, x_{s+1}]`` each inside one bin and mapped into one bin.

    Returns
    -------
    lo, hi : ndarray
        Segment endpoints.
    src, tgt : ndarray of int
        Bin containing the segment and bin containing its image.
    br : ndarray of int
        Branch index.
    """
    B = len(edges) - 1
    out = ([], [], [], [], [])
    for k, b in enumerate(m.branches):
        lo, hi = b.domain_lo, b.domain_hi
        a_img, b_img = b.image()
        inner = edges[(edges > a_img) & (edges < b_img)]
        pre = np.clip(b.inverse(inner), lo, hi) if len(inner) else np.empty(0)
        j0 = min(max(int(np.searchsorted(edges, a_img, side="right")) - 1, 0), B - 1)
        j1 = min(max(int(np.searchsorted(edges, b_img, side="left")) - 1, 0), B - 1)
        targets = np.arange(j0, j1 + 1)
        if b.increasing:
            tb = np.concatenate([[lo], pre])
        else:
            tb = np.concatenate([[lo], pre[::-1]])
            targets = targets[::-1]
        tb = np.maximum.accumulate(tb)
        src_edges = edges[(edges > lo) & (edges < hi)]
        pts = np.unique(np.concatenate([[lo, hi], src_edges, pre]))
        xl, xr = pts[:-1], pts[1:]
        keep = xr > xl
        xl, xr = xl[keep], xr[keep]
        xm = 0.5 * (xl + xr)
        src = np.clip(np.searchsorted(edges, xm, side="right") - 1, 0, B - 1)
        ti = np.clip(np.searchsorted(tb, xm, side="right") - 1, 0, len(targets) - 1)
        for lst, val in zip(out, (xl, xr, src, targets[ti], np.full(len(xl), k))):
            lst.append(val)
    return tuple(np.concatenate(v) for v in out)


# ---------------------------------------------------------------------------
# Operator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixingProfile:
    """phi coefficients of the discretized inverse-branch chain.

    ``phi1[k]`` and ``phi2[k]`` are indexed by lag ``k = 0..kmax``; lag 0 is
    set to 1 by convention (``Y_0`` is measurable for the past, and the
    distribution is continuous).  ``phi2`` is a lower bound obtained by
    coarsening.  ``decay_fit`` has keys ``model``, ``rho_hat``,
    ``poly_exponent_hat`` and ``r2``.
    """

    phi1: np.ndarray
    phi2: np.ndarray
    decay_fit: dict
    horizon: int
    pair_bins: int
    raw_phi1: np.ndarray
    monotone_violations: list
    label: str = "discretized-chain estimate"

    @property
    def kmax(self) -> int:
        return len(self.phi1) - 1

    @classmethod
    def from_arrays(cls, phi1, phi2=None, model: str = "auto",
                    label: str = "injected profile") -> "MixingProfile":
        """Profile from explicit coefficient arrays indexed by lag ``0..kmax``."""
        phi1 = np.asarray(phi1, dtype=float)
        phi2 = phi1.copy() if phi2 is None else np.asarray(phi2, dtype=float)
        if phi1.shape != phi2.shape:
            raise ValueError("phi1 and phi2 must have the same length")
        return cls(phi1, phi2, _fit_decay(phi1, model), len(phi1) - 1, 0, phi1.copy(), [], label)

    def rows(self) -> list[dict]:
        fit = self.decay_fit
        param = fit["rho_hat"] if fit["model"] == "exponential" else fit["poly_exponent_hat"]
        return [{"lag": k, "phi1": float(self.phi1[k]), "phi2_lower": float(self.phi2[k]),
                 "model": fit["model"], "fitted_param": float(param)}
                for k in range(1, len(self.phi1))]


@dataclass(frozen=True, eq=False)
class UlamOperator:
    """Ulam matrix, invariant density and cached Galerkin operator."""

    map: IntervalMap
    grid: BinGrid
    P: sparse.csr_matrix
    pi: np.ndarray
    residual: float
    iterations: int
    segments: tuple = field(repr=False)

    @property
    def edges(self) -> np.ndarray:
        return self.grid.edges

    @property
    def B(self) -> int:
        return self.grid.B

    @property
    def h(self) -> np.ndarray:
        """Piecewise-constant invariant density (cell averages)."""
        return self.pi / self.grid.widths

    @cached_property
    def R(self) -> sparse.csr_matrix:
        return reversed_chain(self.P, self.pi)

    @cached_property
    def galerkin(self) -> "_Galerkin":
        return _Galerkin(self)

    def nu(self, f: Observable) -> float:
        """``nu(f)`` with the piecewise-linear Galerkin density."""
        return self.galerkin.nu(f)


def reversed_chain(P, pi: np.ndarray) -> sparse.csr_matrix:
    """``R[i, j] = pi_j P[j, i] / pi_i`` (rows with ``pi_i = 0`` stay at rest)."""
    P = sparse.csr_matrix(P)
    pi = np.asarray(pi, dtype=float)
    safe = np.where(pi > 0, pi, 1.0)
    R = sparse.diags(1.0 / safe) @ P.T.tocsr() @ sparse.diags(pi)
    R = sparse.csr_matrix(R)
    dead = np.flatnonzero(pi <= 0)
    if len(dead):
        R = R.tolil()
        for i in dead:
            R.rows[i] = [i]
            R.data[i] = [1.0]
        R = R.tocsr()
    return R


def build_ulam(m: IntervalMap, grid: BinGrid, tol: float = 1e-12, max_iter: int = 100_000,
               min_bins: int = 64, gpm_first_width: float = 1e-6) -> UlamOperator:
    """Exact Ulam matrix and its stationary vector.

    Parameters
    ----------
    m : IntervalMap
    grid : BinGrid
        At least ``min_bins`` bins.
    tol : float
        Target ``||pi P - pi||_1``.
    max_iter : int
        Power-iteration budget.
    gpm_first_width : float
        For GPM maps the first bin must be at most this wide; coarser grids
        cannot resolve the density singularity at the neutral point and the
        result is refused.

    Raises
    ------
    UlamConvergenceError
        If the tolerance is not met, or a GPM grid fails the resolution check.
    """
    if grid.B < min_bins:
        raise ValueError(f"build_ulam needs at least {min_bins} bins")
    edges = grid.edges
    B = grid.B
    seg = _segments(m, edges)
    xl, xr, src, tgt, _ = seg
    P = sparse.csr_matrix((xr - xl, (src, tgt)), shape=(B, B))
    P.sum_duplicates()
    P = sparse.csr_matrix(sparse.diags(1.0 / grid.widths) @ P)

    PT = P.T.tocsr()
    pi = grid.widths.copy()
    res = float(np.abs(PT @ pi - pi).sum())
    it = 0
    cesaro = m.is_gpm
    block = 100
    while res > tol and it < max_iter:
        if cesaro:
            acc = np.zeros(B)
            for _ in range(block):
                pi = PT @ pi
                acc += pi
            it += block
            pi = acc / acc.sum()
        else:
            pi = PT @ pi
            pi /= pi.sum()
            it += 1
        res = float(np.abs(PT @ pi - pi).sum())
    if res > tol:
        raise UlamConvergenceError(
            f"build_ulam: power iteration did not converge (residual {res:.3e} after {it} iterations)",
            res, it)
    if m.is_gpm and edges[1] > gpm_first_width:
        raise UlamConvergenceError(
            f"build_ulam: first bin width {edges[1]:.3e} exceeds {gpm_first_width:.1e}; a grid this "
            f"coarse cannot resolve the density singularity at the neutral fixed point "
            f"(use a geometric grid); residual {res:.3e}",
            res, it)
    return UlamOperator(m, grid, P, pi, res, it, seg)


def density_l1_distance(a: UlamOperator, b: UlamOperator) -> float:
    """L1 distance between two piecewise-constant Ulam densities."""
    e = np.unique(np.concatenate([a.edges, b.edges]))
    mid = 0.5 * (e[:-1] + e[1:])
    ha = a.h[np.clip(np.searchsorted(a.edges, mid, side="right") - 1, 0, a.B - 1)]
    hb = b.h[np.clip(np.searchsorted(b.edges, mid, side="right") - 1, 0, b.B - 1)]
    return float(np.sum(np.abs(ha - hb) * np.diff(e)))


# ---------------------------------------------------------------------------
# Galerkin (piecewise-linear) transfer operator
# ---------------------------------------------------------------------------


class _Galerkin:
    """Projected transfer operator on discontinuous piecewise-linear functions.

    Coefficient layout: ``u[2 i]`` multiplies ``1_{I_i}`` and ``u[2 i + 1]``
    multiplies ``(x - c_i) / (w_i / 2)`` on ``I_i``.
    """

    def __init__(self, op: UlamOperator):
        self.op = op
        edges = op.edges
        B = op.B
        self.c = 0.5 * (edges[:-1] + edges[1:])
        self.w = np.diff(edges)
        xl, xr, src, tgt, br = op.segments
        t, wt = _GL4
        half = 0.5 * (xr - xl)
        mid = 0.5 * (xr + xl)
        x = mid[:, None] + half[:, None] * t[None, :]
        wq = half[:, None] * wt[None, :]
        y = np.empty_like(x)
        for k, b in enumerate(op.map.branches):
            sel = br == k
            if np.any(sel):
                y[sel] = b.forward(x[sel])
        phi_src = (x - self.c[src][:, None]) / (0.5 * self.w[src][:, None])
        phi_tgt = (y - self.c[tgt][:, None]) / (0.5 * self.w[tgt][:, None])
        norm0 = self.w[tgt]
        norm1 = self.w[tgt] / 3.0
        rows, cols, vals = [], [], []
        for a in (0, 1):
            fa = np.ones_like(y) if a == 0 else phi_tgt
            na = norm0 if a == 0 else norm1
            for bb in (0, 1):
                fb = np.ones_like(x) if bb == 0 else phi_src
                rows.append(2 * tgt + a)
                cols.append(2 * src + bb)
                vals.append((wq * fa * fb).sum(axis=1) / na)
        A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(2 * B, 2 * B))
        A.sum_duplicates()
        self.A = A
        self.h = self._invariant()

    def _invariant(self) -> np.ndarray:
        n = self.A.shape[0]
        M = (self.A - sparse.identity(n, format="csr")).tolil()
        # Replace the first equation by the normalization int h = 1.
        M.rows[0] = list(range(0, n, 2))
        M.data[0] = list(self.w)
        rhs = np.zeros(n)
        rhs[0] = 1.0
        h = splinalg.spsolve(M.tocsc(), rhs)
        # Polish with a few power steps (the projection is mass preserving).
        for _ in range(3):
            h = self.A @ h
            h /= np.dot(self.w, h[0::2])
        return h

    # -- conversions ---------------------------------------------------------
    def nodes(self, rule=_GL4):
        t, wt = rule
        x = self.c[:, None] + 0.5 * self.w[:, None] * t[None, :]
        wq = 0.5 * self.w[:, None] * wt[None, :]
        return x, wq, t

    def values(self, u: np.ndarray, rule=_GL4) -> np.ndarray:
        """Nodal values (B x q) of a coefficient vector."""
        _, _, t = self.nodes(rule)
        return u[0::2, None] + u[1::2, None] * t[None, :]

    def project(self, func_vals: np.ndarray, rule=_GL8) -> np.ndarray:
        """Coefficients of the L2 projection from nodal values of a function."""
        _, wq, t = self.nodes(rule)
        u = np.empty(2 * len(self.w))
        u[0::2] = (wq * func_vals).sum(axis=1) / self.w
        u[1::2] = (wq * func_vals * t[None, :]).sum(axis=1) / (self.w / 3.0)
        return u

    def project_fh(self, f: Observable) -> np.ndarray:
        """Coefficients of ``Pi(f h)``; the bin means of ``f h`` are exact integrals where possible."""
        x, _, _ = self.nodes(_GL8)
        fv = eval_observable(f, x)
        fv = np.where(np.isfinite(fv), fv, 0.0)
        hv = self.values(self.h, _GL8)
        return self.project(fv * hv, _GL8)

    def nu(self, f: Observable) -> float:
        """``int f h`` with ``h`` piecewise linear.

        The constant part of ``h`` is integrated with exact antiderivatives;
        the slope part uses an 8-point rule.  Constant terms covering all of
        ``[0, 1]`` contribute their value exactly, since ``nu`` is a probability.
        """
        full = [(w, p) for w, p in f.terms
                if p.kind == "const" and p.lo == 0.0 and p.hi == 1.0 and p.lo_closed and p.hi_closed]
        if full:
            rest = Observable(tuple(t for t in f.terms if t not in full), None, f.name)
            return float(sum(w * p.scale for w, p in full)) + (self.nu(rest) if rest.terms else 0.0)
        exact = float(np.dot(self.h[0::2], bin_integrals(f, self.op.edges, 1)))
        x, wq, t = self.nodes(_GL8)
        fv = eval_observable(f, x)
        fv = np.where(np.isfinite(fv), fv, 0.0)
        slope = float(((self.h[1::2, None] * t[None, :]) * fv * wq).sum())
        return exact + slope

    def power(self, u: np.ndarray, n: int) -> np.ndarray:
        for _ in range(n):
            u = self.A @ u
        return u


@dataclass(frozen=True)
class KernelResult:
    """``K^n f`` on bins.

    Attributes
    ----------
    nodal : ndarray (B, 4)
        Values at the 4-point Gauss-Legendre nodes of each bin.
    cell_averages : ndarray (B,)
    unsupported : ndarray of int
        Bins where the density is below ``1e-14`` (excluded, value 0).
    """

    nodal: np.ndarray
    cell_averages: np.ndarray
    unsupported: np.ndarray


def _kernel_nodal(op: UlamOperator, u0: np.ndarray, n: int) -> KernelResult:
    G = op.galerkin
    u = G.power(u0, n)
    num = G.values(u)
    den = G.values(G.h)
    bad = np.any(den < 1e-14, axis=1)
    safe = np.where(den < 1e-14, 1.0, den)
    vals = np.where(bad[:, None], 0.0, num / safe)
    _, wt = _GL4
    avg = 0.5 * (vals * wt[None, :]).sum(axis=1)
    return KernelResult(vals, avg, np.flatnonzero(bad))


def apply_kernel(op: UlamOperator, f: Observable, n: int) -> KernelResult:
    """``K^n f = L^n(f h) / h`` on bins (Galerkin transfer operator)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return _kernel_nodal(op, op.galerkin.project_fh(f), n)


def _l2nu(op: UlamOperator, vals: np.ndarray) -> float:
    G = op.galerkin
    _, wq, _ = G.nodes(_GL4)
    hv = G.values(G.h)
    return math.sqrt(max(float((wq * vals ** 2 * hv).sum()), 0.0))


def l2nu_distance(op: UlamOperator, res: KernelResult, target) -> float:
    """``||K^n f - target||_{L2(nu)}`` with ``target`` a callable of ``x``."""
    x, _, _ = op.galerkin.nodes(_GL4)
    return _l2nu(op, res.nodal - target(x))


def _geometric_fit(terms: np.ndarray, last: int) -> float:
    k = np.arange(len(terms))
    sel = (terms > 1e-300) & (k >= max(1, len(terms) - last))
    if sel.sum() < 2:
        return 0.0
    slope = np.polyfit(k[sel], np.log(terms[sel]), 1)[0]
    return float(min(math.exp(slope), 1.0))


def gordin_sum(op: UlamOperator, f: Observable, N: int) -> dict:
    """Terms ``||K^n f - nu(f)||_{L2(nu)}`` for ``n <= N`` and their sum.

    A geometric model fitted to the last decade of terms supplies the tail
    estimate added to the partial sum.
    """
    G = op.galerkin
    nu_f = G.nu(f)
    u = G.project_fh(f) - nu_f * G.h
    terms = np.empty(N + 1)
    for n in range(N + 1):
        res = _kernel_nodal(op, u, 0)
        terms[n] = _l2nu(op, res.nodal)
        u = G.A @ u
    rho = _geometric_fit(terms, 10)
    if terms[-1] <= _ROUNDOFF * max(float(terms.max()), 1e-300):
        tail = 0.0  # the terms have reached the rounding floor
    else:
        tail = terms[-1] * rho / (1.0 - rho) if rho < 1.0 else math.inf
    return {"terms": terms, "partial_sum": float(terms.sum()), "rho_hat": rho,
            "tail_estimate": float(tail), "total": float(terms.sum() + tail), "nu_f": nu_f}


def correlation(op: UlamOperator, f: Observable, g: Observable, k: int) -> float:
    """``nu((f - nu f) g o T^k)`` as ``int g L^k((f - nu f) h) dx``."""
    return float(correlations(op, f, g, k)[k])


def correlations(op: UlamOperator, f: Observable, g: Observable, kmax: int) -> np.ndarray:
    """Correlations for lags ``0..kmax`` (one Galerkin sweep)."""
    G = op.galerkin
    u = G.project_fh(f) - G.nu(f) * G.h
    x, wq, _ = G.nodes(_GL8)
    gv = eval_observable(g, x)
    gv = np.where(np.isfinite(gv), gv, 0.0)
    out = np.empty(kmax + 1)
    for k in range(kmax + 1):
        out[k] = float((wq * gv * G.values(u, _GL8)).sum())
        u = G.A @ u
    return out


# ---------------------------------------------------------------------------
# phi-mixing coefficients
# ---------------------------------------------------------------------------


def _mass_groups(pi: np.ndarray, G: int) -> np.ndarray:
    """Start indices of ``G`` contiguous groups with roughly equal pi-mass."""
    n = len(pi)
    if G >= n:
        return np.arange(n)
    cdf = np.cumsum(pi) / pi.sum()
    starts = [0]
    for g in range(1, G):
        s = int(np.searchsorted(cdf, g / G, side="left")) + 1
        if s > starts[-1] and s < n:
            starts.append(s)
    return np.asarray(starts)


def _fit_decay(phi: np.ndarray, model: str) -> dict:
    k = np.arange(len(phi))
    sel = (k >= 1) & (phi > 1e-13)
    out = {"model": model, "rho_hat": float("nan"), "poly_exponent_hat": float("nan"), "r2": float("nan")}
    if sel.sum() < 2:
        out.update({"rho_hat": 0.0, "poly_exponent_hat": float("inf"), "r2": 1.0})
        return out
    y = np.log(phi[sel])
    fits = {}
    for name, xv in (("exponential", k[sel].astype(float)), ("polynomial", np.log(k[sel]))):
        coef = np.polyfit(xv, y, 1)
        resid = y - np.polyval(coef, xv)
        ss = float(((y - y.mean()) ** 2).sum())
        fits[name] = (coef[0], 1.0 - float((resid ** 2).sum()) / ss if ss > 0 else 1.0)
    if model == "auto":
        model = max(fits, key=lambda nm: fits[nm][1])
    out["model"] = model
    out["rho_hat"] = float(math.exp(fits["exponential"][0]))
    out["poly_exponent_hat"] = float(-fits["polynomial"][0])
    out["r2"] = float(fits[model][1])
    return out


def phi_profile_from_chain(R, pi: np.ndarray, kmax: int, pair_bins: int = 32,
                           horizon: int | None = None, model: str = "auto",
                           block_rows: int = 512) -> MixingProfile:
    """phi coefficients of a stationary finite chain with states ordered by position.

    Parameters
    ----------
    R : (n, n) array or sparse matrix
        Transition matrix of the chain ``Y``.
    pi : (n,) array
        Its stationary distribution.
    kmax : int
        Largest lag reported.
    pair_bins : int
        Number of coarse groups used for phi2 (at most 256).  With
        ``pair_bins >= n`` the phi2 values are exact for the chain.
    horizon : int, optional
        The supremum over future indices ``i >= k`` is taken over
        ``i <= horizon`` (default ``2 kmax``).

    Notes
    -----
    ``phi1(k) = max_{k <= i <= horizon} max_s max_t |sum_{j<=t} (R^i[s, j] - pi_j)|``.
    For phi2 the conditioning is on the coarse group of ``Y_0`` and the
    thresholds run over group boundaries; both restrictions can only lower
    the supremum, so the result is a lower bound for the chain's phi2.  The
    lag-0 values are set to 1.
    """
    if pair_bins > 256:
        raise ValueError("pair_bins above 256 exceeds the cost guard")
    R = sparse.csr_matrix(R)
    pi = np.asarray(pi, dtype=float)
    n = len(pi)
    H = 2 * kmax if horizon is None else int(horizon)
    if H < kmax:
        raise ValueError("horizon must be at least kmax")

    # phi1 on the full chain, rows processed in blocks.
    raw1 = np.zeros(H + 1)
    RT = R.T.tocsr()
    for s0 in range(0, n, block_rows):
        s1 = min(n, s0 + block_rows)
        V = np.zeros((s1 - s0, n))
        V[np.arange(s1 - s0), np.arange(s0, s1)] = 1.0
        rows_ok = pi[s0:s1] > 0
        for i in range(H + 1):
            if i > 0:
                V = (RT @ V.T).T
            dev = np.abs(np.cumsum(V - pi[None, :], axis=1))
            if np.any(rows_ok):
                raw1[i] = max(raw1[i], float(dev[rows_ok].max()))
    phi1 = np.maximum.accumulate(raw1[::-1])[::-1][: kmax + 1].copy()
    phi1[0] = 1.0
    violations = [int(k) for k in range(2, kmax + 1) if raw1[k] > raw1[k - 1] + 1e-12]

    # phi2 lower bound on coarse groups.
    starts = _mass_groups(pi, pair_bins)
    G = len(starts)
    group = np.zeros(n, dtype=int)
    group[starts[1:]] = 1
    group = np.cumsum(group)
    ends = np.concatenate([starts[1:], [n]]) - 1
    pig = np.bincount(group, weights=pi, minlength=G)
    F = np.cumsum(pig)                         # P(Y <= end of group t)
    Ind = (np.arange(n)[:, None] <= ends[None, :]).astype(float)   # n x G
    Q = np.zeros((G, n))
    okg = pig > 0
    Q[group, np.arange(n)] = pi
    Q[okg] /= pig[okg, None]
    Qs = [Q]
    for i in range(H):
        Qs.append((RT @ Qs[-1].T).T)
    Cs = [Ind]
    for d in range(H):
        Cs.append(R @ Cs[-1])
    raw2 = np.zeros(H + 1)
    for i1 in range(1, H + 1):
        Qi = Qs[i1]
        P1 = np.add.reduceat(Qi, starts, axis=1).cumsum(axis=1)       # G x G  (g, t1)
        best = 0.0
        for d in range(0, H - i1 + 1):
            C = Cs[d]                                                # n x G  (a, t2)
            W = Qi[:, :, None] * C[None, :, :]                       # G x n x G
            J = np.add.reduceat(W, starts, axis=1).cumsum(axis=1)    # G x G x G
            P2 = Qi @ C                                              # G x G (g, t2)
            cond = (J - F[None, None, :] * P1[:, :, None] - F[None, :, None] * P2[:, None, :]
                    + F[None, :, None] * F[None, None, :])
            mean = np.tensordot(pig, cond, axes=(0, 0))
            dev = np.abs(cond - mean[None])
            best = max(best, float(dev[okg].max()))
        raw2[i1] = best
    pair = np.maximum.accumulate(raw2[::-1])[::-1][: kmax + 1]
    phi2 = np.maximum(phi1, pair)
    phi2[0] = 1.0
    fit = _fit_decay(phi1, model)
    return MixingProfile(phi1, phi2, fit, H, G, raw1[: kmax + 1].copy(), violations)


def phi_coefficients(op: UlamOperator, kmax: int, pair_bins: int = 32,
                     horizon: int | None = None) -> MixingProfile:
    """phi profile of the reversed Ulam chain of ``op``.

    The decay model is exponential for uniformly expanding maps and
    polynomial for GPM maps.
    """
    if pair_bins > 256:
        raise ValueError("pair_bins above 256 exceeds the cost guard")
    model = "polynomial" if op.map.is_gpm else "exponential"
    return phi_profile_from_chain(op.R, op.pi, kmax, pair_bins, horizon, model)


def sum_sqrt_phi1(profile: MixingProfile) -> tuple[float, int]:
    """``sum_{k >= 0} phi1(k)^(1/2)`` with a certified geometric tail.

    Returns
    -------
    total : float
    index : int
        Lag at which the explicit sum is truncated.

    Raises
    ------
    DivergentProfileError
        If the profile does not decay exponentially.
    """
    phi = profile.phi1
    K = len(phi) - 1
    head = float(np.sqrt(phi).sum())
    if phi[K] == 0.0:
        return head, K
    fit = profile.decay_fit
    if fit["model"] != "exponential" or not (fit["rho_hat"] < 1.0):
        raise DivergentProfileError("phi1 profile has no certified exponential tail")
    r = math.sqrt(fit["rho_hat"])
    return head + math.sqrt(phi[K]) * r / (1.0 - r), K


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_stationary(op: UlamOperator, seed, count: int) -> np.ndarray:
    """Draw from the Ulam invariant measure: a bin by inverse CDF, then uniform inside it."""
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(op.pi)
    u = rng.random(count) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), op.B - 1)
    v = rng.random(count)
    return op.edges[idx] + v * op.grid.widths[idx]
