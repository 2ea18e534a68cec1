"""Piecewise-monotone interval maps.

Two families are supported: uniformly expanding maps (every branch has
``|T'| >= lambda > 1`` and bounded distortion) and generalized
Pomeau-Manneville maps, whose first branch has a neutral fixed point at 0.
All maps act on ``[0, 1]`` and are immutable once built.

Branch domains are closed on the left and open on the right, except for the
last branch which also contains 1.  A point shared by two branches therefore
belongs to the right-hand branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Branch",
    "IntervalMap",
    "ValidationReport",
    "MapDomainError",
    "doubling",
    "tent",
    "piecewise_linear",
    "lsv",
    "eval_map",
    "derivative",
    "second_derivative",
    "inverse_branch",
    "branch_index",
    "orbit",
    "validate",
    "ORBIT_FLOOR",
]

#: Smallest positive double; GPM orbits never go below it.
ORBIT_FLOOR = float(np.nextafter(0.0, 1.0))

_EDGE_TOL = 1e-12


class MapDomainError(ValueError):
    """Raised when a point lies outside the domain of an operation."""


@dataclass(frozen=True)
class Branch:
    """One monotone branch of an interval map.

    Parameters
    ----------
    domain_lo, domain_hi : float
        Endpoints of the branch domain.
    increasing : bool
        Direction of monotonicity.
    forward, deriv, inverse : callable
        Vectorized evaluators of ``T``, ``T'`` and the inverse branch.
    second : callable, optional
        Closed-form ``T''``.  When missing, central differences are used.
    """

    domain_lo: float
    domain_hi: float
    increasing: bool
    forward: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    second: Callable[[np.ndarray], np.ndarray] | None = None

    def image(self) -> tuple[float, float]:
        """Closure of the branch image as ``(lo, hi)``."""
        a = float(self.forward(np.array([self.domain_lo]))[0])
        # Evaluators are continuous extensions, so this is the one-sided
        # limit at the excluded right endpoint.
        b = float(self.forward(np.array([self.domain_hi]))[0])
        return (min(a, b), max(a, b))


@dataclass(frozen=True)
class IntervalMap:
    """A piecewise-monotone self-map of ``[0, 1]``.

    Parameters
    ----------
    branches : tuple of Branch
        Ordered branches whose domains tile ``[0, 1]``.
    kind : {"uniform", "gpm"}
        Map family.
    name : str
        Identifier used in configs and output files.
    params : dict
        Construction parameters (echoed into manifests).
    lam : float, optional
        Declared expansion lower bound for uniformly expanding maps.
    adler_c : float, optional
        Declared Adler constant for uniformly expanding maps.
    gamma : float, optional
        GPM exponent.
    """

    branches: tuple[Branch, ...]
    kind: str
    name: str
    params: dict = field(default_factory=dict)
    lam: float | None = None
    adler_c: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "gpm"):
            raise ValueError(f"unknown map kind {self.kind!r}")
        if not self.branches:
            raise ValueError("a map needs at least one branch")

    @property
    def breakpoints(self) -> np.ndarray:
        """Branch boundaries ``0 = y_0 < ... < y_K = 1``."""
        pts = [b.domain_lo for b in self.branches] + [self.branches[-1].domain_hi]
        return np.asarray(pts, dtype=float)

    @property
    def is_gpm(self) -> bool:
        return self.kind == "gpm"

    def kernel_spec(self) -> tuple[int, np.ndarray]:
        """Integer code and parameter vector used by the orbit kernels.

        Codes: 0 doubling, 1 tent, 2 full-branch piecewise linear
        (parameters are the breakpoints followed by the slopes), 3 LSV
        (parameter is gamma).  Maps without a kernel code raise ``ValueError``.
        """
        if self.name == "doubling":
            return 0, np.zeros(1)
        if self.name == "tent":
            return 1, np.zeros(1)
        if self.name == "piecewise_linear":
            bp = self.breakpoints
            slopes = np.asarray(self.params["slopes"], dtype=float)
            return 2, np.concatenate([bp, slopes])
        if self.name == "lsv":
            return 3, np.array([float(self.gamma)])
        raise ValueError(f"map {self.name!r} has no compiled orbit kernel")


@dataclass
class ValidationReport:
    """Outcome of :func:`validate`.  Failures are entries, not exceptions."""

    coverage_ok: bool
    gaps: list
    monotone_ok: list
    min_abs_derivative: list
    expansion_ok: bool
    adler_ratio: float
    gamma_hat: float | None = None
    c_hat: float | None = None
    neutral_ok: bool | None = None
    transitivity: str = "unverified (declared assumption)"
    messages: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        flags = [self.coverage_ok, self.expansion_ok, all(self.monotone_ok)]
        if self.neutral_ok is not None:
            flags.append(self.neutral_ok)
        return all(flags)

    def as_dict(self) -> dict:
        return {
            "coverage_ok": self.coverage_ok,
            "gaps": [list(g) for g in self.gaps],
            "monotone_ok": list(self.monotone_ok),
            "min_abs_derivative": [float(v) for v in self.min_abs_derivative],
            "expansion_ok": self.expansion_ok,
            "adler_ratio": float(self.adler_ratio),
            "gamma_hat": self.gamma_hat,
            "c_hat": self.c_hat,
            "neutral_ok": self.neutral_ok,
            "transitivity": self.transitivity,
            "ok": self.ok,
            "messages": list(self.messages),
        }


# ---------------------------------------------------------------------------
# Built-in maps
# ---------------------------------------------------------------------------


def _affine_branch(lo: float, hi: float, slope: float, img_lo: float) -> Branch:
    """Affine branch mapping ``[lo, hi)`` onto an interval starting at ``img_lo``.

    A negative slope gives a decreasing branch with ``T(lo) = img_lo + |slope|(hi-lo)``.
    """
    if slope > 0:
        def fwd(x, lo=lo, s=slope, c=img_lo):
            return c + s * (np.asarray(x, dtype=float) - lo)

        def inv(y, lo=lo, s=slope, c=img_lo):
            return lo + (np.asarray(y, dtype=float) - c) / s
    else:
        top = img_lo + abs(slope) * (hi - lo)

        def fwd(x, lo=lo, s=slope, c=top):
            return c + s * (np.asarray(x, dtype=float) - lo)

        def inv(y, lo=lo, s=slope, c=top):
            return lo + (np.asarray(y, dtype=float) - c) / s

    def der(x, s=slope):
        return np.full(np.shape(x), s, dtype=float)

    def sec(x):
        return np.zeros(np.shape(x), dtype=float)

    return Branch(lo, hi, slope > 0, fwd, der, inv, sec)


def doubling() -> IntervalMap:
    """The doubling map ``x -> 2x mod 1``."""
    b0 = Branch(
        0.0, 0.5, True,
        lambda x: 2.0 * np.asarray(x, dtype=float),
        lambda x: np.full(np.shape(x), 2.0),
        lambda y: 0.5 * np.asarray(y, dtype=float),
        lambda x: np.zeros(np.shape(x)),
    )
    b1 = Branch(
        0.5, 1.0, True,
        lambda x: 2.0 * np.asarray(x, dtype=float) - 1.0,
        lambda x: np.full(np.shape(x), 2.0),
        lambda y: 0.5 * np.asarray(y, dtype=float) + 0.5,
        lambda x: np.zeros(np.shape(x)),
    )
    return IntervalMap((b0, b1), "uniform", "doubling", {}, lam=2.0, adler_c=0.0)


def tent() -> IntervalMap:
    """The full tent map ``x -> 1 - |2x - 1|``."""
    b0 = Branch(
        0.0, 0.5, True,
        lambda x: 2.0 * np.asarray(x, dtype=float),
        lambda x: np.full(np.shape(x), 2.0),
        lambda y: 0.5 * np.asarray(y, dtype=float),
        lambda x: np.zeros(np.shape(x)),
    )
    b1 = Branch(
        0.5, 1.0, False,
        lambda x: 2.0 - 2.0 * np.asarray(x, dtype=float),
        lambda x: np.full(np.shape(x), -2.0),
        lambda y: 1.0 - 0.5 * np.asarray(y, dtype=float),
        lambda x: np.zeros(np.shape(x)),
    )
    return IntervalMap((b0, b1), "uniform", "tent", {}, lam=2.0, adler_c=0.0)


def piecewise_linear(slopes: Sequence[float] | None = None,
                     breakpoints: Sequence[float] | None = None) -> IntervalMap:
    """Full-branch increasing piecewise-linear map.

    Give either the slopes (which must satisfy ``sum(1/s) = 1``) or the
    interior breakpoints; branch ``k`` maps its domain affinely onto ``[0, 1)``.
    """
    if (slopes is None) == (breakpoints is None):
        raise ValueError("give exactly one of slopes or breakpoints")
    if slopes is not None:
        s = np.asarray(slopes, dtype=float)
        if np.any(s <= 1.0):
            raise ValueError("every slope must exceed 1")
        widths = 1.0 / s
        if abs(widths.sum() - 1.0) > 1e-12:
            raise ValueError(f"full-branch slopes need sum(1/s) = 1, got {widths.sum()!r}")
        edges = np.concatenate([[0.0], np.cumsum(widths)])
        edges[-1] = 1.0
    else:
        inner = np.asarray(breakpoints, dtype=float)
        edges = np.concatenate([[0.0], inner, [1.0]])
        if np.any(np.diff(edges) <= 0):
            raise ValueError("breakpoints must be strictly increasing inside (0, 1)")
        s = 1.0 / np.diff(edges)
        if np.any(s <= 1.0):
            raise ValueError("every branch must be expanding")
    branches = tuple(
        _affine_branch(float(edges[k]), float(edges[k + 1]), float(s[k]), 0.0)
        for k in range(len(s))
    )
    return IntervalMap(
        branches, "uniform", "piecewise_linear",
        {"slopes": [float(v) for v in s]},
        lam=float(s.min()), adler_c=0.0,
    )


def _lsv_inverse0(y: np.ndarray, gamma: float) -> np.ndarray:
    """Invert ``x + 2^g x^(1+g) = y`` on ``[0, 1/2]``.

    The left-hand side is increasing and convex, so Newton's method started
    to the right of the root decreases monotonically onto it.
    """
    y = np.asarray(y, dtype=float)
    c = 2.0 ** gamma
    x = np.minimum(y, 0.5)
    for _ in range(200):
        g = x + c * x ** (1.0 + gamma) - y
        dg = 1.0 + (1.0 + gamma) * c * x ** gamma
        step = g / dg
        x_new = np.maximum(x - step, 0.0)
        if np.all(np.abs(x_new - x) <= 4e-16 * np.maximum(x_new, 1e-300)):
            x = x_new
            break
        x = x_new
    return x


def lsv(gamma: float) -> IntervalMap:
    """Liverani-Saussol-Vaienti map with parameter ``gamma`` in ``(0, 1)``.

    ``T(x) = x (1 + 2^gamma x^gamma)`` on ``[0, 1/2)`` and ``2x - 1`` on
    ``[1/2, 1]``.
    """
    g = float(gamma)
    if not 0.0 < g < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    c = 2.0 ** g

    def fwd0(x):
        x = np.asarray(x, dtype=float)
        return x * (1.0 + c * x ** g)

    def der0(x):
        x = np.asarray(x, dtype=float)
        return 1.0 + (1.0 + g) * c * x ** g

    def sec0(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return g * (1.0 + g) * c * x ** (g - 1.0)

    b0 = Branch(0.0, 0.5, True, fwd0, der0, lambda y: _lsv_inverse0(y, g), sec0)
    b1 = Branch(
        0.5, 1.0, True,
        lambda x: 2.0 * np.asarray(x, dtype=float) - 1.0,
        lambda x: np.full(np.shape(x), 2.0),
        lambda y: 0.5 * np.asarray(y, dtype=float) + 0.5,
        lambda x: np.zeros(np.shape(x)),
    )
    return IntervalMap((b0, b1), "gpm", "lsv", {"gamma": g}, gamma=g)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _check_domain(x: np.ndarray) -> None:
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise MapDomainError("points must lie in [0, 1]")


def branch_index(m: IntervalMap, x):
    """Index of the branch containing ``x`` (right-hand branch at shared endpoints)."""
    xa = np.asarray(x, dtype=float)
    _check_domain(xa)
    los = np.array([b.domain_lo for b in m.branches])
    idx = np.searchsorted(los, xa, side="right") - 1
    idx = np.clip(idx, 0, len(m.branches) - 1)
    return idx if xa.ndim else int(idx)


def _dispatch(m: IntervalMap, x, attr: str):
    xa = np.asarray(x, dtype=float)
    scalar = xa.ndim == 0
    xa = np.atleast_1d(xa)
    idx = np.atleast_1d(branch_index(m, xa))
    out = np.empty_like(xa)
    for k, br in enumerate(m.branches):
        sel = idx == k
        if np.any(sel):
            out[sel] = getattr(br, attr)(xa[sel])
    return float(out[0]) if scalar else out


def eval_map(m: IntervalMap, x):
    """Evaluate ``T(x)``.

    Examples
    --------
    >>> eval_map(doubling(), 0.3)
    0.6
    """
    return _dispatch(m, x, "forward")


def _check_interior(m: IntervalMap, x: np.ndarray) -> None:
    bp = m.breakpoints
    d = np.min(np.abs(np.atleast_1d(x)[:, None] - bp[None, :]), axis=1)
    if np.any(d == 0.0):
        raise MapDomainError("derivative is undefined at a branch endpoint")


def derivative(m: IntervalMap, x):
    """``T'(x)`` for ``x`` in the interior of a branch."""
    xa = np.asarray(x, dtype=float)
    _check_domain(xa)
    _check_interior(m, xa)
    return _dispatch(m, x, "deriv")


def second_derivative(m: IntervalMap, x):
    """``T''(x)``: closed form for built-ins, central differences otherwise.

    The difference step is ``h = max(1e-6, 1e-4 x)``.
    """
    xa = np.asarray(x, dtype=float)
    scalar = xa.ndim == 0
    xa = np.atleast_1d(xa)
    _check_domain(xa)
    _check_interior(m, xa)
    idx = np.atleast_1d(branch_index(m, xa))
    out = np.empty_like(xa)
    for k, br in enumerate(m.branches):
        sel = idx == k
        if not np.any(sel):
            continue
        xs = xa[sel]
        if br.second is not None:
            out[sel] = br.second(xs)
        else:
            h = np.maximum(1e-6, 1e-4 * xs)
            h = np.minimum(h, 0.5 * np.minimum(xs - br.domain_lo, br.domain_hi - xs))
            out[sel] = (br.deriv(xs + h) - br.deriv(xs - h)) / (2.0 * h)
    return float(out[0]) if scalar else out


def inverse_branch(m: IntervalMap, k: int, y):
    """Preimage of ``y`` under branch ``k``.

    Raises
    ------
    MapDomainError
        If ``y`` is not in the closure of the branch image.
    """
    br = m.branches[k]
    ya = np.asarray(y, dtype=float)
    lo, hi = br.image()
    if np.any(ya < lo - _EDGE_TOL) or np.any(ya > hi + _EDGE_TOL):
        raise MapDomainError(f"value outside the image of branch {k}")
    ya = np.clip(ya, lo, hi)
    x = np.clip(br.inverse(ya), br.domain_lo, br.domain_hi)
    return float(x) if np.ndim(x) == 0 else x


def orbit(m: IntervalMap, x0: float, n: int) -> np.ndarray:
    """Deterministic orbit ``(x0, T x0, ..., T^(n-1) x0)``.

    For GPM maps iterates are floored at the smallest positive double so
    that underflow never lands on the neutral fixed point.  Uniformly
    expanding maps are iterated without modification, so genuine fixed points
    such as 0 for the doubling map are kept.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    x = float(x0)
    _check_domain(np.asarray(x))
    out = np.empty(n)
    for i in range(n):
        if m.is_gpm:
            x = max(x, ORBIT_FLOOR)
        out[i] = x
        if i + 1 < n:
            x = min(max(eval_map(m, x), 0.0), 1.0)
    return out


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(m: IntervalMap, grid_size: int = 1000) -> ValidationReport:
    """Check the structural assumptions of the map family on grids.

    Parameters
    ----------
    m : IntervalMap
    grid_size : int
        Number of interior grid points per branch (at least 100).

    Returns
    -------
    ValidationReport
        Partition coverage, per-branch monotonicity and ``min |T'|``, the
        empirical Adler ratio ``sup |T''| / T'^2`` and, for GPM maps, a
        log-log fit of ``T''(x) ~ c x^(gamma - 1)`` on ``[1e-6, 1e-2]``.
        Topological transitivity is reported as an unverified assumption.
    """
    if grid_size < 100:
        raise ValueError("grid_size must be at least 100")
    msgs = []
    bp = m.breakpoints
    gaps = []
    if bp[0] != 0.0:
        gaps.append((0.0, float(bp[0])))
    if bp[-1] != 1.0:
        gaps.append((float(bp[-1]), 1.0))
    for a, b in zip(m.branches[:-1], m.branches[1:]):
        if a.domain_hi != b.domain_lo:
            gaps.append((a.domain_hi, b.domain_lo))
    coverage_ok = not gaps and bool(np.all(np.diff(bp) > 0))
    if not coverage_ok:
        msgs.append("branch domains do not tile [0, 1]")

    mono, mins = [], []
    adler = 0.0
    for k, br in enumerate(m.branches):
        t = (np.arange(grid_size) + 0.5) / grid_size
        xs = br.domain_lo + t * (br.domain_hi - br.domain_lo)
        ys = br.forward(xs)
        d = np.diff(ys)
        mono.append(bool(np.all(d > 0) if br.increasing else np.all(d < 0)))
        dv = np.abs(br.deriv(xs))
        mins.append(float(dv.min()))
        if br.second is not None:
            sv = np.abs(br.second(xs))
        else:
            sv = np.abs(second_derivative(m, xs))
        adler = max(adler, float(np.max(sv / dv ** 2)))

    if m.is_gpm:
        expansion_ok = all(v > 1.0 for v in mins)
        xs = np.logspace(-6, -2, 200)
        sv = np.abs(second_derivative(m, xs))
        slope, icpt = np.polyfit(np.log(xs), np.log(sv), 1)
        gamma_hat = float(slope + 1.0)
        c_hat = float(np.exp(icpt))
        near0 = np.abs(derivative(m, np.array([1e-12])))[0]
        grid = np.linspace(1e-9, m.branches[0].domain_hi, grid_size, endpoint=False)[1:]
        neutral_ok = bool(near0 < 1.0 + 1e-2 and np.all(np.abs(derivative(m, grid)) > 1.0))
        if not neutral_ok:
            msgs.append("neutral branch check failed")
        # The Adler ratio is unbounded near a neutral fixed point; report it
        # away from 0 only.
        return ValidationReport(coverage_ok, gaps, mono, mins, expansion_ok, adler,
                                gamma_hat, c_hat, neutral_ok, messages=msgs)

    lam = min(mins)
    expansion_ok = lam > 1.0
    if m.lam is not None and lam < m.lam - 1e-12:
        expansion_ok = False
        msgs.append(f"min |T'| = {lam} below declared lambda {m.lam}")
    return ValidationReport(coverage_ok, gaps, mono, mins, expansion_ok, adler, messages=msgs)
