"""Piecewise-monotone observables and their approximation decompositions.

An :class:`Observable` is a finite weighted sum of :class:`MonotonePiece`
objects.  Each piece is a closed-form function restricted to an interval and
zero elsewhere, monotone on its support.  Restricting a monotone function to
a level set ``{|g| <= m}`` gives another interval, so every truncation used
here (value masks, clipping windows) keeps the piece structure and keeps
integrals in closed form.

Integrals against an invariant density use the bin representation produced
by :mod:`asipdyn.transfer`: bin edges ``e`` and a density ``h`` constant on
each bin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, optimize

__all__ = [
    "MonotonePiece",
    "Observable",
    "L2Class",
    "TailClass",
    "TailFunction",
    "UnboundedVariationError",
    "QuadratureError",
    "power_law",
    "log_damped_power",
    "cosine",
    "indicator",
    "centered_linear",
    "constant",
    "combine",
    "eval_observable",
    "variation_norm",
    "lil_condition_integral",
    "decompose_H",
    "decompose_L2",
    "truncate_gn",
    "loglog",
    "bin_integrals",
    "mu_mean",
    "mu_tail_mass",
    "mu_sq_above",
    "check_class",
    "BUILTINS",
]


class UnboundedVariationError(ValueError):
    """A piece has an infinite one-sided limit, so its variation is infinite."""


class QuadratureError(ValueError):
    """A requested integral is not finite."""


def loglog(n: float) -> float:
    """``ln(max(ln n, e))``, a positive stand-in for ``ln ln n``."""
    return math.log(max(math.log(n), math.e))


# ---------------------------------------------------------------------------
# Pieces
# ---------------------------------------------------------------------------

_KINDS = ("power", "logpower", "cos", "const", "linear")


@dataclass(frozen=True)
class MonotonePiece:
    """``scale * base(x)`` on an interval, zero elsewhere.

    Parameters
    ----------
    kind : {"power", "logpower", "cos", "const", "linear"}
        Base function: ``(x + shift)^(-a)``, ``x^(-a) |ln x|^(-b)``,
        ``cos(2 pi k x)``, ``1`` or ``alpha x + beta``.
    params : tuple
        ``(a, shift)``, ``(a, b)``, ``(k,)``, ``()`` or ``(alpha, beta)``.
    scale : float
        Multiplier applied to the base function.
    lo, hi : float
        Support endpoints.
    lo_closed, hi_closed : bool
        Whether the endpoints belong to the support.
    """

    kind: str
    params: tuple
    scale: float
    lo: float
    hi: float
    lo_closed: bool = True
    hi_closed: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown piece kind {self.kind!r}")
        if not (0.0 <= self.lo <= self.hi <= 1.0):
            raise ValueError("piece support must be a sub-interval of [0, 1]")

    # -- base function and its calculus ------------------------------------
    def _base(self, x: np.ndarray) -> np.ndarray:
        k, p = self.kind, self.params
        with np.errstate(divide="ignore", invalid="ignore"):
            if k == "power":
                return (x + p[1]) ** (-p[0])
            if k == "logpower":
                return x ** (-p[0]) * (-np.log(x)) ** (-p[1])
            if k == "cos":
                return np.cos(2.0 * np.pi * p[0] * x)
            if k == "const":
                return np.ones_like(x)
            return p[0] * x + p[1]

    def _F1(self, x: np.ndarray) -> np.ndarray:
        k, p = self.kind, self.params
        if k == "power":
            a, s = p
            if a == 1.0:
                return np.log(x + s)
            return (x + s) ** (1.0 - a) / (1.0 - a)
        if k == "cos":
            w = 2.0 * np.pi * p[0]
            return np.sin(w * x) / w
        if k == "const":
            return np.asarray(x, dtype=float)
        if k == "linear":
            return 0.5 * p[0] * x * x + p[1] * x
        raise NotImplementedError

    def _F2(self, x: np.ndarray) -> np.ndarray:
        k, p = self.kind, self.params
        if k == "power":
            a, s = p
            if 2.0 * a == 1.0:
                return np.log(x + s)
            with np.errstate(divide="ignore"):
                return (x + s) ** (1.0 - 2.0 * a) / (1.0 - 2.0 * a)
        if k == "cos":
            w = 2.0 * np.pi * p[0]
            return 0.5 * x + np.sin(2.0 * w * x) / (4.0 * w)
        if k == "const":
            return np.asarray(x, dtype=float)
        if k == "linear":
            al, be = p
            if al == 0.0:
                return be * be * x
            return (al * x + be) ** 3 / (3.0 * al)
        raise NotImplementedError

    def _quad(self, u: float, v: float, power: int) -> float:
        if v <= u:
            return 0.0
        val, _ = integrate.quad(lambda t: float(self._base(np.array(t))) ** power,
                                u, v, limit=200, epsabs=1e-15, epsrel=1e-12)
        return val

    def _definite(self, u, v, power: int) -> np.ndarray:
        """``int_u^v base^power`` over ``[u, v]`` clipped to the support."""
        u = np.clip(np.asarray(u, dtype=float), self.lo, self.hi)
        v = np.clip(np.asarray(v, dtype=float), self.lo, self.hi)
        v = np.maximum(u, v)
        if self.kind == "logpower":
            out = np.array([self._quad(a, b, power) for a, b in zip(np.ravel(u), np.ravel(v))])
            return out.reshape(np.shape(u))
        F = self._F1 if power == 1 else self._F2
        with np.errstate(invalid="ignore"):
            res = F(v) - F(u)
        res = np.where(v > u, res, 0.0)
        if np.any(~np.isfinite(res)):
            raise QuadratureError(f"integral of a {self.kind} piece to power {power} diverges")
        return res

    def integral(self, u, v) -> np.ndarray:
        """``int_{[u,v]} piece(x) dx`` (vectorized over ``u``, ``v``)."""
        return self.scale * self._definite(u, v, 1)

    def integral_sq(self, u, v) -> np.ndarray:
        """``int_{[u,v]} piece(x)^2 dx``."""
        return self.scale ** 2 * self._definite(u, v, 2)

    # -- evaluation ----------------------------------------------------------
    def support_mask(self, x: np.ndarray) -> np.ndarray:
        lo_ok = x >= self.lo if self.lo_closed else x > self.lo
        hi_ok = x <= self.hi if self.hi_closed else x < self.hi
        return lo_ok & hi_ok

    def __call__(self, x):
        xa = np.asarray(x, dtype=float)
        mask = self.support_mask(xa)
        out = np.zeros(np.shape(xa))
        if np.any(mask):
            out[mask] = self.scale * self._base(xa[mask])
        return float(out) if xa.ndim == 0 else out

    @property
    def is_empty(self) -> bool:
        return self.hi < self.lo or (self.hi == self.lo and not (self.lo_closed and self.hi_closed))

    def limit(self, x: float) -> float:
        """Value of the closed-form expression at ``x`` (one-sided limit at the ends)."""
        if self.kind == "logpower" and x <= 0.0:
            # x^(-a) |ln x|^(-b) -> inf as x -> 0+, but evaluates to inf * 0 there
            return math.copysign(math.inf, self.scale)
        return float(self.scale * self._base(np.array(x, dtype=float)))

    def end_limits(self) -> tuple[float, float]:
        """One-sided limits at ``lo+`` and ``hi-``."""
        return self.limit(self.lo), self.limit(self.hi)

    @property
    def increasing(self) -> bool:
        """``True`` for nondecreasing pieces (constants count as nondecreasing)."""
        a, b = self.end_limits()
        if self.kind == "const" or a == b:
            return True
        return b > a

    @property
    def is_constant(self) -> bool:
        return self.kind == "const" or self.scale == 0.0 or (
            self.kind == "linear" and self.params[0] == 0.0)

    def direction(self) -> str:
        return "nondecreasing" if self.increasing else "nonincreasing"

    # -- level sets ------------------------------------------------------------
    def solve(self, value: float) -> float:
        """Point of the support where the piece equals ``value``."""
        k, p = self.kind, self.params
        tgt = value / self.scale
        if k == "power":
            x = tgt ** (-1.0 / p[0]) - p[1]
        elif k == "cos":
            kk = p[0]
            seg = math.floor(4.0 * kk * self.lo + 1e-9)
            base = math.acos(min(1.0, max(-1.0, tgt))) / (2.0 * math.pi * kk)
            # acos is in [0, 1/(2k)]; map onto the half period containing the support.
            period = 1.0 / kk
            start = math.floor(self.lo / period + 1e-12) * period
            if seg % 4 in (0, 1):
                x = start + base
            else:
                x = start + period - base
        elif k == "linear":
            x = (tgt - p[1]) / p[0]
        else:
            f = lambda t: self.limit(t) - value  # noqa: E731
            lo = max(self.lo, 1e-300)
            # Relative tolerance only: level points of singular pieces sit near 0.
            x = optimize.brentq(f, lo, self.hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                                maxiter=500)
        return float(min(max(x, self.lo), self.hi))

    def restrict(self, lo: float, hi: float, lo_closed: bool, hi_closed: bool) -> "MonotonePiece":
        return replace(self, lo=lo, hi=hi, lo_closed=lo_closed, hi_closed=hi_closed)

    def split_level(self, m: float) -> tuple["MonotonePiece | None", list["MonotonePiece"]]:
        """Split into ``piece * 1{|piece| <= m}`` and the complementary parts.

        The parts share the same evaluator and partition the support exactly,
        so their sum reproduces the piece at every point.
        """
        if self.is_empty:
            return None, []
        if self.is_constant:
            v = self.limit(self.lo)
            return (self, []) if abs(v) <= m else (None, [self])
        a, b = self.end_limits()
        if self.increasing:
            cut_lo = a < -m
            cut_hi = b > m
            x1 = self.solve(-m) if cut_lo else self.lo
            x2 = self.solve(m) if cut_hi else self.hi
        else:
            cut_lo = a > m
            cut_hi = b < -m
            x1 = self.solve(m) if cut_lo else self.lo
            x2 = self.solve(-m) if cut_hi else self.hi
        outer = []
        if cut_lo:
            left = self.restrict(self.lo, x1, self.lo_closed, False)
            if not left.is_empty:
                outer.append(left)
        if cut_hi:
            right = self.restrict(x2, self.hi, False, self.hi_closed)
            if not right.is_empty:
                outer.append(right)
        inner = self.restrict(x1, x2, True if cut_lo else self.lo_closed,
                              True if cut_hi else self.hi_closed)
        if inner.is_empty or x2 < x1:
            inner = None
            if cut_lo and cut_hi:
                # No point satisfies |g| <= m; keep the exact partition.
                outer = [self]
        return inner, outer

    def sup_abs(self) -> float:
        a, b = self.end_limits()
        return max(abs(a), abs(b))

    def as_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params), "scale": self.scale,
                "lo": self.lo, "hi": self.hi, "lo_closed": self.lo_closed,
                "hi_closed": self.hi_closed}


# ---------------------------------------------------------------------------
# Tail functions and class tags
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TailFunction:
    """A non-increasing, right-continuous ``H: [0, inf) -> [0, 1]``.

    Kinds
    -----
    ``power``: ``min(1, scale * t^(-q))``.
    ``step``: ``1`` for ``t < m`` and ``0`` afterwards (bounded observables).
    ``table``: linear interpolation of ``(t_i, H_i)``; constant after the last node.
    ``capped``: ``min(H(m), H(t))`` for a base tail function ``H``.
    """

    kind: str
    params: tuple

    @classmethod
    def power(cls, q: float, scale: float = 1.0) -> "TailFunction":
        return cls("power", (float(q), float(scale)))

    @classmethod
    def step(cls, m: float) -> "TailFunction":
        return cls("step", (float(m),))

    @classmethod
    def table(cls, t: Sequence[float], H: Sequence[float]) -> "TailFunction":
        t = tuple(float(v) for v in t)
        H = tuple(float(v) for v in H)
        if len(t) != len(H) or len(t) < 2 or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("table needs matching, strictly increasing nodes")
        if any(b > a for a, b in zip(H, H[1:])) or min(H) < 0 or max(H) > 1:
            raise ValueError("table values must be non-increasing in [0, 1]")
        return cls("table", (t, H))

    def capped(self, m: float) -> "TailFunction":
        return TailFunction("capped", (self, float(m)))

    def __call__(self, t):
        ta = np.asarray(t, dtype=float)
        k, p = self.kind, self.params
        if k == "power":
            q, s = p
            with np.errstate(divide="ignore"):
                out = np.minimum(1.0, s * ta ** (-q))
        elif k == "step":
            out = np.where(ta < p[0], 1.0, 0.0)
        elif k == "table":
            tt, HH = np.asarray(p[0]), np.asarray(p[1])
            out = np.interp(ta, tt, HH, left=HH[0], right=HH[-1])
            out = np.where(ta < tt[0], 1.0, out)
        else:
            base, m = p
            out = np.minimum(base(m), base(ta))
        return float(out) if ta.ndim == 0 else out

    def as_dict(self) -> dict:
        if self.kind == "capped":
            return {"kind": "capped", "base": self.params[0].as_dict(), "m": self.params[1]}
        return {"kind": self.kind, "params": [list(v) if isinstance(v, tuple) else v
                                              for v in self.params]}


@dataclass(frozen=True)
class L2Class:
    """Tag for ``Monm_2(M, mu)``: each term has ``L^2(mu)`` norm at most ``M``."""

    M: float


@dataclass(frozen=True)
class TailClass:
    """Tag for ``Monm(H, mu)``."""

    H: TailFunction


# ---------------------------------------------------------------------------
# Observables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Observable:
    """Finite weighted combination ``sum_l a_l g_l`` of monotone pieces.

    Parameters
    ----------
    terms : tuple of (float, MonotonePiece)
    tag : L2Class, TailClass or None
    name : str
    meta : dict
        Free-form provenance (builtin parameters, truncation level, ...).
    """

    terms: tuple
    tag: object = None
    name: str = "custom"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.tag is not None:
            total = sum(abs(w) for w, _ in self.terms)
            if total > 1.0 + 1e-12:
                raise ValueError(f"class-tagged observables need sum|a| <= 1, got {total!r}")

    def __call__(self, x):
        return eval_observable(self, x)

    @property
    def weight_sum(self) -> float:
        return float(sum(abs(w) for w, _ in self.terms))

    def with_tag(self, tag) -> "Observable":
        return replace(self, tag=tag)

    def scaled(self, c: float) -> "Observable":
        """``c * f`` as an untagged observable (scales the weights)."""
        return Observable(tuple((c * w, p) for w, p in self.terms), None,
                          f"{c!r}*{self.name}", dict(self.meta))

    def as_dict(self) -> dict:
        return {"name": self.name, "terms": [[w, p.as_dict()] for w, p in self.terms],
                "meta": dict(self.meta)}


def eval_observable(f: Observable, x):
    """``sum_l a_l g_l(x)``."""
    xa = np.asarray(x, dtype=float)
    out = np.zeros(np.shape(xa))
    for w, p in f.terms:
        out = out + w * p(xa)
    return float(out) if xa.ndim == 0 else out


def _single(piece: MonotonePiece, name: str, tag=None, meta=None) -> Observable:
    return Observable(((1.0, piece),), tag, name, meta or {})


def power_law(a: float, shift: float = 0.0, tag=None) -> Observable:
    """``x -> (x + shift)^(-a)`` on ``(0, 1]``."""
    if a < 0:
        raise ValueError("power_law needs a >= 0")
    piece = MonotonePiece("power", (float(a), float(shift)), 1.0, 0.0, 1.0,
                          lo_closed=shift > 0, hi_closed=True)
    return _single(piece, "power_law", tag, {"a": a, "shift": shift})


def log_damped_power(a: float, b: float, tag=None) -> Observable:
    """``x -> x^(-a) |ln x|^(-b)`` near 0.

    The function is decreasing on ``(0, exp(-max(1, b/a))]``; it is set to 0
    to the right of that point.
    """
    if a <= 0 or b < 0:
        raise ValueError("log_damped_power needs a > 0 and b >= 0")
    xc = math.exp(-max(1.0, b / a))
    piece = MonotonePiece("logpower", (float(a), float(b)), 1.0, 0.0, xc,
                          lo_closed=False, hi_closed=True)
    return _single(piece, "log_damped_power", tag, {"a": a, "b": b, "support_hi": xc})


def cosine(k: int, tag=None) -> Observable:
    """``cos(2 pi k x)`` as ``4k`` sign-constant monotone pieces.

    Each piece carries weight ``1/(4k)`` and amplitude ``4k`` so the weights
    sum to 1, as class-tagged observables require.
    """
    k = int(k)
    if k < 1:
        raise ValueError("cosine needs k >= 1")
    n = 4 * k
    terms = []
    for j in range(n):
        lo, hi = j / n, (j + 1) / n
        terms.append((1.0 / n, MonotonePiece("cos", (k,), float(n), lo, hi,
                                             lo_closed=True, hi_closed=(j == n - 1))))
    return Observable(tuple(terms), tag, "cosine", {"k": k})


def indicator(lo: float, hi: float, tag=None) -> Observable:
    """``1_[lo, hi)`` (closed at 1 when ``hi = 1``)."""
    piece = MonotonePiece("const", (), 1.0, float(lo), float(hi), True, hi == 1.0)
    return _single(piece, "indicator", tag, {"lo": lo, "hi": hi})


def centered_linear(tag=None) -> Observable:
    """``x -> x - 1/2`` on ``[0, 1]`` as one increasing piece."""
    piece = MonotonePiece("linear", (1.0, -0.5), 1.0, 0.0, 1.0, True, True)
    return _single(piece, "centered_linear", tag)


def constant(c: float = 1.0, tag=None) -> Observable:
    """The constant function ``c`` on ``[0, 1]``."""
    piece = MonotonePiece("const", (), float(c), 0.0, 1.0, True, True)
    return _single(piece, "constant", tag, {"c": c})


def combine(parts: Iterable[tuple[float, Observable]], name: str = "combination") -> Observable:
    """Untagged linear combination ``sum_j c_j f_j``."""
    terms = []
    for c, f in parts:
        terms.extend((c * w, p) for w, p in f.terms)
    return Observable(tuple(terms), None, name)


BUILTINS = {
    "power_law": power_law,
    "log_damped_power": log_damped_power,
    "cosine": cosine,
    "indicator": indicator,
    "centered_linear": centered_linear,
    "constant": constant,
}


# ---------------------------------------------------------------------------
# Integrals against a bin density
# ---------------------------------------------------------------------------


def bin_integrals(f: Observable, edges: np.ndarray, power: int = 1) -> np.ndarray:
    """``int_{I_i} f`` (``power=1``) or ``sum_l a_l^2 int g_l^2`` diagonal terms.

    For ``power=1`` the result is exact for every observable.  ``power=2``
    is exact only when the pieces have disjoint supports, which is the case
    for every built-in; it is used for per-piece norms.
    """
    edges = np.asarray(edges, dtype=float)
    out = np.zeros(len(edges) - 1)
    for w, p in f.terms:
        if p.is_empty:
            continue
        i0 = max(np.searchsorted(edges, p.lo, side="right") - 1, 0)
        i1 = min(np.searchsorted(edges, p.hi, side="left"), len(edges) - 1)
        if i1 <= i0:
            continue
        u, v = edges[i0:i1], edges[i0 + 1:i1 + 1]
        if power == 1:
            out[i0:i1] += w * p.integral(u, v)
        else:
            out[i0:i1] += w * w * p.integral_sq(u, v)
    return out


def mu_mean(f: Observable, edges: np.ndarray, h: np.ndarray) -> float:
    """``int f h dx`` for a density ``h`` constant on bins."""
    return float(np.dot(h, bin_integrals(f, edges, 1)))


def _piece_mu_sq(p: MonotonePiece, edges: np.ndarray, h: np.ndarray) -> float:
    i0 = max(np.searchsorted(edges, p.lo, side="right") - 1, 0)
    i1 = min(np.searchsorted(edges, p.hi, side="left"), len(edges) - 1)
    if i1 <= i0 or p.is_empty:
        return 0.0
    return float(np.dot(h[i0:i1], p.integral_sq(edges[i0:i1], edges[i0 + 1:i1 + 1])))


def _piece_mu_mass(p: MonotonePiece, edges: np.ndarray, h: np.ndarray) -> float:
    cdf = np.concatenate([[0.0], np.cumsum(h * np.diff(edges))])
    def F(x):
        i = min(max(np.searchsorted(edges, x, side="right") - 1, 0), len(h) - 1)
        return cdf[i] + h[i] * (x - edges[i])
    return float(F(p.hi) - F(p.lo))


def mu_sq_above(g: MonotonePiece, K: float, edges: np.ndarray, h: np.ndarray) -> float:
    """``mu(g^2 1{|g| >= K})`` for a single monotone piece."""
    if K <= 0:
        return _piece_mu_sq(g, edges, h)
    _, outer = g.split_level(K)
    # ``split_level`` puts |g| = K into the inner part; the boundary is a
    # single point, so it carries no mass under an absolutely continuous mu.
    return float(sum(_piece_mu_sq(p, edges, h) for p in outer))


def mu_tail_mass(g: MonotonePiece, t: float, edges: np.ndarray, h: np.ndarray) -> float:
    """``mu(|g| > t)`` for a single monotone piece."""
    _, outer = g.split_level(t)
    return float(sum(_piece_mu_mass(p, edges, h) for p in outer))


def check_class(f: Observable, edges: np.ndarray, h: np.ndarray,
                t_grid: Sequence[float] | None = None) -> dict:
    """Sample the class declaration of ``f`` against a bin density.

    Membership cannot be decided numerically; violations are reported.
    """
    edges = np.asarray(edges, dtype=float)
    h = np.asarray(h, dtype=float)
    report = {"tag": type(f.tag).__name__ if f.tag is not None else None,
              "weight_sum": f.weight_sum, "violations": []}
    if isinstance(f.tag, L2Class):
        for idx, (_, p) in enumerate(f.terms):
            norm = math.sqrt(_piece_mu_sq(p, edges, h))
            if norm > f.tag.M * (1 + 1e-9):
                report["violations"].append({"term": idx, "l2_norm": norm, "M": f.tag.M})
    elif isinstance(f.tag, TailClass):
        ts = np.logspace(-2, 6, 81) if t_grid is None else np.asarray(t_grid, dtype=float)
        for idx, (_, p) in enumerate(f.terms):
            for t in ts:
                mass = mu_tail_mass(p, float(t), edges, h)
                if mass > f.tag.H(float(t)) * (1 + 1e-9) + 1e-15:
                    report["violations"].append({"term": idx, "t": float(t), "mass": mass,
                                                 "H": float(f.tag.H(float(t)))})
                    break
    report["ok"] = not report["violations"]
    return report


# ---------------------------------------------------------------------------
# Variation norm
# ---------------------------------------------------------------------------


def _value_and_limits(f: Observable, c: float) -> tuple[float, float, float]:
    """``(f(c-), f(c), f(c+))`` with ``f = 0`` outside ``[0, 1]``."""
    left = right = 0.0
    for w, p in f.terms:
        if p.is_empty:
            continue
        if p.lo < c <= p.hi:
            left += w * p.limit(c)
        if p.lo <= c < p.hi:
            right += w * p.limit(c)
    val = float(eval_observable(f, c)) if 0.0 <= c <= 1.0 else 0.0
    return left, val, right


def variation_norm(f: Observable, dense_points: int = 100_001) -> float:
    """Variation norm with the boundary terms ``|f(a_0)|`` and ``|f(a_k)|``.

    This is the total variation over the real line of ``f`` extended by zero
    outside ``[0, 1]``.  Between consecutive breakpoints every piece is
    monotone; when all active non-constant pieces move in the same direction
    the contribution is the difference of one-sided limits, which makes the
    result exact.  Intervals where directions mix fall back to dense sampling.

    Raises
    ------
    UnboundedVariationError
        If a one-sided limit is infinite.
    """
    pts = {0.0, 1.0}
    for _, p in f.terms:
        if not p.is_empty:
            pts.update((p.lo, p.hi))
    pts = sorted(pts)
    total = 0.0
    for c in pts:
        left, val, right = _value_and_limits(f, c)
        if not (math.isfinite(left) and math.isfinite(val) and math.isfinite(right)):
            raise UnboundedVariationError(f"infinite one-sided limit at x={c!r}")
        total += abs(left - val) + abs(val - right)
    for a, b in zip(pts[:-1], pts[1:]):
        if b <= a:
            continue
        active = [(w, p) for w, p in f.terms
                  if not p.is_empty and p.lo <= a and p.hi >= b and w != 0.0]
        dirs = {(w > 0) == p.increasing for w, p in active if not p.is_constant}
        if len(dirs) <= 1:
            va = sum(w * p.limit(a) for w, p in active)
            vb = sum(w * p.limit(b) for w, p in active)
            total += abs(vb - va)
        else:
            xs = np.linspace(a, b, dense_points)[1:-1]
            vals = np.zeros_like(xs)
            for w, p in active:
                vals += w * p.scale * p._base(xs)
            va = sum(w * p.limit(a) for w, p in active)
            vb = sum(w * p.limit(b) for w, p in active)
            seq = np.concatenate([[va], vals, [vb]])
            total += float(np.abs(np.diff(seq)).sum())
    return total


# ---------------------------------------------------------------------------
# Tail condition
# ---------------------------------------------------------------------------

_TAIL_T = 1e6


def lil_condition_integral(H: TailFunction, gamma: float) -> float:
    """``int_0^inf x H(x)^((1 - 2 gamma)/(1 - gamma)) dx``.

    The integral is split at 1; the piece on ``[1, T]`` (``T = 1e6``) is
    integrated in the variable ``ln x``.  Beyond ``T`` the integrand is
    treated as a power law whose local exponent ``s`` is measured at ``T``:
    if ``s <= 1`` the integral diverges and ``math.inf`` is returned,
    otherwise the tail ``g(T) T / (s - 1)`` is added.

    Parameters
    ----------
    H : TailFunction
    gamma : float
        In ``(0, 1/2)``.

    Returns
    -------
    float
        The integral, or ``math.inf`` as the divergence marker.
    """
    if not 0.0 < gamma < 0.5:
        raise ValueError("gamma must lie in (0, 1/2)")
    r = (1.0 - 2.0 * gamma) / (1.0 - gamma)

    def g(x):
        return x * float(H(x)) ** r

    head, _ = integrate.quad(g, 0.0, 1.0, limit=200, epsabs=1e-14, epsrel=1e-12)
    U = math.log(_TAIL_T)
    mid, _ = integrate.quad(lambda u: g(math.exp(u)) * math.exp(u), 0.0, U,
                            limit=400, epsabs=1e-14, epsrel=1e-12)
    gT = g(_TAIL_T)
    if gT == 0.0:
        return head + mid
    gT2 = g(2.0 * _TAIL_T)
    if gT2 <= 0.0:
        return head + mid
    s = -math.log(gT2 / gT) / math.log(2.0)
    if s <= 1.0 + 1e-6:
        return math.inf
    return head + mid + gT * _TAIL_T / (s - 1.0)


# ---------------------------------------------------------------------------
# Decompositions
# ---------------------------------------------------------------------------


def decompose_H(f: Observable, m: float) -> tuple[Observable, Observable]:
    """Split ``f = bv + rem`` at level ``m``.

    ``bv = sum a_l g_l 1{|g_l| <= m}`` and ``rem = sum a_l g_l 1{|g_l| > m}``.
    For sign-constant pieces the bounded part has variation at most ``2m``
    per unit weight, so ``variation_norm(bv) <= 3m`` whenever ``sum|a_l| <= 1``.
    The remainder is tagged with ``H_m = min(H(m), H)``.
    """
    if m <= 0:
        raise ValueError("m must be positive")
    bv_terms, rem_terms = [], []
    for w, p in f.terms:
        inner, outer = p.split_level(m)
        if inner is not None:
            bv_terms.append((w, inner))
        rem_terms.extend((w, q) for q in outer)
    rem_tag = TailClass(f.tag.H.capped(m)) if isinstance(f.tag, TailClass) else None
    bv = Observable(tuple(bv_terms), None, f"{f.name}|bv", {"m": m})
    rem = Observable(tuple(rem_terms), rem_tag, f"{f.name}|rem", {"m": m})
    return bv, rem


def _K_of(g: MonotonePiece, eps2: float, edges, h, tol: float = 1e-12) -> float:
    """Smallest ``K`` with ``mu(g^2 1{|g| >= K}) <= eps2`` (bisection)."""
    total = mu_sq_above(g, 0.0, edges, h)
    if not math.isfinite(total):
        raise QuadratureError("mu(g^2) is not finite")
    if total <= eps2:
        return 0.0
    hi = g.sup_abs()
    if not math.isfinite(hi):
        hi = 1.0
        while mu_sq_above(g, hi, edges, h) > eps2:
            hi *= 2.0
            if hi > 1e300:
                raise QuadratureError("threshold search did not terminate")
    lo = 0.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if mu_sq_above(g, mid, edges, h) <= eps2:
            hi = mid
        else:
            lo = mid
    return hi


def decompose_L2(f: Observable, eps: float, edges: np.ndarray, h: np.ndarray):
    """Split an ``L2Class(M)`` observable into a bounded-variation part and a small remainder.

    Each term ``g_l`` gets ``K_l``, the smallest number with
    ``mu(g_l^2 1{|g_l| >= K_l}) <= eps^2``.  With
    ``alpha(K) = sum_{K_l >= K} |a_l|`` the cap ``K*`` is the smallest
    ``K_l`` value (or 0) such that ``alpha(K*) M <= eps``.

    Terms with ``K_l < K*`` contribute ``g_l 1{|g_l| <= K_l}`` to the bounded
    part and ``g_l 1{|g_l| > K_l}`` (norm at most ``eps``) to the remainder.
    Terms with ``K_l >= K*`` go to the remainder whole.  The remainder is
    rewritten with halved weights and doubled pieces (and ``2 alpha g_l`` for
    the capped terms) so that it is literally a convex combination of pieces
    of norm at most ``2 eps``.

    Returns
    -------
    bv, rem : Observable
    info : dict
        ``K`` per term, ``K_star``, ``alpha`` and a ``degenerate`` flag set
        when the bounded part is empty.
    """
    if not isinstance(f.tag, L2Class):
        raise ValueError("decompose_L2 needs an L2Class-tagged observable")
    if eps <= 0:
        raise ValueError("eps must be positive")
    edges = np.asarray(edges, dtype=float)
    h = np.asarray(h, dtype=float)
    M = f.tag.M
    Ks = [_K_of(p, eps * eps, edges, h) for _, p in f.terms]
    ws = [abs(w) for w, _ in f.terms]

    def alpha(K):
        return sum(w for w, k in zip(ws, Ks) if k >= K)

    candidates = sorted(set([0.0] + Ks)) + [math.inf]
    K_star = next(K for K in candidates if alpha(K) * M <= eps)
    a_star = alpha(K_star)
    bv_terms, rem_terms = [], []
    for (w, p), K in zip(f.terms, Ks):
        if K < K_star:
            inner, outer = p.split_level(K) if K > 0 else (None, [p])
            if inner is not None:
                bv_terms.append((w, inner))
            rem_terms.extend((0.5 * w, replace(q, scale=2.0 * q.scale)) for q in outer)
        else:
            rem_terms.append((0.5 * w / a_star, replace(p, scale=2.0 * a_star * p.scale)))
    info = {"K": Ks, "K_star": K_star, "alpha": a_star, "degenerate": not bv_terms}
    bv = Observable(tuple(bv_terms), None, f"{f.name}|bv", {"eps": eps, "K_star": K_star})
    rem = Observable(tuple(rem_terms), L2Class(2.0 * eps), f"{f.name}|rem", {"eps": eps})
    return bv, rem, info


def truncate_gn(f: Observable, n: int, M: float) -> Observable:
    """Apply ``g_n(v) = v 1{|v| <= M sqrt(n) / sqrt(LLn)}`` to each term."""
    if n < 16:
        raise ValueError("truncate_gn needs n >= 16")
    if M <= 0:
        raise ValueError("M must be positive")
    level = M * math.sqrt(n) / math.sqrt(loglog(n))
    terms = []
    for w, p in f.terms:
        inner, _ = p.split_level(level)
        if inner is not None:
            terms.append((w, inner))
    meta = dict(f.meta)
    meta.update({"truncation_level": level, "n": n, "M": M})
    return Observable(tuple(terms), f.tag, f"{f.name}|g_n", meta)
