"""Piecewise-affine value conditions and their Lax-Hopf (Moskowitz) solutions.

Positions are measured from the upstream end of the link (``xi = 0``,
``chi = length``) and use the lane-aggregated diagram of the link.
Flow series may hold numbers or :class:`~drtraffic.expr.AffineExpr`
objects; the closed forms are evaluated identically for both, which is how
the compatibility rows get built.

The brute-force minimizer at the bottom evaluates the variational formula
directly and exists to check the closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import AffineExpr
from .network import FundamentalDiagram, LinkSpec

PLUS_INFINITY = math.inf

_EDGE_RTOL = 1e-10


def _slack(*vals: float) -> float:
    return _EDGE_RTOL * max([1.0] + [abs(v) for v in vals])


def _le(a: float, b: float) -> bool:
    return a <= b + _slack(a, b)


def _emin(cands: list):
    """Minimum of candidate branch values.

    Symbolic candidates are only comparable when they share their variable
    part, which holds at every branch edge of the closed forms.
    """
    if not cands:
        return PLUS_INFINITY
    if not any(isinstance(c, AffineExpr) for c in cands):
        return min(cands)
    exprs = [c if isinstance(c, AffineExpr) else AffineExpr(const=c) for c in cands]
    first = exprs[0]
    for e in exprs[1:]:
        if not first.same_terms(e, tol=1e-6):
            raise ValueError("branch values with different variable parts at a tie")
    return min(exprs, key=lambda e: e.const)


@dataclass
class LinkState:
    """Inflow/outflow series of a link, numeric or symbolic, 1-based steps."""

    link: LinkSpec
    q_in: Sequence
    q_out: Sequence
    T: float
    _cum_in: list = field(default=None, init=False, repr=False)
    _cum_out: list = field(default=None, init=False, repr=False)

    @property
    def n_max(self) -> int:
        return len(self.q_in)

    @staticmethod
    def _prefix(series, T):
        acc = [0.0]
        for q in series:
            acc.append(acc[-1] + q * T)
        return acc

    def cum_in(self, n: int):
        """Vehicles entered during steps ``1..n``."""
        if self._cum_in is None:
            self._cum_in = self._prefix(self.q_in, self.T)
        return self._cum_in[n]

    def cum_out(self, n: int):
        if self._cum_out is None:
            self._cum_out = self._prefix(self.q_out, self.T)
        return self._cum_out[n]


# ---------------------------------------------------------------------------
# value conditions


def value_initial(k: int, t: float, x: float, link: LinkSpec) -> float:
    """Initial condition of segment ``k``: cumulative count at time 0."""
    X = link.X
    rho = link.total_density
    if abs(t) > _slack(t) or not (_le((k - 1) * X, x) and _le(x, k * X)):
        return PLUS_INFINITY
    return -sum(rho[: k - 1]) * X - rho[k - 1] * (x - (k - 1) * X)


def value_upstream(n: int, t: float, x: float, state: LinkState):
    T = state.T
    if abs(x) > _slack(x, state.link.length) or not (_le((n - 1) * T, t) and _le(t, n * T)):
        return PLUS_INFINITY
    return state.cum_in(n - 1) + state.q_in[n - 1] * (t - (n - 1) * T)


def value_downstream(n: int, t: float, x: float, state: LinkState):
    T = state.T
    L = state.link.length
    if abs(x - L) > _slack(x, L) or not (_le((n - 1) * T, t) and _le(t, n * T)):
        return PLUS_INFINITY
    return -state.link.initial_vehicles + state.cum_out(n - 1) + state.q_out[n - 1] * (t - (n - 1) * T)


# ---------------------------------------------------------------------------
# closed-form solutions


def moskowitz_initial(k: int, t: float, x: float, link: LinkSpec) -> float:
    """Solution generated by the initial condition of segment ``k``."""
    fd = link.total_fd
    v, w, rc, rm = fd.v_f, fd.w, fd.rho_c, fd.rho_m
    X = link.X
    rho = link.total_density
    a, b = (k - 1) * X, k * X
    S = sum(rho[: k - 1]) * X
    r = rho[k - 1]
    if not (_le(a + t * w, x) and _le(x, b + v * t)):
        return PLUS_INFINITY
    cands = []
    tie = 1e-12 * rc
    if r <= rc + tie:
        if _le(a + v * t, x) and _le(x, b + v * t):
            cands.append(-S + r * (t * v + a - x))
        if _le(a + t * w, x) and _le(x, a + v * t):
            cands.append(-S + rc * (t * v + a - x))
    if r >= rc - tie:
        if _le(a + t * w, x) and _le(x, b + t * w):
            cands.append(-S + r * (t * w + a - x) - rm * t * w)
        if _le(b + t * w, x) and _le(x, b + t * v):
            cands.append(-S - r * X + rc * (t * w + b - x) - rm * t * w)
    return _emin(cands)


def moskowitz_upstream(n: int, t: float, x: float, state: LinkState):
    """Solution generated by the inflow of step ``n``."""
    fd = state.link.total_fd
    T = state.T
    lag = x / fd.v_f
    if not _le((n - 1) * T + lag, t):
        return PLUS_INFINITY
    cands = []
    if _le(t, n * T + lag):
        cands.append(state.cum_in(n - 1) + state.q_in[n - 1] * (t - lag - (n - 1) * T))
    if _le(n * T + lag, t):
        cands.append(state.cum_in(n) + fd.capacity * (t - lag - n * T))
    return _emin(cands)


def moskowitz_downstream(n: int, t: float, x: float, state: LinkState):
    """Solution generated by the outflow of step ``n``.

    The late branch is the cumulative count through step ``n`` followed by
    capacity-rate extrapolation, mirroring the upstream solution.
    """
    link = state.link
    fd = link.total_fd
    T = state.T
    e = x - link.length
    lag = e / fd.w
    if not _le((n - 1) * T + lag, t):
        return PLUS_INFINITY
    R = link.initial_vehicles
    cands = []
    if _le(t, n * T + lag):
        cands.append(-R + state.cum_out(n - 1) + state.q_out[n - 1] * (t - lag - (n - 1) * T) - fd.rho_m * e)
    if _le(n * T + lag, t):
        cands.append(-R + state.cum_out(n) + fd.capacity * (t - n * T - e / fd.v_f))
    return _emin(cands)


# ---------------------------------------------------------------------------
# brute-force oracle


def legendre_transform(u: float, fd: FundamentalDiagram) -> float:
    """``sup_{p in [0, rho_m]} p*u + psi(p)``.

    ``psi`` is linear on each branch, so the supremum over a branch is at one
    of its endpoints (the congested branch's left end as a limit when the
    diagram jumps at ``rho_c``).
    """
    if not math.isfinite(u):
        raise ValueError("u must be finite")
    return max(
        0.0,
        fd.rho_c * (u + fd.v_f),
        fd.rho_c * u + fd.w * (fd.rho_c - fd.rho_m),
        fd.rho_m * u,
    )


def _legendre_vec(u: np.ndarray, fd: FundamentalDiagram) -> np.ndarray:
    return np.maximum.reduce(
        [
            np.zeros_like(u),
            fd.rho_c * (u + fd.v_f),
            fd.rho_c * u + fd.w * (fd.rho_c - fd.rho_m),
            fd.rho_m * u,
        ]
    )


@dataclass
class SegmentCondition:
    """Value condition supported on a straight segment of the (t, x) plane, affine along it."""

    start: tuple[float, float]
    end: tuple[float, float]
    value: Callable[[float, float], float]
    fd: FundamentalDiagram

    def endpoint_values(self) -> tuple[float, float]:
        return self.value(*self.start), self.value(*self.end)


def initial_condition(link: LinkSpec, k: int) -> SegmentCondition:
    X = link.X
    return SegmentCondition((0.0, (k - 1) * X), (0.0, k * X), lambda t, x: value_initial(k, t, x, link), link.total_fd)


def upstream_condition(state: LinkState, n: int) -> SegmentCondition:
    T = state.T
    return SegmentCondition(((n - 1) * T, 0.0), (n * T, 0.0), lambda t, x: value_upstream(n, t, x, state), state.link.total_fd)


def downstream_condition(state: LinkState, n: int) -> SegmentCondition:
    T, L = state.T, state.link.length
    return SegmentCondition(((n - 1) * T, L), (n * T, L), lambda t, x: value_downstream(n, t, x, state), state.link.total_fd)


def _segment_minimum(cond: SegmentCondition, t: float, x: float, grid_n: int) -> float:
    (s0, y0), (s1, y1) = cond.start, cond.end
    c0, c1 = cond.endpoint_values()
    fd = cond.fd
    u_lo, u_hi = -fd.v_f, -fd.w
    ds, dy = s1 - s0, y1 - y0
    lam = [np.linspace(0.0, 1.0, grid_n)]
    # points where the segment crosses the edges of the characteristic cone of (t, x)
    for u_e in (u_lo, u_hi):
        den = dy + ds * u_e
        if den != 0.0:
            lam.append(np.array([(x + (t - s0) * u_e - y0) / den]))
    if ds != 0.0:
        lam.append(np.array([(t - s0) / ds]))
    lam = np.concatenate(lam)
    lam = lam[(lam >= -1e-12) & (lam <= 1 + 1e-12)].clip(0.0, 1.0)
    s = s0 + lam * ds
    y = y0 + lam * dy
    c = c0 + lam * (c1 - c0)
    horizon = t - s
    eps = _slack(t, x)
    best = PLUS_INFINITY
    at_point = np.abs(horizon) <= eps
    if np.any(at_point & (np.abs(y - x) <= _slack(x, y0, y1))):
        best = float(np.min(c[at_point & (np.abs(y - x) <= _slack(x, y0, y1))]))
    live = horizon > eps
    if np.any(live):
        h = horizon[live]
        u = (y[live] - x) / h
        ok = (u >= u_lo - 1e-9 * abs(u_lo)) & (u <= u_hi + 1e-9 * abs(u_hi))
        if np.any(ok):
            u = np.clip(u[ok], u_lo, u_hi)
            vals = c[live][ok] + h[ok] * _legendre_vec(u, fd)
            best = min(best, float(vals.min()))
    return best


def brute_force_lax_hopf(condition, t: float, x: float, grid_n: int = 400) -> float:
    """Grid minimization of the Lax-Hopf formula for one or more conditions.

    Each condition's domain is sampled on ``grid_n`` evenly spaced points plus
    the points where it meets the edges of the backward characteristic cone of
    ``(t, x)``; for every sample the pair (u, T') is fixed by the sample, so
    the grid is over the admissible set of the formula. A list of conditions
    is the minimum-combined condition.
    """
    if grid_n < 2:
        raise ValueError("grid_n must be at least 2")
    conds = condition if isinstance(condition, (list, tuple)) else [condition]
    return min((_segment_minimum(c, t, x, grid_n) for c in conds), default=PLUS_INFINITY)


def refined_lax_hopf(condition, t: float, x: float, grid_n: int = 400, doublings: int = 4, tol: float = 1e-6) -> float:
    """Repeat :func:`brute_force_lax_hopf` doubling the grid until it settles."""
    val = brute_force_lax_hopf(condition, t, x, grid_n)
    for _ in range(doublings):
        grid_n *= 2
        new = brute_force_lax_hopf(condition, t, x, grid_n)
        if math.isinf(val) and math.isinf(new) or abs(new - val) < tol:
            return new
        val = new
    return val
