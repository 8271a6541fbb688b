"""Compatibility rows of a single link as affine inequalities ``expr <= 0``.

Every row reads "value condition minus Moskowitz solution", evaluated at a
fixed point where the active solution branch is known at build time, so the
row is affine in the link's inflow/outflow variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .expr import AffineExpr, VarIndex, affine_sum  # noqa: F401  (re-exported)
from .laxhopf import (
    LinkState,
    moskowitz_downstream,
    moskowitz_initial,
    moskowitz_upstream,
    value_downstream,
    value_initial,
    value_upstream,
)
from .network import LinkSpec

# which value condition a row compares against which solution
INITIAL_VS_DOWNSTREAM = "initial/downstream"
INITIAL_VS_DOWNSTREAM_FRONT = "initial/downstream-front"
INITIAL_VS_UPSTREAM = "initial/upstream"
INITIAL_VS_UPSTREAM_FRONT = "initial/upstream-front"
UPSTREAM_WINDOW = "upstream/upstream"
UPSTREAM_VS_DOWNSTREAM = "upstream/downstream"
UPSTREAM_VS_DOWNSTREAM_FRONT = "upstream/downstream-front"
DOWNSTREAM_VS_UPSTREAM = "downstream/upstream"
DOWNSTREAM_VS_UPSTREAM_FRONT = "downstream/upstream-front"
DOWNSTREAM_WINDOW = "downstream/downstream"

FAMILY_OF = {
    INITIAL_VS_DOWNSTREAM: "initial",
    INITIAL_VS_DOWNSTREAM_FRONT: "initial",
    INITIAL_VS_UPSTREAM: "initial",
    INITIAL_VS_UPSTREAM_FRONT: "initial",
    UPSTREAM_WINDOW: "upstream",
    UPSTREAM_VS_DOWNSTREAM: "upstream",
    UPSTREAM_VS_DOWNSTREAM_FRONT: "upstream",
    DOWNSTREAM_VS_UPSTREAM: "downstream",
    DOWNSTREAM_VS_UPSTREAM_FRONT: "downstream",
    DOWNSTREAM_WINDOW: "downstream",
}


class InconsistentParameters(ValueError):
    """A variable-free compatibility row is violated by the link data alone."""


@dataclass
class Row:
    """One compatibility inequality ``expr <= 0``.

    ``source`` is the index of the solution-generating condition (segment
    ``k`` or step ``n``) and ``p`` the index of the tested value condition.
    """

    kind: str
    link: int
    source: int
    p: int
    t: float
    expr: AffineExpr

    @property
    def family(self) -> str:
        return FAMILY_OF[self.kind]

    @property
    def label(self) -> str:
        return f"link {self.link} {self.kind} src={self.source} p={self.p} t={self.t:g}"


def symbolic_state(link: LinkSpec, T: float, n_max: int) -> LinkState:
    """LinkState whose flows are the link's own inflow/outflow variables."""
    q_in = [AffineExpr.var(VarIndex("inflow", link.id, i)) for i in range(1, n_max + 1)]
    q_out = [AffineExpr.var(VarIndex("outflow", link.id, i)) for i in range(1, n_max + 1)]
    return LinkState(link, q_in, q_out, T)


def step_containing(t: float, T: float, n_max: int, rtol: float = 1e-10) -> int | None:
    """Step ``p`` with ``t`` in ``[(p-1)T, pT)``; the last step is closed on the right."""
    tol = rtol * max(1.0, abs(t))
    if t < -tol or t > n_max * T + tol:
        return None
    p = int(math.floor((t + tol) / T)) + 1
    return min(max(p, 1), n_max)


def _finite(v) -> bool:
    return isinstance(v, AffineExpr) or math.isfinite(v)


def check_initial_consistency(link: LinkSpec, tol: float = 1e-9) -> list[str]:
    """Violations of the variable-free initial-vs-initial rows (empty when consistent)."""
    problems = []
    X = link.X
    for k in range(1, link.segments + 1):
        for p in range(1, link.segments + 1):
            x_p = p * X
            sol = moskowitz_initial(k, 0.0, x_p, link)
            cond = value_initial(p, 0.0, x_p, link)
            if math.isfinite(sol) and sol < cond - tol * max(1.0, abs(cond)):
                problems.append(f"link {link.id}: initial segment {k} solution below segment {p} data at x={x_p:g}")
    return problems


def build_link_constraints(
    link: LinkSpec,
    state: LinkState,
    prune: bool = False,
    tol: float = 1e-9,
) -> list[Row]:
    """All compatibility rows of ``link`` for the flows held in ``state``.

    With ``prune=True`` rows that are nonnegative combinations of other
    emitted rows are skipped: throughput windows longer than one step, and
    for each tested step only the latest boundary-generated solution in the
    upstream/downstream and downstream/upstream comparisons. The feasible set
    is unchanged, including after chance-constraint conversion, because the
    conversion preserves nonnegative combinations up to a subadditive
    penalty.
    """
    if not link.has_dynamics:
        return []
    T = state.T
    n_max = state.n_max
    L = link.length
    fd = link.total_fd
    rows: list[Row] = []

    def emit(kind, source, p, t, cond, sol):
        if not _finite(sol) or not _finite(cond):
            return
        expr = cond - sol
        if not isinstance(expr, AffineExpr):
            expr = AffineExpr(const=expr)
        expr = expr.clean()
        if expr.is_constant:
            if expr.const > tol * max(1.0, abs(_const(cond)), abs(_const(sol))):
                raise InconsistentParameters(f"link {link.id}: {kind} row src={source} p={p} violated by data")
            return
        rows.append(Row(kind, link.id, source, p, t, expr))

    def down(p, t):
        return value_downstream(p, t, L, state)

    def up(p, t):
        return value_upstream(p, t, 0.0, state)

    # solutions generated by the initial data
    for k in range(1, link.segments + 1):
        x_k, x_km1 = k * link.X, (k - 1) * link.X
        for p in range(1, n_max + 1):
            emit(INITIAL_VS_DOWNSTREAM, k, p, p * T, down(p, p * T), moskowitz_initial(k, p * T, L, link))
        t_front = (L - x_k) / fd.v_f
        p = step_containing(t_front, T, n_max)
        if p is not None:
            emit(INITIAL_VS_DOWNSTREAM_FRONT, k, p, t_front, down(p, t_front), moskowitz_initial(k, t_front, L, link))
        for p in range(1, n_max + 1):
            emit(INITIAL_VS_UPSTREAM, k, p, p * T, up(p, p * T), moskowitz_initial(k, p * T, 0.0, link))
        t_front = (0.0 - x_km1) / fd.w
        p = step_containing(t_front, T, n_max)
        if p is not None:
            emit(INITIAL_VS_UPSTREAM_FRONT, k, p, t_front, up(p, t_front), moskowitz_initial(k, t_front, 0.0, link))

    # solutions generated by the inflows
    for n in range(1, n_max + 1):
        for p in range(n + 1, n_max + 1):
            if prune and p > n + 1:
                break
            emit(UPSTREAM_WINDOW, n, p, p * T, up(p, p * T), moskowitz_upstream(n, p * T, 0.0, state))
    for p in range(1, n_max + 1):
        sources = range(1, n_max + 1)
        if prune:
            sources = _latest_finite(lambda n: moskowitz_upstream(n, p * T, L, state), n_max)
        for n in sources:
            emit(UPSTREAM_VS_DOWNSTREAM, n, p, p * T, down(p, p * T), moskowitz_upstream(n, p * T, L, state))
    for n in range(1, n_max + 1):
        t_front = n * T + L / fd.v_f
        p = step_containing(t_front, T, n_max)
        if p is not None:
            emit(UPSTREAM_VS_DOWNSTREAM_FRONT, n, p, t_front, down(p, t_front), moskowitz_upstream(n, t_front, L, state))

    # solutions generated by the outflows
    for p in range(1, n_max + 1):
        sources = range(1, n_max + 1)
        if prune:
            sources = _latest_finite(lambda n: moskowitz_downstream(n, p * T, 0.0, state), n_max)
        for n in sources:
            emit(DOWNSTREAM_VS_UPSTREAM, n, p, p * T, up(p, p * T), moskowitz_downstream(n, p * T, 0.0, state))
    for n in range(1, n_max + 1):
        t_front = n * T + (0.0 - L) / fd.w
        p = step_containing(t_front, T, n_max)
        if p is not None:
            emit(DOWNSTREAM_VS_UPSTREAM_FRONT, n, p, t_front, up(p, t_front), moskowitz_downstream(n, t_front, 0.0, state))
    for n in range(1, n_max + 1):
        for p in range(n + 1, n_max + 1):
            if prune and p > n + 1:
                break
            emit(DOWNSTREAM_WINDOW, n, p, p * T, down(p, p * T), moskowitz_downstream(n, p * T, L, state))
    return rows


def _const(v) -> float:
    return v.const if isinstance(v, AffineExpr) else float(v)


def _latest_finite(solution, n_max: int) -> list[int]:
    for n in range(n_max, 0, -1):
        if _finite(solution(n)):
            return [n]
    return []


def numeric_lookup(state: LinkState):
    """Map the link's variables to the numeric flows held in ``state``."""
    lid = state.link.id

    def get(v: VarIndex) -> float:
        if v.link != lid:
            raise KeyError(v)
        series = state.q_in if v.kind == "inflow" else state.q_out
        return float(series[v.step - 1])

    return get


def row_violations(link: LinkSpec, state_numeric: LinkState, tol: float = 1e-6) -> list[tuple[Row, float]]:
    """Rows (built symbolically) that the numeric flows violate, with their values."""
    sym = symbolic_state(link, state_numeric.T, state_numeric.n_max)
    get = numeric_lookup(state_numeric)
    out = []
    for row in build_link_constraints(link, sym):
        val = row.expr.evaluate(get)
        if val > tol:
            out.append((row, val))
    return out


def feasible_region_sanity(link: LinkSpec, state_numeric: LinkState, tol: float = 1e-6) -> bool:
    """True iff the numeric flows satisfy every compatibility row of the link."""
    try:
        return not row_violations(link, state_numeric, tol)
    except InconsistentParameters:
        return False
