"""Control programs over link flows and their solution.

Three models are assembled here: a generic deterministic model, the robust
ramp-metering model for a freeway and the robust boundary-inflow model for
an urban grid. All share one constraint core: compatibility rows for every
link with dynamics, node transitions, on-ramp pass-through, nonnegativity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .compat import build_link_constraints, symbolic_state
from .expr import CUMULATIVE, AffineExpr, VarIndex, affine_sum, cumulative_form
from .network import Network, fd_supply, validate
from .robust import SocConstraint, link_rows
from .solvers import (
    NUMERICAL_FAILURE,
    OPTIMAL,
    StandardForm,
    Tolerances,
    _Rows,
    run_backend,
)


@dataclass
class ConicProgram:
    """``min objective + quad_weight * sum(e^2 for e in quad_terms)`` subject to rows.

    Every variable is nonnegative except those listed in ``free``.
    """

    objective: AffineExpr = field(default_factory=AffineExpr)
    quad_terms: list[AffineExpr] = field(default_factory=list)
    quad_weight: float = 0.0
    ineq: list[AffineExpr] = field(default_factory=list)
    eq: list[AffineExpr] = field(default_factory=list)
    soc: list[SocConstraint] = field(default_factory=list)
    free: set = field(default_factory=set)
    T: float = 1.0

    def variables(self) -> list[VarIndex]:
        seen = set(self.objective.terms)
        for e in self.quad_terms:
            seen.update(e.terms)
        for e in self.ineq:
            seen.update(e.terms)
        for e in self.eq:
            seen.update(e.terms)
        for s in self.soc:
            seen.update(v for v in s.variables if v is not None)
        return sorted(seen)

    def stats(self) -> dict:
        return {
            "variables": len(self.variables()),
            "inequalities": len(self.ineq),
            "equalities": len(self.eq),
            "cones": len(self.soc),
        }

    def dump(self, path) -> None:
        """Plain-text listing, one row per line: ``kind, indices, coeffs, rhs``."""
        cols = {v: i for i, v in enumerate(self.variables())}

        def line(kind, e: AffineExpr):
            items = sorted((cols[v], c) for v, c in e.terms.items())
            idx = " ".join(str(i) for i, _ in items)
            cf = " ".join(repr(c) for _, c in items)
            return f"{kind}, [{idx}], [{cf}], {-e.const!r}\n"

        with open(path, "w", encoding="utf-8") as fh:
            for v, i in cols.items():
                fh.write(f"# {i} {v}\n")
            fh.write(line("obj", self.objective))
            for e in self.quad_terms:
                fh.write(line(f"quad{self.quad_weight!r}", e))
            for e in self.eq:
                fh.write(line("eq", e))
            for e in self.ineq:
                fh.write(line("le", e))
            for k, s in enumerate(self.soc):
                fh.write(line(f"soc{k}.t", s.mean_expr() * -1.0))
                for e in s.scaled_factor_exprs():
                    fh.write(line(f"soc{k}.z", e))

    def compile(self) -> tuple[StandardForm, list[VarIndex]]:
        cols = self.variables()
        index = {v: i for i, v in enumerate(cols)}
        n = len(cols)
        rows = _Rows()

        def add(e: AffineExpr, sign: float = 1.0):
            rows.add([index[v] for v in e.terms], [sign * c for c in e.terms.values()], -sign * e.const)

        for e in self.eq:
            add(e)
        n_zero = len(rows)
        for e in self.ineq:
            add(e)
        for v in cols:
            if v not in self.free:
                rows.add([index[v]], [-1.0], 0.0)
        n_nonneg = len(rows) - n_zero
        dims = []
        for s in self.soc:
            # t = -mean.x >= ||kappa F x||
            add(s.mean_expr())
            for e in s.scaled_factor_exprs():
                add(e, -1.0)
            dims.append(1 + s.factor.shape[0])
        A = sp.csc_matrix((rows.v, (rows.i, rows.j)), shape=(len(rows), n))
        q = np.zeros(n)
        for v, c in self.objective.terms.items():
            q[index[v]] += c
        const = self.objective.const
        P = sp.csc_matrix((n, n))
        if self.quad_terms and self.quad_weight > 0.0:
            E_i, E_j, E_v = [], [], []
            for r, e in enumerate(self.quad_terms):
                for v, c in e.terms.items():
                    E_i.append(r)
                    E_j.append(index[v])
                    E_v.append(c)
                    q[index[v]] += 2.0 * self.quad_weight * e.const * c
                const += self.quad_weight * e.const**2
            E = sp.csc_matrix((E_v, (E_i, E_j)), shape=(len(self.quad_terms), n))
            P = (2.0 * self.quad_weight * (E.T @ E)).tocsc()
        form = StandardForm(P, q, const, A, np.asarray(rows.b, dtype=float), n_zero, n_nonneg, dims)
        return form, cols


@dataclass
class SolveResult:
    status: str
    objective: float
    values: dict
    residuals: dict = field(default_factory=dict)
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def value(self, v: VarIndex) -> float:
        return self.values.get(v, 0.0)


def residuals(program: ConicProgram, lookup) -> dict:
    """Worst violation of each row type at the given point."""
    out = {"eq": 0.0, "ineq": 0.0, "soc": 0.0, "bounds": 0.0}
    for e in program.eq:
        out["eq"] = max(out["eq"], abs(e.evaluate(lookup)))
    for e in program.ineq:
        out["ineq"] = max(out["ineq"], e.evaluate(lookup))
    for s in program.soc:
        out["soc"] = max(out["soc"], s.value(lookup))
    for v in program.variables():
        if v not in program.free:
            out["bounds"] = max(out["bounds"], -lookup(v))
    return out


def solve(program: ConicProgram, backend: str = "clarabel", tol: Tolerances | None = None, report_tol: float = 1e-6) -> SolveResult:
    form, cols = program.compile()
    if form.n == 0:
        return SolveResult(OPTIMAL, form.c, {}, {"eq": 0.0, "ineq": 0.0, "soc": 0.0, "bounds": 0.0})
    raw = run_backend(form, backend, tol)
    if raw.x is None:
        return SolveResult(raw.status, raw.objective, {}, {}, raw.detail)
    values = dict(zip(cols, raw.x.tolist()))
    res = residuals(program, lambda v: values.get(v, 0.0))
    status = raw.status
    if status == OPTIMAL:
        scale = max(1.0, float(np.abs(form.b).max(initial=0.0)))
        if max(res.values()) > report_tol * scale:
            status = NUMERICAL_FAILURE
    return SolveResult(status, raw.objective, values, res, raw.detail)


# ---------------------------------------------------------------------------
# assembly


def _v(kind: str, link: int, step: int) -> AffineExpr:
    return AffineExpr.var(VarIndex(kind, link, step))


def _chain_rows(program: ConicProgram, T: float) -> None:
    """Tie every referenced cumulative variable to its rate series."""
    rate_of = {c: r for r, c in CUMULATIVE.items()}
    top: dict[tuple[str, int], int] = {}
    for v in program.variables():
        if v.kind in rate_of:
            top[(v.kind, v.link)] = max(top.get((v.kind, v.link), 0), v.step)
    for (kind, link), n in sorted(top.items()):
        for i in range(1, n + 1):
            prev = _v(kind, link, i - 1) if i > 1 else 0.0
            program.eq.append(_v(kind, link, i) - prev - _v(rate_of[kind], link, i) * T)


def assemble_core(
    network: Network,
    alpha: float | None = None,
    robust_nodes=(),
    eliminate_inflows: bool = False,
    prune: bool = True,
    cumulative: bool = False,
) -> ConicProgram:
    """Constraint core shared by every model.

    With ``eliminate_inflows`` the inflow of every link that starts at a node
    is replaced by the turning-ratio mix of the node's outflows (cones for
    nodes in ``robust_nodes`` when ``alpha`` is given); otherwise the inflows
    are variables tied to the outflows by mean-ratio equalities.
    """
    rep = validate(network)
    if not rep.ok:
        raise ValueError("invalid network: " + "; ".join(rep.errors))
    if alpha is not None and not (0.0 < alpha < 0.5):
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")
    for z in robust_nodes:
        network.node(z)
    T, n = network.T, network.n_max
    prog = ConicProgram(T=T)
    for link in network.links:
        if not link.has_dynamics:
            continue
        if eliminate_inflows:
            lin, soc, _ = link_rows(network, link, alpha, robust_nodes, prune=prune, cumulative=cumulative)
            prog.ineq.extend(lin)
            prog.soc.extend(soc)
        else:
            rows = build_link_constraints(link, symbolic_state(link, T, n), prune=prune)
            prog.ineq.extend(cumulative_form(r.expr, T) if cumulative else r.expr for r in rows)
    for link in network.links_of_kind("on-ramp"):
        for i in range(1, n + 1):
            prog.eq.append(_v("outflow", link.id, i) - _v("inflow", link.id, i))
    if not eliminate_inflows:
        for node in network.nodes:
            for l in node.outgoing:
                if not network.link(l).has_dynamics:
                    continue
                for i in range(1, n + 1):
                    mix = affine_sum(node.ratio(l, r) * _v("outflow", r, i) for r in node.incoming if node.ratio(l, r) != 0.0)
                    prog.eq.append(_v("inflow", l, i) - mix)
    return prog


def throughput_weights(n_max: int) -> np.ndarray:
    """Weight ``n_max - i + 1`` of step ``i`` (earlier flow counts more)."""
    return np.arange(n_max, 0, -1, dtype=float)


def assemble_deterministic(network: Network, objective: AffineExpr | None = None, **kw) -> ConicProgram:
    """Core rows with inflows as variables and mean turning ratios."""
    prog = assemble_core(network, eliminate_inflows=False, **kw)
    if objective is not None:
        prog.objective = objective
    if kw.get("cumulative"):
        _chain_rows(prog, network.T)
    return prog


# freeway ---------------------------------------------------------------------

ONRAMP_BOUND_LINKS = {"cross": {7: 2, 8: 4}, "local": {7: 2, 8: 5}}


@dataclass
class FreewayConfig:
    """Weights and side rows of the ramp-metering model.

    ``onramp_bound_mode`` picks which mainline outflow bounds each on-ramp
    from below: ``local`` ties link 8 to link 5, the mainline it joins;
    ``cross`` ties it to link 4 on the other corridor. ``exit_density``
    gives the density that sets the supply at each exit (default: the exit
    link's last segment at time 0).
    """

    m: float = 0.1
    h: float = 100.0
    main_links: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    onramps: tuple[int, ...] = (7, 8)
    penalty_pair: tuple[int, int] = (1, 4)
    exit_links: tuple[int, ...] = (3, 6)
    exit_density: dict | None = None
    onramp_bound_mode: str = "local"
    onramp_bounds: dict | None = None
    alpha: float | None = None
    robust_nodes: tuple[int, ...] = ()

    def __post_init__(self):
        if not (0.0 < self.m < 1.0):
            raise ValueError("m must lie in (0, 1)")
        if not self.h > 0.0:
            raise ValueError("h must be positive")
        if self.onramp_bound_mode not in ONRAMP_BOUND_LINKS:
            raise ValueError(f"onramp_bound_mode must be one of {sorted(ONRAMP_BOUND_LINKS)}")

    def bound_links(self) -> dict:
        return self.onramp_bounds if self.onramp_bounds is not None else ONRAMP_BOUND_LINKS[self.onramp_bound_mode]


def _freeway_side(network: Network, cfg: FreewayConfig, prog: ConicProgram) -> None:
    n = network.n_max
    w = throughput_weights(n)
    a, b = cfg.penalty_pair
    la, lb = network.link(a).lanes, network.link(b).lanes
    obj = AffineExpr()
    for i in range(1, n + 1):
        gain = affine_sum(_v("outflow", j, i) for j in cfg.main_links)
        gain = gain + affine_sum(_v("inflow", j, i) for j in network.boundary_in)
        gain = gain + cfg.m * affine_sum(_v("inflow", j, i) for j in cfg.onramps)
        y = _v("slack_y", 0, i)
        obj = obj - gain * w[i - 1] + y * cfg.h
        imbalance = _v("outflow", a, i) * lb - _v("outflow", b, i) * la
        prog.ineq.append(imbalance - y)
        prog.ineq.append(imbalance * -1.0 - y)
        for on, ref in cfg.bound_links().items():
            prog.ineq.append(_v("outflow", ref, i) * (1.0 / network.link(ref).lanes) - _v("inflow", on, i))
        for e in cfg.exit_links:
            link = network.link(e)
            rho = (cfg.exit_density or {}).get(e, link.init_density[-1])
            prog.ineq.append(_v("outflow", e, i) - link.lanes * fd_supply(rho, link.fd))
    prog.objective = obj


def assemble_freeway_deterministic(network: Network, cfg: FreewayConfig, prune: bool = True, cumulative: bool = False) -> ConicProgram:
    prog = assemble_core(network, eliminate_inflows=False, prune=prune, cumulative=cumulative)
    _freeway_side(network, cfg, prog)
    if cumulative:
        _chain_rows(prog, network.T)
    return prog


def assemble_freeway_robust(network: Network, cfg: FreewayConfig, prune: bool = True, cumulative: bool = False) -> ConicProgram:
    """Ramp-metering model with interior inflows eliminated and cones at ``cfg.robust_nodes``."""
    if cfg.alpha is None:
        raise ValueError("robust model needs alpha")
    prog = assemble_core(
        network, cfg.alpha, cfg.robust_nodes, eliminate_inflows=True, prune=prune, cumulative=cumulative
    )
    _freeway_side(network, cfg, prog)
    if cumulative:
        _chain_rows(prog, network.T)
    return prog


# urban -----------------------------------------------------------------------


@dataclass
class UrbanConfig:
    """Smoothing weight, exit-capacity fraction and signal table ``signals[link][i]`` in {0, 1}."""

    omega: float = 0.2
    exit_fraction: float = 0.8
    signals: dict = field(default_factory=dict)
    alpha: float | None = None
    robust_nodes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.omega < 0.0:
            raise ValueError("omega must be nonnegative")
        if not (0.0 < self.exit_fraction <= 1.0):
            raise ValueError("exit_fraction must lie in (0, 1]")


def urban_throughput(network: Network) -> AffineExpr:
    """Weighted throughput ``sum_i (n-i+1) (sum outflows + sum boundary inflows)``."""
    w = throughput_weights(network.n_max)
    total = AffineExpr()
    dyn = [l.id for l in network.links if l.has_dynamics]
    for i in range(1, network.n_max + 1):
        total = total + (affine_sum(_v("outflow", j, i) for j in dyn) + affine_sum(_v("inflow", j, i) for j in network.boundary_in)) * w[i - 1]
    return total


def assemble_urban(network: Network, cfg: UrbanConfig, robust: bool = True, prune: bool = True, cumulative: bool = True) -> ConicProgram:
    """Boundary-inflow model with signal, exit-capacity and smoothing terms."""
    n = network.n_max
    if robust:
        if cfg.alpha is None:
            raise ValueError("robust model needs alpha")
        prog = assemble_core(network, cfg.alpha, cfg.robust_nodes, eliminate_inflows=True, prune=prune, cumulative=cumulative)
    else:
        prog = assemble_core(network, eliminate_inflows=False, prune=prune, cumulative=cumulative)
    prog.objective = urban_throughput(network) * -1.0
    for link in network.links_of_kind("outgoing-boundary"):
        for i in range(1, n + 1):
            prog.ineq.append(_v("outflow", link.id, i) - cfg.exit_fraction * link.capacity)
    for lid, table in cfg.signals.items():
        link = network.link(lid)
        if len(table) != n:
            raise ValueError(f"signal table of link {lid} has {len(table)} entries, expected {n}")
        for i, s in enumerate(table, 1):
            prog.ineq.append(_v("outflow", lid, i) - link.capacity * float(s))
    if cfg.omega > 0.0:
        prog.quad_weight = cfg.omega
        for j in network.boundary_in:
            for i in range(1, n):
                prog.quad_terms.append(_v("inflow", j, i) - _v("inflow", j, i + 1))
    if cumulative:
        _chain_rows(prog, network.T)
    return prog


def assemble_urban_robust(network: Network, cfg: UrbanConfig, **kw) -> ConicProgram:
    return assemble_urban(network, cfg, robust=True, **kw)


def mean_abs_inflow_change(result: SolveResult, network: Network) -> float:
    """Mean ``|q_in(i+1, j) - q_in(i, j)|`` over boundary links and steps."""
    diffs = [
        abs(result.value(VarIndex("inflow", j, i + 1)) - result.value(VarIndex("inflow", j, i)))
        for j in network.boundary_in
        for i in range(1, network.n_max)
    ]
    return float(np.mean(diffs)) if diffs else 0.0


def link_series(result: SolveResult, network: Network, link_id: int, kind: str) -> np.ndarray:
    """Solved rate series of one link; eliminated inflows are rebuilt from mean ratios."""
    n = network.n_max
    direct = [result.values.get(VarIndex(kind, link_id, i)) for i in range(1, n + 1)]
    if all(v is not None for v in direct):
        return np.array(direct, dtype=float)
    link = network.link(link_id)
    if kind == "inflow":
        node = network.upstream_node(link_id)
        if node is not None:
            return sum(node.ratio(link_id, r) * link_series(result, network, r, "outflow") for r in node.incoming)
    if kind == "outflow" and link.kind == "off-ramp":
        node = network.upstream_node(link_id)
        return sum(node.ratio(link_id, r) * link_series(result, network, r, "outflow") for r in node.incoming)
    return np.array([0.0 if v is None else v for v in direct], dtype=float)


def is_finite_objective(result: SolveResult) -> bool:
    return math.isfinite(result.objective)


def control_links(network: Network) -> list[int]:
    """Controllable links: incoming boundaries then on-ramps."""
    return list(network.boundary_in) + [l.id for l in network.links_of_kind("on-ramp")]


def control_series(result: SolveResult, network: Network) -> dict[int, np.ndarray]:
    """Inflow series of every controllable link, clipped at zero."""
    return {l: np.maximum(link_series(result, network, l, "inflow"), 0.0) for l in control_links(network)}
