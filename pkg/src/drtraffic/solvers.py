"""Conic backends.

Programs are compiled to ``min 1/2 x'Px + q'x + c  s.t.  Ax + s = b``,
with ``s`` in a product of a zero cone (equalities), a nonnegative cone
(inequalities and bounds) and second-order cones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class StandardForm:
    P: sp.csc_matrix
    q: np.ndarray
    c: float
    A: sp.csc_matrix
    b: np.ndarray
    n_zero: int
    n_nonneg: int
    soc_dims: list[int]

    @property
    def n(self) -> int:
        return self.q.size


@dataclass
class RawSolution:
    status: str
    x: np.ndarray | None
    objective: float
    detail: str = ""


class _Rows:
    """Triplet accumulator for the constraint matrix."""

    def __init__(self):
        self.i: list[int] = []
        self.j: list[int] = []
        self.v: list[float] = []
        self.b: list[float] = []

    def add(self, cols, vals, rhs: float):
        r = len(self.b)
        self.i.extend([r] * len(cols))
        self.j.extend(cols)
        self.v.extend(vals)
        self.b.append(rhs)

    def __len__(self):
        return len(self.b)


@dataclass
class Tolerances:
    feas: float = 1e-8
    gap_abs: float = 1e-8
    gap_rel: float = 1e-8
    max_iter: int = 200


def solve_clarabel(form: StandardForm, tol: Tolerances) -> RawSolution:
    import clarabel

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_feas = tol.feas
    settings.tol_gap_abs = tol.gap_abs
    settings.tol_gap_rel = tol.gap_rel
    settings.max_iter = tol.max_iter
    settings.max_threads = 1
    cones = []
    if form.n_zero:
        cones.append(clarabel.ZeroConeT(form.n_zero))
    if form.n_nonneg:
        cones.append(clarabel.NonnegativeConeT(form.n_nonneg))
    cones.extend(clarabel.SecondOrderConeT(d) for d in form.soc_dims)
    P = sp.triu(form.P, format="csc")
    solver = clarabel.DefaultSolver(P, form.q, form.A, form.b, cones, settings)
    sol = solver.solve()
    name = str(sol.status).split(".")[-1]
    x = np.asarray(sol.x, dtype=float)
    if name in ("Solved", "AlmostSolved"):
        return RawSolution(OPTIMAL, x, float(sol.obj_val) + form.c, name)
    if name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return RawSolution(INFEASIBLE, None, np.inf, name)
    if name in ("DualInfeasible", "AlmostDualInfeasible"):
        return RawSolution(UNBOUNDED, None, -np.inf, name)
    return RawSolution(NUMERICAL_FAILURE, x if x.size else None, np.nan, name)


def solve_cvxopt(form: StandardForm, tol: Tolerances) -> RawSolution:
    from cvxopt import matrix, solvers, spmatrix

    def to_cvx(M):
        M = M.tocoo()
        return spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), size=M.shape)

    A = form.A.tocsr()
    nz = form.n_zero
    G = A[nz:]
    h = form.b[nz:]
    dims = {"l": form.n_nonneg, "q": list(form.soc_dims), "s": []}
    opts = {"show_progress": False, "abstol": tol.gap_abs, "reltol": tol.gap_rel, "feastol": tol.feas, "maxiters": tol.max_iter}
    kwargs = {}
    if nz:
        kwargs = {"A": to_cvx(A[:nz]), "b": matrix(form.b[:nz])}
    if form.P.nnz:
        res = solvers.coneqp(to_cvx(form.P), matrix(form.q), to_cvx(G), matrix(h), dims, options=opts, **kwargs)
    else:
        res = solvers.conelp(matrix(form.q), to_cvx(G), matrix(h), dims, options=opts, **kwargs)
    status = res["status"]
    if status == "optimal":
        x = np.array(res["x"]).ravel()
        return RawSolution(OPTIMAL, x, float(0.5 * x @ (form.P @ x) + form.q @ x + form.c), status)
    if status == "primal infeasible":
        return RawSolution(INFEASIBLE, None, np.inf, status)
    if status == "dual infeasible":
        return RawSolution(UNBOUNDED, None, -np.inf, status)
    x = np.array(res["x"]).ravel() if res.get("x") is not None else None
    return RawSolution(NUMERICAL_FAILURE, x, np.nan, status)


BACKENDS = {"clarabel": solve_clarabel, "cvxopt": solve_cvxopt}


def run_backend(form: StandardForm, backend: str = "clarabel", tol: Tolerances | None = None) -> RawSolution:
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; choose from {sorted(BACKENDS)}")
    return BACKENDS[backend](form, tol or Tolerances())
