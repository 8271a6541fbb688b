import math

import numpy as np
import pytest

from drtraffic import compat
from drtraffic import laxhopf as lh
from drtraffic import scenarios as S
from drtraffic.network import FundamentalDiagram, LinkSpec

FD = S.FREEWAY_FD
CONT = FundamentalDiagram(30.0, -5.5, 0.0175, 0.0175 * (1 + 30 / 5.5))


def link_with(dens, fd=FD, lanes=4, length=1200.0):
    return LinkSpec(1, length, lanes, len(dens), tuple(dens), fd)


def numeric(link, q_in, q_out, T=20.0):
    return lh.LinkState(link, list(q_in), list(q_out), T)


def enumerate_rows(L, K, n_max, T, v, w):
    """Independent count of index pairs whose solution is finite at the tested point.

    A row is dropped when both sides are free of variables, which only happens
    for initial-data solutions tested at time zero.
    """
    X = L / K
    eps = 1e-9

    def step(t):
        if t < -eps or t > n_max * T + eps:
            return None
        return min(int(math.floor((t + eps) / T)) + 1, n_max)

    count = 0
    for k in range(1, K + 1):
        a, b = (k - 1) * X, k * X
        count += sum(1 for p in range(1, n_max + 1) if a + p * T * w <= L + eps and L <= b + v * p * T + eps)
        t = (L - b) / v
        if step(t) is not None and t > eps:
            count += 1
        count += sum(1 for p in range(1, n_max + 1) if a + p * T * w <= eps)
        t = -a / w
        if step(t) is not None and t > eps:
            count += 1
    pairs = [(n, p) for n in range(1, n_max + 1) for p in range(1, n_max + 1)]
    count += sum(1 for n, p in pairs if p > n)  # upstream windows
    count += sum(1 for n, p in pairs if (n - 1) * T + L / v <= p * T + eps)
    count += sum(1 for n in range(1, n_max + 1) if step(n * T + L / v) is not None)
    count += sum(1 for n, p in pairs if (n - 1) * T + L / -w <= p * T + eps)
    count += sum(1 for n in range(1, n_max + 1) if step(n * T + L / -w) is not None)
    count += sum(1 for n, p in pairs if p > n)  # downstream windows
    return count


# initial consistency ---------------------------------------------------------------


def test_initial_consistency_uniform_free():
    assert compat.check_initial_consistency(link_with([0.014, 0.014])) == []


def test_initial_consistency_single_segment():
    assert compat.check_initial_consistency(link_with([0.05])) == []


def test_initial_consistency_random_densities():
    rng = np.random.default_rng(0)
    for _ in range(50):
        dens = rng.uniform(0.0, CONT.rho_m, int(rng.integers(1, 5)))
        assert compat.check_initial_consistency(link_with(dens, CONT)) == []


# row construction -------------------------------------------------------------------


@pytest.mark.parametrize("dens", [(0.014, 0.014), (0.07, 0.07)])
def test_row_count_matches_enumeration(dens):
    link = link_with(dens)
    rows = compat.build_link_constraints(link, compat.symbolic_state(link, 20.0, 25))
    fd = link.fd
    assert len(rows) == enumerate_rows(1200.0, 2, 25, 20.0, fd.v_f, fd.w)
    # [DERIVED] frozen value of the enumeration for the freeway link
    assert len(rows) == 1154


def test_rows_are_affine_with_finite_constants():
    link = link_with([0.014, 0.07])
    for row in compat.build_link_constraints(link, compat.symbolic_state(link, 20.0, 25)):
        assert math.isfinite(row.expr.const)
        assert not row.expr.is_constant
        assert all(v.link == 1 and v.kind in ("inflow", "outflow") for v in row.expr.variables())


def test_build_is_deterministic():
    link = link_with([0.014, 0.07])
    a = compat.build_link_constraints(link, compat.symbolic_state(link, 20.0, 25))
    b = compat.build_link_constraints(link, compat.symbolic_state(link, 20.0, 25))
    assert [r.label for r in a] == [r.label for r in b]
    assert all(x.expr.same_terms(y.expr, 0.0) and x.expr.const == y.expr.const for x, y in zip(a, b))


def test_pruned_rows_are_subset():
    link = link_with([0.07, 0.07])
    st = compat.symbolic_state(link, 20.0, 25)
    full = {r.label for r in compat.build_link_constraints(link, st)}
    pruned = compat.build_link_constraints(link, st, prune=True)
    assert {r.label for r in pruned} <= full
    assert len(pruned) < len(full)


def test_step_containing_is_half_open():
    assert compat.step_containing(0.0, 20.0, 25) == 1
    assert compat.step_containing(20.0, 20.0, 25) == 2
    assert compat.step_containing(19.999, 20.0, 25) == 1
    assert compat.step_containing(500.0, 20.0, 25) == 25
    assert compat.step_containing(500.1, 20.0, 25) is None
    assert compat.step_containing(-1.0, 20.0, 25) is None


# numeric feasibility ---------------------------------------------------------------------


def test_one_step_empty_link_admits_capacity_inflow():
    link = link_with([0.0], CONT, lanes=2, length=600.0)
    C = CONT.capacity * 2
    assert compat.feasible_region_sanity(link, numeric(link, [C], [0.0]))
    assert not compat.feasible_region_sanity(link, numeric(link, [1.01 * C], [0.0]))


def test_jammed_link_forces_zero_first_inflow():
    link = link_with([CONT.rho_m, CONT.rho_m], CONT)
    rows = compat.build_link_constraints(link, compat.symbolic_state(link, 20.0, 3))
    first = [r for r in rows if r.kind == compat.INITIAL_VS_UPSTREAM and r.p == 1]
    assert first
    from drtraffic.expr import VarIndex

    q1 = VarIndex("inflow", 1, 1)
    # every such row reads T*q_in(1) - 0 <= 0
    assert any(r.expr.terms.get(q1, 0.0) > 0 and abs(r.expr.const) < 1e-9 and len(r.expr.terms) == 1 for r in first)
    assert not compat.feasible_region_sanity(link, numeric(link, [0.1, 0, 0], [0, 0, 0]))


@pytest.mark.parametrize("rho", [0.0, 0.014, 0.07])
def test_zero_flows_feasible_freeway_diagram(rho):
    link = link_with([rho, rho])
    assert compat.feasible_region_sanity(link, numeric(link, [0.0] * 25, [0.0] * 25))


def test_zero_flows_feasible_continuous_random_densities():
    rng = np.random.default_rng(1)
    for _ in range(20):
        dens = rng.uniform(0.0, CONT.rho_m, 2)
        link = link_with(dens, CONT)
        assert compat.feasible_region_sanity(link, numeric(link, [0.0] * 10, [0.0] * 10))


def test_capacity_inflow_into_jam_rejected():
    link = link_with([CONT.rho_m, CONT.rho_m], CONT)
    C = CONT.capacity * 4
    assert not compat.feasible_region_sanity(link, numeric(link, [C] * 10, [0.0] * 10))


def test_jam_with_freeway_diagram_is_inconsistent():
    # the discontinuous diagram makes the jam data incompatible with itself downstream
    # once backward waves from the outflow cross the link (about 218 s)
    link = link_with([FD.rho_m, FD.rho_m])
    assert compat.feasible_region_sanity(link, numeric(link, [0.0] * 10, [0.0] * 10))
    assert not compat.feasible_region_sanity(link, numeric(link, [0.0] * 25, [0.0] * 25))


def test_satisfied_rows_imply_solution_above_conditions():
    """Rows hold => min over all closed forms >= every value condition on dense boundary points."""
    rng = np.random.default_rng(7)
    T, n = 10.0, 8
    checked = 0
    for _ in range(300):
        dens = rng.uniform(0.0, 2 * CONT.rho_c, 2)
        link = LinkSpec(1, 300.0, 1, 2, tuple(dens), CONT)
        st = numeric(link, rng.uniform(0, CONT.capacity, n), rng.uniform(0, CONT.capacity, n), T)
        if not compat.feasible_region_sanity(link, st, tol=1e-9):
            continue
        checked += 1

        def msol(t, x):
            vals = [lh.moskowitz_initial(k, t, x, link) for k in (1, 2)]
            vals += [lh.moskowitz_upstream(i, t, x, st) for i in range(1, n + 1)]
            vals += [lh.moskowitz_downstream(i, t, x, st) for i in range(1, n + 1)]
            return min(vals)

        for t in np.linspace(0.0, n * T, 41):
            p = compat.step_containing(t, T, n)
            for x, cond in ((0.0, lh.value_upstream(p, t, 0.0, st)), (300.0, lh.value_downstream(p, t, 300.0, st))):
                assert msol(t, x) >= cond - 1e-7
    assert checked >= 5
