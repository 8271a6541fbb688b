"""Shared fixtures: cached solves of the built-in freeway scenarios."""

from __future__ import annotations

import math

import numpy as np
import pytest

from drtraffic import laxhopf as lh
from drtraffic import program as P
from drtraffic import scenarios as S
from drtraffic.network import FundamentalDiagram, LinkSpec


def continuous_fd(rng: np.random.Generator) -> FundamentalDiagram:
    v = rng.uniform(10.0, 35.0)
    w = -rng.uniform(3.0, 8.0)
    rc = rng.uniform(0.01, 0.03)
    return FundamentalDiagram(v, w, rc, rc * (1.0 + v / -w))


def random_oracle_case(rng: np.random.Generator):
    """One (closed form, brute-force condition, t, x) instance on a continuous triangle."""
    fd = continuous_fd(rng)
    K = int(rng.integers(1, 4))
    L = rng.uniform(200.0, 1500.0)
    lanes = int(rng.integers(1, 4))
    link = LinkSpec(1, L, lanes, K, tuple(rng.uniform(0.0, fd.rho_m, K)), fd)
    T, n = rng.uniform(5.0, 30.0), 6
    C = fd.capacity * lanes
    state = lh.LinkState(link, list(rng.uniform(0.0, C, n)), list(rng.uniform(0.0, C, n)), T)
    t = rng.uniform(0.0, n * T * 1.5)
    x = rng.uniform(0.0, L)
    kind = int(rng.integers(3))
    if kind == 0:
        k = int(rng.integers(1, K + 1))
        return lh.moskowitz_initial(k, t, x, link), lh.initial_condition(link, k), t, x
    k = int(rng.integers(1, n + 1))
    if kind == 1:
        return lh.moskowitz_upstream(k, t, x, state), lh.upstream_condition(state, k), t, x
    return lh.moskowitz_downstream(k, t, x, state), lh.downstream_condition(state, k), t, x


def oracle_sweep(n_finite: int, seed: int = 0):
    """Compare closed forms with the refined oracle until ``n_finite`` finite pairs are seen.

    Returns (finite pairs, infinite agreements, infinite disagreements).
    """
    rng = np.random.default_rng(seed)
    pairs, inf_ok, inf_bad = [], 0, 0
    while len(pairs) < n_finite:
        cf, cond, t, x = random_oracle_case(rng)
        bf = lh.refined_lax_hopf(cond, t, x)
        if math.isinf(cf) or math.isinf(bf):
            if cf == bf:
                inf_ok += 1
            else:
                inf_bad += 1
            continue
        pairs.append((float(cf), float(bf)))
    return np.array(pairs), inf_ok, inf_bad


@pytest.fixture(scope="session")
def freeway():
    """Solve cache keyed by (scenario, alpha, onramp mode, zero covariance)."""
    cache = {}

    def get(name: str, alpha=None, mode: str = "local", zero_cov: bool = False):
        key = (name, alpha, mode, zero_cov)
        if key not in cache:
            sc = S.builtin(name)
            if zero_cov:
                sc = sc.with_zero_covariance()
            prog = sc.program(alpha, onramp_bound_mode=mode)
            cache[key] = (sc, prog, P.solve(prog))
        return cache[key]

    return get


@pytest.fixture(scope="session")
def validation_controls(freeway):
    sc, _, base = freeway("freeway-validation")
    _, _, rob = freeway("freeway-validation", 0.1)
    return sc, P.control_series(rob, sc.network), P.control_series(base, sc.network)



ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
