import numpy as np
import pytest

from drtraffic import ctm
from drtraffic import program as P
from drtraffic import scenarios as S
from drtraffic.network import Horizon, LinkSpec, Network, NodeSpec

FD = S.FREEWAY_FD


def corridor(lanes=2, rho=0.0):
    links = (
        LinkSpec(1, 1200.0, lanes, 1, (rho,), FD, "incoming-boundary"),
        LinkSpec(2, 1200.0, lanes, 1, (rho,), FD, "outgoing-boundary"),
    )
    node = NodeSpec(1, (1,), (2,), np.array([[1.0]]), np.zeros((1, 1)))
    return Network(links, (node,), (1,), Horizon(20.0, 25))


def test_cell_count():
    c = ctm.discretize(S.builtin("freeway-free").network)
    assert c.cells[1] == 6 and c.cell_length[1] == pytest.approx(200.0)
    assert c.steps_per_control == 4 and c.n_steps == 100


def test_cfl_violation():
    with pytest.raises(ValueError):
        ctm.discretize(S.builtin("freeway-free").network, dt=10.0)


def test_cell_longer_than_link():
    with pytest.raises(ValueError):
        ctm.discretize(S.builtin("freeway-free").network, dt=5.0, cell_length=1500.0)


def test_dt_must_divide_control_step():
    with pytest.raises(ValueError):
        ctm.discretize(S.builtin("freeway-free").network, dt=3.0)


def test_bad_merge_rule():
    with pytest.raises(ValueError):
        ctm.discretize(S.builtin("freeway-free").network, merge="zipper")


def test_empty_corridor_no_controls():
    m = ctm.simulate(ctm.discretize(corridor()), {1: np.zeros(25)}, 2)
    assert m.throughput[-1] == 0.0 and m.blocked_total[-1] == 0.0


def test_free_flow_travel_time():
    C = FD.capacity * 2
    m = ctm.simulate(ctm.discretize(corridor()), {1: np.full(25, C)}, 2)
    # [DERIVED] capacity flow leaves after the 2400 m / v_f free-flow travel time
    expected = C * (500.0 - 2400.0 / FD.v_f)
    assert m.throughput[-1] == pytest.approx(expected, abs=C * 5.0)
    assert m.blocked_total[-1] == 0.0


def test_overdemand_is_blocked_and_conserved():
    C = FD.capacity * 2
    m = ctm.simulate(ctm.discretize(corridor()), {1: np.full(25, 2.0 * C)}, 2)
    assert m.blocked_total[-1] > 0.0
    assert m.queue_total[-1] == pytest.approx(C * 500.0, rel=0.05)
    assert np.all(np.diff(m.blocked_total) >= 0.0)
    assert abs(m.cumulative_balance_error) < 1e-9


def test_stray_control_rejected():
    c = ctm.discretize(S.builtin("freeway-free").network)
    with pytest.raises(ValueError):
        ctm.simulate(c, {2: np.zeros(25)}, 6)
    with pytest.raises(ValueError):
        ctm.simulate(c, {1: np.zeros(3)}, 6)


def test_exit_bounds_from_initial_density():
    net = S.builtin("freeway-congested").network
    b = ctm.exit_supply_bounds(net, (3, 6))
    link = net.link(3)
    assert b[3] == pytest.approx(link.lanes * -FD.w * (FD.rho_m - 0.07))


def test_state_copy_is_deep():
    s = ctm.initial_state(ctm.discretize(S.builtin("freeway-free").network))
    c = s.copy()
    c.occupancy[1][0] += 1.0
    c.blocked[1] += 1.0
    assert s.occupancy[1][0] != c.occupancy[1][0]
    assert s.blocked[1] == 0.0


@pytest.fixture(scope="module")
def validation_runs(validation_controls):
    sc, rob, base = validation_controls
    net = sc.realized_network()
    c = ctm.discretize(net, exit_bounds=ctm.exit_supply_bounds(net, (3, 6)))
    return ctm.run_validation(c, rob, base), c, rob


def test_validation_conservation(validation_runs):
    (mr, mb), _, _ = validation_runs
    for m in (mr, mb):
        assert np.max(np.abs(m.balance_errors)) < 1e-9
        assert abs(m.cumulative_balance_error) < 1e-9
        assert m.min_occupancy >= -1e-12
        assert m.max_jam_excess <= 1e-9


def test_validation_trends(validation_runs):
    (mr, mb), _, _ = validation_runs
    assert mr.blocked_total[-1] < mb.blocked_total[-1]
    assert mr.throughput[-1] > mb.throughput[-1]


def test_replay_is_deterministic(validation_runs):
    _, c, rob = validation_runs
    a = ctm.simulate(c, rob, 6)
    b = ctm.simulate(c, rob, 6)
    assert np.array_equal(a.blocked_total, b.blocked_total)
    assert np.array_equal(a.throughput, b.throughput)


def test_free_flow_mean_plan_not_blocked(freeway):
    sc, _, res = freeway("freeway-free")
    net = sc.network
    c = ctm.discretize(net, exit_bounds=ctm.exit_supply_bounds(net, (3, 6)))
    m = ctm.simulate(c, P.control_series(res, net), 6)
    assert m.blocked_total[-1] == pytest.approx(0.0, abs=1e-6)
