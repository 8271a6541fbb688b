import json
import math

import numpy as np
import pytest

from drtraffic import scenarios as S
from drtraffic.network import (
    FundamentalDiagram,
    Horizon,
    LinkSpec,
    Network,
    NodeSpec,
    fd_demand,
    fd_flow,
    fd_supply,
    load_network,
    network_from_dict,
    network_to_dict,
    validate,
)

FD = S.FREEWAY_FD


def test_capacity_is_vf_times_rho_c():
    # [PAPER] capacity 0.5250 veh/s/lane
    assert FD.capacity == pytest.approx(0.525, abs=1e-12)


def test_fd_flow_examples():
    assert fd_flow(0.0, FD) == 0.0
    assert fd_flow(0.0175, FD) == pytest.approx(0.525, abs=1e-12)
    assert fd_flow(0.225, FD) == pytest.approx(0.0, abs=1e-12)


def test_fd_flow_tie_uses_free_branch():
    # discontinuous diagram: the congested branch would give 1.141 at rho_c
    assert fd_flow(FD.rho_c, FD) == pytest.approx(FD.capacity)


def test_fd_supply_examples():
    assert fd_supply(0.8 * FD.rho_c, FD) == pytest.approx(0.525, abs=1e-12)
    assert fd_supply(FD.rho_m, FD) == pytest.approx(0.0, abs=1e-12)
    # [DERIVED] -5.5 * (0.07 - 0.225)
    assert fd_supply(0.07, FD) == pytest.approx(0.8525, abs=1e-12)


def test_fd_demand_caps_at_capacity():
    assert fd_demand(0.01, FD) == pytest.approx(0.3)
    assert fd_demand(0.1, FD) == pytest.approx(FD.capacity)


@pytest.mark.parametrize("fn", [fd_flow, fd_supply, fd_demand])
def test_density_out_of_range_raises(fn):
    with pytest.raises(ValueError):
        fn(-0.01, FD)
    with pytest.raises(ValueError):
        fn(FD.rho_m + 0.01, FD)


CONTINUOUS = FundamentalDiagram(30.0, -5.5, 0.0175, 0.0175 * (1 + 30 / 5.5))


def test_supply_properties_continuous_diagram():
    rhos = np.linspace(0.0, CONTINUOUS.rho_m, 401)
    sup = np.array([fd_supply(r, CONTINUOUS) for r in rhos])
    flow = np.array([fd_flow(r, CONTINUOUS) for r in rhos])
    assert np.all(np.diff(sup) <= 1e-12)
    assert np.all(sup >= flow - 1e-12)
    assert np.all(flow >= 0.0)
    assert fd_flow(CONTINUOUS.rho_c, CONTINUOUS) == pytest.approx(flow.max(), abs=1e-3)
    assert flow.max() <= CONTINUOUS.capacity + 1e-12


def test_supply_monotone_per_branch_on_freeway_diagram():
    # the congested branch starts above capacity, so monotonicity holds per branch only
    free = np.linspace(0.0, FD.rho_c, 50)
    cong = np.linspace(FD.rho_c + 1e-6, FD.rho_m, 200)
    for rhos in (free, cong):
        sup = np.array([fd_supply(r, FD) for r in rhos])
        assert np.all(np.diff(sup) <= 1e-12)
    assert fd_supply(FD.rho_c + 1e-9, FD) > fd_supply(FD.rho_c, FD)
    flow = np.array([fd_flow(r, FD) for r in cong])
    sup = np.array([fd_supply(r, FD) for r in cong])
    assert np.allclose(sup, flow)


def test_continuity_flag():
    # [DERIVED] 0.525 vs 5.5 * 0.2075 = 1.141
    assert not FD.is_continuous()
    assert CONTINUOUS.is_continuous()


def test_builtin_freeway_valid_with_warning():
    rep = validate(S.builtin("freeway-free").network)
    assert rep.ok
    assert any("not continuous" in w for w in rep.warnings)


def _two_link_network(P, gamma=None, rho=0.01):
    fd = FD
    links = (
        LinkSpec(1, 600.0, 1, 1, (rho,), fd, "incoming-boundary"),
        LinkSpec(2, 600.0, 1, 1, (rho,), fd, "outgoing-boundary"),
        LinkSpec(3, 600.0, 1, 1, (rho,), fd, "off-ramp"),
    )
    gamma = np.zeros((1, 1)) if gamma is None else gamma
    nodes = (NodeSpec(1, (1,), (2, 3), np.asarray(P, float), gamma),)
    return Network(links, nodes, (1,), Horizon(10.0, 3))


def test_unconserved_ratios_rejected():
    rep = validate(_two_link_network([[0.6], [0.3]]))
    assert not rep.ok
    assert any("turning ratios not conserved" in e for e in rep.errors)


def test_jam_density_everywhere_is_valid():
    assert validate(_two_link_network([[0.7], [0.3]], rho=FD.rho_m)).ok


def test_non_psd_covariance_rejected():
    net = _two_link_network([[0.7], [0.3]], gamma=np.array([[-0.01]]))
    rep = validate(net)
    assert any("positive semidefinite" in e for e in rep.errors)


def test_validate_is_idempotent():
    net = S.builtin("freeway-partial").network
    a, b = validate(net), validate(net)
    assert a.errors == b.errors and a.warnings == b.warnings


def test_json_round_trip(tmp_path):
    net = S.builtin("freeway-congested").network
    doc = network_to_dict(net)
    path = tmp_path / "net.json"
    path.write_text(json.dumps(doc))
    back = load_network(path)
    assert network_to_dict(back) == doc
    assert back.T == net.T and back.n_max == net.n_max
    assert [l.id for l in back.links] == [l.id for l in net.links]


def test_network_from_dict_uses_documented_keys():
    doc = {
        "links": [
            {"id": 1, "length_m": 600, "lanes": 2, "segments": 2, "init_density": [0.01, 0.02],
             "fd": {"vf": 30, "w": -5.5, "rho_c": 0.0175, "rho_m": 0.225}},
        ],
        "nodes": [],
        "boundary_in": [1],
        "horizon": {"T_s": 20, "steps": 5},
    }
    net = network_from_dict(doc)
    link = net.link(1)
    assert link.X == 300.0
    assert math.isclose(link.initial_vehicles, (0.01 + 0.02) * 300 * 2)
    assert net.T == 20 and net.n_max == 5
