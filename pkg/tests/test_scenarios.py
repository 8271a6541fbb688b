import json

import numpy as np
import pytest

from drtraffic import scenarios as S
from drtraffic.network import validate


def test_freeway_densities():
    # [PAPER] free 0.8 rho_c, jam 4 rho_c with rho_c = 0.0175 veh/m/lane
    free = S.builtin("freeway-free").network
    jam = S.builtin("freeway-congested").network
    assert free.link(2).init_density[0] == pytest.approx(0.014)
    assert jam.link(2).init_density[0] == pytest.approx(0.07)


def test_partial_split():
    net = S.builtin("freeway-partial").network
    for l in (1, 2, 3, 4):
        assert net.link(l).init_density == pytest.approx((0.07, 0.07))
    for l in (5, 6):
        assert net.link(l).init_density == pytest.approx((0.014, 0.014))
    assert np.allclose(net.node(2).P, [[0.6, 0.8], [0.4, 0.2]])


def test_validation_realized_matrix():
    sc = S.builtin("freeway-validation")
    assert sc.robust_nodes == (2,)
    real = sc.realized_network().node(2).P
    assert np.allclose(real.sum(axis=0), 1.0)
    assert not np.allclose(real, sc.network.node(2).P)


@pytest.mark.parametrize("name", S.BUILTIN_NAMES)
def test_builtins_are_valid(name):
    rep = validate(S.builtin(name).network)
    assert rep.ok, rep.errors


def test_unknown_name():
    with pytest.raises(KeyError):
        S.builtin("nowhere")


def test_urban_size():
    net = S.builtin("urban-grid").network
    assert len(net.nodes) == 20
    assert len(net.links) == 55
    assert net.n_max == 75 and net.T == 4.0


def test_urban_signals_alternate():
    sc = S.builtin("urban-grid")
    for lid, table in sc.urban.signals.items():
        assert len(table) == sc.network.n_max
        assert set(table) <= {0, 1}


def test_builtins_reproducible():
    a = S.scenario_to_dict(S.builtin("urban-grid"))
    b = S.scenario_to_dict(S.builtin("urban-grid"))
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


@pytest.mark.parametrize("name", S.BUILTIN_NAMES)
def test_dict_round_trip(name):
    sc = S.builtin(name)
    doc = json.loads(json.dumps(S.scenario_to_dict(sc)))
    back = S.scenario_from_dict(doc)
    assert json.dumps(S.scenario_to_dict(back), sort_keys=True) == json.dumps(doc, sort_keys=True)
    assert back.robust_nodes == sc.robust_nodes


def test_load_from_file(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps(S.scenario_to_dict(S.builtin("freeway-partial"))))
    sc = S.load_scenario(str(path))
    assert sc.model == "freeway" and sc.robust_nodes == (3,)


def test_unknown_model_rejected():
    doc = S.scenario_to_dict(S.builtin("freeway-free"))
    doc["model"] = "rail"
    with pytest.raises(ValueError):
        S.scenario_from_dict(doc)


def test_zero_covariance_copy():
    sc = S.builtin("freeway-free")
    z = sc.with_zero_covariance()
    assert all(np.all(nd.gamma == 0.0) for nd in z.network.nodes)
    assert np.any(sc.network.node(2).gamma != 0.0)
