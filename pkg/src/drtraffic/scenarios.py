"""Built-in case studies and scenario files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .network import (
    FundamentalDiagram,
    Horizon,
    LinkSpec,
    Network,
    NodeSpec,
    network_from_dict,
    network_to_dict,
)
from .program import (
    FreewayConfig,
    UrbanConfig,
    assemble_freeway_deterministic,
    assemble_freeway_robust,
    assemble_urban,
)

FREEWAY_FD = FundamentalDiagram(v_f=30.0, w=-5.5, rho_c=0.0175, rho_m=0.225)
URBAN_FD = FundamentalDiagram(v_f=13.5, w=-3.86, rho_c=0.025, rho_m=0.125)

# risk levels for the confidence sweep 1 - alpha in {0.8, 0.85, 0.9, 0.95}
DEFAULT_ALPHAS = (0.2, 0.15, 0.1, 0.05)

FREEWAY_LANES = {1: 4, 2: 4, 3: 4, 4: 3, 5: 3, 6: 3}
RAMP_TURNS = np.array([[0.8, 1.0], [0.2, 0.0]])
GAMMA_NODE2 = np.array([[0.005, 0.001], [0.001, 0.005]])
GAMMA_RAMP = np.diag([0.005, 0.0])

FREE_P2 = np.array([[0.8, 0.27], [0.2, 0.73]])
PARTIAL_P2 = np.array([[0.6, 0.8], [0.4, 0.2]])
REALIZED_P2 = np.array([[0.70, 0.85], [0.30, 0.15]])

BUILTIN_NAMES = ("freeway-free", "freeway-congested", "freeway-partial", "freeway-validation", "urban-grid")


@dataclass
class Scenario:
    name: str
    network: Network
    model: str
    regime: str = ""
    robust_nodes: tuple[int, ...] = ()
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    realized_P: dict = field(default_factory=dict)
    freeway: FreewayConfig | None = None
    urban: UrbanConfig | None = None

    def realized_network(self) -> Network:
        """Network with the realized turning matrices in place of the means."""
        if not self.realized_P:
            return self.network
        nodes = [nd.with_P(self.realized_P[nd.id]) if nd.id in self.realized_P else nd for nd in self.network.nodes]
        return self.network.replace_nodes(nodes)

    def program(self, alpha: float | None = None, robust_nodes: tuple[int, ...] | None = None, **overrides):
        """Deterministic program when ``alpha`` is None, robust one otherwise.

        ``overrides`` replace fields of the model config (e.g. ``omega``,
        ``onramp_bound_mode``).
        """
        nodes = self.robust_nodes if robust_nodes is None else tuple(robust_nodes)
        if self.model == "freeway":
            cfg = replace(self.freeway or FreewayConfig(), robust_nodes=nodes, alpha=alpha, **overrides)
            if alpha is None:
                return assemble_freeway_deterministic(self.network, cfg)
            return assemble_freeway_robust(self.network, cfg)
        cfg = replace(self.urban or UrbanConfig(), robust_nodes=nodes, alpha=alpha, **overrides)
        return assemble_urban(self.network, cfg, robust=alpha is not None)

    def with_zero_covariance(self) -> "Scenario":
        nodes = [nd.with_gamma(np.zeros_like(nd.gamma)) for nd in self.network.nodes]
        return replace(self, network=self.network.replace_nodes(nodes))


def freeway_network(densities: dict[int, float], P2: np.ndarray, T: float = 20.0, steps: int = 25) -> Network:
    """Two parallel three-link freeways sharing node 2, each with an on- and off-ramp."""
    links = []
    for lid, lanes in FREEWAY_LANES.items():
        kind = "incoming-boundary" if lid in (1, 4) else ("outgoing-boundary" if lid in (3, 6) else "interior")
        rho = densities[lid]
        links.append(LinkSpec(lid, 1200.0, lanes, 2, (rho, rho), FREEWAY_FD, kind))
    for lid in (7, 8):
        links.append(LinkSpec(lid, 1200.0, 1, 1, (0.0,), FREEWAY_FD, "on-ramp"))
    for lid in (9, 10):
        links.append(LinkSpec(lid, 1200.0, 1, 1, (0.0,), FREEWAY_FD, "off-ramp"))
    nodes = (
        NodeSpec(2, (1, 4), (2, 5), P2, GAMMA_NODE2),
        NodeSpec(3, (2, 7), (3, 9), RAMP_TURNS, GAMMA_RAMP),
        NodeSpec(6, (5, 8), (6, 10), RAMP_TURNS, GAMMA_RAMP),
    )
    return Network(tuple(links), nodes, (1, 4), Horizon(T, steps))


def _freeway(name: str) -> Scenario:
    free, jam = 0.8 * FREEWAY_FD.rho_c, 4.0 * FREEWAY_FD.rho_c
    if name == "freeway-free":
        net = freeway_network({l: free for l in FREEWAY_LANES}, FREE_P2)
        return Scenario(name, net, "freeway", "free", robust_nodes=(6,), freeway=FreewayConfig(robust_nodes=(6,)))
    if name == "freeway-congested":
        net = freeway_network({l: jam for l in FREEWAY_LANES}, FREE_P2)
        return Scenario(name, net, "freeway", "congested", robust_nodes=(6,), freeway=FreewayConfig(robust_nodes=(6,)))
    dens = {1: jam, 2: jam, 3: jam, 4: jam, 5: free, 6: free}
    net = freeway_network(dens, PARTIAL_P2)
    if name == "freeway-partial":
        return Scenario(name, net, "freeway", "partial", robust_nodes=(3,), freeway=FreewayConfig(robust_nodes=(3,)))
    return Scenario(
        name,
        net,
        "freeway",
        "partial",
        robust_nodes=(2,),
        alphas=(0.1,),
        realized_P={2: REALIZED_P2},
        freeway=FreewayConfig(robust_nodes=(2,)),
    )


# urban -----------------------------------------------------------------------

URBAN_ROWS, URBAN_COLS = 4, 5
URBAN_TWO_WAY_ROW = 1
URBAN_LENGTH = 128.0
URBAN_LANES = {"h": 3, "v": 2}
URBAN_T, URBAN_STEPS = 4.0, 75
SIGNAL_CYCLE, SIGNAL_GREEN = 60.0, 30.0
URBAN_SEED = 20240601


def _streams() -> list[tuple[str, list[int]]]:
    """Directed node sequences of every street (node id = row * cols + col + 1)."""
    out = []
    for r in range(URBAN_ROWS):
        row = [r * URBAN_COLS + c + 1 for c in range(URBAN_COLS)]
        if r == URBAN_TWO_WAY_ROW:
            out.append(("h", row))
            out.append(("h", row[::-1]))
        else:
            out.append(("h", row if r % 2 == 0 else row[::-1]))
    for c in range(URBAN_COLS):
        col = [r * URBAN_COLS + c + 1 for r in range(URBAN_ROWS)]
        out.append(("v", col if c % 2 == 0 else col[::-1]))
    return out


def urban_network() -> tuple[Network, dict[int, str], dict[int, int]]:
    """One-way grid: 20 nodes, 10 entries, 10 exits, 35 internal links.

    Returns the network, the orientation ("h"/"v") of every link and, for
    every link ending at a node, the id of the link that continues straight.
    """
    rng = np.random.default_rng(URBAN_SEED)
    links, orient, straight = [], {}, {}
    ins: dict[int, list[int]] = {}
    outs: dict[int, list[int]] = {}
    entries = []
    ends = {}
    next_id = 1

    def new_link(o, kind):
        nonlocal next_id
        lid = next_id
        next_id += 1
        dens = tuple(float(d) for d in rng.uniform(0.0, URBAN_FD.rho_c, 2))
        links.append(LinkSpec(lid, URBAN_LENGTH, URBAN_LANES[o], 2, dens, URBAN_FD, kind))
        orient[lid] = o
        return lid

    for o, seq in _streams():
        prev = new_link(o, "incoming-boundary")
        entries.append(prev)
        for a, b in zip(seq, seq[1:]):
            ins.setdefault(a, []).append(prev)
            lid = new_link(o, "interior")
            outs.setdefault(a, []).append(lid)
            straight[prev] = lid
            ends[lid] = (a, b)
            prev = lid
        ins.setdefault(seq[-1], []).append(prev)
        lid = new_link(o, "outgoing-boundary")
        outs.setdefault(seq[-1], []).append(lid)
        straight[prev] = lid
        ends[lid] = (seq[-1], None)
    # no U-turns: a link never feeds the link heading back to where it came from
    src_of = {l: e[0] for l, e in ends.items()}
    dst_of = {l: e[1] for l, e in ends.items()}

    nodes = []
    for nid in sorted(ins):
        inc, out = tuple(ins[nid]), tuple(outs[nid])
        P = np.zeros((len(out), len(inc)))
        for j, r in enumerate(inc):
            origin = src_of.get(r)
            allowed = [i for i, l in enumerate(out) if not (origin is not None and dst_of.get(l) == origin)]
            s = out.index(straight[r])
            others = [i for i in allowed if i != s]
            P[s, j] = 0.8 if others else 1.0
            for i in others:
                P[i, j] = 0.2 / len(others)
        n = len(inc)
        gamma = 0.004 * np.eye(n) + 0.001 * np.ones((n, n))
        nodes.append(NodeSpec(nid, inc, out, P, gamma))
    net = Network(tuple(links), tuple(nodes), tuple(entries), Horizon(URBAN_T, URBAN_STEPS))
    return net, orient, straight


def signal_table(network: Network, orient: dict[int, str]) -> dict[int, list[int]]:
    """Two-phase fixed-time plan sampled at step midpoints: horizontal green first."""
    table = {}
    T, n = network.T, network.n_max
    mids = (np.arange(n) + 0.5) * T
    h_green = (mids % SIGNAL_CYCLE) < SIGNAL_GREEN
    for link in network.links:
        if network.downstream_node(link.id) is None:
            continue
        green = h_green if orient[link.id] == "h" else ~h_green
        table[link.id] = [int(g) for g in green]
    return table


def _urban() -> Scenario:
    net, orient, _ = urban_network()
    nodes = tuple(nd.id for nd in net.nodes)
    cfg = UrbanConfig(omega=0.2, exit_fraction=0.8, signals=signal_table(net, orient), alpha=0.1, robust_nodes=nodes)
    return Scenario("urban-grid", net, "urban", "grid", robust_nodes=nodes, alphas=(0.1,), urban=cfg)


def builtin(name: str) -> Scenario:
    if name not in BUILTIN_NAMES:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
    return _urban() if name == "urban-grid" else _freeway(name)


# files -----------------------------------------------------------------------


def scenario_to_dict(sc: Scenario) -> dict:
    doc = network_to_dict(sc.network)
    doc.update(
        {
            "name": sc.name,
            "model": sc.model,
            "regime": sc.regime,
            "robust_nodes": list(sc.robust_nodes),
            "alpha": list(sc.alphas),
            "realized_P": {str(k): np.asarray(v).ravel().tolist() for k, v in sc.realized_P.items()},
        }
    )
    if sc.freeway is not None:
        doc["onramp_bound_mode"] = sc.freeway.onramp_bound_mode
    if sc.urban is not None:
        doc["urban"] = {
            "omega": sc.urban.omega,
            "exit_fraction": sc.urban.exit_fraction,
            "signals": {str(k): v for k, v in sc.urban.signals.items()},
        }
    return doc


def scenario_from_dict(doc: dict) -> Scenario:
    net = network_from_dict(doc)
    model = doc.get("model", "freeway")
    robust = tuple(int(z) for z in doc.get("robust_nodes", ()))
    alpha = doc.get("alpha", DEFAULT_ALPHAS)
    alphas = tuple(float(a) for a in (alpha if isinstance(alpha, (list, tuple)) else [alpha]))
    realized = {}
    for k, v in (doc.get("realized_P") or {}).items():
        nd = net.node(int(k))
        realized[int(k)] = np.asarray(v, dtype=float).reshape(len(nd.outgoing), len(nd.incoming))
    sc = Scenario(doc.get("name", "file"), net, model, doc.get("regime", ""), robust, alphas, realized)
    if model == "freeway":
        sc.freeway = FreewayConfig(onramp_bound_mode=doc.get("onramp_bound_mode", "local"), robust_nodes=robust)
    elif model == "urban":
        u = doc.get("urban", {})
        signals = {int(k): [int(s) for s in v] for k, v in u.get("signals", {}).items()}
        sc.urban = UrbanConfig(
            omega=float(u.get("omega", 0.2)),
            exit_fraction=float(u.get("exit_fraction", 0.8)),
            signals=signals,
            robust_nodes=robust,
        )
    else:
        raise ValueError(f"unknown model {model!r}")
    return sc


def load_scenario(ref: str) -> Scenario:
    """Built-in name or path to a scenario JSON file."""
    if ref in BUILTIN_NAMES:
        return builtin(ref)
    with open(Path(ref), encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))
