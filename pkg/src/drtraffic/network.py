"""Road-network data model: fundamental diagrams, links, nodes, horizon.

Densities are stored per lane (veh/m/lane); flows in the optimization and
simulation are link totals (veh/s). ``LinkSpec.total_fd`` gives the
lane-aggregated diagram the Moskowitz formulas operate on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LINK_KINDS = ("incoming-boundary", "interior", "on-ramp", "off-ramp", "outgoing-boundary")
_DENSITY_TOL = 1e-12


@dataclass(frozen=True)
class FundamentalDiagram:
    """Triangular flow-density relation.

    Attributes:
        v_f: free-flow speed (m/s), positive.
        w: congestion wave speed (m/s), negative.
        rho_c: critical density.
        rho_m: jam density.
    """

    v_f: float
    w: float
    rho_c: float
    rho_m: float

    @property
    def capacity(self) -> float:
        return self.v_f * self.rho_c

    def continuity_gap(self) -> float:
        """Relative mismatch between the two branches at the critical density."""
        free = self.v_f * self.rho_c
        cong = self.w * (self.rho_c - self.rho_m)
        return abs(free - cong) / max(abs(free), abs(cong), 1e-300)

    def is_continuous(self, rtol: float = 1e-6) -> bool:
        return self.continuity_gap() <= rtol

    def scaled(self, lanes: float) -> "FundamentalDiagram":
        return FundamentalDiagram(self.v_f, self.w, self.rho_c * lanes, self.rho_m * lanes)

    def problems(self) -> list[str]:
        out = []
        if not self.v_f > 0:
            out.append(f"free-flow speed must be positive (got {self.v_f})")
        if not self.w < 0:
            out.append(f"congestion wave speed must be negative (got {self.w})")
        if not 0 < self.rho_c < self.rho_m:
            out.append(f"need 0 < rho_c < rho_m (got {self.rho_c}, {self.rho_m})")
        return out


def _check_density(rho: float, fd: FundamentalDiagram) -> None:
    if not (-_DENSITY_TOL <= rho <= fd.rho_m + _DENSITY_TOL):
        raise ValueError(f"density {rho} outside [0, {fd.rho_m}]")


def fd_flow(rho: float, fd: FundamentalDiagram) -> float:
    """Flow of the triangular diagram; the free-flow branch wins at ``rho_c``."""
    _check_density(rho, fd)
    if rho <= fd.rho_c:
        return fd.v_f * max(rho, 0.0)
    return fd.w * (min(rho, fd.rho_m) - fd.rho_m)


def fd_supply(rho: float, fd: FundamentalDiagram) -> float:
    """Receiving flow: capacity on the free branch, ``fd_flow`` when congested."""
    _check_density(rho, fd)
    if rho <= fd.rho_c:
        return fd.capacity
    return fd_flow(rho, fd)


def fd_demand(rho: float, fd: FundamentalDiagram) -> float:
    """Sending flow: ``fd_flow`` on the free branch, capacity when congested."""
    _check_density(rho, fd)
    if rho <= fd.rho_c:
        return fd.v_f * max(rho, 0.0)
    return fd.capacity


@dataclass(frozen=True)
class LinkSpec:
    id: int
    length: float
    lanes: int
    segments: int
    init_density: tuple[float, ...]
    fd: FundamentalDiagram
    kind: str = "interior"

    @property
    def X(self) -> float:
        return self.length / self.segments

    @property
    def total_fd(self) -> FundamentalDiagram:
        return self.fd.scaled(self.lanes)

    @property
    def capacity(self) -> float:
        """Link capacity in veh/s (all lanes)."""
        return self.fd.capacity * self.lanes

    @property
    def total_density(self) -> tuple[float, ...]:
        return tuple(r * self.lanes for r in self.init_density)

    @property
    def initial_vehicles(self) -> float:
        return sum(self.total_density) * self.X

    @property
    def has_dynamics(self) -> bool:
        """Ramps are point sources/sinks without compatibility constraints."""
        return self.kind not in ("on-ramp", "off-ramp")


@dataclass(frozen=True)
class NodeSpec:
    """Junction with turning matrix ``P[i, j]`` = share of incoming ``j`` sent to outgoing ``i``.

    ``gamma`` is the covariance of one row of the random turning matrix
    (entries indexed by incoming link); it is shared by every row.
    """

    id: int
    incoming: tuple[int, ...]
    outgoing: tuple[int, ...]
    P: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))

    def ratio(self, out_link: int, in_link: int) -> float:
        return float(self.P[self.outgoing.index(out_link), self.incoming.index(in_link)])

    def with_gamma(self, gamma) -> "NodeSpec":
        return NodeSpec(self.id, self.incoming, self.outgoing, self.P, gamma)

    def with_P(self, P) -> "NodeSpec":
        return NodeSpec(self.id, self.incoming, self.outgoing, P, self.gamma)


@dataclass(frozen=True)
class Horizon:
    T: float
    steps: int

    @property
    def duration(self) -> float:
        return self.T * self.steps


@dataclass(frozen=True)
class Network:
    links: tuple[LinkSpec, ...]
    nodes: tuple[NodeSpec, ...]
    boundary_in: tuple[int, ...]
    horizon: Horizon
    _by_id: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {l.id: l for l in self.links})

    @property
    def T(self) -> float:
        return self.horizon.T

    @property
    def n_max(self) -> int:
        return self.horizon.steps

    def link(self, link_id: int) -> LinkSpec:
        return self._by_id[link_id]

    def node(self, node_id: int) -> NodeSpec:
        for nd in self.nodes:
            if nd.id == node_id:
                return nd
        raise KeyError(node_id)

    def upstream_node(self, link_id: int) -> NodeSpec | None:
        hits = [nd for nd in self.nodes if link_id in nd.outgoing]
        return hits[0] if hits else None

    def downstream_node(self, link_id: int) -> NodeSpec | None:
        hits = [nd for nd in self.nodes if link_id in nd.incoming]
        return hits[0] if hits else None

    def links_of_kind(self, *kinds: str) -> list[LinkSpec]:
        return [l for l in self.links if l.kind in kinds]

    @property
    def main_links(self) -> list[LinkSpec]:
        return [l for l in self.links if l.has_dynamics]

    @property
    def controlled_links(self) -> list[LinkSpec]:
        """Links whose inflow is a control: incoming boundaries and on-ramps."""
        return self.links_of_kind("incoming-boundary", "on-ramp")

    def replace_nodes(self, nodes: Iterable[NodeSpec]) -> "Network":
        return Network(self.links, tuple(nodes), self.boundary_in, self.horizon)

    def replace_links(self, links: Iterable[LinkSpec]) -> "Network":
        return Network(tuple(links), self.nodes, self.boundary_in, self.horizon)


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def lines(self) -> list[str]:
        return [f"ERROR: {e}" for e in self.errors] + [f"WARNING: {w}" for w in self.warnings]


def validate(network: Network, fd_rtol: float = 1e-6, tol: float = 1e-9) -> ValidationReport:
    """Check every structural and numeric invariant; never raises."""
    rep = ValidationReport()
    ids = [l.id for l in network.links]
    if len(set(ids)) != len(ids):
        rep.errors.append("duplicate link ids")
    known = set(ids)

    warned_fd = set()
    for l in network.links:
        if l.kind not in LINK_KINDS:
            rep.errors.append(f"link {l.id}: unknown kind {l.kind!r}")
        for msg in l.fd.problems():
            rep.errors.append(f"link {l.id}: {msg}")
        if l.lanes < 1 or l.segments < 1:
            rep.errors.append(f"link {l.id}: lanes and segments must be >= 1")
        if not l.length > 0:
            rep.errors.append(f"link {l.id}: length must be positive")
        if len(l.init_density) != l.segments:
            rep.errors.append(f"link {l.id}: {len(l.init_density)} initial densities for {l.segments} segments")
        for k, rho in enumerate(l.init_density, 1):
            if not (-tol <= rho <= l.fd.rho_m + tol):
                rep.errors.append(f"link {l.id}: initial density {rho} of segment {k} outside [0, rho_m]")
        if not l.fd.problems() and not l.fd.is_continuous(fd_rtol) and l.fd not in warned_fd:
            warned_fd.add(l.fd)
            rep.warnings.append(
                "fundamental diagram not continuous at rho_c: "
                f"v_f*rho_c = {l.fd.v_f * l.fd.rho_c:.4g} vs w*(rho_c-rho_m) = {l.fd.w * (l.fd.rho_c - l.fd.rho_m):.4g}"
            )

    upstream_count = {i: 0 for i in ids}
    downstream_count = {i: 0 for i in ids}
    for nd in network.nodes:
        where = f"node {nd.id}"
        for lid in nd.incoming + nd.outgoing:
            if lid not in known:
                rep.errors.append(f"{where}: unknown link {lid}")
        for lid in nd.outgoing:
            if lid in upstream_count:
                upstream_count[lid] += 1
        for lid in nd.incoming:
            if lid in downstream_count:
                downstream_count[lid] += 1
        m, n = len(nd.outgoing), len(nd.incoming)
        if not (m > 1 or n > 1):
            rep.errors.append(f"{where}: needs more than one incoming or outgoing link")
        if nd.P.shape != (m, n):
            rep.errors.append(f"{where}: turning matrix shape {nd.P.shape} != ({m}, {n})")
        else:
            if np.any(nd.P < -tol) or np.any(nd.P > 1 + tol):
                rep.errors.append(f"{where}: turning ratios outside [0, 1]")
            sums = nd.P.sum(axis=0)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                rep.errors.append(f"{where}: turning ratios not conserved (column sums {np.round(sums, 6).tolist()})")
        g = nd.gamma
        if g.shape != (n, n):
            rep.errors.append(f"{where}: covariance shape {g.shape} != ({n}, {n})")
        else:
            if not np.allclose(g, g.T, atol=1e-12):
                rep.errors.append(f"{where}: covariance not symmetric")
            elif np.linalg.eigvalsh(g).min() < -1e-12:
                rep.errors.append(f"{where}: covariance not positive semidefinite")

    for l in network.links:
        up, down = upstream_count.get(l.id, 0), downstream_count.get(l.id, 0)
        if up > 1 or down > 1:
            rep.errors.append(f"link {l.id}: attached to more than one node at one end")
        if l.kind in ("incoming-boundary", "on-ramp") and up:
            rep.errors.append(f"link {l.id}: {l.kind} link has an upstream node")
        if l.kind in ("interior", "outgoing-boundary", "off-ramp") and up != 1:
            rep.errors.append(f"link {l.id}: {l.kind} link must start at exactly one node")
        if l.kind in ("outgoing-boundary", "off-ramp") and down:
            rep.errors.append(f"link {l.id}: {l.kind} link has a downstream node")
        if l.kind == "interior" and down != 1:
            rep.errors.append(f"link {l.id}: interior link must end at a node")
    for lid in network.boundary_in:
        if lid not in known:
            rep.errors.append(f"boundary link {lid} does not exist")
        elif network.link(lid).kind != "incoming-boundary":
            rep.errors.append(f"boundary link {lid} is classified {network.link(lid).kind}")
    missing = {l.id for l in network.links_of_kind("incoming-boundary")} - set(network.boundary_in)
    if missing:
        rep.errors.append(f"incoming-boundary links {sorted(missing)} missing from boundary_in")

    if not network.horizon.T > 0 or network.horizon.steps < 1:
        rep.errors.append("horizon needs T > 0 and at least one step")
    return rep


# ---------------------------------------------------------------------------
# JSON


def _infer_kind(lid: int, nodes: Sequence[NodeSpec], boundary_in: Sequence[int]) -> str:
    has_up = any(lid in nd.outgoing for nd in nodes)
    has_down = any(lid in nd.incoming for nd in nodes)
    if not has_up:
        return "incoming-boundary" if lid in boundary_in else "on-ramp"
    if not has_down:
        return "outgoing-boundary"
    return "interior"


def network_from_dict(doc: dict) -> Network:
    """Build a network from the JSON document layout (row-major matrices)."""
    boundary_in = tuple(int(i) for i in doc.get("boundary_in", ()))
    nodes = []
    for nd in doc.get("nodes", []):
        inc = tuple(int(i) for i in nd["in"])
        out = tuple(int(i) for i in nd["out"])
        P = np.asarray(nd["P"], dtype=float)
        P = P.reshape(len(out), len(inc)) if P.size == len(out) * len(inc) else P
        G = np.asarray(nd.get("Gamma", np.zeros(len(inc) * len(inc))), dtype=float)
        G = G.reshape(len(inc), len(inc)) if G.size == len(inc) ** 2 else G
        nodes.append(NodeSpec(int(nd["id"]), inc, out, P, G))
    links = []
    for lk in doc["links"]:
        f = lk["fd"]
        fd = FundamentalDiagram(float(f["vf"]), float(f["w"]), float(f["rho_c"]), float(f["rho_m"]))
        lid = int(lk["id"])
        segs = int(lk["segments"])
        dens = lk.get("init_density", [0.0] * segs)
        if isinstance(dens, (int, float)):
            dens = [float(dens)] * segs
        kind = lk.get("kind") or _infer_kind(lid, nodes, boundary_in)
        links.append(
            LinkSpec(lid, float(lk["length_m"]), int(lk["lanes"]), segs, tuple(float(d) for d in dens), fd, kind)
        )
    hz = doc["horizon"]
    return Network(tuple(links), tuple(nodes), boundary_in, Horizon(float(hz["T_s"]), int(hz["steps"])))


def network_to_dict(network: Network) -> dict:
    return {
        "links": [
            {
                "id": l.id,
                "length_m": l.length,
                "lanes": l.lanes,
                "segments": l.segments,
                "init_density": list(l.init_density),
                "fd": {"vf": l.fd.v_f, "w": l.fd.w, "rho_c": l.fd.rho_c, "rho_m": l.fd.rho_m},
                "kind": l.kind,
            }
            for l in network.links
        ],
        "nodes": [
            {
                "id": nd.id,
                "in": list(nd.incoming),
                "out": list(nd.outgoing),
                "P": nd.P.ravel().tolist(),
                "Gamma": nd.gamma.ravel().tolist(),
            }
            for nd in network.nodes
        ],
        "boundary_in": list(network.boundary_in),
        "horizon": {"T_s": network.horizon.T, "steps": network.horizon.steps},
    }


def load_network(path: str | Path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return network_from_dict(json.load(fh))


def is_finite(v) -> bool:
    return not (isinstance(v, float) and math.isinf(v))
