"""Cell Transmission Model used to replay computed controls.

Links are cut into cells; each step moves ``min(demand, supply)`` between
neighbouring cells. At nodes the realized turning matrix splits each
incoming demand, the most constrained outgoing link throttles an incoming
link as a whole (FIFO), and mainline links are served before on-ramps.
Entry links admit what their first cell can take; the rest waits in an
unbounded queue. A vehicle counts as blocked when it is demanded at an
entry but finds no room in the step it arrives; the blocked count is
cumulative, while the queue itself drains once room appears.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Network, NodeSpec, fd_supply

FREEWAY_DT = 5.0
FREEWAY_CELL = 200.0


@dataclass
class CtmNetwork:
    network: Network
    dt: float
    cells: dict[int, int]
    cell_length: dict[int, float]
    exit_bounds: dict[int, float]
    merge: str = "priority"
    signals: dict[int, list[int]] = field(default_factory=dict)
    supply_cap: bool = True

    @property
    def steps_per_control(self) -> int:
        return int(round(self.network.T / self.dt))

    @property
    def n_steps(self) -> int:
        return self.steps_per_control * self.network.n_max


@dataclass
class CtmState:
    occupancy: dict[int, np.ndarray]
    queue: dict[int, float]
    ramp_queue: dict[int, float]
    cum_outflow: dict[int, float]
    blocked: dict[int, float] = field(default_factory=dict)
    step: int = 0

    def total_vehicles(self) -> float:
        return float(sum(a.sum() for a in self.occupancy.values()))

    def copy(self) -> "CtmState":
        return CtmState(
            {k: v.copy() for k, v in self.occupancy.items()},
            dict(self.queue),
            dict(self.ramp_queue),
            dict(self.cum_outflow),
            dict(self.blocked),
            self.step,
        )


@dataclass
class StepRecord:
    admitted: float
    discharged: float
    balance_error: float


def discretize(
    network: Network,
    dt: float = FREEWAY_DT,
    cell_length: float = FREEWAY_CELL,
    exit_bounds: dict[int, float] | None = None,
    merge: str = "priority",
    signals: dict | None = None,
    supply_cap: bool = True,
) -> CtmNetwork:
    """Cut every link with dynamics into ``round(length / cell_length)`` cells.

    ``exit_bounds`` caps the discharge rate (veh/s) of outgoing-boundary
    links; unlisted exits discharge at link capacity. With ``supply_cap``
    a cell never receives more than capacity, even where a discontinuous
    diagram would allow it on the congested branch.
    """
    if merge not in ("priority", "proportional"):
        raise ValueError("merge must be 'priority' or 'proportional'")
    ratio = network.T / dt
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValueError("control step must be a multiple of the simulation step")
    cells, lengths = {}, {}
    for link in network.links:
        if not link.has_dynamics:
            continue
        if cell_length > link.length + 1e-9:
            raise ValueError(f"link {link.id}: cell length {cell_length} exceeds link length {link.length}")
        n = max(1, int(round(link.length / cell_length)))
        lc = link.length / n
        if link.fd.v_f * dt > lc + 1e-9 or abs(link.fd.w) * dt > lc + 1e-9:
            raise ValueError(f"link {link.id}: CFL condition violated (cell {lc:g} m, dt {dt:g} s)")
        cells[link.id] = n
        lengths[link.id] = lc
    bounds = {l.id: l.capacity for l in network.links_of_kind("outgoing-boundary")}
    bounds.update(exit_bounds or {})
    return CtmNetwork(network, dt, cells, lengths, bounds, merge, dict(signals or {}), supply_cap)


def initial_state(ctm: CtmNetwork) -> CtmState:
    net = ctm.network
    occ = {}
    for lid, n in ctm.cells.items():
        link = net.link(lid)
        lc = ctm.cell_length[lid]
        centers = (np.arange(n) + 0.5) * lc
        seg = np.minimum((centers // link.X).astype(int), link.segments - 1)
        occ[lid] = np.array([link.total_density[k] for k in seg]) * lc
    queue = {l: 0.0 for l in net.boundary_in}
    ramps = {l.id: 0.0 for l in net.links_of_kind("on-ramp")}
    cum = {l.id: 0.0 for l in net.links}
    return CtmState(occ, queue, ramps, cum, {l: 0.0 for l in net.boundary_in})


def _cell_demand(occ: float, lc: float, link) -> float:
    rho = occ / (lc * link.lanes)
    return min(link.fd.v_f * rho, link.fd.capacity) * link.lanes


def _cell_supply(occ: float, lc: float, link, dt: float, cap: bool = True) -> float:
    rho = min(max(occ / (lc * link.lanes), 0.0), link.fd.rho_m)
    room = (link.fd.rho_m * link.lanes * lc - occ) / dt
    s = fd_supply(rho, link.fd)
    if cap:
        s = min(s, link.fd.capacity)
    return max(0.0, min(s * link.lanes, room))


def _split(node: NodeSpec, demand: dict[int, float], supply: dict[int, float], mainline, merge: str) -> dict[int, float]:
    """Flow sent by each incoming link, mainline first (or all together when proportional)."""
    P = node.P
    sent = {r: 0.0 for r in node.incoming}
    left = dict(supply)
    groups = [list(node.incoming)] if merge == "proportional" else [
        [r for r in node.incoming if r in mainline],
        [r for r in node.incoming if r not in mainline],
    ]
    for group in groups:
        if not group:
            continue
        theta = 1.0
        for i, j in enumerate(node.outgoing):
            want = sum(P[i, node.incoming.index(r)] * demand[r] for r in group)
            if want > 0.0 and np.isfinite(left[j]):
                theta = min(theta, left[j] / want)
        theta = max(theta, 0.0)
        for r in group:
            sent[r] = theta * demand[r]
        for i, j in enumerate(node.outgoing):
            left[j] -= sum(P[i, node.incoming.index(r)] * sent[r] for r in group)
    return sent


def step(ctm: CtmNetwork, state: CtmState, controls: dict[int, float]) -> tuple[CtmState, StepRecord]:
    """Advance one simulation step; ``controls`` maps controlled links to inflow rates (veh/s)."""
    net, dt = ctm.network, ctm.dt
    ctrl_step = state.step // ctm.steps_per_control
    new = state.copy()
    occ = state.occupancy
    demand, supply = {}, {}
    for lid, cells in occ.items():
        link, lc = net.link(lid), ctm.cell_length[lid]
        demand[lid] = np.array([_cell_demand(o, lc, link) for o in cells])
        supply[lid] = np.array([_cell_supply(o, lc, link, dt, ctm.supply_cap) for o in cells])
        table = ctm.signals.get(lid)
        if table is not None:
            demand[lid][-1] *= table[min(ctrl_step, len(table) - 1)]

    admitted = 0.0
    discharged = 0.0
    inflow = {lid: 0.0 for lid in occ}  # into first cell
    outflow = {lid: 0.0 for lid in occ}  # out of last cell

    for lid in net.boundary_in:
        arriving = controls.get(lid, 0.0) * dt
        room = supply[lid][0] * dt
        take = min(arriving + state.queue[lid], room)
        new.queue[lid] = arriving + state.queue[lid] - take
        # the queue is served first, so new arrivals get what room is left
        new.blocked[lid] = state.blocked.get(lid, 0.0) + max(0.0, arriving - max(0.0, room - state.queue[lid]))
        inflow[lid] += take / dt
        admitted += take

    mainline = {l.id for l in net.links if l.kind != "on-ramp"}
    for node in net.nodes:
        d, s = {}, {}
        for r in node.incoming:
            if r in occ:
                d[r] = demand[r][-1]
            else:
                d[r] = controls.get(r, 0.0) + state.ramp_queue.get(r, 0.0) / dt
        for j in node.outgoing:
            s[j] = supply[j][0] if j in occ else np.inf
        sent = _split(node, d, s, mainline, ctm.merge)
        for r in node.incoming:
            f = sent[r]
            if r in occ:
                outflow[r] += f
            else:
                want = controls.get(r, 0.0) * dt + state.ramp_queue.get(r, 0.0)
                new.ramp_queue[r] = max(0.0, want - f * dt)
                admitted += f * dt
            new.cum_outflow[r] += f * dt
        for i, j in enumerate(node.outgoing):
            y = sum(node.P[i, c] * sent[r] for c, r in enumerate(node.incoming))
            new.cum_outflow.setdefault(j, 0.0)
            if j in occ:
                inflow[j] += y
            else:
                new.cum_outflow[j] += y * dt
                discharged += y * dt

    for lid in occ:
        if net.downstream_node(lid) is None:
            f = min(demand[lid][-1], ctm.exit_bounds.get(lid, np.inf))
            outflow[lid] += f
            new.cum_outflow[lid] += f * dt
            discharged += f * dt

    before = state.total_vehicles()
    for lid, cells in occ.items():
        between = np.minimum(demand[lid][:-1], supply[lid][1:])
        delta = np.zeros_like(cells)
        delta[:-1] -= between
        delta[1:] += between
        delta[0] += inflow[lid]
        delta[-1] -= outflow[lid]
        new.occupancy[lid] = cells + delta * dt
    new.step = state.step + 1
    err = new.total_vehicles() - before - (admitted - discharged)
    return new, StepRecord(admitted, discharged, err)


@dataclass
class Metrics:
    t_s: np.ndarray
    blocked_total: np.ndarray
    queue_total: np.ndarray
    throughput: np.ndarray
    balance_errors: np.ndarray
    cumulative_balance_error: float
    min_occupancy: float
    max_jam_excess: float

    def rows(self):
        for t, b, q in zip(self.t_s, self.blocked_total, self.throughput):
            yield float(t), float(b), float(q)


def simulate(ctm: CtmNetwork, controls: dict[int, np.ndarray], throughput_link: int, state: CtmState | None = None) -> Metrics:
    """Run the whole horizon under piecewise-constant controls (one value per control step)."""
    net = ctm.network
    for lid, series in controls.items():
        if len(series) != net.n_max:
            raise ValueError(f"controls of link {lid} cover {len(series)} steps, horizon has {net.n_max}")
    allowed = set(net.boundary_in) | {l.id for l in net.links_of_kind("on-ramp")}
    stray = sorted(set(controls) - allowed)
    if stray:
        raise ValueError(f"links {stray} are not controllable entries or on-ramps")
    state = state or initial_state(ctm)
    start_total = state.total_vehicles() + sum(state.queue.values()) + sum(state.ramp_queue.values())
    t, thru, errs = [0.0], [0.0], []
    blocked, queued = [sum(state.blocked.values())], [sum(state.queue.values())]
    discharged = 0.0
    base_thru = state.cum_outflow.get(throughput_link, 0.0)
    min_occ, jam_excess = np.inf, 0.0
    spc = ctm.steps_per_control
    for k in range(ctm.n_steps):
        c = {lid: float(series[k // spc]) for lid, series in controls.items()}
        state, rec = step(ctm, state, c)
        discharged += rec.discharged
        errs.append(rec.balance_error)
        for lid, cells in state.occupancy.items():
            link = net.link(lid)
            min_occ = min(min_occ, float(cells.min()))
            jam = link.fd.rho_m * link.lanes * ctm.cell_length[lid]
            jam_excess = max(jam_excess, float((cells - jam).max()))
        t.append((k + 1) * ctm.dt)
        blocked.append(sum(state.blocked.values()))
        queued.append(sum(state.queue.values()))
        thru.append(state.cum_outflow.get(throughput_link, 0.0) - base_thru)
    end_total = state.total_vehicles() + sum(state.queue.values()) + sum(state.ramp_queue.values())
    demanded = sum(float(np.sum(s)) * net.T for s in controls.values())
    cum_err = end_total - start_total - (demanded - discharged)
    return Metrics(np.array(t), np.array(blocked), np.array(queued), np.array(thru), np.array(errs), float(cum_err), float(min_occ), jam_excess)


def exit_supply_bounds(network: Network, exits) -> dict[int, float]:
    """Discharge caps equal to the supply of the last segment of each exit link."""
    out = {}
    for lid in exits:
        link = network.link(lid)
        out[lid] = link.lanes * fd_supply(link.init_density[-1], link.fd)
    return out


def run_validation(
    ctm: CtmNetwork,
    controls_robust: dict[int, np.ndarray],
    controls_base: dict[int, np.ndarray],
    throughput_link: int = 6,
) -> tuple[Metrics, Metrics]:
    """Replay both control sets on the same (realized) network."""
    return simulate(ctm, controls_robust, throughput_link), simulate(ctm, controls_base, throughput_link)
