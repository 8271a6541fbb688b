"""Command-line front end: ``drtraffic validate | solve | simulate``.

Exit codes: 0 success, 1 domain error, 2 I/O error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import ctm as ctm_mod
from .compat import InconsistentParameters
from .network import validate
from .program import control_links, control_series, link_series, solve
from .robust import monte_carlo_feasibility
from .scenarios import BUILTIN_NAMES, Scenario, load_scenario

EXIT_OK, EXIT_DOMAIN, EXIT_IO, EXIT_SOLVER = 0, 1, 2, 3

CONTROL_HEADER = ["alpha", "time_step", "link_id", "q_in_veh_s", "q_out_veh_s"]
OBJECTIVE_HEADER = ["alpha", "status", "objective"]
MC_HEADER = ["alpha", "row", "node", "out_link", "lhs", "satisfaction_rate", "target"]

# CTM grids per model: (time step s, cell length m)
CTM_GRID = {"freeway": (ctm_mod.FREEWAY_DT, ctm_mod.FREEWAY_CELL), "urban": (4.0, 64.0)}


class SolverFailure(RuntimeError):
    pass


class MalformedInput(OSError):
    pass


def _load(ref: str) -> Scenario:
    """Load a scenario; a file that cannot be parsed counts as an I/O error."""
    try:
        return load_scenario(ref)
    except (KeyError, TypeError, IndexError, json.JSONDecodeError) as exc:
        raise MalformedInput(f"{ref}: cannot parse scenario ({exc})") from exc


@dataclass
class RunManifest:
    scenario: str
    command: str
    parameters: dict
    outputs: list[str] = field(default_factory=list)
    version: str = ""

    def write(self, path: Path) -> None:
        doc = {
            "scenario": self.scenario,
            "command": self.command,
            "parameters": self.parameters,
            "outputs": sorted(self.outputs),
            "version": self.version,
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _fmt(x: float) -> str:
    return repr(float(x))


def _alpha_list(text: str | None) -> list[float] | None:
    if text is None:
        return None
    return [float(a) for a in text.replace(",", " ").split()]


def _id_list(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    return tuple(int(a) for a in text.replace(",", " ").split())


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# validate ---------------------------------------------------------------------


def cmd_validate(args) -> int:
    sc = _load(args.scenario)
    rep = validate(sc.network)
    for line in rep.lines():
        print(line)
    print("ok" if rep.ok else f"{len(rep.errors)} error(s)")
    return EXIT_OK if rep.ok else EXIT_DOMAIN


# solve ------------------------------------------------------------------------


@dataclass
class _Job:
    scenario: Scenario
    label: str
    alpha: float | None
    robust_nodes: tuple[int, ...] | None
    overrides: dict
    backend: str
    mc_samples: int
    seed: int


def _run_job(job: _Job) -> dict:
    sc = job.scenario
    prog = sc.program(job.alpha, job.robust_nodes, **job.overrides)
    res = solve(prog, backend=job.backend)
    out = {"label": job.label, "status": res.status, "objective": res.objective, "rows": [], "mc": []}
    if not res.ok:
        return out
    net = sc.network
    controls = control_series(res, net)
    for lid in control_links(net):
        q_out = link_series(res, net, lid, "outflow")
        for i in range(net.n_max):
            out["rows"].append([job.label, i + 1, lid, _fmt(controls[lid][i]), _fmt(q_out[i])])
    if job.mc_samples and job.alpha is not None:
        look = res.value
        active = [c for c in prog.soc if not c.is_linear() and c.value(look) >= -1e-5]
        nodes = {nd.id: nd for nd in net.nodes}
        rates = monte_carlo_feasibility(active, look, nodes, job.mc_samples, seed=job.seed) if active else []
        for con, rate in zip(active, rates):
            out["mc"].append([job.label, con.label, con.node, con.out_link, _fmt(con.value(look)), _fmt(rate), _fmt(1.0 - job.alpha)])
    return out


def cmd_solve(args) -> int:
    sc = _load(args.scenario)
    rep = validate(sc.network)
    if not rep.ok:
        for line in rep.lines():
            print(line, file=sys.stderr)
        return EXIT_DOMAIN
    if args.zero_cov:
        sc = sc.with_zero_covariance()
    overrides = {}
    if args.onramp_bound_mode is not None:
        if sc.model != "freeway":
            raise ValueError("--onramp-bound-mode applies to freeway scenarios only")
        overrides["onramp_bound_mode"] = args.onramp_bound_mode
    if args.omega is not None:
        if sc.model != "urban":
            raise ValueError("--omega applies to urban scenarios only")
        overrides["omega"] = args.omega
    nodes = _id_list(args.robust_nodes)
    alphas = _alpha_list(args.alpha) or list(sc.alphas)
    jobs = []
    if args.mode == "det" or args.with_base:
        jobs.append(_Job(sc, "base", None, nodes, overrides, args.backend, 0, args.seed))
    if args.mode == "robust":
        jobs += [_Job(sc, repr(a), a, nodes, overrides, args.backend, args.mc_samples, args.seed) for a in alphas]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]

    failed = [r for r in results if r["status"] != "optimal"]
    written: list[Path] = []
    try:
        paths = {"controls": out_dir / "controls.csv", "objective": out_dir / "objective.csv"}
        if failed:
            for r in failed:
                print(f"alpha={r['label']}: solver status {r['status']}", file=sys.stderr)
            raise SolverFailure
        _write_csv(paths["controls"], CONTROL_HEADER, [row for r in results for row in r["rows"]])
        written.append(paths["controls"])
        _write_csv(paths["objective"], OBJECTIVE_HEADER, [[r["label"], r["status"], _fmt(r["objective"])] for r in results])
        written.append(paths["objective"])
        if args.mc_samples:
            paths["mc"] = out_dir / "montecarlo.csv"
            _write_csv(paths["mc"], MC_HEADER, [row for r in results for row in r["mc"]])
            written.append(paths["mc"])
        params = {
            "mode": args.mode,
            "alpha": alphas if args.mode == "robust" else [],
            "with_base": bool(args.with_base),
            "robust_nodes": list(nodes if nodes is not None else sc.robust_nodes),
            "onramp_bound_mode": args.onramp_bound_mode,
            "omega": args.omega,
            "zero_cov": bool(args.zero_cov),
            "backend": args.backend,
            "seed": args.seed,
            "mc_samples": args.mc_samples,
        }
        manifest = RunManifest(args.scenario, "solve", params, [p.name for p in written], _version())
        manifest.write(out_dir / "manifest.json")
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    for r in results:
        print(f"alpha={r['label']} status={r['status']} objective={r['objective']:.6f}")
    return EXIT_OK


# simulate ---------------------------------------------------------------------


def read_controls(path: Path, scenario: Scenario) -> dict[str, dict[int, np.ndarray]]:
    """Controls CSV grouped by alpha label; every series must cover the horizon."""
    net = scenario.network
    data: dict[str, dict[int, dict[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CONTROL_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            series = data.setdefault(row["alpha"], {}).setdefault(int(row["link_id"]), {})
            series[int(row["time_step"])] = float(row["q_in_veh_s"])
    out = {}
    for label, links in data.items():
        out[label] = {}
        for lid, series in links.items():
            if sorted(series) != list(range(1, net.n_max + 1)):
                raise ValueError(f"controls of link {lid} (alpha={label}) do not cover steps 1..{net.n_max}")
            out[label][lid] = np.array([series[i] for i in range(1, net.n_max + 1)])
    return out


def _realized(sc: Scenario, choice: str):
    if choice == "mean":
        return sc.network
    if choice == "realized":
        return sc.realized_network()
    with open(choice, encoding="utf-8") as fh:
        doc = json.load(fh)
    nodes = []
    for nd in sc.network.nodes:
        if str(nd.id) in doc:
            P = np.asarray(doc[str(nd.id)], dtype=float).reshape(len(nd.outgoing), len(nd.incoming))
            nd = nd.with_P(P)
        nodes.append(nd)
    return sc.network.replace_nodes(nodes)


def _exit_bounds(sc: Scenario, network) -> dict[int, float]:
    exits = [l.id for l in network.links_of_kind("outgoing-boundary")]
    if sc.model == "freeway":
        return ctm_mod.exit_supply_bounds(network, exits)
    frac = sc.urban.exit_fraction if sc.urban else 1.0
    return {e: frac * network.link(e).capacity for e in exits}


def cmd_simulate(args) -> int:
    sc = _load(args.scenario)
    controls = read_controls(Path(args.controls), sc)
    if args.alpha is not None:
        keep = set(args.alpha.replace(",", " ").split())
        controls = {k: v for k, v in controls.items() if k in keep or _same_alpha(k, keep)}
        if not controls:
            raise ValueError(f"no control set labelled {sorted(keep)}")
    network = _realized(sc, args.realized_p)
    dt, cell = CTM_GRID[sc.model]
    signals = sc.urban.signals if sc.urban else None
    grid = ctm_mod.discretize(
        network,
        dt=args.dt or dt,
        cell_length=args.cell_length or cell,
        exit_bounds=_exit_bounds(sc, network),
        merge=args.merge,
        signals=signals,
        supply_cap=not args.no_supply_cap,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["t_s", "blocked_total_veh", f"throughput_link{args.throughput_link}_veh"]
    written: list[Path] = []
    summary = []
    try:
        for label in sorted(controls):
            m = ctm_mod.simulate(grid, controls[label], args.throughput_link)
            path = out_dir / f"metrics_{label}.csv"
            _write_csv(path, header, [[_fmt(t), _fmt(b), _fmt(q)] for t, b, q in m.rows()])
            written.append(path)
            summary.append([label, _fmt(m.blocked_total[-1]), _fmt(m.throughput[-1]), _fmt(np.abs(m.balance_errors).max(initial=0.0)), _fmt(m.cumulative_balance_error)])
            print(f"alpha={label} blocked={m.blocked_total[-1]:.4f} veh throughput={m.throughput[-1]:.4f} veh")
        path = out_dir / "summary.csv"
        _write_csv(path, ["alpha", "blocked_total_veh", "throughput_veh", "max_step_balance_error", "cumulative_balance_error"], summary)
        written.append(path)
        params = {
            "controls": str(args.controls),
            "realized_p": args.realized_p,
            "dt": grid.dt,
            "cell_length": args.cell_length or cell,
            "merge": args.merge,
            "supply_cap": grid.supply_cap,
            "throughput_link": args.throughput_link,
            "seed": args.seed,
        }
        RunManifest(args.scenario, "simulate", params, [p.name for p in written], _version()).write(out_dir / "manifest.json")
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    return EXIT_OK


def _same_alpha(label: str, keep: set[str]) -> bool:
    try:
        return any(float(label) == float(k) for k in keep if k != "base")
    except ValueError:
        return False


# entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drtraffic", description="Robust inflow control for road networks with uncertain turning ratios.")
    sub = p.add_subparsers(dest="command", required=True)
    scen_help = f"built-in name ({', '.join(BUILTIN_NAMES)}) or scenario JSON path"

    v = sub.add_parser("validate", help="check a scenario for structural and numeric problems")
    v.add_argument("scenario", nargs="?", help=scen_help)
    v.add_argument("--scenario", dest="scenario_opt", help=scen_help)
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve", help="compute optimal inflow controls")
    s.add_argument("--scenario", required=True, help=scen_help)
    s.add_argument("--mode", choices=("det", "robust"), default="robust")
    s.add_argument("--alpha", help="risk levels, e.g. '0.1,0.05' (confidence is 1 - alpha)")
    s.add_argument("--with-base", action="store_true", help="also solve the deterministic model in robust mode")
    s.add_argument("--robust-nodes", help="node ids with uncertain turning ratios")
    s.add_argument("--onramp-bound-mode", choices=("cross", "local"))
    s.add_argument("--omega", type=float, help="smoothing weight (urban scenarios)")
    s.add_argument("--zero-cov", action="store_true", help="replace every covariance by zero")
    s.add_argument("--backend", default="clarabel", choices=("clarabel", "cvxopt"))
    s.add_argument("--mc-samples", type=int, default=0, help="Monte Carlo check of active robust rows")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="replay controls in the cell transmission model")
    m.add_argument("--scenario", required=True, help=scen_help)
    m.add_argument("--controls", required=True, help="controls.csv written by 'solve'")
    m.add_argument("--alpha", help="labels to replay (default: all)")
    m.add_argument("--realized-p", default="realized", help="'mean', 'realized' or JSON file {node: matrix}")
    m.add_argument("--throughput-link", type=int, default=6)
    m.add_argument("--merge", choices=("priority", "proportional"), default="priority")
    m.add_argument("--no-supply-cap", action="store_true", help="let congested cells receive above capacity")
    m.add_argument("--dt", type=float)
    m.add_argument("--cell-length", type=float)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_simulate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "validate":
        args.scenario = args.scenario_opt or args.scenario
        if not args.scenario:
            parser.error("validate needs a scenario")
    try:
        return args.func(args)
    except SolverFailure:
        return EXIT_SOLVER
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, InconsistentParameters) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
