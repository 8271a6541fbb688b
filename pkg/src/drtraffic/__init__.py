"""Distributionally robust inflow control for road networks with uncertain turning ratios."""

from .network import FundamentalDiagram, LinkSpec, Network, NodeSpec, validate
from .program import ConicProgram, SolveResult, solve
from .robust import chance_to_soc, kappa
from .scenarios import Scenario, builtin, load_scenario

__all__ = [
    "ConicProgram",
    "FundamentalDiagram",
    "LinkSpec",
    "Network",
    "NodeSpec",
    "Scenario",
    "SolveResult",
    "builtin",
    "chance_to_soc",
    "kappa",
    "load_scenario",
    "solve",
    "validate",
]
