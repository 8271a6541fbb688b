"""Distributionally robust conversion of compatibility rows with random turning ratios.

A link leaving node ``z`` receives ``q_in(i, l) = sum_r P(l, r) q_out(i, r)``
with the ratios ``P(l, .)`` random (mean ``P^z``, covariance ``Gamma^z``).
Substituting this into a compatibility row gives an affine inequality with
random coefficients, and requiring it with probability ``1 - alpha`` under
every distribution with those two moments is equivalent to the cone
constraint ``kappa * ||F x|| + d . x <= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .compat import Row, build_link_constraints, symbolic_state
from .expr import AffineExpr, VarIndex, cumulative_form
from .network import LinkSpec, Network, NodeSpec

EIG_CLIP = 1e-12


def kappa(alpha: float) -> float:
    """Safety factor ``sqrt((1 - alpha) / alpha)`` for risk level ``alpha`` in (0, 0.5)."""
    if not (0.0 < alpha < 0.5):
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")
    return math.sqrt(1.0 / alpha - 1.0)


def psd_sqrt(cov: np.ndarray, clip: float = EIG_CLIP) -> np.ndarray:
    """Symmetric square root of a PSD matrix, clipping round-off negative eigenvalues."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max(initial=0.0))):
        raise ValueError("covariance is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -clip * scale:
        raise ValueError(f"covariance has negative eigenvalue {vals.min():.3g}")
    vals = np.where(vals < clip * scale, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


# substituted variable kind -> the matching kind on the incoming links
SUBSTITUTE = {"inflow": "outflow", "cum_inflow": "cum_outflow"}


@dataclass
class SubstitutionBlock:
    """Variables of ``in_link`` (with row coefficients) that replaced the random inflow terms."""

    in_link: int
    sources: tuple[VarIndex, ...]
    coefs: tuple[float, ...]


@dataclass
class SocConstraint:
    """``kappa * ||factor @ x|| + mean @ x <= 0`` over ``variables``.

    ``variables`` ends with ``None`` standing for the constant 1, so the
    last entry of ``mean`` is the row's constant. ``factor`` has one row per
    independent random direction; its last column is zero.
    """

    variables: list
    mean: np.ndarray
    factor: np.ndarray
    kappa: float
    label: str = ""
    node: int | None = None
    out_link: int | None = None
    blocks: list[SubstitutionBlock] = field(default_factory=list)
    direct: AffineExpr | None = None

    @property
    def cov(self) -> np.ndarray:
        return self.factor.T @ self.factor

    @property
    def size(self) -> int:
        return len(self.variables)

    def _vector(self, lookup) -> np.ndarray:
        return np.array([1.0 if v is None else lookup(v) for v in self.variables])

    def sigma(self, lookup) -> float:
        return float(np.linalg.norm(self.factor @ self._vector(lookup)))

    def value(self, lookup) -> float:
        """Left-hand side at numeric variable values (``<= 0`` means satisfied)."""
        x = self._vector(lookup)
        return self.kappa * float(np.linalg.norm(self.factor @ x)) + float(self.mean @ x)

    def mean_expr(self) -> AffineExpr:
        return _vector_expr(self.variables, self.mean)

    def scaled_factor_exprs(self) -> list[AffineExpr]:
        """Affine rows of ``kappa * factor @ x``."""
        return [_vector_expr(self.variables, self.kappa * row) for row in self.factor]

    def is_linear(self) -> bool:
        return self.kappa == 0.0 or not np.any(self.factor)


def _vector_expr(variables, coefs) -> AffineExpr:
    terms: dict[VarIndex, float] = {}
    const = 0.0
    for v, c in zip(variables, coefs):
        if v is None:
            const += float(c)
        elif c != 0.0:
            terms[v] = terms.get(v, 0.0) + float(c)
    return AffineExpr(terms, const)


def chance_to_soc(mean, cov, alpha: float, variables: list | None = None, label: str = "") -> SocConstraint:
    """Cone form of ``P(a . x <= 0) >= 1 - alpha`` for all ``a`` with the given moments."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise ValueError("mean and covariance sizes differ")
    factor = psd_sqrt(cov)
    keep = np.abs(factor).max(axis=1) > 0.0 if factor.size else np.zeros(0, bool)
    variables = list(variables) if variables is not None else list(range(mean.size))
    return SocConstraint(variables, mean, factor[keep], kappa(alpha), label)


def expand_covariance(gamma, weights, n_trailing: int = 1) -> np.ndarray:
    """Covariance of ``x`` slots laid out as one block per incoming link.

    ``weights[r]`` holds the coefficients multiplying the random ratio of
    incoming link ``r`` in its block; block ``(r, r')`` equals
    ``gamma[r, r'] * outer(weights[r], weights[r'])``. ``n_trailing`` zero
    rows/columns are appended for direct variables and the constant slot.
    """
    gamma = np.asarray(gamma, dtype=float)
    blocks = [np.asarray(w, dtype=float) for w in weights]
    if gamma.shape != (len(blocks), len(blocks)):
        raise ValueError("gamma size does not match the number of blocks")
    sizes = [b.size for b in blocks]
    total = sum(sizes) + n_trailing
    out = np.zeros((total, total))
    offs = np.concatenate([[0], np.cumsum(sizes)])
    for r, br in enumerate(blocks):
        for s, bs in enumerate(blocks):
            out[offs[r] : offs[r + 1], offs[s] : offs[s + 1]] = gamma[r, s] * np.outer(br, bs)
    return out


# ---------------------------------------------------------------------------
# substitution of random inflows


def substitute_inflows(
    expr: AffineExpr,
    link_id: int,
    node: NodeSpec,
    alpha: float | None,
    label: str = "",
) -> AffineExpr | SocConstraint:
    """Replace the inflow variables of ``link_id`` by the turning-ratio mix at ``node``.

    With ``alpha`` ``None`` (or zero node covariance) the mean ratios are
    used and an affine row is returned; otherwise a cone constraint.
    """
    def is_random(v: VarIndex) -> bool:
        return v.kind in SUBSTITUTE and v.link == link_id

    rand = {v: c for v, c in expr.terms.items() if is_random(v)}
    direct = AffineExpr({v: c for v, c in expr.terms.items() if not is_random(v)}, expr.const)
    if not rand:
        return expr
    slots = sorted(rand)
    a = np.array([rand[v] for v in slots])
    P_row = [node.ratio(link_id, r) for r in node.incoming]

    def sources(r):
        return tuple(VarIndex(SUBSTITUTE[v.kind], r, v.step) for v in slots)

    if alpha is None or not np.any(node.gamma):
        mixed = direct
        for r, pr in zip(node.incoming, P_row):
            if pr != 0.0:
                mixed = mixed + AffineExpr(dict(zip(sources(r), pr * a)))
        return mixed.clean()

    variables: list = []
    mean: list[float] = []
    blocks = []
    for r, pr in zip(node.incoming, P_row):
        variables.extend(sources(r))
        mean.extend(pr * a)
        blocks.append(SubstitutionBlock(r, sources(r), tuple(a)))
    direct_vars = direct.variables()
    variables.extend(direct_vars)
    mean.extend(direct.terms[v] for v in direct_vars)
    variables.append(None)
    mean.append(direct.const)

    # sigma(x)^2 = z' Gamma z with z_r = a . (outflows of r over the substituted steps)
    n_z, n_s = len(node.incoming), len(slots)
    A = np.zeros((n_z, len(variables)))
    for r in range(n_z):
        A[r, r * n_s : (r + 1) * n_s] = a
    factor = psd_sqrt(node.gamma) @ A
    factor = factor[np.abs(factor).max(axis=1) > 0.0]
    return SocConstraint(
        variables,
        np.array(mean),
        factor,
        kappa(alpha),
        label,
        node=node.id,
        out_link=link_id,
        blocks=blocks,
        direct=direct,
    )


def link_rows(
    network: Network,
    link: LinkSpec,
    alpha: float | None,
    robust_nodes=(),
    prune: bool = True,
    families=None,
    cumulative: bool = False,
) -> tuple[list[AffineExpr], list[SocConstraint], list[Row]]:
    """Compatibility rows of ``link`` with its inflow eliminated when it has an upstream node.

    Rows are converted to cones only when the upstream node is in
    ``robust_nodes``. ``cumulative`` rewrites rows through cumulative-count
    variables first, which keeps every row short. Returns (affine rows, cone rows, source rows of the cones).
    """
    rows = build_link_constraints(link, symbolic_state(link, network.T, network.n_max), prune=prune)
    if cumulative:
        for row in rows:
            row.expr = cumulative_form(row.expr, network.T)
    node = network.upstream_node(link.id)
    if node is None:
        return [r.expr for r in rows if families is None or r.family in families], [], []
    robust = alpha is not None and node.id in set(robust_nodes)
    lin, soc, src = [], [], []
    for row in rows:
        if families is not None and row.family not in families:
            continue
        out = substitute_inflows(row.expr, link.id, node, alpha if robust else None, row.label)
        if isinstance(out, SocConstraint):
            soc.append(out)
            src.append(row)
        elif not out.is_constant:
            lin.append(out)
        elif out.const > 1e-9:
            raise ValueError(f"{row.label}: infeasible after substitution")
    return lin, soc, src


def _family_rows(network: Network, link_id: int, alpha: float, family: str, prune: bool) -> list[SocConstraint]:
    link = network.link(link_id)
    node = network.upstream_node(link_id)
    if node is None:
        raise ValueError(f"link {link_id} has no upstream node")
    _, soc, _ = link_rows(network, link, alpha, robust_nodes=(node.id,), prune=prune, families={family})
    return soc


def build_soc_initial_family(network: Network, link_id: int, alpha: float, prune: bool = False) -> list[SocConstraint]:
    """Cone rows from the initial-data solutions compared at the upstream end."""
    return _family_rows(network, link_id, alpha, "initial", prune)


def build_soc_upstream_family(network: Network, link_id: int, alpha: float, prune: bool = False) -> list[SocConstraint]:
    """Cone rows from the inflow-generated solutions."""
    return _family_rows(network, link_id, alpha, "upstream", prune)


def build_soc_downstream_family(network: Network, link_id: int, alpha: float, prune: bool = False) -> list[SocConstraint]:
    """Cone rows from the outflow-generated solutions compared at the upstream end."""
    return _family_rows(network, link_id, alpha, "downstream", prune)


# ---------------------------------------------------------------------------
# sampling check


def sample_turning(node: NodeSpec, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian turning matrices (``n_samples x m x n``), clipped to [0, 1], columns renormalized.

    With two outgoing links the second row is the complement of the first.
    This is a test distribution only.
    """
    P = np.asarray(node.P, dtype=float)
    m, n = P.shape
    gamma = np.asarray(node.gamma, dtype=float)
    root = psd_sqrt(gamma)
    draws = np.empty((n_samples, m, n))
    rows = m - 1 if m == 2 else m
    for i in range(rows):
        draws[:, i, :] = P[i] + rng.standard_normal((n_samples, n)) @ root
    if m == 2:
        draws[:, 0, :] = np.clip(draws[:, 0, :], 0.0, 1.0)
        draws[:, 1, :] = 1.0 - draws[:, 0, :]
        return draws
    draws = np.clip(draws, 0.0, 1.0)
    sums = draws.sum(axis=1, keepdims=True)
    safe = np.where(sums > 0.0, sums, 1.0)
    return np.where(sums > 0.0, draws / safe, P[None])


def monte_carlo_feasibility(
    constraints: list[SocConstraint],
    lookup,
    nodes: dict[int, NodeSpec],
    n_samples: int = 10_000,
    seed: int = 0,
    tol: float = 1e-7,
) -> np.ndarray:
    """Fraction of sampled turning matrices under which each underlying affine row holds."""
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    rates = np.empty(len(constraints))
    cache: dict[int, np.ndarray] = {}
    for idx, con in enumerate(constraints):
        node = nodes[con.node]
        if node.id not in cache:
            cache[node.id] = sample_turning(node, n_samples, np.random.default_rng([seed, node.id]))
        draws = cache[node.id]
        j = node.outgoing.index(con.out_link)
        col = {r: c for c, r in enumerate(node.incoming)}
        s = np.zeros(len(node.incoming))
        for b in con.blocks:
            s[col[b.in_link]] = sum(a * lookup(v) for v, a in zip(b.sources, b.coefs))
        lhs = draws[:, j, :] @ s + con.direct.evaluate(lookup)
        scale = max(1.0, float(np.abs(s).sum()), abs(con.direct.const))
        rates[idx] = float(np.mean(lhs <= tol * scale))
    return rates
