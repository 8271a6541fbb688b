"""Sparse affine expressions over indexed flow variables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Union

KINDS = ("inflow", "outflow", "slack_y", "cum_inflow", "cum_outflow")

# rate kind -> cumulative-count kind (``T * sum of the rate over steps 1..i``)
CUMULATIVE = {"inflow": "cum_inflow", "outflow": "cum_outflow"}


@dataclass(frozen=True, order=True)
class VarIndex:
    """One scalar decision variable: ``kind`` of ``link`` at time ``step`` (1-based)."""

    kind: str
    link: int
    step: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown variable kind {self.kind!r}")

    def __str__(self):
        return f"{self.kind}[{self.link},{self.step}]"


Number = Union[int, float]


class AffineExpr:
    """``sum(coef * var) + const``.

    The constant may be ``math.inf``; such an expression marks a vacuous
    constraint row and is never emitted into a program.
    """

    __slots__ = ("terms", "const")

    def __init__(self, terms: Mapping[VarIndex, float] | None = None, const: float = 0.0):
        self.terms: dict[VarIndex, float] = {v: float(c) for v, c in (terms or {}).items() if c != 0.0}
        self.const = float(const)

    @classmethod
    def var(cls, v: VarIndex, coef: float = 1.0) -> "AffineExpr":
        return cls({v: coef})

    # arithmetic -----------------------------------------------------------
    def _combine(self, other, sign: float) -> "AffineExpr":
        out = AffineExpr.__new__(AffineExpr)
        out.terms = dict(self.terms)
        if isinstance(other, AffineExpr):
            for v, c in other.terms.items():
                nc = out.terms.get(v, 0.0) + sign * c
                if nc == 0.0:
                    out.terms.pop(v, None)
                else:
                    out.terms[v] = nc
            out.const = self.const + sign * other.const
        else:
            out.const = self.const + sign * float(other)
        return out

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return (-self)._combine(other, 1.0)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, k: Number) -> "AffineExpr":
        if isinstance(k, AffineExpr):
            raise TypeError("product of two affine expressions is not affine")
        k = float(k)
        out = AffineExpr.__new__(AffineExpr)
        out.terms = {v: c * k for v, c in self.terms.items()} if k != 0.0 else {}
        out.const = self.const * k if k != 0.0 else 0.0
        return out

    __rmul__ = __mul__

    # queries ----------------------------------------------------------------
    @property
    def is_constant(self) -> bool:
        return not self.terms

    @property
    def is_vacuous(self) -> bool:
        return math.isinf(self.const) and self.const > 0

    def same_terms(self, other: "AffineExpr", tol: float = 1e-9) -> bool:
        keys = set(self.terms) | set(other.terms)
        scale = max([1.0] + [abs(c) for c in self.terms.values()])
        return all(abs(self.terms.get(k, 0.0) - other.terms.get(k, 0.0)) <= tol * scale for k in keys)

    def clean(self, rtol: float = 1e-12) -> "AffineExpr":
        """Drop coefficients that are round-off relative to the largest one."""
        if not self.terms:
            return self
        big = max(abs(c) for c in self.terms.values())
        out = AffineExpr.__new__(AffineExpr)
        out.terms = {v: c for v, c in self.terms.items() if abs(c) > rtol * big}
        out.const = self.const
        return out

    def evaluate(self, values: Mapping[VarIndex, float] | Callable[[VarIndex], float]) -> float:
        get = values if callable(values) else values.__getitem__
        return self.const + sum(c * get(v) for v, c in self.terms.items())

    def variables(self) -> list[VarIndex]:
        return sorted(self.terms)

    def __repr__(self):
        body = " + ".join(f"{c:g}*{v}" for v, c in sorted(self.terms.items()))
        return f"AffineExpr({body or '0'} + {self.const:g})"

    def __eq__(self, other):
        if not isinstance(other, AffineExpr):
            return NotImplemented
        return self.terms == other.terms and self.const == other.const

    __hash__ = None  # mutable-looking value type


def affine_sum(items: Iterable) -> AffineExpr | float:
    """Sum that stays a float when every item is numeric."""
    acc: AffineExpr | float = 0.0
    for it in items:
        acc = acc + it if isinstance(acc, AffineExpr) or not isinstance(it, AffineExpr) else it + acc
    return acc


def cumulative_form(expr: AffineExpr, T: float) -> AffineExpr:
    """Rewrite rate terms through cumulative counts where that needs fewer terms.

    With ``Q(i) = T * sum_{j<=i} q(j)`` a rate combination ``sum_i c_i q(i)``
    equals ``sum_i Q(i) (c_i - c_{i+1}) / T``; prefix sums collapse to one
    or two cumulative terms. Each (kind, link) group is rewritten only when
    that shortens it.
    """
    groups: dict[tuple[str, int], dict[int, float]] = {}
    terms: dict[VarIndex, float] = {}
    for v, c in expr.terms.items():
        if v.kind in CUMULATIVE:
            groups.setdefault((v.kind, v.link), {})[v.step] = c
        else:
            terms[v] = terms.get(v, 0.0) + c
    for (kind, link), coefs in groups.items():
        top = max(coefs)
        cum = {}
        for i in range(1, top + 1):
            d = (coefs.get(i, 0.0) - coefs.get(i + 1, 0.0)) / T
            if abs(d) > 1e-12 * max(abs(c) for c in coefs.values()) / T:
                cum[i] = d
        if len(cum) < len(coefs):
            for i, d in cum.items():
                v = VarIndex(CUMULATIVE[kind], link, i)
                terms[v] = terms.get(v, 0.0) + d
        else:
            for i, c in coefs.items():
                v = VarIndex(kind, link, i)
                terms[v] = terms.get(v, 0.0) + c
    return AffineExpr(terms, expr.const)
