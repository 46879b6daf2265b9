"""Weighted tensors β, σ and the linear metrizability system.

β_ij = |det g|^(-2/3) g_ij has projective weight 4/3, σ^ij = |det g|^(1/3) g^ij
weight 2/3.  The inverse map is g = β / (det β)^2: from the definition,
det β = |det g|^(-4/3) det g, hence |det β| = |det g|^(-1/3) and
g = |det g|^(2/3) β = β / (det β)^2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .expr import ZERO, Expr, absolute, add, evaluate, mul, simplify
from .geometry import Domain, Metric2, ProjectiveConnection, _check_nondegenerate, set_conformal_form

BETA_WEIGHT = Fraction(4, 3)
SIGMA_WEIGHT = Fraction(2, 3)


class WeightMismatchError(ValueError):
    pass


class NonMetrizablePointError(ValueError):
    pass


@dataclass(frozen=True)
class WeightedTensor:
    b11: Expr
    b12: Expr
    b22: Expr
    weight: Fraction = BETA_WEIGHT
    # closed form of the determinant, when known; avoids cancellation
    det_hint: Expr | None = field(default=None, compare=False, repr=False)

    def components(self):
        return (self.b11, self.b12, self.b22)

    def matrix(self):
        return ((self.b11, self.b12), (self.b12, self.b22))

    def det(self) -> Expr:
        if self.det_hint is not None:
            return self.det_hint
        return self.b11 * self.b22 - self.b12 * self.b12

    def scaled(self, s):
        return WeightedTensor(s * self.b11, s * self.b12, s * self.b22, self.weight)

    def adjugate(self):
        return WeightedTensor(self.b22, -self.b12, self.b11, self.weight)

    def at(self, x, y, bindings=None):
        b = {**(bindings or {}), "x": x, "y": y}
        shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
        return np.stack([np.broadcast_to(evaluate(c, b), shape) for c in self.components()])


def beta_of_metric(g: Metric2) -> WeightedTensor:
    _check_nondegenerate(g)
    d = g.det()
    f = absolute(d) ** (-2.0 / 3.0)
    # det β = |det g|^(-4/3) det g
    return WeightedTensor(*(simplify(f * c) for c in g.components()), weight=BETA_WEIGHT,
                          det_hint=simplify(f * f * d))


def sigma_of_metric(g: Metric2) -> WeightedTensor:
    _check_nondegenerate(g)
    f = absolute(g.det()) ** (1.0 / 3.0)
    return WeightedTensor(*(simplify(f * c) for c in g.inverse()), weight=SIGMA_WEIGHT)


def metric_of_beta(b: WeightedTensor, domain: Domain | None = None, signature="unspecified") -> Metric2:
    if b.weight != BETA_WEIGHT:
        raise WeightMismatchError(f"expected weight 4/3, got {b.weight}")
    d = simplify(b.det())
    if d == ZERO:
        raise NonMetrizablePointError("det β vanishes identically; not a metric")
    s = d ** -2
    g = Metric2(*(s * c for c in b.components()), domain=domain, signature=signature)
    # det g = (det β)^-3 and g^-1 = det β · adj β, known in closed form
    g._cache["det"] = d ** -3
    g._cache["inv"] = (d * b.b22, -(d * b.b12), d * b.b11)
    set_conformal_form(g, s, b.components(), d)
    return g


def metrizability_terms(b: WeightedTensor, f: ProjectiveConnection):
    """The four equations of the linear system for β, as lists of terms."""
    if b.weight != BETA_WEIGHT:
        raise WeightMismatchError(f"expected weight 4/3, got {b.weight}")
    from .expr import diff
    b11, b12, b22 = b.components()
    f0, f1, f2, f3 = f.coefficients()
    dx = lambda e: diff(e, "x")  # noqa: E731
    dy = lambda e: diff(e, "y")  # noqa: E731
    return (
        [dx(b11), -(2 / 3) * f1 * b11, 2 * f0 * b12],
        [dy(b11), 2 * dx(b12), -(4 / 3) * f2 * b11, (2 / 3) * f1 * b12, 2 * f0 * b22],
        [2 * dy(b12), dx(b22), -2 * f3 * b11, -(2 / 3) * f2 * b12, (4 / 3) * f1 * b22],
        [dy(b22), -2 * f3 * b12, (2 / 3) * f2 * b22],
    )


def metrizability_residuals(b: WeightedTensor, f: ProjectiveConnection):
    """The four left-hand sides of the linear system for β."""
    return tuple(add(*t) for t in metrizability_terms(b, f))


def metrizability_relative(b: WeightedTensor, f: ProjectiveConnection, x, y, bindings=None):
    """max |residual| / (1 + Σ|terms|) over the four equations and the points."""
    bind = {**(bindings or {}), "x": x, "y": y}
    worst = 0.0
    for terms in metrizability_terms(b, f):
        vals = [np.broadcast_to(evaluate(t, bind), np.shape(x)) for t in terms]
        worst = max(worst, float(np.max(np.abs(sum(vals)) / (1 + sum(np.abs(v) for v in vals)))))
    return worst


def pencil(bases: Sequence[WeightedTensor], t: Sequence) -> WeightedTensor:
    """Componentwise Σ t_i b_i; coefficients may be numbers or expressions."""
    if len(bases) != len(t):
        raise ValueError("need one coefficient per basis element")
    w = {b.weight for b in bases}
    if len(w) != 1:
        raise WeightMismatchError(f"mixed weights {sorted(w)}")
    comps = []
    for k in range(3):
        terms = [mul(ti, b.components()[k]) for ti, b in zip(t, bases)
                 if not (np.isscalar(ti) and ti == 0)]
        comps.append(add(*terms) if terms else ZERO)
    return WeightedTensor(*comps, weight=bases[0].weight)


def admissible_cells(b: WeightedTensor, domain: Domain, n=(40, 40), bindings=None):
    """Grid cells of the window on which det b keeps one sign.

    Returns (mask, xedges, yedges); mask[i, j] refers to the cell
    [x_i, x_{i+1}] x [y_j, y_{j+1}].
    """
    xe = np.linspace(*domain.xlim, n[0] + 1)
    ye = np.linspace(*domain.ylim, n[1] + 1)
    X, Y = np.meshgrid(xe, ye, indexing="ij")
    with np.errstate(all="ignore"):
        d = np.broadcast_to(evaluate(b.det(), {**(bindings or {}), "x": X, "y": Y}), X.shape)
    s = np.sign(d)
    corners = np.stack([s[:-1, :-1], s[1:, :-1], s[:-1, 1:], s[1:, 1:]])
    mask = np.all(corners == corners[0], axis=0) & (corners[0] != 0)
    inside = domain.contains(0.5 * (X[:-1, :-1] + X[1:, 1:]), 0.5 * (Y[:-1, :-1] + Y[1:, 1:]), bindings)
    return mask & inside, xe, ye
