"""Natural Hamiltonians, potentials and their transport along a projective class."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import integrate

from .expr import (P1, P2, ZERO, DomainError, Expr, Opaque, absolute, add, diff,
                   evaluate, opaque, simplify)
from .geometry import Domain, Metric2, _check_nondegenerate, lower
from .metrization import BETA_WEIGHT, WeightedTensor, metric_of_beta, pencil

QUAD_TOL = 1e-11
PATH_TOL = 1e-9


class ClosednessError(ValueError):
    pass


def _bcast(e, b, shape):
    return np.broadcast_to(evaluate(e, b), shape)


@dataclass
class NaturalHamiltonian:
    """H = g^ij p_i p_j + V."""

    g: Metric2
    V: Expr
    parameters: dict = field(default_factory=dict)

    @property
    def kinetic(self):
        return self.g.inverse()

    @property
    def expr(self) -> Expr:
        a, b, c = self.g.inverse()
        return a * P1 * P1 + 2 * b * P1 * P2 + c * P2 * P2 + self.V


@dataclass(frozen=True)
class ProjectivePotential:
    """Weighted vector field U = |det g|^(2/3) grad_g V (weight 4/3)."""

    U1: Expr
    U2: Expr
    weight: Fraction = BETA_WEIGHT

    def components(self):
        return (self.U1, self.U2)

    def scaled(self, s):
        return ProjectivePotential(s * self.U1, s * self.U2, self.weight)

    def at(self, x, y, bindings=None):
        b = {**(bindings or {}), "x": x, "y": y}
        shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
        return np.stack([_bcast(u, b, shape) for u in self.components()])


def gradient(V: Expr):
    return (diff(V, "x"), diff(V, "y"))


def projective_potential(g: Metric2, V: Expr) -> ProjectivePotential:
    _check_nondegenerate(g)
    w = absolute(g.det()) ** (2.0 / 3.0)
    a, b, c = g.inverse()
    Vx, Vy = gradient(V)
    return ProjectivePotential(w * (a * Vx + b * Vy), w * (b * Vx + c * Vy))


def bertrand_darboux_residual(g: Metric2, K: Sequence[Expr], V: Expr) -> Expr:
    """∂1(K_2^b V_b) − ∂2(K_1^b V_b) with K covariant (K11, K12, K22)."""
    _check_nondegenerate(g)
    Km = ((K[0], K[1]), (K[1], K[2]))
    Gi = g.inverse_matrix()
    dV = gradient(V)
    # mixed tensor K_i^b = K_ia g^ab
    omega = [add(*(Km[i][a] * Gi[a][bb] * dV[bb] for a in range(2) for bb in range(2)))
             for i in range(2)]
    return diff(omega[1], "x") - diff(omega[0], "y")


def transport_potential_oneform(b: WeightedTensor, U: ProjectivePotential):
    """dV_i = b_ij U^j."""
    (b11, b12), (_, b22) = b.matrix()
    return (b11 * U.U1 + b12 * U.U2, b12 * U.U1 + b22 * U.U2)


def invariant_bd_residual(b: WeightedTensor, U: ProjectivePotential) -> Expr:
    """½[U^i (∂2 b_i1 − ∂1 b_i2) − (∂1 U^i b_2i − ∂2 U^i b_1i)]."""
    B = b.matrix()
    Us = U.components()
    terms = []
    for i in range(2):
        terms.append(Us[i] * (diff(B[i][0], "y") - diff(B[i][1], "x")))
        terms.append(-(diff(Us[i], "x") * B[1][i] - diff(Us[i], "y") * B[0][i]))
    return 0.5 * add(*terms)


# ------------------------------------------------------------ quadrature

def _segment_integrand(dV, x0, y0, x, y, bindings):
    dx, dy = x - x0, y - y0
    shape = np.shape(dx)

    def f(s):
        b = {**bindings, "x": x0 + s * dx, "y": y0 + s * dy}
        try:
            w1 = _bcast(dV[0], b, shape)
            w2 = _bcast(dV[1], b, shape)
        except DomainError as ex:
            raise DomainError("segment crosses a singular locus: " + str(ex)) from ex
        out = w1 * dx + w2 * dy
        if not np.all(np.isfinite(out)):
            raise DomainError("segment crosses a singular locus (non-finite integrand)")
        return out

    return f


def line_integral(dV, start, end, bindings=None, tol=QUAD_TOL):
    """∫ dV along the straight segment(s) start → end (vectorised over end)."""
    bindings = dict(bindings or {})
    x0, y0 = (float(v) for v in start)
    x = np.asarray(end[0], float)
    y = np.asarray(end[1], float)
    f = _segment_integrand(dV, x0, y0, x, y, bindings)
    if x.ndim == 0:
        val, err = integrate.quad(lambda s: float(f(s)), 0.0, 1.0, epsabs=tol, epsrel=0.0, limit=200)
    else:
        val, err = integrate.quad_vec(f, 0.0, 1.0, epsabs=tol, epsrel=0.0, norm="max", limit=400)
    if not np.all(np.isfinite(val)):
        raise DomainError("quadrature did not converge")
    return val


def scalar_potential(dV, basepoint, point, bindings=None, tol=QUAD_TOL):
    """V(point) − V(basepoint) for a closed 1-form dV."""
    return line_integral(dV, basepoint, point, bindings, tol)


def path_gap(dV, basepoint, point, bindings=None):
    """|direct − L-path| where the L-path moves in x first, then in y."""
    direct = scalar_potential(dV, basepoint, point, bindings)
    corner = (point[0], basepoint[1])
    leg = scalar_potential(dV, basepoint, corner, bindings) + scalar_potential(dV, corner, point, bindings)
    return np.abs(direct - leg)


def closedness_residual(dW, x, y, bindings=None):
    """|∂x W_2 − ∂y W_1| relative to the size of the mixed partials."""
    b = {**(bindings or {}), "x": x, "y": y}
    shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
    a = _bcast(diff(dW[1], "x"), b, shape)
    c = _bcast(diff(dW[0], "y"), b, shape)
    return float(np.max(np.abs(a - c) / (1.0 + np.abs(a) + np.abs(c))))


class _QuadraturePotential:
    """Callable W(x, y) = ∫_base dW, memoised on the last inputs."""

    def __init__(self, dW, basepoint, bindings):
        self.dW = dW
        self.basepoint = tuple(float(v) for v in basepoint)
        self.bindings = dict(bindings or {})
        self._last = None

    def __call__(self, vals):
        x = np.asarray(vals["x"], float)
        y = np.asarray(vals["y"], float)
        extra = {k: v for k, v in vals.items() if k not in ("x", "y", "p1", "p2")}
        key = (x.tobytes(), y.tobytes(), x.shape,
               tuple(sorted((k, np.asarray(v).tobytes()) for k, v in extra.items())))
        if self._last is not None and self._last[0] == key:
            return self._last[1]
        shape = np.broadcast(x, y).shape
        xb, yb = np.broadcast_to(x, shape), np.broadcast_to(y, shape)
        val = line_integral(self.dW, self.basepoint, (xb, yb), {**self.bindings, **extra})
        self._last = (key, val)
        return val


@dataclass
class QuadraticIntegral:
    """I = K^ij p_i p_j + W.

    W is reconstructed from dW by quadrature unless a closed form
    ``W_expr`` is supplied.
    """

    K: tuple
    dW: tuple
    basepoint: tuple = (1.0, 1.0)
    bindings: dict = field(default_factory=dict)
    name: str = "W"
    W_expr: Expr | None = None

    def __post_init__(self):
        self._W = _QuadraturePotential(self.dW, self.basepoint, self.bindings)
        if self.W_expr is not None:
            self._opaque = self.W_expr
        else:
            self._opaque = opaque(Opaque(self.name, self._W, {"x": self.dW[0], "y": self.dW[1]}))

    def W(self, x, y, bindings=None):
        b = {**self.bindings, **(bindings or {}), "x": x, "y": y}
        if self.W_expr is not None:
            return np.broadcast_to(evaluate(self.W_expr, b), np.broadcast(np.asarray(x), np.asarray(y)).shape)
        return self._W(b)

    @property
    def kinetic(self) -> Expr:
        a, b, c = self.K
        return a * P1 * P1 + 2 * b * P1 * P2 + c * P2 * P2

    @property
    def expr(self) -> Expr:
        """Phase-space function; W enters as an opaque node with exact partials."""
        return self.kinetic + self._opaque

    def closedness(self, x, y, bindings=None):
        return closedness_residual(self.dW, x, y, {**self.bindings, **(bindings or {})})


def transport_killing(g_src: Metric2, K_src: Sequence[Expr], g_dst: Metric2, index="contravariant"):
    """K~_ij = |det g_dst / det g_src|^(2/3) K_ij.

    The scalar rescaling acts on covariant components.  Contravariant input
    (the default) is lowered with g_src first and the result raised with
    g_dst; pass ``index="covariant"`` to work on K_ij directly.
    """
    _check_nondegenerate(g_src)
    _check_nondegenerate(g_dst)
    if index not in ("covariant", "contravariant"):
        raise ValueError("index must be 'covariant' or 'contravariant'")
    if g_src is g_dst or g_src.components() == g_dst.components():
        return tuple(K_src)
    K = tuple(K_src) if index == "covariant" else lower(g_src, K_src)
    f = absolute(g_dst.det() / g_src.det()) ** (2.0 / 3.0)
    out = tuple(simplify(f * k) for k in K)
    if index == "contravariant":
        out = tuple(simplify(k) for k in lower(Metric2(*g_dst.inverse()), out))
    return out


def build_integral(g: Metric2, b: WeightedTensor, U: ProjectivePotential, basepoint=(1.0, 1.0),
                   bindings=None, check_points=None, tol=1e-8, name="W") -> QuadraticIntegral:
    """K^ij = |det g|^(2/3) b_kl g^ki g^lj and dW = b U."""
    Gi = g.inverse_matrix()
    B = b.matrix()
    w = absolute(g.det()) ** (2.0 / 3.0)
    K = []
    for i, j in ((0, 0), (0, 1), (1, 1)):
        K.append(w * add(*(B[k][l] * Gi[k][i] * Gi[l][j] for k in range(2) for l in range(2))))
    dW = transport_potential_oneform(b, U)
    if check_points is not None:
        r = closedness_residual(dW, *check_points, bindings)
        if r > tol:
            raise ClosednessError(f"b U is not closed (invariant Bertrand-Darboux residual {r:.3e})")
    return QuadraticIntegral(tuple(K), dW, tuple(basepoint), dict(bindings or {}), name)


def add_systems(systems, t, domain: Domain | None = None):
    """Σ t_i S_i: metric from the β-pencil, potential Σ t_i V_i."""
    betas = [s[0] for s in systems]
    b = pencil(betas, t)
    g = metric_of_beta(b, domain=domain)
    V = add(*(ti * s[1] for ti, s in zip(t, systems) if ti != 0)) if any(ti != 0 for ti in t) else ZERO
    if domain is not None:
        rng = np.random.default_rng(0)
        xs, ys = domain.sample(64, rng)
        d = evaluate(b.det(), {"x": xs, "y": ys})
        if np.any(np.abs(d) < 1e-12):
            raise ValueError("det of the pencil vanishes on the requested domain")
    return g, V


def stackel_projective_potential(phi: Expr, c) -> Expr:
    """V1 = c φ (1 − φ^(2/3))^(-3/2), for 0 < φ < 1."""
    if c == 0:
        return ZERO
    return c * phi * (1 - phi ** (2.0 / 3.0)) ** (-1.5)


def proportionality_fit(u, v):
    """Best λ with u ≈ λ v and the relative residual |u − λv| / |u|."""
    u = np.ravel(np.asarray(u, float))
    v = np.ravel(np.asarray(v, float))
    lam = float(np.dot(u, v) / np.dot(v, v))
    res = float(np.linalg.norm(u - lam * v) / max(np.linalg.norm(u), 1e-300))
    return lam, res


def proportional(U: ProjectivePotential, U2: ProjectivePotential, x, y, bindings=None, tol=1e-8):
    """The relation U ≐ U2 (equal up to one constant factor)."""
    a = U.at(x, y, bindings)
    b = U2.at(x, y, bindings)
    lam, res = proportionality_fit(a, b)
    return res < tol, lam, res


def bertrand_darboux_relative(g: Metric2, K: Sequence[Expr], V: Expr, x, y, bindings=None,
                              index="covariant"):
    """max |∂1 ω2 − ∂2 ω1| / (1 + |∂1 ω2| + |∂2 ω1|), ω_i = K_i^b V_b.

    Contravariant K is mixed with a single contraction g_ia K^ab, which
    keeps the digits that lowering and raising again would lose on badly
    conditioned metrics.
    """
    _check_nondegenerate(g)
    Km = ((K[0], K[1]), (K[1], K[2]))
    dV = gradient(V)
    if index == "covariant":
        Gi = g.inverse_matrix()
        mixed = [[add(*(Km[i][a] * Gi[a][bb] for a in range(2))) for bb in range(2)] for i in range(2)]
    elif index == "contravariant":
        G = g.matrix()
        mixed = [[add(*(G[i][a] * Km[a][bb] for a in range(2))) for bb in range(2)] for i in range(2)]
    else:
        raise ValueError("index must be 'covariant' or 'contravariant'")
    omega = [add(*(mixed[i][bb] * dV[bb] for bb in range(2))) for i in range(2)]
    b = {**(bindings or {}), "x": x, "y": y}
    shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
    a = _bcast(diff(omega[1], "x"), b, shape)
    c = _bcast(diff(omega[0], "y"), b, shape)
    return float(np.max(np.abs(a - c) / (1.0 + np.abs(a) + np.abs(c))))
