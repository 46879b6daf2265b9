"""Metrics on a coordinate patch, their Levi-Civita and projective data."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .expr import ZERO, Expr, diff, evaluate, parse, simplify

COORDS = ("x", "y")


class GeometryError(ValueError):
    pass


class DegenerateMetricError(GeometryError):
    pass


class EmptyDomainError(GeometryError):
    pass


@dataclass(frozen=True)
class Domain:
    """Box in (x, y) cut down by strict inequalities ``guard > margin``."""

    xlim: tuple = (0.5, 3.0)
    ylim: tuple = (0.5, 2.0)
    guards: tuple = ()
    margin: float = 0.05

    @classmethod
    def from_dict(cls, d, parameters=None):
        guards = tuple(parse(s, parameters) if isinstance(s, str) else s
                       for s in d.get("guards", ()))
        return cls(tuple(d["x"]), tuple(d["y"]), guards, float(d.get("margin", 0.05)))

    def to_dict(self):
        return {"x": list(self.xlim), "y": list(self.ylim),
                "guards": [str(g) for g in self.guards], "margin": self.margin}

    def contains(self, x, y, bindings=None):
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = (x >= self.xlim[0]) & (x <= self.xlim[1]) & (y >= self.ylim[0]) & (y <= self.ylim[1])
        b = dict(bindings or {})
        for g in self.guards:
            with np.errstate(all="ignore"):
                v = np.broadcast_to(evaluate(g, {**b, "x": x, "y": y}), x.shape)
            ok &= v > self.margin
        return ok

    def sample(self, n, rng, bindings=None):
        """Rejection-sample ``n`` points; returns arrays (x, y)."""
        xs, ys, tries = [], [], 0
        need = n
        while need > 0:
            m = max(4 * need, 16)
            x = rng.uniform(*self.xlim, m)
            y = rng.uniform(*self.ylim, m)
            ok = self.contains(x, y, bindings)
            xs.append(x[ok][:need])
            ys.append(y[ok][:need])
            need -= int(min(ok.sum(), need))
            tries += 1
            if tries > 50:
                raise EmptyDomainError("domain rejects (almost) every sample")
        return np.concatenate(xs), np.concatenate(ys)


def _e(v):
    return v if isinstance(v, Expr) else parse(v) if isinstance(v, str) else Expr("const", (), float(v))


@dataclass(frozen=True)
class Metric2:
    """Symmetric metric g11 dx^2 + 2 g12 dx dy + g22 dy^2.

    Note the symmetric-product reading: (x + y^2) dxdy means g12 = (x + y^2)/2.
    """

    g11: Expr
    g12: Expr
    g22: Expr
    domain: Domain | None = None
    signature: str = "unspecified"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for k in ("g11", "g12", "g22"):
            object.__setattr__(self, k, _e(getattr(self, k)))

    @classmethod
    def diagonal(cls, f11, f22, **kw):
        return cls(_e(f11), ZERO, _e(f22), **kw)

    def components(self):
        return (self.g11, self.g12, self.g22)

    def matrix(self):
        return ((self.g11, self.g12), (self.g12, self.g22))

    def det(self) -> Expr:
        if "det" not in self._cache:
            self._cache["det"] = simplify(self.g11 * self.g22 - self.g12 * self.g12)
        return self._cache["det"]

    def inverse(self):
        """Contravariant components (g^11, g^12, g^22) via adjugate / det."""
        if "inv" not in self._cache:
            d = self.det()
            if d == ZERO:
                raise DegenerateMetricError("det g vanishes identically")
            self._cache["inv"] = (simplify(self.g22 / d), simplify(-self.g12 / d),
                                  simplify(self.g11 / d))
        return self._cache["inv"]

    def inverse_matrix(self):
        a, b, c = self.inverse()
        return ((a, b), (b, c))

    def scaled(self, lam):
        return Metric2(lam * self.g11, lam * self.g12, lam * self.g22, self.domain, self.signature)

    def at(self, x, y, bindings=None):
        """Numeric components as an array of shape (..., 2, 2)."""
        b = {**(bindings or {}), "x": x, "y": y}
        shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
        c = [np.broadcast_to(evaluate(e, b), shape) for e in self.components()]
        return np.stack([np.stack([c[0], c[1]], -1), np.stack([c[1], c[2]], -1)], -2)

    def to_dict(self):
        return {"g11": str(self.g11), "g12": str(self.g12), "g22": str(self.g22)}


def _check_nondegenerate(g: Metric2):
    if g.det() == ZERO:
        raise DegenerateMetricError("det g vanishes identically")


class Christoffel:
    """Γ^k_ij with 1-based indices: ``G(k, i, j)``."""

    def __init__(self, table):
        self._t = table  # dict (k, i, j) -> Expr, 0-based, i <= j

    def __call__(self, k, i, j):
        i, j = sorted((i - 1, j - 1))
        return self._t[(k - 1, i, j)]

    def items(self):
        return self._t.items()


class Thomas(Christoffel):
    """Π^k_ij, same indexing as Christoffel."""


@dataclass(frozen=True)
class ProjectiveConnection:
    """y'' = f0 + f1 y' + f2 y'^2 + f3 y'^3."""

    f0: Expr
    f1: Expr
    f2: Expr
    f3: Expr

    def coefficients(self):
        return (self.f0, self.f1, self.f2, self.f3)

    def at(self, x, y, bindings=None):
        b = {**(bindings or {}), "x": x, "y": y}
        shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
        return np.stack([np.broadcast_to(evaluate(f, b), shape) for f in self.coefficients()])


def set_conformal_form(g: Metric2, factor, base, base_det=None):
    """Record g = factor * base; Christoffels are then taken from the base.

    Worth it when the factor has high-order poles: differentiating the
    product directly loses digits near them.
    """
    g._cache["conformal"] = (_e(factor), tuple(_e(c) for c in base),
                             None if base_det is None else _e(base_det))
    g._cache.pop("chr", None)
    return g


def _levi_civita(M, Minv):
    dM = [[[diff(M[a][b], c) for c in COORDS] for b in range(2)] for a in range(2)]
    # first kind: Γ_{l,ij} = ½(∂i g_jl + ∂j g_il − ∂l g_ij)
    first = {}
    for l in range(2):
        for i in range(2):
            for j in range(i, 2):
                first[(l, i, j)] = 0.5 * (dM[j][l][i] + dM[i][l][j] - dM[i][j][l])
    return {(k, i, j): Minv[k][0] * first[(0, i, j)] + Minv[k][1] * first[(1, i, j)]
            for k in range(2) for i in range(2) for j in range(i, 2)}


def christoffel(g: Metric2) -> Christoffel:
    if "chr" in g._cache:
        return g._cache["chr"]
    _check_nondegenerate(g)
    if "conformal" in g._cache:
        phi, (m11, m12, m22), dm = g._cache["conformal"]
        M = ((m11, m12), (m12, m22))
        if dm is None:
            dm = m11 * m22 - m12 * m12
        Minv = ((m22 / dm, -m12 / dm), (-m12 / dm, m11 / dm))
        base = _levi_civita(M, Minv)
        w = [diff(phi, c) / phi for c in COORDS]  # ∂ ln φ
        wu = [Minv[k][0] * w[0] + Minv[k][1] * w[1] for k in range(2)]
        table = {}
        for (k, i, j), e in base.items():
            corr = 0.5 * ((w[j] if k == i else ZERO) + (w[i] if k == j else ZERO)) - 0.5 * M[i][j] * wu[k]
            table[(k, i, j)] = simplify(e + corr)
    else:
        table = {key: simplify(e) for key, e in _levi_civita(g.matrix(), g.inverse_matrix()).items()}
    out = Christoffel(table)
    g._cache["chr"] = out
    return out


def thomas(gam: Christoffel) -> Thomas:
    n = 2
    trace = [gam(1, 1, j) + gam(2, 2, j) for j in (1, 2)]  # Γ^p_pj
    table = {}
    for k in range(2):
        for i in range(2):
            for j in range(i, 2):
                e = gam(k + 1, i + 1, j + 1)
                corr = (trace[j] if k == i else ZERO) + (trace[i] if k == j else ZERO)
                table[(k, i, j)] = simplify(e - corr / (n + 1))
    return Thomas(table)


def projective_connection(g: Metric2) -> ProjectiveConnection:
    G = christoffel(g)
    return ProjectiveConnection(
        simplify(-G(2, 1, 1)),
        simplify(G(1, 1, 1) - 2 * G(2, 1, 2)),
        simplify(2 * G(1, 1, 2) - G(2, 2, 2)),
        simplify(G(1, 2, 2)),
    )


class ProjectiveComparison(NamedTuple):
    equivalent: bool
    max_deviation: float


def _points(sample):
    if isinstance(sample, tuple) and len(sample) == 2 and np.ndim(sample[0]) == 1:
        x, y = sample
    else:
        arr = np.asarray(sample, float).reshape(-1, 2)
        x, y = arr[:, 0], arr[:, 1]
    if len(x) == 0:
        raise EmptyDomainError("empty sample")
    return np.asarray(x, float), np.asarray(y, float)


def same_projective_class(g: Metric2, h: Metric2, sample, tol=1e-9, bindings=None):
    """Compare projective connections at sample points (relative deviation)."""
    x, y = _points(sample)
    fg = projective_connection(g).at(x, y, bindings)
    fh = projective_connection(h).at(x, y, bindings)
    dev = float(np.max(np.abs(fg - fh) / (1.0 + np.abs(fg))))
    return ProjectiveComparison(dev <= tol, dev)


def metricity_residual(g: Metric2, x, y, bindings=None):
    """max |∇_k g_ij| at the points, relative to the size of its terms."""
    G = christoffel(g)
    M = g.matrix()
    b = {**(bindings or {}), "x": x, "y": y}
    shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
    ev = lambda e: np.broadcast_to(evaluate(e, b), shape)  # noqa: E731
    worst = 0.0
    for k in range(2):
        for i in range(2):
            for j in range(2):
                terms = [ev(diff(M[i][j], COORDS[k]))]
                for l in range(2):
                    terms.append(-ev(G(l + 1, k + 1, i + 1) * M[l][j]))
                    terms.append(-ev(G(l + 1, k + 1, j + 1) * M[i][l]))
                mag = sum(np.abs(t) for t in terms)
                r = np.abs(sum(terms)) / np.where(mag > 0, mag, 1.0)
                worst = max(worst, float(np.max(r)))
    return worst


def lower(g: Metric2, K: Sequence[Expr]):
    """Lower both indices of a contravariant symmetric (K11, K12, K22)."""
    M = g.matrix()
    Km = ((K[0], K[1]), (K[1], K[2]))
    low = [[sum((M[i][a] * M[j][b] * Km[a][b] for a in range(2) for b in range(2)), ZERO)
            for j in range(2)] for i in range(2)]
    return (low[0][0], low[0][1], low[1][1])


def killing_residual(g: Metric2, K_contra: Sequence[Expr], x, y, bindings=None):
    """Max of the symmetrised ∇_(i K_jk) over components, relative to |K|."""
    G = christoffel(g)
    Kl = lower(g, K_contra)
    Km = ((Kl[0], Kl[1]), (Kl[1], Kl[2]))
    b = {**(bindings or {}), "x": x, "y": y}

    def nab(i, j, k):  # ∇_i K_jk
        r = diff(Km[j][k], COORDS[i])
        for l in range(2):
            r = r - G(l + 1, i + 1, j + 1) * Km[l][k] - G(l + 1, i + 1, k + 1) * Km[j][l]
        return r

    worst = 0.0
    for (i, j, k) in ((0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 1)):
        r = nab(i, j, k) + nab(j, k, i) + nab(k, i, j)
        worst = max(worst, float(np.max(np.abs(evaluate(r, b)))))
    scale = max(float(np.max(np.abs(np.broadcast_to(evaluate(c, b), np.shape(x))))) for c in Kl)
    return worst / max(scale, 1e-300)
