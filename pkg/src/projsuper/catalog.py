"""Named superintegrable systems and the two-sphere family built from the generators."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np

from .expr import DEFAULT_PARAMETERS, ZERO, Expr, add, evaluate, parse, simplify
from .geometry import Domain, EmptyDomainError, Metric2, projective_connection, set_conformal_form
from .metrization import WeightedTensor, beta_of_metric, metric_of_beta, metrizability_relative, pencil
from .systems import (NaturalHamiltonian, ProjectivePotential, QuadraticIntegral, build_integral,
                      gradient, projective_potential, transport_killing, transport_potential_oneform)

DEFAULT_C = (1.0, 0.5, 1.0 / 3.0, 0.0)
# tan(theta) = CURVE_K * sin^3(phi)/cos^2(phi) in the lemma convention
CURVE_K = 2.0 ** (2.0 / 3.0) / 108.0
EXCLUDED_MESSAGE = "excluded point, where the projective symmetry becomes homothetic"


class CatalogError(KeyError):
    pass


class ExcludedPointError(ValueError):
    pass


@dataclass
class CatalogEntry:
    name: str
    system: NaturalHamiltonian
    domain: Domain
    basepoint: tuple = (1.0, 1.0)
    integrals: list = field(default_factory=list)
    description: str = ""
    projective_class: str | None = None
    expected_type: str | None = None
    printed: dict = field(default_factory=dict)
    beta: WeightedTensor | None = None
    U: ProjectivePotential | None = None
    extra: dict = field(default_factory=dict)

    @property
    def g(self) -> Metric2:
        return self.system.g

    @property
    def V(self) -> Expr:
        return self.system.V

    @property
    def parameters(self) -> dict:
        return self.system.parameters

    @property
    def H(self) -> Expr:
        return self.system.expr

    def bindings(self, **override):
        return {**self.system.parameters, **override}

    def sample(self, n=100, seed=0, rel_det=1e-6):
        """Seeded points of the window, dropping near-zeros of det β."""
        rng = np.random.default_rng(seed)
        b = self.bindings()
        if self.beta is None:
            return self.domain.sample(n, rng, b)
        xs, ys = self.domain.sample(4 * n, rng, b)
        d = np.abs(np.broadcast_to(evaluate(self.beta.det(), {**b, "x": xs, "y": ys}), xs.shape))
        keep = d > rel_det * np.max(d)
        if keep.sum() < n:
            raise EmptyDomainError("det of the pencil vanishes on most of the working window")
        return xs[keep][:n], ys[keep][:n]

    def phase_samples(self, n=100, seed=0, momentum=1.0):
        x, y = self.sample(n, seed)
        rng = np.random.default_rng([seed, 1])
        p = rng.uniform(-momentum, momentum, (n, 2))
        return {"x": x, "y": y, "p1": p[:, 0], "p2": p[:, 1]}

    def to_dict(self):
        return {"name": self.name, "description": self.description,
                "metric": self.g.to_dict(), "potential": str(self.V),
                "parameters": dict(self.parameters), "domain": self.domain.to_dict(),
                "basepoint": list(self.basepoint), "projective_class": self.projective_class,
                "expected_type": self.expected_type}


# ------------------------------------------------------------- loading

@lru_cache(maxsize=1)
def _raw():
    text = resources.files("projsuper").joinpath("data/catalog.json").read_text()
    data = json.loads(text)
    return {d["name"]: d for d in data["systems"]}


def names(include_variants=True):
    out = []
    for name, d in _raw().items():
        out.append(name)
        if include_variants and d.get("minus_variant"):
            out.append(name + "-minus")
    return out


def raw_entry(name):
    base = name[:-6] if name.endswith("-minus") else name
    try:
        d = dict(_raw()[base])
    except KeyError:
        raise CatalogError(f"unknown catalog system {name!r}") from None
    if base != name:
        if not d.get("minus_variant"):
            raise CatalogError(f"{base!r} has no minus variant")
        m = dict(d["metric"])
        m["g22"] = f"-({m['g22']})"
        d.update(name=name, metric=m, signature="indefinite",
                 integrals=[i for i in d["integrals"] if i.get("signature") != "+"])
    return d


def _names_for(d):
    return tuple(DEFAULT_PARAMETERS) + tuple(d.get("parameters", {})) + tuple(
        d.get("printed", {}).get("parameters", ()))


def entry_from_dict(d, parameters=None) -> CatalogEntry:
    """Build an entry from the JSON system-definition format."""
    allowed = _names_for(d)
    P = lambda s: parse(str(s), allowed)  # noqa: E731
    params = {**d.get("parameters", {}), **(parameters or {})}
    dom = Domain.from_dict(d["domain"], allowed) if "domain" in d else Domain()
    m = d["metric"]
    g = Metric2(P(m["g11"]), P(m["g12"]), P(m["g22"]), domain=dom, signature=d.get("signature", "unspecified"))
    V = P(d.get("potential", "0"))
    # hand-simplified forms avoid cancellation between large factors
    if "inverse" in d:
        inv = tuple(P(d["inverse"][k]) for k in ("g11", "g12", "g22"))
        _agree(g.inverse(), inv, dom, params, "inverse metric")
        g._cache["inv"] = inv
    if "det" in d:
        det = P(d["det"])
        _agree((g.det(),), (det,), dom, params, "determinant")
        g._cache["det"] = det
    if "conformal" in d:
        cf = d["conformal"]
        phi, base = P(cf["factor"]), tuple(P(cf[k]) for k in ("g11", "g12", "g22"))
        _agree(g.components(), tuple(phi * c for c in base), dom, params, "conformal form")
        mdet = P(cf["det"]) if "det" in cf else None
        if mdet is not None:
            _agree((base[0] * base[2] - base[1] * base[1],), (mdet,), dom, params, "conformal determinant")
        set_conformal_form(g, phi, base, mdet)
    beta = beta_of_metric(g)
    if "beta" in d:
        bt = tuple(P(d["beta"][k]) for k in ("b11", "b12", "b22"))
        _agree(beta.components(), bt, dom, params, "beta")
        beta = WeightedTensor(*bt, det_hint=beta.det_hint)
    system = NaturalHamiltonian(g, V, params)
    base = tuple(float(v) for v in d.get("basepoint", (1.0, 1.0)))
    U = projective_potential(g, V)
    integrals = []
    for k, spec in enumerate(d.get("integrals", [])):
        name = f"W{k + 1}"
        if "beta_of" in spec:
            other = spec["beta_of"]
            # only the metric and potential of the referenced system are needed
            og = entry_from_dict({**raw_entry(other), "integrals": []}, parameters) \
                if other != d["name"] else None
            ob = og.beta if og is not None else beta
            I = build_integral(g, ob, U, base, params, name=name)
            if og is not None:
                # the other generator's potential is a closed-form W
                I = QuadraticIntegral(I.K, I.dW, base, params, name, og.V)
            integrals.append(I)
            continue
        K = tuple(P(s) for s in spec["K"])
        if "transport_from" in spec:
            src = entry_from_dict(raw_entry(spec["transport_from"]), parameters)
            K = transport_killing(src.g, K, g)
        dV = gradient(V)
        # dW_k = K_k^i dV_i with the mixed tensor K_k^i = g_kj K^ji
        Km = g.matrix()
        Kc = ((K[0], K[1]), (K[1], K[2]))
        dW = tuple(add(*(Km[kk][j] * Kc[j][i] * dV[i] for j in range(2) for i in range(2)))
                   for kk in range(2))
        W = P(spec["W"]) if "W" in spec else None
        integrals.append(QuadraticIntegral(K, dW, base, params, name, W))
    printed = dict(d.get("printed", {}))
    extra = {k: d[k] for k in ("printed_types",) if k in d}
    return CatalogEntry(d["name"], system, dom, base, integrals, d.get("description", ""),
                        d.get("projective_class"), d.get("expected_type"), printed, beta, U, extra)


def _agree(a, b, dom, params, what, n=8, tol=1e-9):
    x, y = dom.sample(n, np.random.default_rng(7), params)
    bind = {**params, "x": x, "y": y}
    for u, v in zip(a, b):
        fu, fv = evaluate(u, bind), evaluate(v, bind)
        if np.max(np.abs(fu - fv) / (1 + np.abs(fu))) > tol:
            raise CatalogError(f"stored {what} disagrees with the metric")


def get(name, **parameters) -> CatalogEntry:
    """Load a named system; keyword arguments override parameter defaults."""
    return entry_from_dict(raw_entry(name), parameters)


def load_json(path, **parameters) -> CatalogEntry:
    with open(path) as fh:
        d = json.load(fh)
    d.setdefault("name", str(path))
    return entry_from_dict(d, parameters)


# ------------------------------------------------------- generators etc.

def generator_system(i, c=None) -> CatalogEntry:
    if i not in (1, 2, 3):
        raise ValueError("generator index must be 1, 2 or 3")
    params = {} if c is None else dict(zip(("c1", "c2", "c3", "c4"), (float(v) for v in c)))
    return get(f"generator-{i}", **params)


def printed_potential(i) -> Expr:
    """Generator potential exactly as displayed next to its metric."""
    d = raw_entry(f"generator-{i}")
    return parse(d["printed"]["potential"], _names_for(d))


def projective_U_general(c=DEFAULT_C) -> ProjectivePotential:
    """U(c), with weight 4/3."""
    c1, c2, c3 = (float(v) for v in tuple(c)[:3])
    if c1 == c2 == c3 == 0:
        return ProjectivePotential(ZERO, ZERO)
    e = lambda s: parse(s, ("c1", "c2", "c3"))  # noqa: E731
    U1 = e("-(c3*(y^4 + 3*x^2) + c2*(y^2 - x) + 2*c1*y)/(y^2 + x)^(5/3)")
    U2 = e("-(2*c3*y^3 + c2*y + c1)/(y^2 + x)^(5/3)")
    from .expr import substitute
    b = {"c1": c1, "c2": c2, "c3": c3}
    return ProjectivePotential(simplify(substitute(U1, b)), simplify(substitute(U2, b)))


def generator_bases():
    return [generator_system(i).beta for i in (1, 2, 3)]


def generator_U(c=DEFAULT_C) -> ProjectivePotential:
    """Common potential of the generator systems: dV^(i) = β_i U."""
    return projective_U_general(c).scaled(2.0 ** (-1.0 / 3.0))


def sphere_coefficients(theta, phi, convention="theorem"):
    """Pencil coefficients (t, t̄, t̂) of β, β̄, β̂ on the classifying sphere.

    ``theorem``: t = (cosθ sinφ, cosθ cosφ, sinθ).
    ``lemma``:   t = (cosθ cosφ, cosθ sinφ, sinθ), the angles in which the
    degeneration curve reads tanθ = k sin³φ / cos²φ.
    """
    ct, st, cp, sp = math.cos(theta), math.sin(theta), math.cos(phi), math.sin(phi)
    if convention == "theorem":
        return (ct * sp, ct * cp, st), (st * sp, st * cp, -ct), (-cp, sp, 0.0)
    if convention == "lemma":
        return (ct * cp, ct * sp, st), (st * cp, st * sp, -ct), (-sp, cp, 0.0)
    raise ValueError("convention must be 'theorem' or 'lemma'")


def is_exceptional(theta, phi, convention="theorem", tol=1e-9):
    t, _, _ = sphere_coefficients(theta, phi, convention)
    return sum(abs(v) > tol for v in t) == 1


def degeneration_theta(phi):
    """θ on the degeneration curve (lemma convention)."""
    return math.atan(CURVE_K * math.sin(phi) ** 3 / math.cos(phi) ** 2)


def sphere_system(theta, phi, c=DEFAULT_C, convention="theorem") -> CatalogEntry:
    """System of the pencil β = Σ t_i β_i with V = Σ t_i V^(i)."""
    if is_exceptional(theta, phi, convention):
        raise ExcludedPointError(f"(theta, phi) = ({theta}, {phi}) is an {EXCLUDED_MESSAGE}")
    t, tb, th = sphere_coefficients(theta, phi, convention)
    gens = [generator_system(i, c) for i in (1, 2, 3)]
    bases = [e.beta for e in gens]
    b = pencil(bases, t)
    dom = gens[0].domain
    g = metric_of_beta(b, domain=dom)
    Vs = [e.V for e in gens]
    lin = lambda coef: add(*(ci * v for ci, v in zip(coef, Vs) if ci != 0))  # noqa: E731
    params = dict(gens[0].parameters)
    U = generator_U(c)
    base = gens[0].basepoint
    integrals = []
    for k, s in enumerate((tb, th)):
        I = build_integral(g, pencil(bases, s), U, base, params, name=f"W{k + 1}")
        integrals.append(QuadraticIntegral(I.K, I.dW, base, params, f"W{k + 1}", lin(s)))
    entry = CatalogEntry(f"sphere({theta:.6g},{phi:.6g})", NaturalHamiltonian(g, lin(t), params), dom,
                         base, integrals, "point of the classifying two-sphere", "essential-symmetry",
                         None, {}, b, U, {"t": t, "tbar": tb, "that": th, "convention": convention})
    x, y = dom.sample(64, np.random.default_rng(0), params)
    if np.all(np.abs(np.broadcast_to(evaluate(b.det(), {"x": x, "y": y}), x.shape)) < 1e-12):
        raise EmptyDomainError("det of the pencil vanishes on the working window")
    return entry


def darboux_koenigs(i, sign="+", **params) -> CatalogEntry:
    if i not in (1, 2, 3, 4):
        raise ValueError("Darboux-Koenigs index must be 1..4")
    name = f"darboux-koenigs-{i}" + ("-minus" if sign == "-" else "")
    return get(name, **params)


def bryant_system(D=1.0, **params) -> CatalogEntry:
    return get("bryant-1", D=float(D), **params)


def curvature_pair():
    """The flat generic system and its projectively equivalent curved partner."""
    return get("flat-generic"), get("sphere-generic")


def printed_curved_metric() -> Metric2:
    return Metric2(parse("(y^2 + 2)/(x^2 + y^2 + 2)^2"), parse("-x*y/(x^2 + y^2 + 2)^2"),
                   parse("(x^2 + 2)/(x^2 + y^2 + 2)^2"))


def conformal_partner() -> Metric2:
    """(dx^2 + dy^2)/(1 + x^2 + y^2)^2."""
    return Metric2(parse("1/(1 + x^2 + y^2)^2"), ZERO, parse("1/(1 + x^2 + y^2)^2"))


def metrizability_check(entry: CatalogEntry, x, y):
    """Relative residual of β(g) against the projective connection of g."""
    return metrizability_relative(entry.beta, projective_connection(entry.g), x, y, entry.bindings())
