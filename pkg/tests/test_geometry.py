import numpy as np
import pytest
import sympy as sp

import symbolic as S
from projsuper import catalog as cat
from projsuper.expr import ZERO, evaluate, parse
from projsuper.geometry import (DegenerateMetricError, Domain, EmptyDomainError, Metric2,
                                christoffel, killing_residual, lower, metricity_residual,
                                projective_connection, same_projective_class, thomas)

h = S.x + S.y ** 2
G1 = S.matrix(0, h / 2, 0)
G2 = S.matrix(0, -h / S.y ** 3, h ** 2 / S.y ** 4)
G3 = h / (3 * S.x - S.y ** 2) ** 6 * S.matrix(9 * h, -2 * S.y * (9 * S.x + S.y ** 2), 12 * S.x * h)


@pytest.fixture(scope="module")
def pts():
    d = cat.get("generator-1").domain
    return d.sample(50, np.random.default_rng(3))


def test_flat_christoffels_vanish():
    G = christoffel(Metric2("1", "0", "1"))
    assert all(v == ZERO for _, v in G.items())
    assert all(v == ZERO for _, v in thomas(G).items())
    assert all(f == ZERO for f in projective_connection(Metric2("1", "0", "1")).coefficients())


def test_g1_christoffels_by_hand(pts):
    x, y = pts
    G = christoffel(cat.get("generator-1").g)
    b = {"x": x, "y": y}
    assert np.allclose(evaluate(G(1, 1, 1), b), 1 / (x + y ** 2), rtol=1e-13)
    assert np.allclose(evaluate(G(2, 2, 2), b), 2 * y / (x + y ** 2), rtol=1e-13)
    for k, i, j in ((1, 1, 2), (1, 2, 2), (2, 1, 1), (2, 1, 2)):
        assert np.allclose(np.broadcast_to(evaluate(G(k, i, j), b), x.shape), 0.0, atol=1e-14)


def test_conformal_exponential_christoffels():
    G = christoffel(Metric2("exp(2*x)", "0", "exp(2*x)"))
    b = {"x": 0.3, "y": -0.2}
    assert evaluate(G(1, 1, 1), b) == pytest.approx(1.0)
    assert evaluate(G(1, 2, 2), b) == pytest.approx(-1.0)
    assert evaluate(G(2, 1, 2), b) == pytest.approx(1.0)
    assert evaluate(G(2, 1, 1), b) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("name", ["generator-1", "generator-2", "generator-3", "darboux-koenigs-1",
                                  "sphere-generic", "bryant-2"])
def test_christoffels_against_sympy(name):
    e = cat.get(name)
    xs, ys = e.sample(20, 5)
    subs = {sp.Symbol(k): v for k, v in e.parameters.items()}
    loc = {"x": S.x, "y": S.y, **{k: sp.Symbol(k) for k in e.parameters}}
    ref = S.matrix(*(sp.sympify(str(c).replace("^", "**"), locals=loc) for c in e.g.components()))
    Gref = S.christoffel(ref)
    G = christoffel(e.g)
    b = {**e.bindings(), "x": xs, "y": ys}
    ref = {key: S.numeric(v, xs, ys, subs) for key, v in Gref.items()}
    # zero entries are compared against the size of the whole table
    scale = 1 + np.max([np.abs(r) for r in ref.values()], axis=0)
    for (k, i, j), r in ref.items():
        ours = np.broadcast_to(evaluate(G(k + 1, i + 1, j + 1), b), xs.shape)
        assert np.all(np.abs(ours - r) < 1e-9 * scale)


@pytest.mark.parametrize("name", ["generator-1", "generator-3", "darboux-koenigs-2", "sphere-generic"])
def test_metricity(name):
    e = cat.get(name)
    assert metricity_residual(e.g, *e.sample(30, 1), e.bindings()) < 1e-10


def test_thomas_symbols(pts):
    x, y = pts
    g = cat.get("generator-1").g
    P = thomas(christoffel(g))
    b = {"x": x, "y": y}
    assert np.allclose(evaluate(P(1, 1, 1), b), (1 / 3) / (x + y ** 2), rtol=1e-13)
    # trace-free and invariant under constant rescaling
    tr = [evaluate(P(1, 1, j) + P(2, 2, j), b) for j in (1, 2)]
    assert np.allclose(tr, 0.0, atol=1e-13)
    P2 = thomas(christoffel(g.scaled(3.7)))
    for (k, i, j), v in P.items():
        assert np.allclose(evaluate(v, b), evaluate(P2(k + 1, i + 1, j + 1), b), atol=1e-13)


def test_projective_connection_g1(pts):
    x, y = pts
    f = projective_connection(cat.get("generator-1").g).at(x, y)
    h_ = x + y ** 2
    assert np.allclose(f, [0 * x, 1 / h_, -2 * y / h_, 0 * x], atol=1e-13)
    ref = S.projective_coefficients(G1)
    assert np.allclose(f, [S.numeric(r, x, y) for r in ref], atol=1e-13)


def test_generators_share_connection(pts):
    g1, g2, g3 = (cat.get(f"generator-{i}").g for i in (1, 2, 3))
    assert same_projective_class(g1, g2, pts).equivalent
    assert same_projective_class(g1, g3, pts).equivalent
    # sympy confirms the shared connection
    x, y = pts
    for G in (G2, G3):
        ref = S.projective_coefficients(G)
        assert np.allclose([S.numeric(r, x, y) for r in ref],
                           projective_connection(g1).at(x, y), rtol=1e-9, atol=1e-9)


def test_flat_and_sphere_share_connection():
    flat, curved = cat.curvature_pair()
    assert same_projective_class(flat.g, curved.g, flat.sample(50, 0)).equivalent


def test_conformal_partner_is_not_projectively_flat():
    # the conformally flat partner has a different projective connection
    cmp = same_projective_class(Metric2("1", "0", "1"), cat.conformal_partner(),
                                Domain((0.5, 2.0), (0.5, 2.0)).sample(50, np.random.default_rng(0)))
    assert not cmp.equivalent and cmp.max_deviation > 1e-2


def test_exponential_conformal_not_equivalent():
    cmp = same_projective_class(Metric2("1", "0", "1"), Metric2("exp(2*x)", "0", "exp(2*x)"),
                                (np.array([0.1, 0.5]), np.array([0.2, 0.3])))
    assert not cmp.equivalent
    f = projective_connection(Metric2("exp(2*x)", "0", "exp(2*x)")).at(0.1, 0.2)
    assert abs(f[1]) == pytest.approx(1.0)


def test_degenerate_and_empty_inputs():
    with pytest.raises(DegenerateMetricError):
        christoffel(Metric2("x", "x", "x"))
    with pytest.raises(EmptyDomainError):
        Domain((0.5, 1.0), (0.5, 1.0), (parse("-1"),)).sample(5, np.random.default_rng(0))
    with pytest.raises(EmptyDomainError):
        same_projective_class(Metric2("1", "0", "1"), Metric2("1", "0", "1"), (np.array([]), np.array([])))


def test_killing_residual_flat_rotation():
    flat = Metric2("1", "0", "1")
    x, y = np.array([0.3, 1.2]), np.array([0.7, -0.4])
    assert killing_residual(flat, tuple(parse(s) for s in ("y^2", "-x*y", "x^2")), x, y) < 1e-14
    assert killing_residual(flat, tuple(parse(s) for s in ("x^2", "0", "0")), x, y) > 0.1


def test_lower_identity():
    g = Metric2("2", "0", "3")
    assert [evaluate(c) for c in lower(g, tuple(parse(s) for s in ("1", "0", "1")))] == [4.0, 0.0, 9.0]
