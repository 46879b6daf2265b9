import math

import numpy as np
import pytest

from conftest import rel_bracket
from projsuper import catalog as cat
from projsuper.algebra import poisson
from projsuper.expr import ZERO, evaluate, parse
from projsuper.geometry import Domain, Metric2, killing_residual, lower
from projsuper.metrization import beta_of_metric, pencil
from projsuper.systems import (ClosednessError, NaturalHamiltonian, ProjectivePotential,
                               add_systems, bertrand_darboux_relative, bertrand_darboux_residual,
                               build_integral, closedness_residual, gradient, invariant_bd_residual,
                               line_integral, path_gap, projective_potential, proportional,
                               scalar_potential, stackel_projective_potential, transport_killing,
                               transport_potential_oneform)

FLAT = Metric2("1", "0", "1")


def P(s, extra=()):
    return parse(s, extra)


@pytest.fixture(scope="module")
def gens():
    return [cat.get(f"generator-{i}") for i in (1, 2, 3)]


@pytest.fixture(scope="module")
def pts(gens):
    return gens[0].sample(100, 21)


def arr(e, b, shape):
    return np.broadcast_to(evaluate(e, b), shape)


# ------------------------------------------------------- Bertrand-Darboux

def test_bd_with_metric_as_killing_tensor_vanishes():
    r = bertrand_darboux_residual(FLAT, (P("1"), P("0"), P("1")), P("sin(x*y) + x^3"))
    assert abs(evaluate(r, {"x": 0.4, "y": 1.3})) < 1e-14


def test_bd_negative_control():
    # K = (y dx - x dy)^2 does not fit V = x: residual -3y
    r = bertrand_darboux_residual(FLAT, (P("y^2"), P("-x*y"), P("x^2")), P("x"))
    assert evaluate(r, {"x": 1.0, "y": 1.0}) == pytest.approx(-3.0)


def test_bd_generator_with_transported_killing_tensor(gens, pts):
    g1, g2 = gens[0], gens[1]
    x, y = pts
    # the metric of the second generator is a Killing tensor of itself; carry it to g1
    K = transport_killing(g2.g, g2.g.inverse(), g1.g)
    r = bertrand_darboux_relative(g1.g, lower(g1.g, K), g1.V, x, y, g1.bindings())
    assert r < 1e-10


# ------------------------------------------------------- potentials U

def test_darboux_koenigs_bryant_form_potential():
    for D in (1.0, 2.0, -1.5):
        e = cat.bryant_system(D)
        x, y = e.sample(30, 2)
        U = e.U.at(x, y, e.bindings())
        ref = 2 ** (-1 / 3) * np.exp(4 * x / 3) * e.parameters["c1"] / abs(D) ** (2 / 3)
        assert np.allclose(U[0], ref, rtol=1e-12)
        assert np.allclose(U[1], 0.0, atol=1e-14)


def test_constant_potential_has_zero_U():
    U = projective_potential(FLAT, P("c", ("c",)))
    assert U.at(0.3, 0.2, {"c": 2.0}).tolist() == [0.0, 0.0]


def test_flat_generic_potential():
    e = cat.get("flat-generic")
    x, y = e.sample(40, 3)
    p = e.parameters
    U = e.U.at(x, y, e.bindings())
    assert np.allclose(U[0], 2 * p["omega"] ** 2 * x - 2 * p["a"] / x ** 3, rtol=1e-13)
    assert np.allclose(U[1], 2 * p["omega"] ** 2 * y - 2 * p["b"] / y ** 3, rtol=1e-13)


def test_transport_round_trip_is_exact(gens, pts):
    x, y = pts
    for e in gens + [cat.get("flat-generic")]:
        xs, ys = e.sample(200, 1)
        # g3 is badly conditioned near 3x = y^2, where g g^-1 loses ~1e-5 relative
        keep = 3 * xs - ys ** 2 > 1.0 if e.name == "generator-3" else np.ones_like(xs, bool)
        xs, ys = xs[keep][:50], ys[keep][:50]
        dV = transport_potential_oneform(beta_of_metric(e.g), projective_potential(e.g, e.V))
        b = {**e.bindings(), "x": xs, "y": ys}
        for got, ref in zip(dV, gradient(e.V)):
            assert np.allclose(arr(got, b, xs.shape), arr(ref, b, xs.shape), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("i", [1, 2])
def test_generator_potentials_from_common_U(gens, pts, i):
    # dV^(i) = β_i U with the shared U; the printed constants are inside the catalog potentials
    x, y = pts
    U = cat.generator_U()
    dV = transport_potential_oneform(gens[i].beta, U)
    b = {**gens[i].bindings(), "x": x, "y": y}
    for got, ref in zip(dV, gradient(gens[i].V)):
        assert np.allclose(arr(got, b, x.shape), arr(ref, b, x.shape), rtol=1e-10)


@pytest.mark.parametrize("i", [0, 1, 2])
def test_invariant_bd_vanishes_for_generators(gens, pts, i):
    x, y = pts
    r = arr(invariant_bd_residual(gens[i].beta, cat.generator_U()), {"x": x, "y": y}, x.shape)
    assert np.max(np.abs(r)) < 1e-10


def test_invariant_bd_trivial_and_negative():
    e = cat.get("flat-generic")
    r = invariant_bd_residual(beta_of_metric(FLAT), e.U)
    assert evaluate(r, {**e.bindings(), "x": 1.2, "y": 0.7}) == pytest.approx(0.0, abs=1e-13)
    U = projective_potential(FLAT, P("x*y^3"))
    bad = beta_of_metric(Metric2("exp(2*x)", "0", "exp(2*x)"))
    assert abs(evaluate(invariant_bd_residual(bad, U), {"x": 1.0, "y": 1.0})) > 0.1


# ---------------------------------------------------------- quadrature

def test_scalar_potential_constant_form():
    assert scalar_potential((P("1"), P("0")), (0.0, 0.0), (3.0, 0.0)) == pytest.approx(3.0, abs=1e-12)


def test_scalar_potential_matches_closed_form(gens):
    e = gens[0]
    dV = gradient(e.V)
    val = scalar_potential(dV, (1.0, 1.0), (2.0, 1.0), e.bindings())
    ref = evaluate(e.V, {**e.bindings(), "x": 2.0, "y": 1.0}) - evaluate(e.V, {**e.bindings(), "x": 1.0, "y": 1.0})
    assert val == pytest.approx(ref, abs=1e-9)
    # vectorised endpoints
    xs, ys = np.array([1.5, 2.5]), np.array([0.8, 1.4])
    v = line_integral(dV, (1.0, 1.0), (xs, ys), e.bindings())
    ref = evaluate(e.V, {**e.bindings(), "x": xs, "y": ys}) - evaluate(e.V, {**e.bindings(), "x": 1.0, "y": 1.0})
    assert np.allclose(v, ref, atol=1e-9)


def test_path_independence(gens):
    e = gens[0]
    assert path_gap(gradient(e.V), (1.0, 1.0), (2.2, 1.6), e.bindings()) < 1e-9


def test_closedness_detects_non_exact_forms():
    x, y = np.array([0.5, 1.0]), np.array([0.3, 0.9])
    assert closedness_residual((P("y"), P("x")), x, y) < 1e-15
    assert closedness_residual((P("-y"), P("x")), x, y) > 0.1


# ------------------------------------------------------------ Killing

def test_transport_identity():
    K = (P("y^2"), P("-x*y"), P("x^2"))
    assert transport_killing(FLAT, K, FLAT) == K


def test_transport_flat_to_sphere():
    flat, curved = cat.curvature_pair()
    x, y = flat.sample(30, 0)
    b = {"x": x, "y": y}
    for comps in (("1", "0", "0"), ("y^2", "-x*y", "x^2"), ("0", "0", "1")):
        K = tuple(P(s) for s in comps)
        Kc = transport_killing(flat.g, K, curved.g, index="covariant")
        for got, k in zip(Kc, K):
            ref = arr(k, b, x.shape) / (x ** 2 + y ** 2 + 1) ** 2
            assert np.allclose(arr(got, b, x.shape), ref, rtol=1e-12, atol=1e-14)
        Kt = transport_killing(flat.g, K, curved.g)
        assert killing_residual(curved.g, Kt, x, y) < 1e-10


def test_transport_g1_to_g2_keeps_killing(gens, pts):
    x, y = pts
    K = transport_killing(gens[0].g, gens[0].g.inverse(), gens[1].g)
    assert killing_residual(gens[1].g, K, x, y) < 1e-9


def test_transport_rejects_bad_index():
    with pytest.raises(ValueError):
        transport_killing(FLAT, (P("1"), P("0"), P("1")), Metric2("2", "0", "2"), index="mixed")


# ------------------------------------------------------------ integrals

def test_integral_from_own_beta_is_hamiltonian(gens):
    e = gens[0]
    I = build_integral(e.g, beta_of_metric(e.g), projective_potential(e.g, e.V), (1.0, 1.0), e.bindings())
    ps = e.phase_samples(20, 0)
    b = {**e.bindings(), **ps}
    diff_ = evaluate(I.expr, b) - evaluate(e.H, b)
    V0 = evaluate(e.V, {**e.bindings(), "x": 1.0, "y": 1.0})
    assert np.allclose(diff_, -V0, atol=1e-9)


def test_sphere_point_integral_commutes():
    e = cat.sphere_system(0.3, 1.0)
    I = build_integral(e.g, cat.generator_bases()[0], cat.generator_U(), e.basepoint, e.bindings())
    ps = e.phase_samples(100, 0)
    b = {**e.bindings(), **ps}
    assert rel_bracket(evaluate(poisson(e.H, I.expr), b), evaluate(e.H, b), evaluate(I.expr, b)) < 1e-9


def test_g1_with_beta3_commutes(gens):
    e = gens[0]
    I = build_integral(e.g, gens[2].beta, cat.generator_U(), e.basepoint, e.bindings(),
                       check_points=e.sample(20, 0))
    ps = e.phase_samples(100, 0)
    b = {**e.bindings(), **ps}
    assert rel_bracket(evaluate(poisson(e.H, I.expr), b), evaluate(e.H, b), evaluate(I.expr, b)) < 1e-9


def test_build_integral_closedness_guard():
    e = cat.get("flat-generic")
    bad = beta_of_metric(Metric2("exp(2*x)", "0", "exp(2*x)"))
    with pytest.raises(ClosednessError):
        build_integral(e.g, bad, e.U, (1.0, 1.0), e.bindings(), check_points=e.sample(10, 0))


# --------------------------------------------------------------- addition

def test_addition_unit_vector_returns_first(gens, pts):
    x, y = pts
    g, V = add_systems([(gens[0].beta, gens[0].V), (gens[1].beta, gens[1].V)], [1, 0])
    b = {**gens[0].bindings(), "x": x, "y": y}
    assert np.allclose(g.at(x, y), gens[0].g.at(x, y), rtol=1e-12, atol=1e-14)
    assert np.allclose(arr(V, b, x.shape), arr(gens[0].V, b, x.shape))


@pytest.mark.parametrize("t", [0.5, 2.0])
def test_addition_of_two_generators(gens, t):
    g1, g2, g3 = gens
    dom = g1.domain
    g, V = add_systems([(g1.beta, g1.V), (g2.beta, g2.V)], [1, t])
    x, y = g1.sample(200, 8)
    b = {**g1.bindings(), "x": x, "y": y}
    ok = np.abs(arr(pencil([g1.beta, g2.beta], [1, t]).det(), b, x.shape)) > 1e-3
    x, y = x[ok][:100], y[ok][:100]
    b = {**g1.bindings(), "x": x, "y": y}
    # printed g_t: (g1/det g1^(2/3) + t g2/det g2^(2/3)) / det(...)^2
    s = [np.stack([arr(c, b, x.shape) for c in e.g.components()]) for e in (g1, g2)]
    d = [np.abs(arr(e.g.det(), b, x.shape)) ** (2 / 3) for e in (g1, g2)]
    num = s[0] / d[0] + t * s[1] / d[1]
    ref = num / (num[0] * num[2] - num[1] ** 2) ** 2
    got = np.stack([arr(c, b, x.shape) for c in g.components()])
    assert np.allclose(got, ref, rtol=1e-10)
    assert np.allclose(arr(V, b, x.shape), arr(g1.V, b, x.shape) + t * arr(g2.V, b, x.shape))
    # the third generator supplies a Killing tensor compatible with V_t
    I = build_integral(g, g3.beta, cat.generator_U(), g1.basepoint, g1.bindings())
    assert bertrand_darboux_relative(g, lower(g, I.K), V, x, y, g1.bindings()) < 1e-9


def test_addition_rejects_degenerate_domain(gens):
    with pytest.raises(ValueError):
        add_systems([(gens[0].beta, gens[0].V), (gens[0].beta, gens[0].V)], [1, -1],
                    domain=gens[0].domain)


# ------------------------------------------------- Stäckel + projective

PHI = "(1 + x^2 + y^2)^(-2)"


def test_stackel_projective_potential_identities():
    phi = P(PHI)
    V1 = stackel_projective_potential(phi, 1.0)
    rng = np.random.default_rng(5)
    x, y = rng.uniform(-2, 2, 100), rng.uniform(-2, 2, 100)
    b = {"x": x, "y": y}
    ph = arr(phi, b, x.shape)
    dphi = [arr(d, b, x.shape) for d in gradient(phi)]
    dV = [arr(d, b, x.shape) for d in gradient(V1)]
    v = arr(V1, b, x.shape)
    for k in range(2):
        lhs = ph * (1 - ph ** (2 / 3)) * dV[k]
        assert np.allclose(lhs, v * dphi[k], rtol=1e-10, atol=1e-12)
    wedge = dphi[0] * dV[1] - dphi[1] * dV[0]
    assert np.max(np.abs(wedge) / (1 + np.abs(dphi[0] * dV[1]) + np.abs(dphi[1] * dV[0]))) < 1e-10
    assert stackel_projective_potential(phi, 0) == ZERO


def test_proportional_relation():
    U = ProjectivePotential(P("x"), P("y^2"))
    ok, lam, res = proportional(U, U.scaled(-2.5), np.array([1.0, 2.0]), np.array([0.5, 1.5]))
    assert ok and lam == pytest.approx(-0.4) and res < 1e-14
    ok, _, res = proportional(U, ProjectivePotential(P("y"), P("x")), np.array([1.0, 2.0]), np.array([0.5, 1.5]))
    assert not ok


def test_natural_hamiltonian_expression():
    H = NaturalHamiltonian(Metric2("2", "0", "4"), P("x"))
    assert evaluate(H.expr, {"x": 1.0, "y": 0.0, "p1": 1.0, "p2": 2.0}) == pytest.approx(0.5 + 1.0 + 1.0)
