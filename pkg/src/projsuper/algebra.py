"""Poisson brackets, the R^2 cubic fit and Stäckel-type classification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .expr import ZERO, Expr, add, diff, evaluate
from .geometry import Domain

EPS_C = 1e-6
EPS_DISC = 1e-8
EPS_HESS = 1e-6
AMBIGUITY = 3.0
DEFAULT_SEED = 0xA11CE

LABELS = ("(111,11)", "(21,2)", "(21,0)", "(3,11)", "(3,2)", "(3,0)", "(0,11)")
MONOMIALS = tuple((a, b, c) for a in range(4) for b in range(4) for c in range(4) if a + b + c <= 3)
PHASE_VARS = ("x", "y", "p1", "p2")


class IllPosedFitError(ValueError):
    pass


class PhasePoint(NamedTuple):
    x: float
    y: float
    p1: float
    p2: float


def poisson(F: Expr, G: Expr) -> Expr:
    """{F, G} = Σ ∂F/∂x^i ∂G/∂p_i − ∂F/∂p_i ∂G/∂x^i."""
    terms = []
    for q, p in (("x", "p1"), ("y", "p2")):
        terms.append(diff(F, q) * diff(G, p))
        terms.append(-(diff(F, p) * diff(G, q)))
    return add(*terms)


def sample_phase_points(domain: Domain, n=200, seed=DEFAULT_SEED, momentum=1.0, bindings=None):
    """Coordinates uniform in the window, momenta uniform in [-m, m]^2."""
    rng = np.random.default_rng(seed)
    x, y = domain.sample(n, rng, bindings)
    p = rng.uniform(-momentum, momentum, (n, 2))
    return {"x": x, "y": y, "p1": p[:, 0], "p2": p[:, 1]}


def evaluate_on(e: Expr, samples, bindings=None):
    n = len(samples["x"])
    return np.broadcast_to(evaluate(e, {**(bindings or {}), **samples}), (n,)).astype(float)


# ----------------------------------------------------------- cubic fit

def _design(Hn, J1, J2):
    return np.column_stack([Hn ** a * J1 ** b * J2 ** c for a, b, c in MONOMIALS])


class CubicR2Regressor(BaseEstimator, RegressorMixin):
    """Least-squares cubic R^2 ≈ Σ k_abc H^a I1^b I2^c with a+b+c ≤ 3.

    X holds columns (H, I1, I2), y the sampled R^2.  Columns and target are
    scaled by their RMS before an SVD solve; ``coef_`` is reported in the
    original units, ``coef_normalized_`` in the scaled ones.
    """

    def __init__(self, max_condition=1e12, min_samples=60):
        self.max_condition = max_condition
        self.min_samples = min_samples

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if X.shape[1] != 3:
            raise ValueError("X must have the three columns H, I1, I2")
        if X.shape[0] < self.min_samples:
            raise IllPosedFitError(f"need at least {self.min_samples} samples, got {X.shape[0]}")
        sx = np.sqrt(np.mean(X ** 2, axis=0))
        sx[sx == 0] = 1.0
        sy = float(np.sqrt(np.mean(y ** 2)))
        self.scales_ = np.concatenate([sx, [sy if sy > 0 else 1.0]])
        Xn = X / sx
        A = _design(*Xn.T)
        yn = y / self.scales_[3]
        coef, _, rank, sv = np.linalg.lstsq(A, yn, rcond=None)
        self.condition_number_ = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
        self.rank_ = int(rank)
        if rank < len(MONOMIALS) or self.condition_number_ > self.max_condition:
            raise IllPosedFitError(
                f"design matrix rank {rank}/{len(MONOMIALS)}, condition {self.condition_number_:.3e}")
        self.coef_normalized_ = coef
        unit = np.array([sx[0] ** a * sx[1] ** b * sx[2] ** c for a, b, c in MONOMIALS])
        self.coef_ = coef * self.scales_[3] / unit
        self.residual_rms_ = float(np.sqrt(np.mean((A @ coef - yn) ** 2)))
        self.monomials_ = MONOMIALS
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return _design(*(X / self.scales_[:3]).T) @ self.coef_normalized_ * self.scales_[3]

    def relative_rms(self, X, y):
        """Out-of-sample residual RMS relative to the fitted target scale."""
        return float(np.sqrt(np.mean((self.predict(X) - np.asarray(y)) ** 2)) / self.scales_[3])

    def coefficient(self, a, b, c, normalized=True):
        i = MONOMIALS.index((a, b, c))
        return (self.coef_normalized_ if normalized else self.coef_)[i]


def fit_r_squared(H, I1, I2, R, samples, bindings=None, **kw) -> CubicR2Regressor:
    """Evaluate the phase-space functions on the samples and fit R^2."""
    vals = [evaluate_on(e, samples, bindings) for e in (H, I1, I2, R)]
    X = np.column_stack(vals[:3])
    return CubicR2Regressor(**kw).fit(X, vals[3] ** 2)


# ------------------------------------------------- binary cubic analysis

def discriminant(a, b, c, d):
    return b * b * c * c - 4 * a * c ** 3 - 4 * b ** 3 * d - 27 * a * a * d * d + 18 * a * b * c * d


def hessian_covariant(a, b, c, d):
    """Coefficients of the Hessian form; all vanish iff a triple root."""
    return np.array([b * b - 3 * a * c, b * c - 9 * a * d, c * c - 3 * b * d])


def _ratio(value, threshold, nonzero):
    value = abs(value)
    if nonzero:
        return value / threshold
    return threshold / value if value > 0 else np.inf


class RootPattern(NamedTuple):
    pattern: str
    margins: dict


def bombieri_norm(coeffs):
    """Norm of a binary form invariant under rotations of (I1, I2)."""
    coeffs = np.asarray(coeffs, float)
    n = len(coeffs) - 1
    w = np.array([math.comb(n, k) for k in range(n + 1)], float)
    return float(np.sqrt(np.sum(coeffs ** 2 / w)))


def binary_cubic_type(a, b, c, d, scale=None, eps_c=EPS_C, eps_disc=EPS_DISC, eps_hess=EPS_HESS):
    """Root multiplicities of a I1^3 + b I1^2 I2 + c I1 I2^2 + d I2^3.

    ``scale`` (default: the norm of the four coefficients) only enters the
    zero test.  Discriminant and Hessian are measured against the cubic's
    own rotation-invariant norm, so the pattern does not move when the
    integrals are rotated into each other.
    """
    coeffs = np.array([a, b, c, d], float)
    if scale is None:
        scale = float(np.linalg.norm(coeffs))
    cmax = float(np.max(np.abs(coeffs)))
    tz = eps_c * scale
    if scale == 0 or cmax < tz:
        return RootPattern("0", {"cubic": _ratio(cmax, tz, False) if scale else np.inf})
    m = {"cubic": _ratio(cmax, tz, True)}
    bn = bombieri_norm(coeffs)
    disc = discriminant(*coeffs) / bn ** 4
    if abs(disc) >= eps_disc:
        m["discriminant"] = _ratio(disc, eps_disc, True)
        return RootPattern("111", m)
    m["discriminant"] = _ratio(disc, eps_disc, False)
    h = bombieri_norm(hessian_covariant(*coeffs)) / bn ** 2
    if h >= eps_hess:
        m["hessian"] = _ratio(h, eps_hess, True)
        return RootPattern("21", m)
    m["hessian"] = _ratio(h, eps_hess, False)
    return RootPattern("3", m)


def leading_roots(a, b, c, d):
    """Projective roots (u, v) of the binary cubic, unit length, u ≥ 0.

    Sorted by (real part, imaginary part) of u then v, so the order is
    deterministic.
    """
    if abs(a) > 1e-300:
        # roots of a t^3 + b t^2 + c t + d with t = u/v
        ts = np.roots([a, b, c, d])
        reps = [np.array([t, 1.0 + 0j]) for t in ts]
    else:
        # a = 0: v = 0 is a root; remaining from b t^2 + c t + d
        reps = [np.array([1.0 + 0j, 0j])]
        reps += [np.array([t, 1.0 + 0j]) for t in np.roots([b, c, d])] if abs(b) > 0 else []
    out = []
    for r in reps:
        r = r / np.linalg.norm(r)
        k = r[0] if abs(r[0]) > 1e-14 else r[1]
        r = r * (abs(k) / k)  # make the leading entry real and ≥ 0
        out.append(r)
    out.sort(key=lambda r: (round(r[0].real, 12), round(r[0].imag, 12), round(r[1].real, 12), round(r[1].imag, 12)))
    return out


# ------------------------------------------------------ classification

@dataclass
class StaeckelType:
    label: str
    margins: dict
    ambiguous: bool = False
    candidates: tuple = ()
    pattern: str = ""
    details: dict = field(default_factory=dict)

    @property
    def min_margin(self):
        return float(min(self.margins.values())) if self.margins else np.inf

    def to_dict(self):
        return {"label": self.label if not self.ambiguous else "unclassifiable",
                "measured_label": self.label,
                "candidates": list(self.candidates),
                "margins": {k: float(v) for k, v in self.margins.items()}}


def _quadratic_parts(coef):
    """Quadratic-in-(I1, I2) coefficients: the H-linear part and the constant part."""
    get = lambda a, b, c: coef[MONOMIALS.index((a, b, c))]  # noqa: E731
    Q0 = np.array([get(0, 2, 0), get(0, 1, 1), get(0, 0, 2)])
    QH = np.array([get(1, 2, 0), get(1, 1, 1), get(1, 0, 2)])
    return QH, Q0


def _quad_form(q, u, v):
    return q[0] * u * u + q[1] * u * v + q[2] * v * v


def _second_label(pattern, cubic, QH, Q0, tz):
    """Second label and its margins given the root pattern."""
    a, b, c, d = cubic
    if pattern == "0":
        return "11", {}, {}
    d1 = np.array([3 * a, 2 * b, c])  # ∂C/∂I1 in the (I1^2, I1 I2, I2^2) basis
    d2 = np.array([b, 2 * c, 3 * d])
    if pattern in ("111", "21"):
        n = np.cross(d1, d2)
        n = n / np.linalg.norm(n)
        f = np.array([np.dot(n, QH), np.dot(n, Q0)])
        fmax = float(np.max(np.abs(f)))
        if pattern == "111":
            return "11", {"quadratic": _ratio(fmax, tz, True)}, {"quotient": f}
        present = fmax >= tz
        return ("2" if present else "0"), {"quadratic": _ratio(fmax, tz, present)}, {"quotient": f}
    # triple root: C ∝ l^3; r spans the kernel of l, s completes a frame
    m = d1 if np.linalg.norm(d1) >= np.linalg.norm(d2) else d2
    M = np.array([[m[0], m[1] / 2], [m[1] / 2, m[2]]])
    w, V = np.linalg.eigh(M)
    r = V[:, int(np.argmin(np.abs(w)))]
    s = np.array([-r[1], r[0]])
    bq = np.array([_quad_form(q, *r) for q in (QH, Q0)])
    aq = np.array([2 * (q[0] * r[0] * s[0] + q[2] * r[1] * s[1]) + q[1] * (r[0] * s[1] + r[1] * s[0])
                   for q in (QH, Q0)])
    info = {"b": bq, "a": aq}
    bmax = float(np.max(np.abs(bq)))
    if bmax >= tz:
        perp = abs(aq[0] * bq[1] - aq[1] * bq[0]) / np.linalg.norm(bq)
        independent = perp >= tz
        marg = {"quadratic": _ratio(bmax, tz, True), "parallel": _ratio(perp, tz, independent)}
        return ("11" if independent else "2"), marg, info
    amax = float(np.max(np.abs(aq)))
    present = amax >= tz
    marg = {"quadratic": _ratio(bmax, tz, False), "mixed": _ratio(amax, tz, present)}
    return ("11" if present else "0"), marg, info


def classify_coefficients(coef, eps_c=EPS_C, eps_disc=EPS_DISC, eps_hess=EPS_HESS, ambiguity=AMBIGUITY):
    """Classify from the 20 (normalised) coefficients of the R^2 cubic."""
    coef = np.asarray(coef, float)
    scale = float(np.linalg.norm(coef))
    get = lambda a, b, c: coef[MONOMIALS.index((a, b, c))]  # noqa: E731
    cubic = (get(0, 3, 0), get(0, 2, 1), get(0, 1, 2), get(0, 0, 3))
    QH, Q0 = _quadratic_parts(coef)
    tz = eps_c * scale
    rp = binary_cubic_type(*cubic, scale=scale, eps_c=eps_c, eps_disc=eps_disc, eps_hess=eps_hess)
    second, m2, info = _second_label(rp.pattern, cubic, QH, Q0, tz)
    label = f"({rp.pattern},{second})"
    margins = {**rp.margins, **m2}
    weak = {k: v for k, v in margins.items() if v < ambiguity}
    candidates = [label]
    if weak:
        flips = {"discriminant": {"111": "21", "21": "111", "3": "111"},
                 "hessian": {"21": "3", "3": "21"},
                 "cubic": {"0": "3", "111": "0", "21": "0", "3": "0"}}
        for key in weak:
            alt_pattern = flips.get(key, {}).get(rp.pattern)
            if alt_pattern:
                alt2, _, _ = _second_label(alt_pattern, cubic, QH, Q0, tz)
                alt = f"({alt_pattern},{alt2})"
            elif key in ("quadratic", "parallel", "mixed"):
                alt = {"(21,2)": "(21,0)", "(21,0)": "(21,2)", "(3,11)": "(3,2)",
                       "(3,2)": "(3,11)", "(3,0)": "(3,11)"}.get(label)
            else:
                alt = None
            if alt and alt in LABELS and alt not in candidates:
                candidates.append(alt)
    bn = bombieri_norm(cubic) or 1.0
    details = {"cubic": np.array(cubic), "discriminant": discriminant(*cubic) / bn ** 4,
               "hessian": hessian_covariant(*cubic) / bn ** 2,
               "scale": scale, **info}
    return StaeckelType(label, margins, bool(weak), tuple(candidates), rp.pattern, details)


def classify_staeckel(model: CubicR2Regressor, max_residual=1e-8, **kw) -> StaeckelType:
    check_is_fitted(model, "coef_normalized_")
    if model.residual_rms_ > max_residual:
        raise IllPosedFitError(f"fit residual {model.residual_rms_:.3e} above {max_residual:.1e}")
    st = classify_coefficients(model.coef_normalized_, **kw)
    st.details["residual_rms"] = model.residual_rms_
    st.details["condition_number"] = model.condition_number_
    return st


def canonical_pair(X):
    """Replace (I1, I2) by a basis fixed up to rotation.

    Both integrals are projected off span{1, H} and the remainder is
    whitened with the symmetric inverse square root of its covariance.
    Any invertible recombination with H-and-constant shifts lands on the
    same pair up to an orthogonal matrix, so the threshold tests do not
    depend on how the integrals happened to be chosen.  Returns the new
    samples, the 2x2 matrix T applied to (I1, I2) and the (2, 2) array S
    of their regression on (1, H): new pair = ((I1, I2) − [1, H] S) T.
    """
    X = np.asarray(X, float)
    A = np.column_stack([np.ones(len(X)), X[:, 0]])
    coef, *_ = np.linalg.lstsq(A, X[:, 1:], rcond=None)
    J = X[:, 1:] - A @ coef
    w, V = np.linalg.eigh(J.T @ J / len(J))
    if w[0] <= 1e-14 * max(w[1], 1e-300):
        raise IllPosedFitError("I1 and I2 are affinely dependent on H on the samples")
    T = V @ np.diag(w ** -0.5) @ V.T
    return np.column_stack([X[:, 0], J @ T]), T, coef


class StaeckelClassifier(BaseEstimator):
    """Fit R^2 on (H, I1, I2) samples and read off the Stäckel type.

    With ``canonical=True`` (default) the integrals are first brought to
    the basis of ``canonical_pair``; R^2 only picks up a constant factor.
    """

    def __init__(self, eps_c=EPS_C, eps_disc=EPS_DISC, eps_hess=EPS_HESS, ambiguity=AMBIGUITY,
                 max_residual=1e-8, canonical=True):
        self.eps_c = eps_c
        self.eps_disc = eps_disc
        self.eps_hess = eps_hess
        self.ambiguity = ambiguity
        self.max_residual = max_residual
        self.canonical = canonical

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if self.canonical:
            X, self.basis_, self.shift_ = canonical_pair(X)
            y = y * np.linalg.det(self.basis_) ** 2
        self.model_ = CubicR2Regressor().fit(X, y)
        self.type_ = classify_staeckel(self.model_, self.max_residual, eps_c=self.eps_c,
                                       eps_disc=self.eps_disc, eps_hess=self.eps_hess,
                                       ambiguity=self.ambiguity)
        self.label_ = self.type_.label
        return self

    def transform(self, X, y=None):
        """Map fresh (H, I1, I2) samples (and R^2) into the fitted basis."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        if not self.canonical:
            return X if y is None else (X, np.asarray(y, float))
        A = np.column_stack([np.ones(len(X)), X[:, 0]])
        Xt = np.column_stack([X[:, 0], (X[:, 1:] - A @ self.shift_) @ self.basis_])
        if y is None:
            return Xt
        return Xt, np.asarray(y, float) * np.linalg.det(self.basis_) ** 2


def functional_independence(H, I1, I2, pt, bindings=None, rel_tol=1e-9):
    """Rank of the 3x4 Jacobian d(H, I1, I2)/d(x, y, p1, p2) at one point."""
    b = {**(bindings or {}), **dict(zip(PHASE_VARS, (float(v) for v in pt)))}
    J = np.array([[evaluate(diff(F, v), b) for v in PHASE_VARS] for F in (H, I1, I2)], float)
    sv = np.linalg.svd(J, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > rel_tol * sv[0]))


# ------------------------------------------------ fast pencil sampling

class PencilSampler:
    """Numeric H, I1, I2 and R = {I1, I2} for systems built on a β-pencil.

    Given generators β_i (weight 4/3) sharing a projective potential U, the
    system with β = Σ t_i β_i has g^-1 = det β adj β and integrals with
    K = adj β · b · adj β, dW = b U, b = Σ s_i β_i.  All of these are
    polynomial in the generator components, so once the β_i, their first
    partials and W_i = ∫ β_i U are tabulated on the samples, any pencil
    element costs only array arithmetic.
    """

    def __init__(self, bases, U, samples, basepoint=(1.0, 1.0), bindings=None):
        from .systems import line_integral, transport_potential_oneform
        self.samples = {k: np.asarray(v, float) for k, v in samples.items()}
        b = {**(bindings or {}), "x": self.samples["x"], "y": self.samples["y"]}
        n = len(self.samples["x"])
        ev = lambda e: np.broadcast_to(evaluate(e, b), (n,)).astype(float)  # noqa: E731
        self.B = np.array([[ev(c) for c in beta.components()] for beta in bases])      # (m,3,n)
        self.Bx = np.array([[ev(diff(c, "x")) for c in beta.components()] for beta in bases])
        self.By = np.array([[ev(diff(c, "y")) for c in beta.components()] for beta in bases])
        self.U = np.array([ev(u) for u in U.components()])                           # (2,n)
        self.W = np.array([line_integral(transport_potential_oneform(beta, U), basepoint,
                                         (self.samples["x"], self.samples["y"]), bindings)
                           for beta in bases])                                        # (m,n)

    def _comb(self, t):
        t = np.asarray(t, float)
        return (np.tensordot(t, self.B, 1), np.tensordot(t, self.Bx, 1),
                np.tensordot(t, self.By, 1), t @ self.W)

    @staticmethod
    def _mat(c):
        return np.array([[c[0], c[1]], [c[1], c[2]]])  # (2,2,n)

    @staticmethod
    def _mm(A, B):
        return np.einsum("ijn,jkn->ikn", A, B)

    def _quadratic(self, K, Kx, Ky, dW, W):
        p = np.array([self.samples["p1"], self.samples["p2"]])
        pp = lambda M: np.einsum("in,ijn,jn->n", p, M, p)  # noqa: E731
        val = pp(K) + W
        gx = np.array([pp(Kx) + dW[0], pp(Ky) + dW[1]])
        gp = 2 * np.einsum("ijn,jn->in", K, p)
        return val, gx, gp

    def evaluate(self, t, s1, s2):
        """Values of H, I1, I2 and R at the samples."""
        b, bx, by, Wt = self._comb(t)
        adj = lambda c: np.array([c[2], -c[1], c[0]])  # noqa: E731
        A, Ax, Ay = self._mat(adj(b)), self._mat(adj(bx)), self._mat(adj(by))
        det = b[0] * b[2] - b[1] ** 2
        detx = bx[0] * b[2] + b[0] * bx[2] - 2 * b[1] * bx[1]
        dety = by[0] * b[2] + b[0] * by[2] - 2 * b[1] * by[1]
        out = []
        for coeffs in (t, s1, s2):
            c, cx, cy, Wc = self._comb(coeffs)
            if coeffs is t:
                K, Kx, Ky = det * A, detx * A + det * Ax, dety * A + det * Ay
            else:
                C, Cx, Cy = self._mat(c), self._mat(cx), self._mat(cy)
                K = self._mm(self._mm(A, C), A)
                Kx = self._mm(self._mm(Ax, C), A) + self._mm(self._mm(A, Cx), A) + self._mm(self._mm(A, C), Ax)
                Ky = self._mm(self._mm(Ay, C), A) + self._mm(self._mm(A, Cy), A) + self._mm(self._mm(A, C), Ay)
            dW = np.einsum("ijn,jn->in", self._mat(c), self.U)
            out.append(self._quadratic(K, Kx, Ky, dW, Wc))
        (H, Hx, Hp), (I1, I1x, I1p), (I2, I2x, I2p) = out
        R = np.sum(I1x * I2p - I1p * I2x, axis=0)
        brackets = (np.sum(Hx * I1p - Hp * I1x, axis=0), np.sum(Hx * I2p - Hp * I2x, axis=0))
        return H, I1, I2, R, brackets

    def classify(self, t, s1, s2, classifier=None):
        H, I1, I2, R, _ = self.evaluate(t, s1, s2)
        clf = classifier if classifier is not None else StaeckelClassifier()
        clf = clf.fit(np.column_stack([H, I1, I2]), R ** 2)
        return clf.type_, clf.model_
