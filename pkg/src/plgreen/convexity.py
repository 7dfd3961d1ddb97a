"""Executable form of the convexity machinery behind uniqueness.

The functional I(w) = int |grad w^(1/p)|^p, its first variation, and the
second-variation density rho are all discretized at the same quadrature
points, so the three are exact derivatives of one another up to floating
error; the finite-difference cross-checks in the test suite rely on that.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import ProblemSpec, ScalarField, get_assembler, solve_dirichlet
from .errors import (DegenerateBase, HypothesisViolated, InvalidExponent,
                     NegativeField)
from .quadrules import gauss_legendre

_POSITIVITY_MARGIN = 1e-10
_COS_GUARD = 1e-14


@dataclass
class ConvexityConstants:
    """Published constants of the second-variation decomposition.

    These drive the square-completion bound; they agree with the actual
    pointwise density only at p = 2 (see rho_density, which carries the
    exact-derivative coefficients (p-1)/p, 2(p-1)/p, 1/p + (p-2)cos^2/p).
    """

    p: float

    @property
    def C1(self) -> float:
        p = self.p
        return (p - 1.0) * (p ** 3 - 3 * p ** 2 + 5 * p - 2) / p ** 3

    @property
    def C2(self) -> float:
        p = self.p
        return 2.0 * (p - 1.0) * (p ** 2 - 2 * p + 2) / p ** 2

    @property
    def C3_base(self) -> float:
        return 1.0 / self.p

    def C3(self, cos2):
        return self.C3_base + (self.p - 2.0) * cos2

    def discriminant_floor(self) -> float:
        """Lower bound of 4 C1 C3 - C2^2 cos^2 at the worst angle (p >= 2)."""
        p = self.p
        return 4.0 * (p - 1.0) ** 2 * (p - 2.0) / p ** 4


@dataclass
class QuadField:
    """Per-quadrature-point values with weights; integrates by a dot product."""

    values: np.ndarray
    weights: np.ndarray

    def integral(self) -> float:
        return float(np.dot(self.values, self.weights))

    def min(self) -> float:
        return float(self.values.min())


def _quad_data(w: ScalarField, phi: ScalarField = None):
    """Interpolated values and per-point gradients for w (and phi)."""
    asm = get_assembler(w.mesh)
    gw = w.grad_per_triangle()
    wq, gwq, weights = [], [], []
    phq, gphq = [], []
    gp = phi.grad_per_triangle() if phi is not None else None
    for sel, bary, pts, wts in asm.groups:
        k = bary.shape[0]
        wq.append((w.values[w.mesh.triangles[sel]] @ bary.T).ravel())
        gwq.append(np.repeat(gw[sel], k, axis=0))
        weights.append(wts.ravel())
        if phi is not None:
            phq.append((phi.values[w.mesh.triangles[sel]] @ bary.T).ravel())
            gphq.append(np.repeat(gp[sel], k, axis=0))
    out = [np.concatenate(wq), np.vstack(gwq), np.concatenate(weights)]
    if phi is not None:
        out += [np.concatenate(phq), np.vstack(gphq)]
    return out


def I_energy(w: ScalarField, p: float) -> float:
    """int |grad w^(1/p)|^p for w >= 0; +inf where the integrand diverges.

    Divergence happens at quadrature points with w = 0 but grad w != 0
    (the 1/p-th root has unbounded slope there).
    """
    if np.any(w.values < 0):
        raise NegativeField(f"minimum nodal value {w.values.min():.3e} < 0")
    wq, gwq, wts = _quad_data(w)
    gn = np.hypot(gwq[:, 0], gwq[:, 1])
    div = (wq <= 0) & (gn > 0)
    if np.any(div):
        return float("inf")
    vals = np.zeros_like(wq)
    ok = wq > 0
    vals[ok] = (gn[ok] / p) ** p * wq[ok] ** (1.0 - p)
    return float(np.dot(vals, wts))


def I_prime(w: ScalarField, phi: ScalarField, p: float) -> float:
    """First variation int |grad w^(1/p)|^{p-2} <grad w^(1/p), grad(w^((1-p)/p) phi)>."""
    wq, gwq, wts, phq, gphq = _quad_data(w, phi)
    if np.any((wq < _POSITIVITY_MARGIN) & (np.abs(phq) > 0)):
        raise DegenerateBase(
            "w falls below the positivity margin on the support of phi")
    gn2 = np.einsum("qx,qx->q", gwq, gwq)
    mixed = np.einsum("qx,qx->q", gwq, gphq)
    # exact pointwise expansion of the defining formula
    vals = (1.0 / p) ** (p - 1.0) * wq ** (1.0 - p) * (
        gn2 ** ((p - 2.0) / 2.0) * mixed
        + (1.0 - p) / p * phq / wq * gn2 ** (p / 2.0))
    return float(np.dot(vals, wts))


def rho_density(w: ScalarField, phi: ScalarField, p: float) -> QuadField:
    """Second-variation density rho(w, phi) at the quadrature points.

    rho = w^{2(1-p)/p} |grad w^{1/p}|^{p-2} [ C1 (|grad w|/w)^2 phi^2
          - C2 cos(a) (|grad w|/w) phi |grad phi| + C3(a) |grad phi|^2 ],
    with the mixed term zeroed when |grad w||grad phi| underflows (the
    angle is then a removable 0/0).
    """
    wq, gwq, wts, phq, gphq = _quad_data(w, phi)
    if np.any((wq < _POSITIVITY_MARGIN) & (np.abs(phq) > 0)):
        raise DegenerateBase(
            "w falls below the positivity margin on the support of phi")
    cc = ConvexityConstants(p)
    gw = np.hypot(gwq[:, 0], gwq[:, 1])
    gp = np.hypot(gphq[:, 0], gphq[:, 1])
    dot = np.einsum("qx,qx->q", gwq, gphq)
    denom = gw * gp
    cos = np.where(denom > _COS_GUARD, dot / np.maximum(denom, _COS_GUARD), 0.0)
    wq_safe = np.maximum(wq, _POSITIVITY_MARGIN)
    grad_root = (gw / p) * wq_safe ** ((1.0 - p) / p)
    pref = wq_safe ** (2.0 * (1.0 - p) / p) * grad_root ** (p - 2.0)
    bracket = (cc.C1 * (gw / wq_safe) ** 2 * phq ** 2
               - cc.C2 * cos * (gw / wq_safe) * phq * gp
               + (cc.C3_base + (p - 2.0) * cos ** 2) * gp ** 2)
    return QuadField(pref * bracket, wts)


def rho_lower_bound(w: ScalarField, phi: ScalarField, p: float) -> QuadField:
    """The |grad phi|^2 term of the square-completed lower bound on rho."""
    wq, gwq, wts, phq, gphq = _quad_data(w, phi)
    wq_safe = np.maximum(wq, _POSITIVITY_MARGIN)
    gw = np.hypot(gwq[:, 0], gwq[:, 1])
    gp = np.hypot(gphq[:, 0], gphq[:, 1])
    grad_root = (gw / p) * wq_safe ** ((1.0 - p) / p)
    poly = p ** 3 - 3 * p ** 2 + 5 * p - 2
    coef = (p - 1.0) * (p - 2.0) / (p * poly)
    vals = coef * wq_safe ** (2.0 * (1.0 - p) / p) * grad_root ** (p - 2.0) * gp ** 2
    return QuadField(vals, wts)


def second_variation(w: ScalarField, phi: ScalarField, p: float) -> float:
    return rho_density(w, phi, p).integral()


def segment_identity_gap(w1: ScalarField, w2: ScalarField, p: float,
                         n_gauss: int = 24) -> float:
    """|int_0^1 I''(w_s)[phi,phi] ds - (I'(w1)[phi] - I'(w2)[phi])| for
    w_s = s w1 + (1-s) w2 and phi = w1 - w2, relative to the difference."""
    phi = ScalarField(w1.mesh, w1.values - w2.values)
    s, wts = gauss_legendre(n_gauss, 0.0, 1.0)
    acc = 0.0
    for si, wi in zip(s, wts):
        ws = ScalarField(w1.mesh, si * w1.values + (1 - si) * w2.values)
        acc += wi * second_variation(ws, phi, p)
    diff = I_prime(w1, phi, p) - I_prime(w2, phi, p)
    return abs(acc - diff) / max(abs(diff), 1e-300)


# ---------------------------------------------------------------------------
# weak-comparison harness
# ---------------------------------------------------------------------------

@dataclass
class ComparisonVerdict:
    passed: bool
    max_violation: float
    tolerance: float


def _source_values(spec: ProblemSpec, where: str):
    if spec.domain.kind == "radial_ball":
        r = np.linspace(0.0, spec.domain.radius, 200)
        f = spec.f
        if f is None:
            return np.zeros_like(r)
        return np.full_like(r, float(f)) if np.ndim(f) == 0 else np.asarray(f(r), float)
    asm = get_assembler(spec.get_mesh())
    fq = asm.quad_values(spec.f)
    if fq is None:
        return np.zeros(1)
    return np.concatenate([v.ravel() for v in fq])


def comparison_harness(spec1: ProblemSpec, spec2: ProblemSpec) -> ComparisonVerdict:
    """Solve both ordered problems and check u1 <= u2 + tau_N nodewise.

    Hypotheses f1 <= f2, f2 >= 0, g1 <= g2 are verified first and a
    HypothesisViolated error names the failing one.  Ball domains are
    dispatched to the radial reference solver.
    """
    if spec1.p != spec2.p or spec1.lam != spec2.lam:
        raise HypothesisViolated("the two problems must share p and lambda")
    if spec1.p < 2.0:
        raise InvalidExponent("comparison principle asserted for p >= 2 only")
    f1 = _source_values(spec1, "f")
    f2 = _source_values(spec2, "f")
    if np.any(f2 < -1e-14):
        raise HypothesisViolated("f2 has negative values")
    if f1.shape == f2.shape and np.any(f1 > f2 + 1e-14):
        raise HypothesisViolated("f1 exceeds f2 somewhere")

    if spec1.domain.kind == "radial_ball":
        from .radial import radial_bvp
        N, R = spec1.domain.dim, spec1.domain.radius
        lam = spec1.lam
        u1 = radial_bvp(spec1.p, N, R, lam, spec1.f if spec1.f is not None else 0.0)
        u2 = radial_bvp(spec2.p, N, R, lam, spec2.f if spec2.f is not None else 0.0)
        r = np.linspace(0.0, R, 400)
        tol = max(spec1.newton_tol, spec2.newton_tol) * 100 + 1e-9
        viol = float(np.max(u1(r) - u2(r)))
        return ComparisonVerdict(viol <= tol, viol, tol)

    if spec1.get_mesh() is not spec2.get_mesh():
        raise HypothesisViolated("the two problems must share one mesh")
    mesh = spec1.get_mesh()
    from .core import _apply_boundary
    g1 = _apply_boundary(mesh, spec1.g)
    g2 = _apply_boundary(mesh, spec2.g)
    if np.any(g1 > g2 + 1e-14):
        raise HypothesisViolated("g1 exceeds g2 on the boundary")
    u1 = solve_dirichlet(spec1)
    u2 = solve_dirichlet(spec2)
    tol = max(spec1.newton_tol, spec2.newton_tol)
    viol = float(np.max(u1.values - u2.values))
    return ComparisonVerdict(viol <= tol, viol, tol)


# ---------------------------------------------------------------------------
# random smooth test fields
# ---------------------------------------------------------------------------

def random_trig_field(mesh, rng, floor: float = 0.1, modes: int = 3,
                      amplitude: float = 0.3) -> ScalarField:
    """Truncated trigonometric sum bounded below by `floor`."""
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    vals = np.zeros(mesh.n_vertices)
    for _ in range(modes):
        kx, ky = rng.uniform(-3, 3, 2)
        ph = rng.uniform(0, 2 * np.pi)
        vals += rng.uniform(0.2, 1.0) * np.sin(kx * x + ky * y + ph)
    vals = vals * amplitude / max(np.abs(vals).max(), 1e-12)
    return ScalarField(mesh, vals - vals.min() + floor)
