"""Scalar fields, the p-Dirichlet energy, and the damped-Newton solver.

The discrete problem minimizes

    J(u) = (1/p) int |grad u|^p - (lambda/p) int |u|^p - int f u

over P1 fields with prescribed boundary values.  The Newton linearization
replaces |grad u|^(p-2) by (eps^2 + |grad u|^2)^((p-2)/2) with a geometric
continuation in eps; the line search is on the true (unregularized) energy,
so descent is monotone regardless of the linearization.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (EqualArguments, InvalidExponent, MeshMismatch,
                     NewtonDivergence, PositivityViolation)
from .geometry import DomainSpec, Mesh, RingQuadrature, build_mesh, extract_ring
from .quadrules import triangle_rule


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class ScalarField:
    """Nodal coefficients of a piecewise-linear function on a mesh."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.values.shape != (self.mesh.n_vertices,):
            raise MeshMismatch(
                f"{self.values.shape} coefficients on a mesh with "
                f"{self.mesh.n_vertices} vertices")
        if not np.all(np.isfinite(self.values)):
            raise MeshMismatch("non-finite nodal coefficient")

    def copy(self) -> "ScalarField":
        return ScalarField(self.mesh, self.values.copy())

    def grad_per_triangle(self) -> np.ndarray:
        u = self.values[self.mesh.triangles]          # (m,3)
        return np.einsum("tj,tjx->tx", u, self.mesh.grads)

    def at_points(self, pts: np.ndarray, tri_idx: Optional[np.ndarray] = None) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if tri_idx is None:
            tri_idx = self.mesh.locate(pts)
            if np.any(tri_idx < 0):
                raise MeshMismatch("point outside the mesh")
        lam = self.mesh.barycentric(pts, tri_idx)
        return np.einsum("pj,pj->p", lam, self.values[self.mesh.triangles[tri_idx]])

    def on_ring(self, ring: RingQuadrature) -> np.ndarray:
        return self.at_points(ring.points, ring.tri_index)

    def ring_average(self, ring: RingQuadrature) -> float:
        v = self.on_ring(ring)
        return float(np.dot(ring.weights, v) / ring.weights.sum())


def constant_field(mesh: Mesh, value: float = 0.0) -> ScalarField:
    return ScalarField(mesh, np.full(mesh.n_vertices, float(value)))


def field_from_callable(mesh: Mesh, fn: Callable) -> ScalarField:
    return ScalarField(mesh, np.asarray(fn(mesh.vertices), float))


Source = Union[None, float, np.ndarray, ScalarField, Callable, "QuadSource"]


@dataclass
class QuadSource:
    """Source given directly by its values at the mesh quadrature points."""

    values: np.ndarray


# ---------------------------------------------------------------------------
# problem description
# ---------------------------------------------------------------------------

@dataclass
class ProblemSpec:
    """Full identity of one Dirichlet problem for -div(|Du|^{p-2}Du) - lam|u|^{p-2}u = f.

    For 2D FEM runs N = 2; radial-ball problems carry N >= 2 and are solved
    by the 1D reference solvers instead.
    """

    p: float
    lam: float
    N: int
    domain: DomainSpec
    g: Source = None          # boundary data (zero trace when None)
    f: Source = None          # right-hand side
    h: float = 0.1
    gamma_g: float = 0.3
    eps_start: float = 1e-1
    eps_final: float = 1e-8
    eps_factor: float = 0.1
    newton_tol: float = 1e-8
    max_iter: int = 60
    mesh: Optional[Mesh] = None

    def __post_init__(self):
        # plain Dirichlet solves make sense for any p > 1; the (1, N]
        # window of the Green-function theory is enforced by those ops
        if not (np.isfinite(self.p) and self.p > 1.0):
            raise InvalidExponent(f"p={self.p} must be finite and > 1")

    def get_mesh(self) -> Mesh:
        if self.mesh is None:
            self.mesh = build_mesh(self.domain, self.h, self.gamma_g)
        return self.mesh

    def with_(self, **kw) -> "ProblemSpec":
        return replace(self, **kw)


@dataclass
class AdmissibilityReport:
    admissible: bool
    threshold: float
    q_bar: float
    q_bar_star: float
    p_star: float


def admissibility(p: float, N: float, lam: float) -> AdmissibilityReport:
    """Exponent bookkeeping for the (p, N) pair.

    The threshold max{2 - 1/N, sqrt(N), N/2} gates the lam != 0 theory;
    q_bar = N(p-1)/(N-1) is the integrability exponent separating the
    gradient of the regular part from that of the singular profile.
    """
    if p <= 1 or p > N:
        raise InvalidExponent(f"p={p} outside (1, N] with N={N}")
    if N < 2:
        raise InvalidExponent(f"N={N} below 2")
    threshold = max(2 - 1 / N, np.sqrt(N), N / 2) if lam != 0 else 1.0
    q_bar = N * (p - 1) / (N - 1)
    q_bar_star = N * (p - 1) / (N - p) if p < N else np.inf
    p_star = N * p / (N - p) if p < N else np.inf
    return AdmissibilityReport(bool(p > threshold), threshold, q_bar, q_bar_star, p_star)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

class Assembler:
    """Cached quadrature tables and sparse assembly for one mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.groups = []
        for order in (4, 8):
            sel = np.nonzero(mesh.quad_order == order)[0]
            if not len(sel):
                continue
            bary, w = triangle_rule(order)
            pts = np.einsum("qj,tjx->tqx", bary, mesh.tri_coords[sel])
            wts = mesh.areas[sel][:, None] * w[None, :]
            self.groups.append((sel, bary, pts, wts))
        tri = mesh.triangles
        self.rows = np.repeat(tri, 3, axis=1).ravel()
        self.cols = np.tile(tri, (1, 3)).ravel()
        self.free = ~mesh.boundary
        self.n = mesh.n_vertices

    # --- sources ----------------------------------------------------------
    def quad_values(self, f: Source):
        """Values of f at all quadrature points, grouped like self.groups."""
        if f is None:
            return None
        out = []
        offset = 0
        for sel, bary, pts, wts in self.groups:
            if isinstance(f, QuadSource):
                k = pts.shape[0] * pts.shape[1]
                out.append(f.values[offset:offset + k].reshape(pts.shape[:2]))
                offset += k
            elif isinstance(f, ScalarField):
                if f.mesh is not self.mesh:
                    raise MeshMismatch("source lives on a different mesh")
                out.append(f.values[self.mesh.triangles[sel]] @ bary.T)
            elif callable(f):
                out.append(np.asarray(f(pts.reshape(-1, 2)), float).reshape(pts.shape[:2]))
            elif np.ndim(f) == 0:
                out.append(np.full(pts.shape[:2], float(f)))
            else:
                arr = np.asarray(f, float)
                if arr.shape != (self.n,):
                    raise MeshMismatch("nodal source has wrong length")
                out.append(arr[self.mesh.triangles[sel]] @ bary.T)
        return out

    def interpolate(self, nodal: np.ndarray):
        return [nodal[self.mesh.triangles[sel]] @ bary.T
                for sel, bary, pts, wts in self.groups]

    def integrate_quad(self, per_group_values) -> float:
        return float(sum(np.sum(wts * v) for (sel, bary, pts, wts), v
                         in zip(self.groups, per_group_values)))

    def quad_points_flat(self) -> np.ndarray:
        return np.vstack([pts.reshape(-1, 2) for _, _, pts, _ in self.groups])

    def quad_weights_flat(self) -> np.ndarray:
        return np.concatenate([wts.ravel() for _, _, _, wts in self.groups])

    def scatter_quad(self, per_group_values) -> np.ndarray:
        """Assemble sum_q w_q v_q phi_i(x_q) into a nodal vector."""
        out = np.zeros(self.n)
        for (sel, bary, pts, wts), v in zip(self.groups, per_group_values):
            contrib = np.einsum("tq,qj->tj", wts * v, bary)
            np.add.at(out, self.mesh.triangles[sel], contrib)
        return out

    def mass_like(self, per_group_coeff) -> sp.csc_matrix:
        """Assemble sum_q w_q c_q phi_i phi_j as a sparse matrix."""
        n = self.n
        data = []
        rows = []
        cols = []
        for (sel, bary, pts, wts), c in zip(self.groups, per_group_coeff):
            blk = np.einsum("tq,qi,qj->tij", wts * c, bary, bary)
            tri = self.mesh.triangles[sel]
            rows.append(np.repeat(tri, 3, axis=1).ravel())
            cols.append(np.tile(tri, (1, 3)).ravel())
            data.append(blk.ravel())
        return sp.csc_matrix((np.concatenate(data),
                              (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))

    def stiffness_like(self, coeff_a: np.ndarray, coeff_gg: Optional[np.ndarray],
                       g: Optional[np.ndarray]) -> sp.csc_matrix:
        """Assemble per-triangle a*(bi.bj) + c*(g.bi)(g.bj)."""
        grads = self.mesh.grads
        A = self.mesh.areas
        bb = np.einsum("tix,tjx->tij", grads, grads)
        blk = (A * coeff_a)[:, None, None] * bb
        if coeff_gg is not None:
            gb = np.einsum("tx,tjx->tj", g, grads)
            blk = blk + (A * coeff_gg)[:, None, None] * np.einsum(
                "ti,tj->tij", gb, gb)
        return sp.csc_matrix((blk.ravel(), (self.rows, self.cols)),
                             shape=(self.n, self.n))


def get_assembler(mesh: Mesh) -> Assembler:
    if "assembler" not in mesh._cache:
        mesh._cache["assembler"] = Assembler(mesh)
    return mesh._cache["assembler"]


def _signed_power(v, e):
    """|v|^e * sign(v) with 0 mapped to 0 (safe for e > -1 territory)."""
    out = np.zeros_like(v)
    nz = v != 0
    out[nz] = np.abs(v[nz]) ** e * np.sign(v[nz])
    return out


def _abs_power(v, e):
    out = np.zeros_like(v)
    nz = v != 0
    out[nz] = np.abs(v[nz]) ** e
    return out


# ---------------------------------------------------------------------------
# energy, gradient, hessian
# ---------------------------------------------------------------------------

def energy(u: ScalarField, spec: ProblemSpec, fq=None) -> float:
    """The p-Dirichlet energy J(u) of the field under the given problem."""
    if spec.mesh is not None and u.mesh is not spec.mesh:
        raise MeshMismatch("field and problem live on different meshes")
    asm = get_assembler(u.mesh)
    g = u.grad_per_triangle()
    gn2 = np.einsum("tx,tx->t", g, g)
    J = float(np.dot(u.mesh.areas, gn2 ** (spec.p / 2.0))) / spec.p
    uq = None
    if spec.lam != 0.0:
        uq = asm.interpolate(u.values)
        J -= spec.lam / spec.p * asm.integrate_quad(
            [np.abs(v) ** spec.p for v in uq])
    if fq is None:
        fq = asm.quad_values(spec.f)
    if fq is not None:
        if uq is None:
            uq = asm.interpolate(u.values)
        J -= asm.integrate_quad([fv * v for fv, v in zip(fq, uq)])
    return J


def energy_gradient(u: ScalarField, spec: ProblemSpec, fq=None) -> np.ndarray:
    asm = get_assembler(u.mesh)
    g = u.grad_per_triangle()
    gn = np.sqrt(np.einsum("tx,tx->t", g, g))
    coeff = _abs_power(gn, spec.p - 2.0)
    flux = (u.mesh.areas * coeff)[:, None] * g
    out = np.zeros(u.mesh.n_vertices)
    contrib = np.einsum("tx,tjx->tj", flux, u.mesh.grads)
    np.add.at(out, u.mesh.triangles, contrib)
    uq = None
    if spec.lam != 0.0:
        uq = asm.interpolate(u.values)
        out -= spec.lam * asm.scatter_quad(
            [_signed_power(v, spec.p - 1.0) for v in uq])
    if fq is None:
        fq = asm.quad_values(spec.f)
    if fq is not None:
        out -= asm.scatter_quad(fq)
    return out


def energy_hessian(u: ScalarField, spec: ProblemSpec, eps: float) -> sp.csc_matrix:
    """Regularized Newton matrix at u with degeneracy parameter eps."""
    asm = get_assembler(u.mesh)
    p = spec.p
    g = u.grad_per_triangle()
    gn2 = np.einsum("tx,tx->t", g, g) + eps * eps
    if p == 2.0:
        K = asm.stiffness_like(np.ones(len(gn2)), None, None)
    else:
        a = gn2 ** ((p - 2.0) / 2.0)
        c = (p - 2.0) * gn2 ** ((p - 4.0) / 2.0)
        K = asm.stiffness_like(a, c, g)
    if spec.lam != 0.0:
        uq = asm.interpolate(u.values)
        coeff = [-spec.lam * (p - 1.0) * (v * v + eps * eps) ** ((p - 2.0) / 2.0)
                 for v in uq]
        K = K + asm.mass_like(coeff)
    return K


# ---------------------------------------------------------------------------
# Newton solver
# ---------------------------------------------------------------------------

def _linsolve(K: sp.csc_matrix, b: np.ndarray) -> np.ndarray:
    return spla.splu(K.tocsc()).solve(b)


def _linsolve_cached(mesh: Mesh, key, K_builder, b: np.ndarray) -> np.ndarray:
    """Solve with a factorization cached on the mesh (p = 2 matrices only)."""
    cache_key = ("splu",) + key
    if cache_key not in mesh._cache:
        mesh._cache[cache_key] = spla.splu(K_builder().tocsc())
    return mesh._cache[cache_key].solve(b)


def _apply_boundary(mesh: Mesh, g: Source) -> np.ndarray:
    vals = np.zeros(mesh.n_vertices)
    if g is None:
        return vals
    if isinstance(g, ScalarField):
        vals[:] = g.values
    elif callable(g):
        vals[mesh.boundary] = np.asarray(
            g(mesh.vertices[mesh.boundary]), float)
    elif np.ndim(g) == 0:
        vals[mesh.boundary] = float(g)
    else:
        vals[:] = np.asarray(g, float)
    vals[~mesh.boundary] = 0.0
    return vals


def _p_path(p_target: float) -> list:
    """Continuation path in p starting from the linear problem."""
    if abs(p_target - 2.0) <= 0.5:
        return [p_target]
    step = 0.5 if p_target > 2 else -0.5
    path = []
    p = 2.0
    while abs(p_target - p) > 0.5:
        p += step
        path.append(p)
    path.append(p_target)
    return path


def solve_dirichlet(spec: ProblemSpec, u0: Optional[ScalarField] = None,
                    trace: Optional[list] = None,
                    extra_fixed: Optional[tuple] = None) -> ScalarField:
    """Solve the Dirichlet problem described by spec on its mesh.

    Returns the discrete minimizer; first-order optimality is certified by
    the projected gradient norm falling below spec.newton_tol.  Raises
    NewtonDivergence if the damped iteration stalls at the smallest
    regularization, and PositivityViolation if an ordered problem
    (f >= 0, g >= 0) produces nodal values below -newton_tol.

    extra_fixed = (mask, values) constrains additional nodes, which is how
    the punctured-domain approximation pins the singular profile on an
    inner ball.
    """
    mesh = spec.get_mesh()
    asm = get_assembler(mesh)
    fq = asm.quad_values(spec.f)
    gb = _apply_boundary(mesh, spec.g)
    free = asm.free.copy()
    if extra_fixed is not None:
        mask, vals = extra_fixed
        free &= ~mask
        gb[mask] = vals[mask] if vals.shape == gb.shape else vals

    u = ScalarField(mesh, gb.copy())
    if u0 is not None:
        u.values[free] = u0.values[free]

    fkey = hash(free.tobytes())

    # linear initialization: p=2 solve with the lambda term ramped away
    # unless the target itself is p=2
    init_lam = spec.lam if spec.p == 2.0 else 0.0
    spec2 = spec.with_(p=2.0, lam=init_lam, mesh=mesh) if spec.p != 2.0 else spec
    if u0 is None:
        r = energy_gradient(u, spec2, fq=fq)
        du = _linsolve_cached(
            mesh, (2.0, init_lam, fkey),
            lambda: energy_hessian(u, spec2, 0.0)[free][:, free], -r[free])
        u.values[free] += du

    stages = []
    path = _p_path(spec.p)
    n_path = len(path)
    for i, p_i in enumerate(path):
        lam_i = spec.lam if spec.p == 2.0 else spec.lam * (i + 1) / n_path
        last = i == n_path - 1
        if p_i == 2.0:
            stages.append((2.0, lam_i, 0.0, spec.newton_tol if last else 1e-6))
            continue
        eps = spec.eps_start
        eps_list = []
        while eps > spec.eps_final * (1 + 1e-12):
            eps_list.append(eps)
            eps *= spec.eps_factor
        eps_list.append(spec.eps_final)
        if not last:
            eps_list = [e for e in eps_list if e >= 1e-4] or [1e-4]
        for j, e in enumerate(eps_list):
            tol = spec.newton_tol if (last and j == len(eps_list) - 1) else \
                max(spec.newton_tol, 1e-6)
            stages.append((p_i, lam_i, e, tol))

    for p_i, lam_i, eps, tol in stages:
        sub = spec.with_(p=p_i, lam=lam_i, mesh=mesh)
        u, ok = _newton(sub, u, fq, eps, tol, trace, free, fkey)
        if not ok and (p_i, eps, tol) == (stages[-1][0], stages[-1][2], stages[-1][3]):
            raise NewtonDivergence(
                f"stalled at eps={eps:g} with tol={tol:g} (p={p_i})")

    _check_positivity(u, spec, fq, gb)
    return u


def _newton(spec, u, fq, eps, tol, trace, free, fkey) -> tuple:
    J = energy(u, spec, fq=fq)
    for it in range(spec.max_iter):
        r = energy_gradient(u, spec, fq=fq)
        gn = float(np.linalg.norm(r[free]))
        if trace is not None:
            trace.append({"iteration": it, "energy": J, "gradient_norm": gn,
                          "step_length": 0.0, "eps_reg": eps})
        if gn <= tol:
            return u, True
        d = np.zeros_like(u.values)
        if spec.p == 2.0:
            d[free] = _linsolve_cached(
                u.mesh, (2.0, spec.lam, fkey),
                lambda: energy_hessian(u, spec, eps)[free][:, free], -r[free])
        else:
            K = energy_hessian(u, spec, eps)
            d[free] = _linsolve(K[free][:, free].tocsc(), -r[free])
        slope = float(r[free] @ d[free])
        if not np.isfinite(slope) or slope >= 0:
            d[free] = -r[free]
            slope = -gn * gn
        t = 1.0
        accepted = False
        for _ in range(40):
            cand = ScalarField(u.mesh, u.values + t * d)
            Jc = energy(cand, spec, fq=fq)
            if np.isfinite(Jc) and Jc <= J + 1e-4 * t * slope:
                u, J = cand, Jc
                accepted = True
                break
            t *= 0.5
        if trace is not None and trace:
            trace[-1]["step_length"] = t if accepted else 0.0
        if not accepted:
            return u, False
    return u, float(np.linalg.norm(energy_gradient(u, spec, fq=fq)[free])) <= tol


def _check_positivity(u, spec, fq, gb):
    f_nonneg = fq is None or all(np.all(v >= -1e-14) for v in fq)
    g_nonneg = np.all(gb >= -1e-14)
    if f_nonneg and g_nonneg:
        if u.values.min() < -spec.newton_tol:
            raise PositivityViolation(
                f"minimum nodal value {u.values.min():.3e} below -tau_N "
                f"on an ordered problem")


# ---------------------------------------------------------------------------
# diagnostics used throughout
# ---------------------------------------------------------------------------

def coercivity_ratio(X, Y, p: float):
    """<|X|^{p-2}X - |Y|^{p-2}Y, X - Y> / ((|X-Y| + |Y|)^{p-2} |X-Y|^2).

    Accepts single vectors or batches in the leading axes; the ratio is
    scale invariant and strictly positive for X != Y.
    """
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    nx = np.sqrt(np.sum(X * X, axis=-1))
    ny = np.sqrt(np.sum(Y * Y, axis=-1))
    D = X - Y
    nd = np.sqrt(np.sum(D * D, axis=-1))
    if np.any(nd == 0):
        raise EqualArguments("coercivity ratio undefined at X == Y")
    num = np.sum((_abs_power(nx, p - 2)[..., None] * X
                  - _abs_power(ny, p - 2)[..., None] * Y) * D, axis=-1)
    den = (nd + ny) ** (p - 2) * nd ** 2
    return num / den


def wkq_seminorm(u: ScalarField, q: float, region=None) -> float:
    """(int |grad u|^q)^(1/q), optionally restricted to an annulus.

    region may be None (whole mesh), a RingQuadrature, or a tuple
    (r1, r2) interpreted around the mesh pole.
    """
    if q < 1:
        raise InvalidExponent(f"q={q} below 1")
    g = u.grad_per_triangle()
    gn = np.sqrt(np.einsum("tx,tx->t", g, g))
    if region is None:
        val = np.dot(u.mesh.areas, gn ** q)
    else:
        ring = region if isinstance(region, RingQuadrature) else \
            extract_ring(u.mesh, u.mesh.pole, region[0], region[1])
        val = np.dot(ring.weights, gn[ring.tri_index] ** q)
    return float(val ** (1.0 / q))
