"""First Dirichlet eigenvalue of the p-Laplacian on a mesh.

The eigenpair is produced by an inverse-power-type iteration: repeatedly
solve -div(|Du|^{p-2}Du) = |u|^{p-2}u / ||u||_p^{p-1}, normalize, and read
off the Rayleigh quotient.  At p = 2 the generalized sparse eigensolver is
used directly.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .core import (ProblemSpec, QuadSource, ScalarField, get_assembler,
                   solve_dirichlet, _signed_power)
from .errors import InvalidExponent, SupercriticalLambda
from .geometry import Mesh


@dataclass
class RayleighResult:
    lambda1: float
    eigenfunction: ScalarField   # normalized to unit L^p norm, positive inside
    history: list                # Rayleigh quotient per outer iteration


def rayleigh_quotient(u: ScalarField, p: float) -> float:
    """int |grad u|^p / int |u|^p with the mesh quadrature."""
    asm = get_assembler(u.mesh)
    g = u.grad_per_triangle()
    num = float(np.dot(u.mesh.areas,
                       np.einsum("tx,tx->t", g, g) ** (p / 2.0)))
    den = asm.integrate_quad([np.abs(v) ** p for v in asm.interpolate(u.values)])
    return num / den


def _lp_norm(u: ScalarField, p: float) -> float:
    asm = get_assembler(u.mesh)
    return asm.integrate_quad(
        [np.abs(v) ** p for v in asm.interpolate(u.values)]) ** (1.0 / p)


def first_eigenvalue(p: float, mesh: Mesh, tol: float = 1e-8,
                     max_outer: int = 60, newton_tol: float = 1e-10) -> RayleighResult:
    """First eigenvalue and positive eigenfunction on the mesh.

    Discrete values over-estimate the continuum eigenvalue and decrease
    under refinement.
    """
    if not 1 < p <= 2.0:
        # 2D meshes have N = 2; the variational setting requires p <= N
        if p > 2.0:
            raise InvalidExponent(f"p={p} above the ambient dimension N=2")
        raise InvalidExponent(f"p={p} must exceed 1")
    asm = get_assembler(mesh)
    free = asm.free

    # p = 2 start: generalized sparse eigenproblem K phi = lam M phi
    K = _stiffness_p2(mesh)
    M = asm.mass_like([np.ones(pts.shape[:2]) for _, _, pts, _ in asm.groups])
    Kff = K[free][:, free].tocsc()
    Mff = M[free][:, free].tocsc()
    vals, vecs = spla.eigsh(Kff, k=1, M=Mff, sigma=0, which="LM")
    lam2 = float(vals[0])
    phi = np.zeros(mesh.n_vertices)
    phi[free] = vecs[:, 0]
    if phi[free].sum() < 0:
        phi = -phi
    u = ScalarField(mesh, phi)
    u.values /= _lp_norm(u, p)
    history = [rayleigh_quotient(u, p)]
    if p == 2.0:
        res = RayleighResult(lam2, u, history)
        _check_eigen(res, p, newton_tol)
        return res

    for _ in range(max_outer):
        qv = get_assembler(mesh).interpolate(u.values)
        src = np.concatenate([
            _signed_power(v, p - 1.0).ravel() for v in qv])
        spec = ProblemSpec(p=p, lam=0.0, N=2, domain=mesh.domain,
                           f=QuadSource(src), mesh=mesh, newton_tol=newton_tol)
        u = solve_dirichlet(spec, u0=u)
        u.values /= _lp_norm(u, p)
        q = rayleigh_quotient(u, p)
        history.append(q)
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * abs(q):
            break
    res = RayleighResult(history[-1], u, history)
    _check_eigen(res, p, newton_tol)
    return res


def _stiffness_p2(mesh: Mesh):
    asm = get_assembler(mesh)
    return asm.stiffness_like(np.ones(mesh.n_triangles), None, None)


def _check_eigen(res: RayleighResult, p: float, tol: float):
    u = res.eigenfunction
    interior = ~u.mesh.boundary
    if np.any(u.values[interior] <= -max(tol, 1e-12)):
        raise InvalidExponent("eigenfunction not positive in the interior")
    q = rayleigh_quotient(u, p)
    if abs(q - res.lambda1) > 1e-6 * abs(q):
        raise InvalidExponent("Rayleigh quotient inconsistent with lambda1")


def lambda_gate(spec_lam: float, p: float, mesh: Mesh,
                lambda1_hint: float = None, margin: float = 0.02) -> float:
    """Check lam against the discrete first eigenvalue with a safety margin.

    Discrete eigenvalues over-estimate the continuum ones, hence the 2%
    default margin.  Returns the lambda1 estimate used.
    """
    if spec_lam <= 0:
        return lambda1_hint if lambda1_hint is not None else np.inf
    if lambda1_hint is None:
        key = ("lambda1", p)
        if key not in mesh._cache:
            mesh._cache[key] = first_eigenvalue(p, mesh, tol=1e-8).lambda1
        lambda1_hint = mesh._cache[key]
    if spec_lam >= (1.0 - margin) * lambda1_hint:
        raise SupercriticalLambda(
            f"lam={spec_lam} above the {margin:.0%} margin below "
            f"lambda1={lambda1_hint:.6g}")
    return lambda1_hint
