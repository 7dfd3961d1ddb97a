"""Independent 1D reference solvers on balls of any dimension N >= 2.

Closed forms where available; quadrature inversion for lambda = 0 and
shooting with an adaptive embedded Runge-Kutta pair otherwise.  These
profiles supply the derived oracles for everything the 2D pipeline
computes, and are the only route to N = 3 runs.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .errors import (InvalidExponent, QuadratureFailure, ShootingDivergence,
                     SupercriticalLambda)
from .fundamentals import (C0_constant, gamma_radial, gamma_radial_derivative,
                           log_normalization, surface_NwN)
from .quadrules import gauss_legendre

_RTOL = 1e-10


@dataclass
class RadialProfile:
    """Radial grid values of a profile on the ball of radius R.

    The grid is geometric near zero with first positive radius <= 1e-6 R.
    An optional dense evaluator exposes the underlying ODE solution.
    """

    r: np.ndarray
    values: np.ndarray
    p: float
    N: float
    R: float
    derivative: Optional[np.ndarray] = None
    _eval: Optional[Callable] = field(default=None, repr=False)
    _eval_deriv: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        if np.any(np.diff(self.r) <= 0):
            raise QuadratureFailure("radial grid must be strictly increasing")
        if self.r[0] != 0.0 or self.r[1] > 1e-6 * self.R * (1 + 1e-12):
            raise QuadratureFailure("grid must start at 0 with r_1 <= 1e-6 R")

    def __call__(self, r):
        if self._eval is None:
            return np.interp(r, self.r, self.values)
        return self._eval(np.asarray(r, float))

    def deriv(self, r):
        if self._eval_deriv is None:
            if self.derivative is None:
                raise QuadratureFailure("profile carries no derivative data")
            return np.interp(r, self.r, self.derivative)
        return self._eval_deriv(np.asarray(r, float))


def _default_grid(R: float, M: int = 400) -> np.ndarray:
    g = np.geomspace(1e-7 * R, R, M)
    return np.concatenate([[0.0], g])


def ball_integral(fn: Callable, a: float, b: float, N: float,
                  panels: int = 200, order: int = 12) -> float:
    """N omega_N int_a^b r^{N-1} fn(r) dr by composite Gauss panels.

    Panels are geometric when a is tiny so integrable singularities at the
    origin are resolved.
    """
    if b <= a:
        return 0.0
    lo = max(a, 1e-14 * b)
    edges = np.geomspace(lo, b, panels + 1) if lo < b / 4 else \
        np.linspace(lo, b, panels + 1)
    total = 0.0
    for i in range(panels):
        x, w = gauss_legendre(order, edges[i], edges[i + 1])
        total += np.dot(w, x ** (N - 1.0) * fn(x))
    return surface_NwN(N) * total


# ---------------------------------------------------------------------------
# lambda = 0: quadrature inversion
# ---------------------------------------------------------------------------

def radial_solve_lambda0(p: float, N: float, R: float, f,
                         fine_scale: Optional[float] = None) -> RadialProfile:
    """Solve -(r^{N-1}|u'|^{p-2}u')' = r^{N-1} f with u(R) = 0, u'(0) = 0.

    The flux inversion |u'|^{p-2} u'(r) = -r^{1-N} int_0^r s^{N-1} f ds
    turns the problem into a first-order system for (F, u) which is
    integrated with dense output; the returned profile carries the
    analytic derivative.
    """
    fr = (lambda r: np.full_like(np.asarray(r, float), float(f))) if np.ndim(f) == 0 else f
    r0 = 1e-8 * R

    def rhs(r, y):
        F, _ = y
        dF = r ** (N - 1.0) * fr(np.asarray([r]))[0]
        du = -(max(F, 0.0) / r ** (N - 1.0)) ** (1.0 / (p - 1.0))
        return [dF, du]

    F0 = fr(np.asarray([0.5 * r0]))[0] * r0 ** N / N
    max_step = fine_scale / 3.0 if fine_scale else np.inf
    sol = solve_ivp(rhs, (r0, R), [F0, 0.0], method="RK45",
                    rtol=1e-12, atol=1e-15, dense_output=True,
                    max_step=max_step)
    if not sol.success:
        raise QuadratureFailure(sol.message)
    uR = sol.y[1, -1]

    def u_eval(r):
        r = np.asarray(r, float)
        return sol.sol(np.clip(r, r0, R))[1] - uR

    def F_eval(r):
        r = np.asarray(r, float)
        return sol.sol(np.clip(r, r0, R))[0]

    def up_eval(r):
        r = np.asarray(r, float)
        rr = np.maximum(r, r0)
        return -(np.maximum(F_eval(r), 0.0) / rr ** (N - 1.0)) ** (1.0 / (p - 1.0))

    # flux residual against independently refined quadrature of the source
    worst = 0.0
    for rc in np.linspace(0.15, 0.85, 5) * R:
        edges = np.geomspace(r0, rc, 60)
        Fq = F0
        for a, b in zip(edges[:-1], edges[1:]):
            x, w = gauss_legendre(20, a, b)
            Fq += np.dot(w, x ** (N - 1.0) * fr(x))
        worst = max(worst, abs(F_eval(np.asarray([rc]))[0] - Fq))
    if worst > 1e-8 * max(1.0, abs(sol.y[0, -1])):
        raise QuadratureFailure(f"flux residual {worst:.2e} above 1e-8")

    grid = _default_grid(R)
    vals = np.concatenate([[u_eval(np.asarray([r0]))[0]], u_eval(grid[1:])])
    deriv = np.concatenate([[0.0], up_eval(grid[1:])])
    return RadialProfile(grid, vals, p, N, R, derivative=deriv,
                         _eval=u_eval, _eval_deriv=up_eval)


# ---------------------------------------------------------------------------
# Green profile: closed form at lambda = 0, shooting otherwise
# ---------------------------------------------------------------------------

@dataclass
class RadialGreen:
    """Green profile on the ball with central pole, with regular part split off."""

    p: float
    N: float
    R: float
    lam: float
    H0: float
    G: RadialProfile
    H: RadialProfile
    flux_defect: float

    def G_at(self, r):
        return self.G(r)

    def Gprime_at(self, r):
        return self.G.deriv(r)

    def H_at(self, r):
        return self.H(r)


def _gamma_fns(p, N):
    if p == N:
        c = log_normalization(N)
        return (lambda r: -c * np.log(r)), (lambda r: -c / r)
    return (lambda r: gamma_radial(r, p, N),
            lambda r: gamma_radial_derivative(r, p, N))


def radial_green(p: float, N: float, R: float, lam: float,
                 r_start_factor: float = 1e-6) -> RadialGreen:
    """Green profile of -div(|Du|^{p-2}Du) - lam u^{p-1} = delta_0 on B_R.

    lam = 0 returns the closed form.  Otherwise the profile is shot from
    the singular asymptotics G = Gamma + H0 + o(1) at r -> 0, with the
    unknown H0 adjusted by a secant iteration so that G(R) = 0.
    """
    if not (1 < p < N or (p == N == 2)):
        raise InvalidExponent(f"radial Green needs 1 < p < N or p = N = 2, got p={p}, N={N}")
    gam, dgam = _gamma_fns(p, N)
    if lam == 0.0:
        grid = _default_grid(R)
        if p == N:
            H0 = log_normalization(N) * np.log(R)
        else:
            H0 = -C0_constant(p, N) * R ** (-(N - p) / (p - 1.0))
        gvals = np.concatenate([[np.inf], gam(grid[1:]) + H0])
        gder = np.concatenate([[-np.inf], dgam(grid[1:])])
        G = RadialProfile(grid, gvals, p, N, R, derivative=gder,
                          _eval=lambda r: gam(r) + H0, _eval_deriv=dgam)
        H = RadialProfile(grid, np.full(len(grid), H0), p, N, R,
                          derivative=np.zeros(len(grid)),
                          _eval=lambda r: np.full_like(np.asarray(r, float), H0))
        return RadialGreen(p, N, R, lam, H0, G, H, 0.0)

    if lam > 0:
        lam1 = radial_eigen(p, N, R).lambda1
        if lam >= 0.98 * lam1:
            raise SupercriticalLambda(
                f"lam={lam} above the 2% safety margin of lambda1={lam1:.6g}")

    NwN = surface_NwN(N)
    a0 = NwN ** (-1.0 / (p - 1.0))
    expo = 1.0 - (N - 1.0) / (p - 1.0)
    r0 = r_start_factor * R
    t0, T = np.log(r0), np.log(R)

    def rhs(t, y):
        h, dw = y
        r = np.exp(t)
        # dh/dt = r (G' - Gamma'); expm1 keeps the near-cancellation exact
        xi = -NwN * dw
        dh = -np.exp(expo * t) * a0 * np.expm1(np.log1p(xi) / (p - 1.0))
        Gv = gam(r) + h
        ddw = -lam * np.exp(N * t) * np.sign(Gv) * np.abs(Gv) ** (p - 1.0)
        return [dh, ddw]

    def shoot(H0):
        x, w = gauss_legendre(30, 0.0, r0)
        dw0 = -lam * np.dot(w, x ** (N - 1.0) *
                            np.abs(gam(x) + H0) ** (p - 1.0))
        sol = solve_ivp(rhs, (t0, T), [H0, dw0], method="RK45",
                        rtol=_RTOL, atol=[1e-13, 1e-15], dense_output=True)
        if not sol.success:
            raise ShootingDivergence(sol.message)
        return sol

    target = -gam(np.asarray([R]))[0]   # G(R) = 0  <=>  h(T) = -Gamma(R)
    H0_a = target
    sol_a = shoot(H0_a)
    fa = sol_a.sol(T)[0] - target
    H0_b = H0_a - fa * 1.05 - 1e-3 * abs(target + 1.0)
    sol_b = shoot(H0_b)
    fb = sol_b.sol(T)[0] - target
    best = (H0_b, sol_b, fb)
    for _ in range(40):
        if abs(best[2]) < 1e-12 * max(1.0, abs(target)):
            break
        if fb == fa:
            raise ShootingDivergence("secant stalled (flat residual)")
        H0_c = H0_b - fb * (H0_b - H0_a) / (fb - fa)
        sol_c = shoot(H0_c)
        fc = sol_c.sol(T)[0] - target
        H0_a, fa = H0_b, fb
        H0_b, fb, sol_b = H0_c, fc, sol_c
        if abs(fc) < abs(best[2]):
            best = (H0_c, sol_c, fc)
    else:
        raise ShootingDivergence(
            f"secant did not meet tolerance; residual {best[2]:.3e}")
    H0, sol, _ = best

    def G_eval(r):
        r = np.asarray(r, float)
        t = np.log(np.maximum(r, 1e-300))
        h = sol.sol(np.clip(t, t0, T))[0]
        return gam(r) + h

    def Gp_eval(r):
        r = np.asarray(r, float)
        t = np.clip(np.log(np.maximum(r, 1e-300)), t0, T)
        dw = sol.sol(t)[1]
        w = -1.0 / NwN + dw
        return np.sign(w) * (np.abs(w) / r ** (N - 1.0)) ** (1.0 / (p - 1.0))

    def H_eval(r):
        r = np.asarray(r, float)
        t = np.clip(np.log(np.maximum(r, 1e-300)), t0, T)
        return sol.sol(t)[0]

    grid = _default_grid(R)
    gvals = np.concatenate([[np.inf], G_eval(grid[1:])])
    gder = np.concatenate([[-np.inf], Gp_eval(grid[1:])])
    hvals = np.concatenate([[H0], H_eval(grid[1:])])
    G = RadialProfile(grid, gvals, p, N, R, derivative=gder,
                      _eval=G_eval, _eval_deriv=Gp_eval)
    H = RadialProfile(grid, hvals, p, N, R, _eval=H_eval)

    # flux normalization: -NwN w(r) should equal 1 + lam NwN int_0^r s^{N-1} G^{p-1}
    defect = 0.0
    for r in (0.3 * R, 0.7 * R):
        w = -1.0 / NwN + sol.sol(np.log(r))[1]
        acc = ball_integral(lambda s: np.abs(G_eval(s)) ** (p - 1.0), 0.0, r, N,
                            panels=400)
        defect = max(defect, abs(-NwN * w - (1.0 + lam * acc)))
    if defect > 1e-6:
        raise ShootingDivergence(f"flux normalization defect {defect:.2e} > 1e-6")
    return RadialGreen(p, N, R, lam, H0, G, H, defect)


# ---------------------------------------------------------------------------
# general source BVP (shooting on the center value)
# ---------------------------------------------------------------------------

def radial_bvp(p: float, N: float, R: float, lam: float, f,
               center_guess: Optional[float] = None,
               fine_scale: Optional[float] = None) -> RadialProfile:
    """Solve -(r^{N-1}|u'|^{p-2}u')' = r^{N-1}(lam |u|^{p-2}u + f) with u(R)=0.

    Shooting on the center value a = u(0); f may be a constant or callable.
    fine_scale bounds the step while crossing a concentrated source.
    """
    fr = (lambda r: np.full_like(np.asarray(r, float), float(f))) if np.ndim(f) == 0 else f
    if lam == 0.0 and center_guess is None:
        return radial_solve_lambda0(p, N, R, fr)
    r0 = 1e-8 * R

    def rhs(r, y):
        u, w = y
        up = np.sign(w) * (np.abs(w) / r ** (N - 1.0)) ** (1.0 / (p - 1.0))
        dw = -r ** (N - 1.0) * (lam * np.sign(u) * np.abs(u) ** (p - 1.0) + fr(np.asarray([r]))[0])
        return [up, dw]

    def shoot(a):
        w0 = -(lam * np.sign(a) * abs(a) ** (p - 1.0) + fr(np.asarray([r0]))[0]) * r0 ** N / N
        seg_end = min(10.0 * fine_scale, R) if fine_scale else R
        sols = []
        y = [a, w0]
        if seg_end < R:
            s1 = solve_ivp(rhs, (r0, seg_end), y, method="RK45", rtol=_RTOL,
                           atol=1e-13, dense_output=True, max_step=fine_scale / 3.0)
            if not s1.success:
                raise ShootingDivergence(s1.message)
            sols.append(s1)
            y = s1.y[:, -1]
            s2 = solve_ivp(rhs, (seg_end, R), y, method="RK45", rtol=_RTOL,
                           atol=1e-13, dense_output=True)
            if not s2.success:
                raise ShootingDivergence(s2.message)
            sols.append(s2)
        else:
            s1 = solve_ivp(rhs, (r0, R), y, method="RK45", rtol=_RTOL,
                           atol=1e-13, dense_output=True)
            if not s1.success:
                raise ShootingDivergence(s1.message)
            sols.append(s1)
        return sols

    def u_end(sols):
        return sols[-1].y[0, -1]

    if center_guess is None:
        base = radial_solve_lambda0(p, N, R, fr)
        center_guess = float(base.values[0]) or 1.0
    a1 = center_guess
    s1 = shoot(a1)
    f1 = u_end(s1)
    a2 = a1 * 1.2 + 1e-6
    s2 = shoot(a2)
    f2 = u_end(s2)
    best = (a2, s2, f2)
    scale = max(abs(a1), 1.0)
    for _ in range(60):
        if abs(best[2]) < 1e-11 * scale:
            break
        if f2 == f1:
            raise ShootingDivergence("secant stalled on the center value")
        a3 = a2 - f2 * (a2 - a1) / (f2 - f1)
        s3 = shoot(a3)
        f3 = u_end(s3)
        a1, f1 = a2, f2
        a2, f2, s2 = a3, f3, s3
        if abs(f3) < abs(best[2]):
            best = (a3, s3, f3)
    else:
        raise ShootingDivergence(f"center-value secant residual {best[2]:.3e}")
    a, sols, _ = best

    def make_eval(idx):
        def ev(r):
            r = np.asarray(r, float)
            out = np.empty_like(r)
            breaks = [s.t[-1] for s in sols]
            lo = r0
            filled = np.zeros(r.shape, bool)
            for s, b in zip(sols, breaks):
                m = (~filled) & (r <= b * (1 + 1e-14))
                out[m] = s.sol(np.clip(r[m], s.t[0], s.t[-1]))[idx]
                filled |= m
            out[~filled] = sols[-1].sol(np.full(np.sum(~filled), sols[-1].t[-1]))[idx]
            out[r < r0] = a if idx == 0 else 0.0
            return out
        return ev

    u_eval = make_eval(0)
    w_eval = make_eval(1)

    def up_eval(r):
        r = np.asarray(r, float)
        w = w_eval(r)
        rr = np.maximum(r, r0)
        return np.sign(w) * (np.abs(w) / rr ** (N - 1.0)) ** (1.0 / (p - 1.0))

    grid = _default_grid(R)
    vals = np.concatenate([[a], u_eval(grid[1:])])
    der = np.concatenate([[0.0], up_eval(grid[1:])])
    return RadialProfile(grid, vals, p, N, R, derivative=der,
                         _eval=u_eval, _eval_deriv=up_eval)


# ---------------------------------------------------------------------------
# first eigenvalue by shooting
# ---------------------------------------------------------------------------

@dataclass
class RadialEigenResult:
    lambda1: float
    profile: RadialProfile


def radial_eigen(p: float, N: float, R: float) -> RadialEigenResult:
    """First Dirichlet eigenvalue of the radial p-Laplacian on B_R.

    Shoots u(0) = 1, u'(0) = 0 and brackets the lambda for which u
    vanishes exactly at R; the eigenfunction is positive and normalized
    to unit L^p norm.
    """
    if not 1 < p <= N:
        raise InvalidExponent(f"eigen solve needs p in (1, N], got p={p}, N={N}")
    r0 = 1e-8 * R

    def u_at_R(lam):
        def rhs(r, y):
            u, w = y
            up = np.sign(w) * (np.abs(w) / r ** (N - 1.0)) ** (1.0 / (p - 1.0))
            dw = -lam * r ** (N - 1.0) * np.sign(u) * np.abs(u) ** (p - 1.0)
            return [up, dw]
        w0 = -lam * r0 ** N / N
        sol = solve_ivp(rhs, (r0, R), [1.0, w0], method="RK45",
                        rtol=1e-11, atol=1e-14, dense_output=True)
        if not sol.success:
            raise ShootingDivergence(sol.message)
        return sol

    lam_lo = 1.0 / R ** p
    while u_at_R(lam_lo).y[0, -1] <= 0:
        lam_lo /= 2.0
        if lam_lo < 1e-12:
            raise ShootingDivergence("failed to bracket the eigenvalue from below")
    lam_hi = lam_lo * 2.0
    while u_at_R(lam_hi).y[0, -1] > 0:
        lam_hi *= 2.0
        if lam_hi > 1e12:
            raise ShootingDivergence("failed to bracket the eigenvalue from above")
    lam1 = brentq(lambda l: u_at_R(l).y[0, -1], lam_lo, lam_hi,
                  xtol=1e-13 * lam_hi, rtol=1e-13)
    sol = u_at_R(lam1)

    def u_eval(r):
        r = np.asarray(r, float)
        return sol.sol(np.clip(r, r0, R))[0]

    norm_p = ball_integral(lambda s: np.abs(u_eval(s)) ** p, 0.0, R, N) ** (1.0 / p)

    def u_unit(r):
        return u_eval(r) / norm_p

    def up_unit(r):
        r = np.asarray(r, float)
        w = sol.sol(np.clip(r, r0, R))[1]
        rr = np.maximum(r, r0)
        return np.sign(w) * (np.abs(w) / rr ** (N - 1.0)) ** (1.0 / (p - 1.0)) / norm_p

    grid = _default_grid(R)
    vals = np.concatenate([[u_unit(np.asarray([r0]))[0]], u_unit(grid[1:])])
    prof = RadialProfile(grid, vals, p, N, R, _eval=u_unit, _eval_deriv=up_unit)
    return RadialEigenResult(float(lam1), prof)


# ---------------------------------------------------------------------------
# mollified-scheme counterpart on the ball (used by uniqueness checks)
# ---------------------------------------------------------------------------

def radial_bump(rho: float, N: float) -> Callable:
    """Radial bump (1 - (r/rho)^2)^3 normalized to unit mass on R^N."""
    from scipy.special import beta
    mass = surface_NwN(N) * rho ** N * 0.5 * beta(N / 2.0, 4.0)

    def f(r):
        r = np.asarray(r, float)
        s = np.clip(r / rho, 0.0, 1.0)
        return np.where(r < rho, (1.0 - s * s) ** 3 / mass, 0.0)

    return f


def radial_mollified_green(p: float, N: float, R: float, lam: float,
                           rho_schedule) -> list:
    """Solve the approximating problems with shrinking bump sources.

    Returns the per-stage profiles; the caller checks stage convergence in
    the L^{p-1} norm.
    """
    out = []
    guess = None
    for rho in rho_schedule:
        f = radial_bump(rho, N)
        if lam == 0.0:
            prof = radial_solve_lambda0(p, N, R, f, fine_scale=rho)
        else:
            prof = radial_bvp(p, N, R, lam, f, center_guess=guess, fine_scale=rho)
        guess = float(prof.values[0]) * 1.3
        out.append(prof)
    return out


def profile_distance(a: RadialProfile, b: RadialProfile, q: float) -> float:
    """|a - b| in L^q on the common ball (radial quadrature)."""
    R = min(a.R, b.R)
    N = a.N
    val = ball_integral(lambda r: np.abs(a(r) - b(r)) ** q, 0.0, R, N, panels=300)
    return float(val ** (1.0 / q))
