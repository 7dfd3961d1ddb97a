"""Singular radial profile of the p-Laplacian and its normalization.

All formulas continue to non-integer ambient dimension N through the
Gamma-function form of the unit-ball volume, which the internal
cross-checks of the critical-exponent constants rely on.
"""

import numpy as np
from scipy.special import gamma as gamma_fn

from .errors import AtPole, InvalidExponent


def omega_N(N: float) -> float:
    """Volume of the unit ball in R^N."""
    return float(np.pi ** (N / 2.0) / gamma_fn(N / 2.0 + 1.0))


def surface_NwN(N: float) -> float:
    """N * omega_N, the surface measure of the unit sphere."""
    return N * omega_N(N)


def C0_constant(p: float, N: float) -> float:
    """Normalization (p-1)/(N-p) * (N omega_N)^(-1/(p-1)) for p < N."""
    if not 1 < p < N:
        raise InvalidExponent(f"C0 requires 1 < p < N, got p={p}, N={N}")
    return (p - 1.0) / (N - p) * surface_NwN(N) ** (-1.0 / (p - 1.0))


def log_normalization(N: float) -> float:
    """(N omega_N)^(-1/(N-1)), the p = N logarithmic normalization."""
    return surface_NwN(N) ** (-1.0 / (N - 1.0))


def C1_constant(p: float, N: float) -> float:
    """Amplitude N^{(N-p)/p^2} ((N-p)/(p-1))^{(p-1)(N-p)/p^2} of the entire
    extremal profile of the Sobolev inequality."""
    if not 1 < p < N:
        raise InvalidExponent(f"C1 requires 1 < p < N, got p={p}, N={N}")
    return N ** ((N - p) / p ** 2) * ((N - p) / (p - 1.0)) ** ((p - 1.0) * (N - p) / p ** 2)


def gamma_radial(r, p: float, N: float):
    """Value of the singular profile at distance r from the pole."""
    r = np.asarray(r, float)
    if np.any(r <= 0):
        raise AtPole("singular profile evaluated at the pole")
    if p == N:
        return -log_normalization(N) * np.log(r)
    return C0_constant(p, N) * r ** (-(N - p) / (p - 1.0))


def gamma_radial_derivative(r, p: float, N: float):
    """d/dr of the singular profile; equals -(N omega_N)^(-1/(p-1)) r^(-(N-1)/(p-1))."""
    r = np.asarray(r, float)
    if np.any(r <= 0):
        raise AtPole("singular profile evaluated at the pole")
    return -surface_NwN(N) ** (-1.0 / (p - 1.0)) * r ** (-(N - 1.0) / (p - 1.0))


def gamma_point(x, pole, p: float, N: float):
    x = np.atleast_2d(np.asarray(x, float))
    r = np.sqrt(np.sum((x - np.asarray(pole, float)) ** 2, axis=1))
    return gamma_radial(r, p, N)


def gamma_gradient_point(x, pole, p: float, N: float):
    x = np.atleast_2d(np.asarray(x, float))
    d = x - np.asarray(pole, float)
    r = np.sqrt(np.sum(d * d, axis=1))
    if np.any(r <= 0):
        raise AtPole("singular profile evaluated at the pole")
    return gamma_radial_derivative(r, p, N)[:, None] * d / r[:, None]


def gamma_flux(r: float, p: float, N: float) -> float:
    """Outward p-flux -int_{|x|=r} |grad|^{p-2} d_nu of the profile (= 1)."""
    gp = gamma_radial_derivative(np.asarray([r]), p, N)[0]
    return float(-surface_NwN(N) * r ** (N - 1.0) * np.abs(gp) ** (p - 2.0) * gp)
