"""Symmetric Gauss quadrature rules on the reference triangle.

Rules are stored as barycentric coordinates with weights normalized to sum
to 1, so physical weights are `area * w`.  The degree-4 rule (6 points) is
the workhorse; the degree-8 rule (16 points) is reserved for triangles
touching the pole, where integrands carry |grad Gamma|^(p-2) weights.
"""

import numpy as np


def _perm3(a, b):
    return [(a, b, b), (b, a, b), (b, b, a)]


def _perm6(a, b, c):
    return [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]


def _rule_degree4():
    pts, w = [], []
    pts += _perm3(0.108103018168070, 0.445948490915965)
    w += [0.223381589678011] * 3
    pts += _perm3(0.816847572980459, 0.091576213509771)
    w += [0.109951743655322] * 3
    return np.array(pts), np.array(w)


def _rule_degree8():
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    w = [0.144315607677787]
    pts += _perm3(0.081414823414554, 0.459292588292723)
    w += [0.095091634413923] * 3
    pts += _perm3(0.658861384496480, 0.170569307751760)
    w += [0.103217370534718] * 3
    pts += _perm3(0.898905543365938, 0.050547228317031)
    w += [0.032458497623198] * 3
    pts += _perm6(0.008394777409958, 0.263112829634638, 0.728492392955404)
    w += [0.027230314174435] * 6
    return np.array(pts), np.array(w)


_RULES = {4: _rule_degree4(), 8: _rule_degree8()}


def triangle_rule(order: int):
    """Return (barycentric points (k,3), weights (k,) summing to 1)."""
    if order not in _RULES:
        raise ValueError(f"no triangle rule of order {order}; have {sorted(_RULES)}")
    pts, w = _RULES[order]
    # weights are normalized to the unit-measure reference triangle
    return pts.copy(), w.copy() / w.sum()


def gauss_legendre(n: int, a: float, b: float):
    """Gauss-Legendre nodes and weights on [a, b]."""
    x, w = np.polynomial.legendre.leggauss(n)
    xm, xr = 0.5 * (a + b), 0.5 * (b - a)
    return xm + xr * x, xr * w
