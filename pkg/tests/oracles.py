"""Independent numerical oracles shared by the unit and acceptance suites."""

import math

from scipy import integrate


def scalar_loss(kind, y, h, eps, lo=None, hi=None):
    r = y - h
    if kind == "indicator":
        return 1.0 if abs(r) > eps else 0.0
    if kind == "clipped_square":
        return min((r / eps) ** 2, 1.0)
    if kind == "exp":
        return 1.0 - math.exp(-((r / eps) ** 2))
    lo = y - eps if lo is None else lo
    hi = y + eps if hi is None else hi
    return 1.0 if (h < lo or h > hi) else 0.0


def quad_expected_loss(kind, y, m, var, eps, lo=None, hi=None):
    """E[loss(y, h)], h ~ N(m, var), by adaptive Gauss-Kronrod over the
    standard-normal variable, split at every kink, jump and the narrow dip."""
    if var == 0:
        return scalar_loss(kind, y, m, eps, lo, hi)
    s = math.sqrt(var)
    a = y - eps if lo is None else lo
    b = y + eps if hi is None else hi
    f = lambda z: scalar_loss(kind, y, m + s * z, eps, lo, hi) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    pts = [a, b, y] + [y + k * eps for k in (-6, -3, -1.5, 1.5, 3, 6)]
    edges = {-40.0, 40.0}
    edges.update(min(max((p - m) / s, -40.0), 40.0) for p in pts)
    edges = sorted(edges)
    total = 0.0
    phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    for l, r in zip(edges[:-1], edges[1:]):
        if r <= l:
            continue
        if kind in ("indicator", "interval"):
            # piecewise constant: take the loss at the midpoint, integrate the density
            c = scalar_loss(kind, y, m + s * 0.5 * (l + r), eps, lo, hi)
            total += c * integrate.quad(phi, l, r, epsabs=1e-14, epsrel=1e-13, limit=200)[0] if c else 0.0
        else:
            total += integrate.quad(f, l, r, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    return total
