"""Periodic quadrature and angle-grid helpers.

All curve-level integrals in this package run over [0, 2pi) on equispaced
grids with composite Simpson weights adapted to the periodic wrap (the two
endpoint nodes coincide, so their weights merge).
"""

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angles(theta):
    """Reduce angles to [0, 2pi)."""
    theta = np.asarray(theta, dtype=float)
    return np.mod(theta, TWO_PI)


def angle_grid(m):
    """m equispaced angles on [0, 2pi), starting at 0."""
    if m < 2:
        raise ValueError("angle grid needs at least 2 nodes")
    return np.linspace(0.0, TWO_PI, m, endpoint=False)


def periodic_simpson_weights(m, period=TWO_PI):
    """Composite Simpson weights for m equispaced nodes on a periodic domain.

    m must be even: the closed Simpson rule on [0, period] uses m+1 nodes
    with pattern 1,4,2,...,4,1, and periodicity merges the two unit
    endpoints into a single node of weight 2.
    """
    if m % 2 != 0:
        raise ValueError("periodic Simpson rule needs an even node count")
    h = period / m
    w = np.empty(m)
    w[0::2] = 2.0
    w[1::2] = 4.0
    return w * (h / 3.0)


def integrate_periodic(values, period=TWO_PI):
    """Integrate samples of a periodic function given on an equispaced grid."""
    values = np.asarray(values, dtype=float)
    w = periodic_simpson_weights(values.shape[-1], period)
    return values @ w
