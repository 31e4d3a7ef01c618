"""Central finite-difference weights for the second derivative."""

from functools import lru_cache

import numpy as np

from .errors import ConfigurationError

SUPPORTED_ORDERS = (2, 4, 6, 8)


@lru_cache(maxsize=None)
def _weights(order):
    half = order // 2
    m = np.arange(1, half + 1, dtype=float)
    # Even test functions x^(2q), q = 1..half: sum_m 2 w_m m^(2q) = 2 delta_{q1}
    mat = np.array([2.0 * m ** (2 * q) for q in range(1, half + 1)])
    rhs = np.zeros(half)
    rhs[0] = 2.0
    w = np.linalg.solve(mat, rhs)
    w0 = -2.0 * w.sum()
    return (w0,) + tuple(w)


def stencil_coefficients(order):
    """Second-derivative weights ``(w_0, w_1, ..., w_{order/2})`` on a unit grid.

    ``f''(0) ~ w_0 f(0) + sum_m w_m [f(m) + f(-m)]`` with truncation error of
    the given even order.
    """
    if order not in SUPPORTED_ORDERS:
        raise ConfigurationError(
            f"unsupported stencil order {order}; expected one of {SUPPORTED_ORDERS}",
            key="stencil_order",
        )
    return np.array(_weights(order))


def stencil_band(order, phase):
    """Fourier symbol ``sum_m w_m 2 (1 - cos(m*phase))`` of the negated stencil.

    For order 2 this is ``2 (1 - cos(phase))``, i.e. ``4 sin^2(phase/2)``.
    """
    w = stencil_coefficients(order)
    phase = np.asarray(phase, dtype=float)
    out = np.zeros_like(phase)
    for m, wm in enumerate(w[1:], start=1):
        out = out + wm * 2.0 * (1.0 - np.cos(m * phase))
    return out
