"""Hot loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``FDEPR_DISABLE_NUMBA`` is unset
or "0".  Both paths implement identical arithmetic per packet; results agree
to rounding.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("FDEPR_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    import numba as nb

    # prefer OpenMP/workqueue; an outdated TBB only produces warnings
    nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAS_NUMBA = True
except ImportError:
    nb = None
    HAS_NUMBA = False


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"


# -- Bloch equations --------------------------------------------------------
#
# dS/dt = Omega x S - relaxation, Omega = (2g Re a, 2g Im a, Delta), with Sz
# relaxing to -1/2 at gamma1 and Sx, Sy decaying at gamma2.  The drive ``a`` is
# sampled every half step so RK4 sees exact midpoint values.


def _bloch_rk4_numpy(alpha_re, alpha_im, two_g, delta, gamma1, gamma2, s0, h):
    sx, sy, sz = (s0[:, 0].copy(), s0[:, 1].copy(), s0[:, 2].copy())
    n_steps = (len(alpha_re) - 1) // 2

    def rhs(ar, ai, x, y, z):
        ox = two_g * ar
        oy = two_g * ai
        dx = oy * z - delta * y - gamma2 * x
        dy = delta * x - ox * z - gamma2 * y
        dz = ox * y - oy * x - gamma1 * (z + 0.5)
        return dx, dy, dz

    for k in range(n_steps):
        a0r, a0i = alpha_re[2 * k], alpha_im[2 * k]
        a1r, a1i = alpha_re[2 * k + 1], alpha_im[2 * k + 1]
        a2r, a2i = alpha_re[2 * k + 2], alpha_im[2 * k + 2]
        k1 = rhs(a0r, a0i, sx, sy, sz)
        k2 = rhs(a1r, a1i, sx + 0.5 * h * k1[0], sy + 0.5 * h * k1[1], sz + 0.5 * h * k1[2])
        k3 = rhs(a1r, a1i, sx + 0.5 * h * k2[0], sy + 0.5 * h * k2[1], sz + 0.5 * h * k2[2])
        k4 = rhs(a2r, a2i, sx + h * k3[0], sy + h * k3[1], sz + h * k3[2])
        sx = sx + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        sy = sy + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        sz = sz + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return np.column_stack([sx, sy, sz])


def _emission_numpy(amplitude, rate, t):
    out = np.zeros(len(t))
    chunk = max(1, 2_000_000 // max(len(t), 1))
    for start in range(0, len(rate), chunk):
        a = amplitude[start:start + chunk]
        r = rate[start:start + chunk]
        out += np.exp(-np.outer(t, r)) @ a
    return out


if HAS_NUMBA:

    @nb.njit(cache=True, fastmath=False)
    def _rhs(ox, oy, d, g1, g2, x, y, z):
        return (oy * z - d * y - g2 * x, d * x - ox * z - g2 * y, ox * y - oy * x - g1 * (z + 0.5))

    @nb.njit(cache=True, parallel=True)
    def _bloch_rk4_numba(alpha_re, alpha_im, two_g, delta, gamma1, gamma2, s0, h):
        n = s0.shape[0]
        n_steps = (alpha_re.shape[0] - 1) // 2
        out = np.empty((n, 3))
        for p in nb.prange(n):
            x, y, z = s0[p, 0], s0[p, 1], s0[p, 2]
            tg, d, g1, g2 = two_g[p], delta[p], gamma1[p], gamma2[p]
            for k in range(n_steps):
                o0x, o0y = tg * alpha_re[2 * k], tg * alpha_im[2 * k]
                o1x, o1y = tg * alpha_re[2 * k + 1], tg * alpha_im[2 * k + 1]
                o2x, o2y = tg * alpha_re[2 * k + 2], tg * alpha_im[2 * k + 2]
                k1 = _rhs(o0x, o0y, d, g1, g2, x, y, z)
                k2 = _rhs(o1x, o1y, d, g1, g2, x + 0.5 * h * k1[0], y + 0.5 * h * k1[1], z + 0.5 * h * k1[2])
                k3 = _rhs(o1x, o1y, d, g1, g2, x + 0.5 * h * k2[0], y + 0.5 * h * k2[1], z + 0.5 * h * k2[2])
                k4 = _rhs(o2x, o2y, d, g1, g2, x + h * k3[0], y + h * k3[1], z + h * k3[2])
                x = x + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
                y = y + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
                z = z + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            out[p, 0], out[p, 1], out[p, 2] = x, y, z
        return out

    @nb.njit(cache=True, parallel=True)
    def _emission_numba(amplitude, rate, t):
        out = np.zeros(t.shape[0])
        for i in nb.prange(t.shape[0]):
            acc = 0.0
            for k in range(rate.shape[0]):
                acc += amplitude[k] * np.exp(-rate[k] * t[i])
            out[i] = acc
        return out


def bloch_rk4(alpha_re, alpha_im, two_g, delta, gamma1, gamma2, s0, h):
    """Integrate many packets through a sampled drive; returns final (n, 3) Bloch vectors."""
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (alpha_re, alpha_im, two_g, delta, gamma1, gamma2, s0)]
    if len(args[0]) % 2 != 1:
        raise ValueError("drive must be sampled at half steps (odd number of samples)")
    if args[2].size == 0:
        return np.zeros((0, 3))
    if HAS_NUMBA:
        return _bloch_rk4_numba(*args, float(h))
    return _bloch_rk4_numpy(*args, float(h))


def emission_sum(amplitude, rate, t):
    """sum_k amplitude_k * exp(-rate_k * t) evaluated on the grid ``t``."""
    a = np.ascontiguousarray(amplitude, dtype=np.float64)
    r = np.ascontiguousarray(rate, dtype=np.float64)
    tt = np.ascontiguousarray(t, dtype=np.float64)
    if HAS_NUMBA:
        return _emission_numba(a, r, tt)
    return _emission_numpy(a, r, tt)
