"""Numba twin of the 1-D HJB layer update. Lazily imported."""

import numpy as np
from numba import njit


@njit(cache=True)
def layer_update_1d(u, b_tab, s2_tab, f_tab, dt, dx):
    nx, nv = b_tab.shape
    out = np.empty_like(u)
    argmax = np.zeros(nx, dtype=np.int64)
    out[0] = u[0]
    out[nx - 1] = u[nx - 1]
    for i in range(1, nx - 1):
        d2 = u[i + 1] - 2.0 * u[i] + u[i - 1]
        up = u[i + 1] - u[i]
        dn = u[i] - u[i - 1]
        best = -np.inf
        best_j = 0
        for j in range(nv):
            b = b_tab[i, j]
            bp = b if b > 0.0 else 0.0
            bm = b if b < 0.0 else 0.0
            cand = (0.5 * s2_tab[i, j] * d2 / (dx * dx)
                    + bp * up / dx + bm * dn / dx + f_tab[i, j])
            if cand > best:
                best = cand
                best_j = j
        out[i] = u[i] + dt * best
        argmax[i] = best_j
    return out, argmax
