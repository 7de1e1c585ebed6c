"""One explicit backward time layer of the 1-D HJB scheme.

Interior update, upwinded drift, central second difference, pointwise max
over the control grid with first-index tie-break:

    u_k[i] = u[i] + dt * max_j( 0.5*s2[i,j]*(u[i+1]-2u[i]+u[i-1])/dx^2
                                + b+[i,j]*(u[i+1]-u[i])/dx
                                + b-[i,j]*(u[i]-u[i-1])/dx + f[i,j] )

Both backends evaluate the same expression tree (only +,*,/,max on floats),
so their outputs are bit-identical. Boundary nodes are the caller's job.
Inputs must be finite; NaN handling differs between the backends.
"""

import numpy as np


def _get_numba_impl():
    from . import _hjb_numba
    return _hjb_numba.layer_update_1d


def _layer_update_1d_numpy(u, b_tab, s2_tab, f_tab, dt, dx):
    d2 = (u[2:] - 2.0 * u[1:-1] + u[:-2])[:, None]
    up = (u[2:] - u[1:-1])[:, None]
    dn = (u[1:-1] - u[:-2])[:, None]
    b = b_tab[1:-1]
    bp = np.where(b > 0.0, b, 0.0)
    bm = np.where(b < 0.0, b, 0.0)
    cand = (0.5 * s2_tab[1:-1] * d2 / (dx * dx)
            + bp * up / dx + bm * dn / dx + f_tab[1:-1])
    arg = np.argmax(cand, axis=1)
    best = cand[np.arange(cand.shape[0]), arg]
    out = np.empty_like(u)
    out[1:-1] = u[1:-1] + dt * best
    out[0] = u[0]
    out[-1] = u[-1]
    argmax = np.zeros(u.shape[0], dtype=np.int64)
    argmax[1:-1] = arg
    return out, argmax


def hjb_layer_update_1d(u, b_tab, s2_tab, f_tab, dt, dx):
    """Returns (updated layer, per-node argmax control index).

    Boundary entries of the output copy u; the caller overwrites them
    according to the grid's boundary mode.
    """
    from . import active_backend
    if active_backend() == "numba":
        return _get_numba_impl()(u, b_tab, s2_tab, f_tab, dt, dx)
    return _layer_update_1d_numpy(u, b_tab, s2_tab, f_tab, dt, dx)
