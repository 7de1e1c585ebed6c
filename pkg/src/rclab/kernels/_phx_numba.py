"""Numba implementation of the Philox block filler.

Imported lazily so RCL_KERNELS=numpy never touches numba.
"""

import numpy as np
from numba import njit

from ._phx_consts import M0, M1, W0, W1, MASK32, S32, S11, TWO_NEG53

ZERO = np.uint64(0)


@njit(cache=True)
def fill_uniform_blocks(key0, key1, path_offset, out):
    n_paths, n_steps, n_blocks, _ = out.shape
    for p in range(n_paths):
        for s in range(n_steps):
            for b in range(n_blocks):
                c0 = np.uint64(path_offset + p)
                c1 = np.uint64(s)
                c2 = np.uint64(b)
                c3 = ZERO
                k0 = key0
                k1 = key1
                for _ in range(10):
                    p0 = M0 * c0
                    p1 = M1 * c2
                    hi0 = p0 >> S32
                    lo0 = p0 & MASK32
                    hi1 = p1 >> S32
                    lo1 = p1 & MASK32
                    nc0 = hi1 ^ c1 ^ k0
                    nc2 = hi0 ^ c3 ^ k1
                    c0 = nc0
                    c1 = lo1
                    c2 = nc2
                    c3 = lo0
                    k0 = (k0 + W0) & MASK32
                    k1 = (k1 + W1) & MASK32
                u64a = (c0 << S32) | c1
                u64b = (c2 << S32) | c3
                out[p, s, b, 0] = (np.float64(u64a >> S11) + 0.5) * TWO_NEG53
                out[p, s, b, 1] = (np.float64(u64b >> S11) + 0.5) * TWO_NEG53
