"""Counter-based random numbers (Philox4x32-10).

Every draw is a pure function of (seed, path index, step index, block
index), so regeneration is reproducible regardless of worker count or
generation order. One Philox block yields four 32-bit words = two float64
uniforms in (0,1) = one Box-Muller pair.

The integer pipeline runs on the selected backend (numba loop or chunked
vectorized numpy, bit-identical); uniforms -> normals is shared numpy code.
"""

import numpy as np

from . import _phx_consts as C


def _get_numba_filler():
    from . import _phx_numba
    return _phx_numba.fill_uniform_blocks


def _fill_uniform_blocks_numpy(key0, key1, path_offset, out):
    """Fill out[p, s, b, 0:2] with uniforms for paths path_offset+p."""
    n_paths, n_steps, n_blocks, _ = out.shape
    c0_0 = np.arange(path_offset, path_offset + n_paths, dtype=np.uint64)
    c1_0 = np.arange(n_steps, dtype=np.uint64)
    c2_0 = np.arange(n_blocks, dtype=np.uint64)
    shape = (n_paths, n_steps, n_blocks)
    c0 = np.broadcast_to(c0_0[:, None, None], shape).copy()
    c1 = np.broadcast_to(c1_0[None, :, None], shape).copy()
    c2 = np.broadcast_to(c2_0[None, None, :], shape).copy()
    c3 = np.zeros(shape, dtype=np.uint64)
    k0 = np.uint64(key0)
    k1 = np.uint64(key1)
    for _ in range(10):
        p0 = C.M0 * c0
        p1 = C.M1 * c2
        hi0 = p0 >> C.S32
        lo0 = p0 & C.MASK32
        hi1 = p1 >> C.S32
        lo1 = p1 & C.MASK32
        nc0 = hi1 ^ c1 ^ k0
        nc2 = hi0 ^ c3 ^ k1
        c0, c1, c2, c3 = nc0, lo1, nc2, lo0
        k0 = (k0 + C.W0) & C.MASK32
        k1 = (k1 + C.W1) & C.MASK32
    u64a = (c0 << C.S32) | c1
    u64b = (c2 << C.S32) | c3
    out[..., 0] = ((u64a >> C.S11).astype(np.float64) + 0.5) * C.TWO_NEG53
    out[..., 1] = ((u64b >> C.S11).astype(np.float64) + 0.5) * C.TWO_NEG53


def _split_seed(seed):
    s = int(seed) & 0xFFFFFFFFFFFFFFFF
    return s & 0xFFFFFFFF, s >> 32


# paths per chunk sized so temporaries stay ~tens of MB
_LANES_PER_CHUNK = 1 << 21


def uniform_blocks(seed, n_paths, n_steps, n_blocks, out=None):
    """Uniform (0,1) draws, shape (n_paths, n_steps, n_blocks, 2)."""
    from . import active_backend
    key0, key1 = _split_seed(seed)
    if out is None:
        out = np.empty((n_paths, n_steps, n_blocks, 2), dtype=np.float64)
    if active_backend() == "numba":
        filler = _get_numba_filler()
        filler(np.uint64(key0), np.uint64(key1), 0, out)
    else:
        chunk = max(1, _LANES_PER_CHUNK // max(1, n_steps * n_blocks))
        for lo in range(0, n_paths, chunk):
            hi = min(n_paths, lo + chunk)
            _fill_uniform_blocks_numpy(key0, key1, lo, out[lo:hi])
    return out


def standard_normals(seed, n_paths, n_steps, dim):
    """Standard normal draws, shape (n_paths, n_steps, dim).

    Draw (m, s, j) comes from Philox block (m, s, j//2) keyed by seed, so
    the array is identical however it is chunked or scheduled.
    """
    from . import active_backend
    n_blocks = (dim + 1) // 2
    out = np.empty((n_paths, n_steps, dim), dtype=np.float64)
    key0, key1 = _split_seed(seed)
    use_numba = active_backend() == "numba"
    filler = _get_numba_filler() if use_numba else None
    chunk = max(1, _LANES_PER_CHUNK // max(1, n_steps * n_blocks))
    ubuf = np.empty((min(chunk, n_paths), n_steps, n_blocks, 2),
                    dtype=np.float64)
    for lo in range(0, n_paths, chunk):
        hi = min(n_paths, lo + chunk)
        u = ubuf[: hi - lo]
        if use_numba:
            filler(np.uint64(key0), np.uint64(key1), lo, u)
        else:
            _fill_uniform_blocks_numpy(key0, key1, lo, u)
        radius = np.sqrt(-2.0 * np.log(u[..., 0]))
        theta = C.TWO_PI * u[..., 1]
        z_even = radius * np.cos(theta)
        z_odd = radius * np.sin(theta)
        out[lo:hi, :, 0::2] = z_even[..., : (dim + 1) // 2]
        if dim > 1:
            out[lo:hi, :, 1::2] = z_odd[..., : dim // 2]
    return out


def derive_seed(seed, *tags):
    """Deterministic 64-bit sub-seed from a seed and integer tags.

    Used to give independent substreams to probe points, control
    candidates and oracle runs without overlapping the path streams.
    """
    h = (int(seed) & 0xFFFFFFFFFFFFFFFF) ^ 0x9E3779B97F4A7C15
    for tag in tags:
        h ^= int(tag) & 0xFFFFFFFFFFFFFFFF
        h = (h * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        h ^= h >> 27
        h = (h * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        h ^= h >> 31
    return h
