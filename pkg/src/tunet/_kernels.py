"""Compiled inner loops for 3D convolution.

The loops keep the innermost index on the contiguous W axis so LLVM can
vectorize them. Accumulation order per output voxel is fixed, which keeps the
forward pass bit-reproducible and makes every voxel of a constant input follow
the identical arithmetic.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def conv3d_forward(xp, w, out):
    """out[n,o] += sum_{c,a,b,e} w[o,c,a,b,e] * xp[n,c,z+a,y+b,x+e]."""
    n_batch, n_in = xp.shape[0], xp.shape[1]
    n_out, _, ka, kb, ke = w.shape
    D, H, W = out.shape[2], out.shape[3], out.shape[4]
    for n in range(n_batch):
        for o in range(n_out):
            acc = out[n, o]
            for c in range(n_in):
                src = xp[n, c]
                for a in range(ka):
                    for b in range(kb):
                        for e in range(ke):
                            wv = w[o, c, a, b, e]
                            for z in range(D):
                                for y in range(H):
                                    row = src[z + a, y + b]
                                    dst = acc[z, y]
                                    for x in range(W):
                                        dst[x] += wv * row[x + e]
    return out


@numba.njit(cache=True, fastmath=True)
def conv3d_input_grad(dy, w, dxp):
    """Scatter dy back through the kernel into the padded input gradient."""
    n_batch, n_out, D, H, W = dy.shape
    _, n_in, ka, kb, ke = w.shape
    for n in range(n_batch):
        for c in range(n_in):
            dst_c = dxp[n, c]
            for o in range(n_out):
                g = dy[n, o]
                for a in range(ka):
                    for b in range(kb):
                        for e in range(ke):
                            wv = w[o, c, a, b, e]
                            for z in range(D):
                                for y in range(H):
                                    row = dst_c[z + a, y + b]
                                    src = g[z, y]
                                    for x in range(W):
                                        row[x + e] += wv * src[x]
    return dxp


@numba.njit(cache=True, fastmath=True)
def conv3d_weight_grad(xp, dy, dw):
    """dw[o,c,a,b,e] += sum_{n,z,y,x} dy[n,o,z,y,x] * xp[n,c,z+a,y+b,x+e].

    Each padded input row is loaded once and reused for every output channel
    and kernel column; partial sums stay vector-shaped until the end.
    """
    n_batch, n_in = xp.shape[0], xp.shape[1]
    _, n_out, D, H, W = dy.shape
    ka, kb, ke = dw.shape[2], dw.shape[3], dw.shape[4]
    acc = np.zeros((n_out, ke, W), dtype=dw.dtype)
    for n in range(n_batch):
        for c in range(n_in):
            src = xp[n, c]
            for a in range(ka):
                for b in range(kb):
                    acc[:] = 0
                    for z in range(D):
                        for y in range(H):
                            row = src[z + a, y + b]
                            for o in range(n_out):
                                gr = dy[n, o, z, y]
                                for e in range(ke):
                                    ac = acc[o, e]
                                    for x in range(W):
                                        ac[x] += gr[x] * row[x + e]
                    for o in range(n_out):
                        for e in range(ke):
                            dw[o, c, a, b, e] += acc[o, e].sum()
    return dw


def warmup() -> None:
    """Trigger compilation for both precisions (otherwise done lazily)."""
    for dt in (np.float32, np.float64):
        xp = np.zeros((1, 1, 3, 3, 3), dt)
        w = np.zeros((1, 1, 3, 3, 3), dt)
        out = np.zeros((1, 1, 1, 1, 1), dt)
        conv3d_forward(xp, w, out)
        conv3d_input_grad(out, w, xp)
        conv3d_weight_grad(xp, out, w)
