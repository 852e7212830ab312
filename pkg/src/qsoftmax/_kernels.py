"""Fixed-order numeric kernels.

Every reduction here accumulates left to right, starting from 0.0, so results
are bit-identical to a plain Python loop doing the same thing. No fastmath:
fused multiply-add contraction would break that equivalence.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def matmul_batched(a, b):
    # a: [B, n, k], b: [B, k, m]; accumulate over k in index order.
    nb, n, kk = a.shape
    m = b.shape[2]
    out = np.zeros((nb, n, m))
    for bi in range(nb):
        for i in range(n):
            for k in range(kk):
                aik = a[bi, i, k]
                for j in range(m):
                    out[bi, i, j] += aik * b[bi, k, j]
    return out


@numba.njit(cache=True)
def rowsum(x):
    # x: [M, R] -> [M]
    rows, cols = x.shape
    out = np.zeros(rows)
    for r in range(rows):
        acc = 0.0
        for c in range(cols):
            acc += x[r, c]
        out[r] = acc
    return out


@numba.njit(cache=True)
def rowmax(x):
    rows, cols = x.shape
    out = np.empty(rows)
    for r in range(rows):
        mx = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > mx:
                mx = x[r, c]
        out[r] = mx
    return out


def softmax_rows(x):
    # numpy's exp gives the same value for an element regardless of the
    # array it sits in, so a per-row or per-element loop reproduces this
    e = x - rowmax(x)[:, None]
    np.exp(e, out=e)
    e /= rowsum(e)[:, None]
    return e


@numba.njit(cache=True)
def quantize_flat(x, s, z, qmax):
    # clamp(round_half_away(x / s) + z, 0, qmax); same IEEE ops as the numpy path
    out = np.empty(x.size, dtype=np.int32)
    lo = -z - 1.0
    hi = qmax - z + 1.0
    for i in range(x.size):
        v = x[i] / s
        if v < lo:
            v = lo
        elif v > hi:
            v = hi
        w = math.trunc(v)
        f = v - w
        if f >= 0.5:
            w += 1.0
        elif f <= -0.5:
            w -= 1.0
        k = w + z
        if k < 0.0:
            k = 0.0
        elif k > qmax:
            k = qmax
        out[i] = np.int32(k)
    return out


@numba.njit(cache=True)
def dequantize_rows(q, s, c):
    # q: [L, R] integers, c: [L] offsets -> s * q - c
    rows, cols = q.shape
    out = np.empty((rows, cols))
    for r in range(rows):
        cr = c[r]
        for j in range(cols):
            out[r, j] = s * np.float64(q[r, j]) - cr
    return out
