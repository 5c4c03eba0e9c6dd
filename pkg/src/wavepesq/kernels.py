"""Hot numeric kernels with interchangeable numba and numpy implementations.

The public names (``conv_forward``, ``conv_backward``, ``fft_inplace``) are
bound at import time according to :mod:`wavepesq._accel`. Both variants are
importable under ``*_numba`` / ``*_numpy`` for testing and benchmarking.

Conv layout: ``x`` is ``[C_in, T]``, ``w`` is ``[C_out, C_in, K]``; tap ``k``
reads ``x[:, t - dilation * (K - 1 - k)]`` with zeros before the start.
"""
import numpy as np

from ._accel import HAVE_NUMBA, USE_NUMBA, njit


# --------------------------------------------------------------------------
# causal dilated convolution


def conv_forward_numpy(x, w, b, dilation):
    c_out, _, k_size = w.shape
    t_len = x.shape[1]
    # per-tap contiguous weight slices keep matmul on the BLAS path
    taps = np.ascontiguousarray(np.moveaxis(w, 2, 0))
    y = np.empty((c_out, t_len))
    y[:] = b[:, None]
    for k in range(k_size):
        shift = dilation * (k_size - 1 - k)
        if shift >= t_len:
            continue
        y[:, shift:] += taps[k] @ x[:, : t_len - shift]
    return y


def conv_backward_numpy(x, w, g, dilation):
    """Return ``(grad_x, grad_w)``; the bias gradient is ``g.sum(axis=1)``."""
    k_size = w.shape[2]
    t_len = x.shape[1]
    taps_t = np.ascontiguousarray(np.moveaxis(w, 2, 0).transpose(0, 2, 1))
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for k in range(k_size):
        shift = dilation * (k_size - 1 - k)
        if shift >= t_len:
            continue
        gx[:, : t_len - shift] += taps_t[k] @ g[:, shift:]
        gw[:, :, k] = g[:, shift:] @ x[:, : t_len - shift].T
    return gx, gw


@njit
def conv_forward_numba(x, w, b, dilation):
    # 4x4 register blocks over (out, in) channels; each x row feeds four outputs
    c_out, c_in, k_size = w.shape
    t_len = x.shape[1]
    y = np.empty((c_out, t_len))
    for o in range(c_out):
        for t in range(t_len):
            y[o, t] = b[o]
    for k in range(k_size):
        shift = dilation * (k_size - 1 - k)
        if shift >= t_len:
            continue
        n = t_len - shift
        o = 0
        while o < c_out:
            if o + 4 <= c_out:
                y0 = y[o, shift:]
                y1 = y[o + 1, shift:]
                y2 = y[o + 2, shift:]
                y3 = y[o + 3, shift:]
                c = 0
                while c + 4 <= c_in:
                    x0 = x[c]
                    x1 = x[c + 1]
                    x2 = x[c + 2]
                    x3 = x[c + 3]
                    a00, a01, a02, a03 = w[o, c, k], w[o, c + 1, k], w[o, c + 2, k], w[o, c + 3, k]
                    a10, a11, a12, a13 = w[o + 1, c, k], w[o + 1, c + 1, k], w[o + 1, c + 2, k], w[o + 1, c + 3, k]
                    a20, a21, a22, a23 = w[o + 2, c, k], w[o + 2, c + 1, k], w[o + 2, c + 2, k], w[o + 2, c + 3, k]
                    a30, a31, a32, a33 = w[o + 3, c, k], w[o + 3, c + 1, k], w[o + 3, c + 2, k], w[o + 3, c + 3, k]
                    for t in range(n):
                        v0 = x0[t]
                        v1 = x1[t]
                        v2 = x2[t]
                        v3 = x3[t]
                        y0[t] += a00 * v0 + a01 * v1 + a02 * v2 + a03 * v3
                        y1[t] += a10 * v0 + a11 * v1 + a12 * v2 + a13 * v3
                        y2[t] += a20 * v0 + a21 * v1 + a22 * v2 + a23 * v3
                        y3[t] += a30 * v0 + a31 * v1 + a32 * v2 + a33 * v3
                    c += 4
                while c < c_in:
                    xc = x[c]
                    a0, a1, a2, a3 = w[o, c, k], w[o + 1, c, k], w[o + 2, c, k], w[o + 3, c, k]
                    for t in range(n):
                        v = xc[t]
                        y0[t] += a0 * v
                        y1[t] += a1 * v
                        y2[t] += a2 * v
                        y3[t] += a3 * v
                    c += 1
                o += 4
            else:
                yo = y[o, shift:]
                for c in range(c_in):
                    a = w[o, c, k]
                    xc = x[c]
                    for t in range(n):
                        yo[t] += a * xc[t]
                o += 1
    return y


# reassociation lets the grad_w dot products vectorise; results stay bitwise
# reproducible run to run on the same machine
@njit(fastmath={"reassoc", "contract"})
def conv_backward_numba(x, w, g, dilation):
    c_out, c_in, k_size = w.shape
    t_len = x.shape[1]
    gx = np.zeros((c_in, t_len))
    gw = np.zeros((c_out, c_in, k_size))
    for k in range(k_size):
        shift = dilation * (k_size - 1 - k)
        if shift >= t_len:
            continue
        n = t_len - shift
        c = 0
        while c < c_in:
            if c + 2 <= c_in:
                x0 = x[c]
                x1 = x[c + 1]
                gx0 = gx[c]
                gx1 = gx[c + 1]
                o = 0
                while o + 4 <= c_out:
                    g0 = g[o, shift:]
                    g1 = g[o + 1, shift:]
                    g2 = g[o + 2, shift:]
                    g3 = g[o + 3, shift:]
                    a00, a10, a20, a30 = w[o, c, k], w[o + 1, c, k], w[o + 2, c, k], w[o + 3, c, k]
                    a01, a11, a21, a31 = w[o, c + 1, k], w[o + 1, c + 1, k], w[o + 2, c + 1, k], w[o + 3, c + 1, k]
                    s00 = s10 = s20 = s30 = 0.0
                    s01 = s11 = s21 = s31 = 0.0
                    for t in range(n):
                        u0 = g0[t]
                        u1 = g1[t]
                        u2 = g2[t]
                        u3 = g3[t]
                        v0 = x0[t]
                        v1 = x1[t]
                        gx0[t] += a00 * u0 + a10 * u1 + a20 * u2 + a30 * u3
                        gx1[t] += a01 * u0 + a11 * u1 + a21 * u2 + a31 * u3
                        s00 += u0 * v0
                        s10 += u1 * v0
                        s20 += u2 * v0
                        s30 += u3 * v0
                        s01 += u0 * v1
                        s11 += u1 * v1
                        s21 += u2 * v1
                        s31 += u3 * v1
                    gw[o, c, k], gw[o + 1, c, k], gw[o + 2, c, k], gw[o + 3, c, k] = s00, s10, s20, s30
                    gw[o, c + 1, k], gw[o + 1, c + 1, k], gw[o + 2, c + 1, k], gw[o + 3, c + 1, k] = s01, s11, s21, s31
                    o += 4
                while o < c_out:
                    go = g[o, shift:]
                    a0 = w[o, c, k]
                    a1 = w[o, c + 1, k]
                    s0 = 0.0
                    s1 = 0.0
                    for t in range(n):
                        u = go[t]
                        gx0[t] += a0 * u
                        gx1[t] += a1 * u
                        s0 += u * x0[t]
                        s1 += u * x1[t]
                    gw[o, c, k] = s0
                    gw[o, c + 1, k] = s1
                    o += 1
                c += 2
            else:
                xc = x[c]
                gxc = gx[c]
                for o in range(c_out):
                    go = g[o, shift:]
                    a = w[o, c, k]
                    s = 0.0
                    for t in range(n):
                        gxc[t] += a * go[t]
                        s += go[t] * xc[t]
                    gw[o, c, k] = s
                c += 1
    return gx, gw


# --------------------------------------------------------------------------
# iterative radix-2 FFT (decimation in time, bit-reversed input order)


def bit_reverse_indices(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def fft_inplace_numpy(a, inverse):
    """Transform complex array ``a`` (length a power of two); unscaled."""
    n = a.shape[0]
    if n == 1:
        return a
    a[:] = a[bit_reverse_indices(n)]
    sign = 1.0 if inverse else -1.0
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        blocks = a.reshape(n // m, m)
        even = blocks[:, :half].copy()
        odd = blocks[:, half:] * tw
        blocks[:, :half] = even + odd
        blocks[:, half:] = even - odd
        m *= 2
    return a


@njit
def _fft_stages_numba(a, inverse):
    n = a.shape[0]
    sign = 1.0 if inverse else -1.0
    m = 2
    while m <= n:
        half = m // 2
        tw = np.empty(half, dtype=np.complex128)
        for j in range(half):
            tw[j] = np.exp(sign * 2j * np.pi * j / m)
        for start in range(0, n, m):
            for j in range(half):
                u = a[start + j]
                v = a[start + j + half] * tw[j]
                a[start + j] = u + v
                a[start + j + half] = u - v
        m *= 2
    return a


def fft_inplace_numba(a, inverse):
    n = a.shape[0]
    if n == 1:
        return a
    a[:] = a[bit_reverse_indices(n)]
    return _fft_stages_numba(a, inverse)


if USE_NUMBA:
    conv_forward = conv_forward_numba
    conv_backward = conv_backward_numba
    fft_inplace = fft_inplace_numba
else:
    conv_forward = conv_forward_numpy
    conv_backward = conv_backward_numpy
    fft_inplace = fft_inplace_numpy

__all__ = [
    "HAVE_NUMBA",
    "USE_NUMBA",
    "conv_forward",
    "conv_backward",
    "fft_inplace",
    "conv_forward_numpy",
    "conv_backward_numpy",
    "conv_forward_numba",
    "conv_backward_numba",
    "fft_inplace_numpy",
    "fft_inplace_numba",
    "bit_reverse_indices",
]
