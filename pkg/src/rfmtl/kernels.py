"""Hot numeric kernels.

Every kernel exists twice: a numba loop (``*_nb``) and a vectorized numpy
version (``*_np``). The public name dispatches on ``_accel.USE_NUMBA``. Both
paths are kept bit-compatible where the arithmetic order allows it and are
checked against each other in the test suite.

Layout conventions: feature maps are ``(batch, height, width, channels)``,
conv weights are ``(kh, kw, in_channels, out_channels)``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from ._accel import njit


# ---------------------------------------------------------------- conv2d


def _conv_out(n, k, stride):
    return (n - k) // stride + 1


def conv2d_forward_np(x, w, b, stride=1):
    kh, kw, _, _ = w.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: (B, Ho, Wo, C, kh, kw)
    out = np.tensordot(win, w.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    return out + b


@njit
def conv2d_forward_nb(x, w, b, stride=1):
    B, H, W, C = x.shape
    kh, kw, _, N = w.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    out = np.empty((B, Ho, Wo, N), dtype=x.dtype)
    for bi in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for n in range(N):
                    out[bi, i, j, n] = b[n]
                for p in range(kh):
                    for q in range(kw):
                        for c in range(C):
                            v = x[bi, i * stride + p, j * stride + q, c]
                            for n in range(N):
                                out[bi, i, j, n] += v * w[p, q, c, n]
    return out


def conv2d_backward_np(x, w, gout, stride=1):
    kh, kw, C, N = w.shape
    Ho, Wo = gout.shape[1], gout.shape[2]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    dw = np.tensordot(win, gout, axes=([0, 1, 2], [0, 1, 2]))  # (C, kh, kw, N)
    dw = dw.transpose(1, 2, 0, 3)
    db = gout.sum(axis=(0, 1, 2))
    dx = np.zeros_like(x)
    hs = (Ho - 1) * stride + 1
    ws = (Wo - 1) * stride + 1
    for p in range(kh):
        for q in range(kw):
            dx[:, p:p + hs:stride, q:q + ws:stride, :] += gout @ w[p, q].T
    return dx, np.ascontiguousarray(dw), db


@njit
def conv2d_backward_nb(x, w, gout, stride=1):
    B, H, W, C = x.shape
    kh, kw, _, N = w.shape
    Ho, Wo = gout.shape[1], gout.shape[2]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(N, dtype=w.dtype)
    for bi in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for n in range(N):
                    db[n] += gout[bi, i, j, n]
                for p in range(kh):
                    for q in range(kw):
                        r = i * stride + p
                        s = j * stride + q
                        for c in range(C):
                            xv = x[bi, r, s, c]
                            acc = 0.0
                            for n in range(N):
                                g = gout[bi, i, j, n]
                                dw[p, q, c, n] += xv * g
                                acc += g * w[p, q, c, n]
                            dx[bi, r, s, c] += acc
    return dx, dw, db


# ---------------------------------------------------------------- maxpool


def maxpool_forward_np(x, size, stride):
    win = sliding_window_view(x, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    B, Ho, Wo, C = win.shape[:4]
    flat = win.reshape(B, Ho, Wo, C, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int32)


@njit
def maxpool_forward_nb(x, size, stride):
    B, H, W, C = x.shape
    Ho = (H - size) // stride + 1
    Wo = (W - size) // stride + 1
    out = np.empty((B, Ho, Wo, C), dtype=x.dtype)
    arg = np.empty((B, Ho, Wo, C), dtype=np.int32)
    for bi in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    best = x[bi, i * stride, j * stride, c]
                    k_best = 0
                    for p in range(size):
                        for q in range(size):
                            v = x[bi, i * stride + p, j * stride + q, c]
                            if v > best:
                                best = v
                                k_best = p * size + q
                    out[bi, i, j, c] = best
                    arg[bi, i, j, c] = k_best
    return out, arg


def maxpool_backward_np(gout, arg, in_shape, size, stride, dtype):
    dx = np.zeros(in_shape, dtype=dtype)
    Ho, Wo = gout.shape[1], gout.shape[2]
    hs = (Ho - 1) * stride + 1
    ws = (Wo - 1) * stride + 1
    for p in range(size):
        for q in range(size):
            sel = np.where(arg == p * size + q, gout, 0)
            dx[:, p:p + hs:stride, q:q + ws:stride, :] += sel
    return dx


@njit
def _maxpool_backward_nb(gout, arg, dx, size, stride):
    B, Ho, Wo, C = gout.shape
    # same accumulation order as the numpy path: window offset outermost
    for k in range(size * size):
        p = k // size
        q = k % size
        for bi in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        if arg[bi, i, j, c] == k:
                            dx[bi, i * stride + p, j * stride + q, c] += gout[bi, i, j, c]
    return dx


def maxpool_backward_nb(gout, arg, in_shape, size, stride, dtype):
    dx = np.zeros(in_shape, dtype=dtype)
    return _maxpool_backward_nb(gout, arg, dx, size, stride)


# ---------------------------------------------------------------- random walks


def folded_walk_np(increments, start, limit):
    """Gaussian walk folded into [-limit, limit] (mirror reflection at the walls)."""
    u = start + np.cumsum(increments)
    if limit <= 0:
        return np.zeros_like(u)
    period = 4.0 * limit
    t = np.mod(u + limit, period)
    return np.where(t <= 2.0 * limit, t - limit, 3.0 * limit - t)


@njit
def folded_walk_nb(increments, start, limit):
    n = increments.shape[0]
    out = np.empty(n, dtype=np.float64)
    if limit <= 0:
        out[:] = 0.0
        return out
    period = 4.0 * limit
    u = start
    for k in range(n):
        u = u + increments[k]
        t = (u + limit) % period
        if t <= 2.0 * limit:
            out[k] = t - limit
        else:
            out[k] = 3.0 * limit - t
    return out


# ---------------------------------------------------------------- interpolation

SINC_HALF_WIDTH = 4  # 8-tap windowed sinc


def sinc_interp_np(x, positions):
    """Evaluate complex ``x`` at fractional sample ``positions`` (Hann-windowed sinc)."""
    n = x.shape[0]
    base = np.floor(positions).astype(np.int64)
    y = np.zeros(positions.shape[0], dtype=np.complex128)
    for off in range(-SINC_HALF_WIDTH + 1, SINC_HALF_WIDTH + 1):
        k = base + off
        t = positions - k
        h = np.sinc(t) * 0.5 * (1.0 + np.cos(np.pi * t / SINC_HALF_WIDTH))
        ok = (k >= 0) & (k < n)
        y += np.where(ok, x[np.clip(k, 0, n - 1)] * h, 0.0)
    return y


@njit
def sinc_interp_nb(x, positions):
    n = x.shape[0]
    m = positions.shape[0]
    y = np.zeros(m, dtype=np.complex128)
    for i in range(m):
        pos = positions[i]
        base = int(np.floor(pos))
        acc = 0.0 + 0.0j
        for off in range(-SINC_HALF_WIDTH + 1, SINC_HALF_WIDTH + 1):
            k = base + off
            if k < 0 or k >= n:
                continue
            t = pos - k
            if t == 0.0:
                s = 1.0
            else:
                s = np.sin(np.pi * t) / (np.pi * t)
            h = s * 0.5 * (1.0 + np.cos(np.pi * t / SINC_HALF_WIDTH))
            acc += x[k] * h
        y[i] = acc
    return y


# ---------------------------------------------------------------- dispatch

_PAIRS = {
    "conv2d_forward": (conv2d_forward_np, conv2d_forward_nb),
    "conv2d_backward": (conv2d_backward_np, conv2d_backward_nb),
    "maxpool_forward": (maxpool_forward_np, maxpool_forward_nb),
    "maxpool_backward": (maxpool_backward_np, maxpool_backward_nb),
    "folded_walk": (folded_walk_np, folded_walk_nb),
    "sinc_interp": (sinc_interp_np, sinc_interp_nb),
}


def implementations(name):
    """Return ``(numpy_impl, numba_impl)`` for a kernel name."""
    return _PAIRS[name]


def _pick(name):
    np_impl, nb_impl = _PAIRS[name]
    return nb_impl if _accel.USE_NUMBA else np_impl


def conv2d_forward(x, w, b, stride=1):
    return _pick("conv2d_forward")(np.ascontiguousarray(x), w, b, stride)


def conv2d_backward(x, w, gout, stride=1):
    return _pick("conv2d_backward")(np.ascontiguousarray(x), w, np.ascontiguousarray(gout), stride)


def maxpool_forward(x, size, stride):
    return _pick("maxpool_forward")(np.ascontiguousarray(x), size, stride)


def maxpool_backward(gout, arg, in_shape, size, stride, dtype):
    return _pick("maxpool_backward")(np.ascontiguousarray(gout), arg, tuple(in_shape), size, stride, dtype)


def folded_walk(increments, start, limit):
    return _pick("folded_walk")(np.asarray(increments, dtype=np.float64), float(start), float(limit))


def sinc_interp(x, positions):
    return _pick("sinc_interp")(np.asarray(x, dtype=np.complex128), np.asarray(positions, dtype=np.float64))
