"""3x3 convolution kernels: numba-jitted hot path plus a pure-numpy fallback.

Everything is laid out NHWC; 3x3 weights are stored as (3, 3, c_in, c_out).
The active backend is chosen once at import time from the ATP_BACKEND
environment variable ("numba" or "numpy"); default is numba when it
imports, numpy otherwise.

All kernels are deterministic by construction: each output element is
accumulated by exactly one parallel iteration in a fixed serial order, so
results are bit-identical regardless of thread count.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _resolve_backend():
    name = os.environ.get("ATP_BACKEND", "").strip().lower()
    if name not in ("", "numba", "numpy"):
        raise ValueError(f"ATP_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numpy":
        return "numpy"
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("ATP_BACKEND=numba but numba is not importable")
    return "numba" if _HAVE_NUMBA else "numpy"


_BACKEND = _resolve_backend()


def backend_name():
    return _BACKEND


def set_num_threads(n):
    """Set worker threads for the numba backend. Never changes results."""
    if _HAVE_NUMBA and n >= 1:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


def pad_hw(x, pad=1):
    """Zero-pad the two spatial axes of an NHWC tensor."""
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def out_size(hp, stride):
    """Output length for a 3-tap valid conv over a padded axis of length hp."""
    return (hp - 3) // stride + 1


# ---------------------------------------------------------------------------
# pure-numpy path: im2col + one GEMM forward, 9-shift GEMMs for the gradients
# ---------------------------------------------------------------------------

def conv3x3_numpy(xp, w, stride):
    n, hp, wp, ci = xp.shape
    co = w.shape[3]
    ho, wo = out_size(hp, stride), out_size(wp, stride)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # (n, ho, wo, ci, 3, 3)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, 9 * ci)
    y = cols @ w.reshape(9 * ci, co)
    return np.ascontiguousarray(y.reshape(n, ho, wo, co))


def conv3x3_grad_input_numpy(dy, w, stride, hp, wp):
    n, ho, wo, co = dy.shape
    ci = w.shape[2]
    dxp = np.zeros((n, hp, wp, ci), dtype=dy.dtype)
    dyf = dy.reshape(-1, co)
    for kh in range(3):
        for kw in range(3):
            g = (dyf @ w[kh, kw].T).reshape(n, ho, wo, ci)
            dxp[:, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride] += g
    return dxp


def conv3x3_grad_weights_numpy(xp, dy, stride):
    n, ho, wo, co = dy.shape
    ci = xp.shape[3]
    dw = np.empty((3, 3, ci, co), dtype=dy.dtype)
    for kh in range(3):
        for kw in range(3):
            xs = xp[:, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride]
            dw[kh, kw] = np.tensordot(xs, dy, axes=([0, 1, 2], [0, 1, 2]))
    return dw


# ---------------------------------------------------------------------------
# numba path: direct convolutions, innermost loop contiguous over channels
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv3x3_nb(xp, w, stride, y):
        n_img, ho, wo, co = y.shape
        ci = xp.shape[3]
        for n in prange(n_img):
            acc = np.empty((wo, co), dtype=xp.dtype)
            for h in range(ho):
                acc[:, :] = 0.0
                for kh in range(3):
                    xrow = xp[n, h * stride + kh]
                    for j in range(wo):
                        a = acc[j]
                        for kw in range(3):
                            xv = xrow[j * stride + kw]
                            wv = w[kh, kw]
                            for i in range(ci):
                                xi = xv[i]
                                wr = wv[i]
                                for o in range(co):
                                    a[o] += xi * wr[o]
                y[n, h] = acc

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv3x3_gi_nb(dy, w, stride, dxp):
        n_img, hp, wp, ci = dxp.shape
        ho, wo = dy.shape[1], dy.shape[2]
        co = dy.shape[3]
        for n in prange(n_img):
            for hx in range(hp):
                for wx in range(wp):
                    d = dxp[n, hx, wx]
                    for i in range(ci):
                        d[i] = 0.0
                    for kh in range(3):
                        th = hx - kh
                        if th < 0 or th % stride != 0:
                            continue
                        h = th // stride
                        if h >= ho:
                            continue
                        for kw in range(3):
                            tw = wx - kw
                            if tw < 0 or tw % stride != 0:
                                continue
                            j = tw // stride
                            if j >= wo:
                                continue
                            g = dy[n, h, j]
                            wv = w[kh, kw]
                            for i in range(ci):
                                acc = 0.0
                                wr = wv[i]
                                for o in range(co):
                                    acc += wr[o] * g[o]
                                d[i] += acc

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv3x3_gw_nb(xp, dy, stride, dw):
        ci, co = dw.shape[2], dw.shape[3]
        n_img, ho, wo = dy.shape[0], dy.shape[1], dy.shape[2]
        for t in prange(9 * ci):
            kh = t // (3 * ci)
            kw = (t // ci) % 3
            i = t % ci
            row = dw[kh, kw, i]
            for o in range(co):
                row[o] = 0.0
            for n in range(n_img):
                for h in range(ho):
                    xrow = xp[n, h * stride + kh]
                    grow = dy[n, h]
                    for j in range(wo):
                        xv = xrow[j * stride + kw, i]
                        g = grow[j]
                        for o in range(co):
                            row[o] += xv * g[o]

    def conv3x3_numba(xp, w, stride):
        n, hp, wp, _ = xp.shape
        y = np.empty((n, out_size(hp, stride), out_size(wp, stride), w.shape[3]),
                     dtype=xp.dtype)
        _conv3x3_nb(xp, w, stride, y)
        return y

    def conv3x3_grad_input_numba(dy, w, stride, hp, wp):
        dxp = np.empty((dy.shape[0], hp, wp, w.shape[2]), dtype=dy.dtype)
        _conv3x3_gi_nb(dy, w, stride, dxp)
        return dxp

    def conv3x3_grad_weights_numba(xp, dy, stride):
        dw = np.empty((3, 3, xp.shape[3], dy.shape[3]), dtype=dy.dtype)
        _conv3x3_gw_nb(xp, dy, stride, dw)
        return dw


if _BACKEND == "numba":
    conv3x3 = conv3x3_numba
    conv3x3_grad_input = conv3x3_grad_input_numba
    conv3x3_grad_weights = conv3x3_grad_weights_numba
else:
    conv3x3 = conv3x3_numpy
    conv3x3_grad_input = conv3x3_grad_input_numpy
    conv3x3_grad_weights = conv3x3_grad_weights_numpy
