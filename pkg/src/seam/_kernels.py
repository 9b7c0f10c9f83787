"""Hot numeric kernels: im2col/col2im, depthwise convolution, rounding and
the fused mixed-precision activation quantizer.

Everything except im2col has a numba ``@njit`` version and a pure-numpy
fallback; im2col is numpy only. The numba path is used when numba imports
cleanly and the environment variable ``SEAM_DISABLE_NUMBA`` is unset (or
``0``). Both paths return identical shapes and agree to floating-point
summation-order error.
"""
import os

import numpy as np

_DISABLED = os.environ.get("SEAM_DISABLE_NUMBA", "0") not in ("", "0")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    HAS_NUMBA = False


def backend():
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def round_half_away_np(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def im2col_np(x, kh, kw, stride, pad):
    """Patch matrix of NCHW ``x``: rows (n, oy, ox), columns (i, j, c)."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xh = x.transpose(0, 2, 3, 1)
    xp = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xh
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, ho, wo, c, kh, kw) -> (n, ho, wo, kh, kw, c)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def col2im_np(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols6 = cols.reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols6[:, :, :, i, j, :]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))


def dwconv_forward_np(x, w, stride, pad):
    n, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += patch * w[:, 0, i, j][None, :, None, None]
    return out


def dwconv_backward_np(x, w, gout, stride, pad):
    n, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = gout.shape[2], gout.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            dw[:, 0, i, j] = (xp[sl] * gout).sum(axis=(0, 2, 3))
            dxp[sl] += gout * w[:, 0, i, j][None, :, None, None]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad].copy()
    return dxp, dw


def mixed_act_quant_np(a, clip, qmaxes, p):
    """``sum_j p[j] * s_j * clip(round(a / s_j), 0, Q_j)`` with ``s_j = clip / Q_j``."""
    out = np.zeros_like(a)
    for qm, pj in zip(qmaxes, p):
        s = clip / qm
        out += (pj * s) * np.clip(round_half_away_np(a / s), 0, qm)
    return out.astype(a.dtype, copy=False)


def mixed_act_quant_dp_np(a, g, clip, qmaxes):
    """Gradient w.r.t. the branch weights: ``<g, Q_j(a)>`` per branch."""
    dp = np.empty(len(qmaxes), dtype=np.float64)
    for j, qm in enumerate(qmaxes):
        s = clip / qm
        dp[j] = np.sum(g * (s * np.clip(round_half_away_np(a / s), 0, qm)), dtype=np.float64)
    return dp


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _round_half_away_nb(x):
        out = np.empty_like(x)
        flat = x.ravel()
        of = out.ravel()
        for i in range(flat.size):
            v = flat[i]
            if v >= 0:
                of[i] = np.floor(v + 0.5)
            else:
                of[i] = -np.floor(-v + 0.5)
        return out

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad, ho, wo):
        dxh = np.zeros((n, h, w, c), dtype=cols.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    for i in range(kh):
                        iy = oy * stride - pad + i
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(kw):
                            ix = ox * stride - pad + j
                            if ix < 0 or ix >= w:
                                continue
                            base = (i * kw + j) * c
                            for ch in range(c):
                                dxh[b, iy, ix, ch] += cols[row, base + ch]
        return dxh

    @njit(cache=True)
    def _rha(v):
        return np.floor(v + 0.5) if v >= 0 else -np.floor(-v + 0.5)

    @njit(cache=True)
    def _mixed_act_quant_nb(a, clip, qmaxes, p):
        flat = a.ravel()
        out = np.empty_like(flat)
        nb = qmaxes.size
        inv = np.empty(nb)
        scale = np.empty(nb)
        for j in range(nb):
            inv[j] = qmaxes[j] / clip
            scale[j] = p[j] * clip / qmaxes[j]
        for i in range(flat.size):
            v = flat[i]
            acc = 0.0
            if v > 0:
                for j in range(nb):
                    q = _rha(v * inv[j])
                    if q > qmaxes[j]:
                        q = qmaxes[j]
                    acc += scale[j] * q
            out[i] = acc
        return out.reshape(a.shape)

    @njit(cache=True)
    def _mixed_act_quant_dp_nb(a, g, clip, qmaxes):
        fa = a.ravel()
        fg = g.ravel()
        nb = qmaxes.size
        dp = np.zeros(nb)
        for i in range(fa.size):
            v = fa[i]
            if v <= 0:
                continue
            gv = fg[i]
            for j in range(nb):
                s = clip / qmaxes[j]
                q = _rha(v / s)
                if q > qmaxes[j]:
                    q = qmaxes[j]
                dp[j] += gv * s * q
        return dp

    @njit(cache=True)
    def _dwconv_forward_nb(x, w, stride, pad, ho, wo):
        n, c, h, wd = x.shape
        kh, kw = w.shape[2], w.shape[3]
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        acc = 0.0
                        for i in range(kh):
                            iy = oy * stride - pad + i
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(kw):
                                ix = ox * stride - pad + j
                                if ix < 0 or ix >= wd:
                                    continue
                                acc += x[b, ch, iy, ix] * w[ch, 0, i, j]
                        out[b, ch, oy, ox] = acc
        return out

    @njit(cache=True)
    def _dwconv_backward_nb(x, w, gout, stride, pad):
        n, c, h, wd = x.shape
        kh, kw = w.shape[2], w.shape[3]
        ho, wo = gout.shape[2], gout.shape[3]
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        g = gout[b, ch, oy, ox]
                        for i in range(kh):
                            iy = oy * stride - pad + i
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(kw):
                                ix = ox * stride - pad + j
                                if ix < 0 or ix >= wd:
                                    continue
                                dw[ch, 0, i, j] += x[b, ch, iy, ix] * g
                                dx[b, ch, iy, ix] += w[ch, 0, i, j] * g
        return dx, dw


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def round_half_away(x):
    if HAS_NUMBA and x.ndim > 0:
        return _round_half_away_nb(np.ascontiguousarray(x))
    return round_half_away_np(x)


def im2col(x, kh, kw, stride, pad):
    # a single strided gather; numpy's copy runs at memory bandwidth and beat
    # every numba variant tried, so there is no jitted version
    return im2col_np(x, kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    if HAS_NUMBA:
        n, c, h, w = shape
        ho = _out_size(h, kh, stride, pad)
        wo = _out_size(w, kw, stride, pad)
        dxh = _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad, ho, wo)
        return np.ascontiguousarray(dxh.transpose(0, 3, 1, 2))
    return col2im_np(cols, shape, kh, kw, stride, pad)


def dwconv_forward(x, w, stride, pad):
    if HAS_NUMBA:
        ho = _out_size(x.shape[2], w.shape[2], stride, pad)
        wo = _out_size(x.shape[3], w.shape[3], stride, pad)
        return _dwconv_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, pad, ho, wo)
    return dwconv_forward_np(x, w, stride, pad)


def dwconv_backward(x, w, gout, stride, pad):
    if HAS_NUMBA:
        return _dwconv_backward_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(gout), stride, pad
        )
    return dwconv_backward_np(x, w, gout, stride, pad)


def mixed_act_quant(a, clip, qmaxes, p):
    qmaxes = np.asarray(qmaxes, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if HAS_NUMBA:
        return _mixed_act_quant_nb(np.ascontiguousarray(a), float(clip), qmaxes, p)
    return mixed_act_quant_np(a, clip, qmaxes, p)


def mixed_act_quant_dp(a, g, clip, qmaxes):
    qmaxes = np.asarray(qmaxes, dtype=np.float64)
    if HAS_NUMBA:
        return _mixed_act_quant_dp_nb(np.ascontiguousarray(a), np.ascontiguousarray(g), float(clip), qmaxes)
    return mixed_act_quant_dp_np(a, g, clip, qmaxes)
