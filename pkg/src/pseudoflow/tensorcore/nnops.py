"""Structured ops on top of the autodiff core: convolution, pooling,
bilinear sampling and upsampling.

Sampling coordinates are plain numpy arrays and are treated as constants:
gradients flow into the sampled map only. The recurrent decoder detaches
its flow estimate before each lookup, so this is the full gradient it
needs.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import NonFiniteError, ShapeError, Tensor, _check_finite, _record


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(C, Hp, Wp) -> (H'*W', C*kh*kw) window matrix, row-major windows."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw), ho, wo


def conv_out_dim(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution (cross-correlation) on a (C_in, H, W) input.

    Output is (C_out, H', W') with H' = (H + 2p - kh)//stride + 1. The
    padded input must admit at least one window.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x (C,H,W) and w (O,C,kh,kw), got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin:
        raise ShapeError(f"conv2d channel mismatch: x has {cin}, w expects {cin_w}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    ho, wo = conv_out_dim(h, kh, stride, padding), conv_out_dim(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols, ho2, wo2 = _im2col(xp, kh, kw, stride)
    assert (ho2, wo2) == (ho, wo)
    wm = w.data.reshape(cout, cin * kh * kw)
    out_data = (cols @ wm.T).T.reshape(cout, ho, wo)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"bias shape {b.shape} != ({cout},)")
        out_data = out_data + b.data[:, None, None]
    _check_finite(out_data, "conv2d")
    out = Tensor(out_data)

    wd_arr = w.data

    def back(g):
        g2 = g.reshape(cout, ho * wo).T
        dw = (g2.T @ cols).reshape(cout, cin, kh, kw)
        db = g2.sum(axis=0) if b is not None else None
        # dx: dilate g by the stride, pad by k-1, correlate with the
        # channel-transposed, spatially-flipped kernel.
        hd, wdd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
        gd = np.zeros((cout, hd, wdd), dtype=g.dtype)
        gd[:, ::stride, ::stride] = g
        gdp = np.pad(gd, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        wflip = wd_arr[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (Cin, Cout, kh, kw)
        gcols, gh, gw = _im2col(gdp, kh, kw, 1)
        dxp_part = (gcols @ wflip.reshape(cin, cout * kh * kw).T).T.reshape(cin, gh, gw)
        hp, wp = h + 2 * padding, wd + 2 * padding
        if (gh, gw) != (hp, wp):
            # trailing rows/cols never covered by a window get zero grad
            dxp = np.zeros((cin, hp, wp), dtype=g.dtype)
            dxp[:, :gh, :gw] = dxp_part
        else:
            dxp = dxp_part
        dx = dxp[:, padding:padding + h, padding:padding + wd]
        if b is not None:
            return dx, dw, db
        return dx, dw

    inputs = (x, w, b) if b is not None else (x, w)
    return _record(out, inputs, back)


def avgpool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping mean pooling of the trailing two dimensions.

    Strict mode: trailing dims must be divisible by the kernel.
    """
    if kernel < 1:
        raise ShapeError("avgpool2d kernel must be >= 1")
    if x.ndim < 2:
        raise ShapeError("avgpool2d needs at least 2 dims")
    h, w = x.shape[-2], x.shape[-1]
    if h % kernel or w % kernel:
        raise ShapeError(f"avgpool2d: dims {h}x{w} not divisible by kernel {kernel}")
    if kernel == 1:
        out_data = x.data.copy()
        return _record(Tensor(out_data), (x,), lambda g: (g,))
    lead = x.shape[:-2]
    ho, wo = h // kernel, w // kernel
    out_data = x.data.reshape(*lead, ho, kernel, wo, kernel).mean(axis=(-3, -1))
    _check_finite(out_data, "avgpool2d")
    k2 = kernel * kernel

    def back(g):
        ge = np.broadcast_to(
            (g / k2)[..., :, None, :, None],
            (*lead, ho, kernel, wo, kernel),
        )
        return (ge.reshape(*lead, h, w),)

    return _record(Tensor(out_data), (x,), back)


def _corner_setup(xs, ys, h, w):
    """Clamp-to-edge corner indices and weights for bilinear sampling."""
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(yc), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xc - x0
    wy = yc - y0
    w00 = (1.0 - wy) * (1.0 - wx)
    w01 = (1.0 - wy) * wx
    w10 = wy * (1.0 - wx)
    w11 = wy * wx
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    return (i00, i01, i10, i11), (w00, w01, w10, w11)


def sample_bilinear(img: Tensor, xs: np.ndarray, ys: np.ndarray) -> Tensor:
    """Sample a (C, H, W) map at points (xs, ys) with clamp-to-edge borders.

    Returns (C, *points). Coordinates are constants; the gradient flows
    into ``img`` only.
    """
    if img.ndim != 3:
        raise ShapeError(f"sample_bilinear expects (C,H,W), got {img.shape}")
    c, h, w = img.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ShapeError("xs/ys shape mismatch")
    pshape = xs.shape
    idx, wts = _corner_setup(xs.reshape(-1), ys.reshape(-1), h, w)
    flat = img.data.reshape(c, h * w)
    out_data = sum(wt * flat[:, ii] for ii, wt in zip(idx, wts))
    out_data = out_data.astype(img.dtype, copy=False).reshape(c, *pshape)
    _check_finite(out_data, "sample_bilinear")
    npts = xs.size

    def back(g):
        g2 = g.reshape(c, npts)
        chan = np.arange(c, dtype=np.int64)[:, None] * (h * w)
        all_idx = np.concatenate([(chan + ii[None, :]).ravel() for ii in idx])
        all_val = np.concatenate([(wt[None, :] * g2).ravel() for wt in wts])
        dimg = np.bincount(all_idx, weights=all_val, minlength=c * h * w)
        return (dimg.reshape(c, h, w).astype(g.dtype, copy=False),)

    return _record(Tensor(out_data), (img,), back)


def gather_bilinear(vol: Tensor, xs: np.ndarray, ys: np.ndarray) -> Tensor:
    """Per-slice bilinear gather: vol (B, H, W) sampled at xs/ys (B, K).

    Slice b is sampled only at its own K points, with clamp-to-edge
    borders; gradients flow into ``vol``.
    """
    if vol.ndim != 3:
        raise ShapeError(f"gather_bilinear expects (B,H,W), got {vol.shape}")
    b, h, w = vol.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 2 or xs.shape[0] != b:
        raise ShapeError(f"coords must be (B,K) matching vol B={b}, got {xs.shape}")
    k = xs.shape[1]
    idx, wts = _corner_setup(xs, ys, h, w)
    base = (np.arange(b, dtype=np.int64) * (h * w))[:, None]
    flat = vol.data.reshape(b * h * w)
    out_data = sum(wt * flat[base + ii] for ii, wt in zip(idx, wts))
    out_data = out_data.astype(vol.dtype, copy=False)
    _check_finite(out_data, "gather_bilinear")

    def back(g):
        all_idx = np.concatenate([(base + ii).ravel() for ii in idx])
        all_val = np.concatenate([(wt * g).ravel() for wt in wts])
        dvol = np.bincount(all_idx, weights=all_val, minlength=b * h * w)
        return (dvol.reshape(b, h, w).astype(g.dtype, copy=False),)

    return _record(Tensor(out_data), (vol,), back)


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-stochastic align-corners linear interpolation matrix."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 2)
    t = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - t
    m[rows, i0 + 1] += t
    return m


_INTERP_CACHE: dict = {}


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear x``factor`` upsampling of (C, h, w), align-corners."""
    if x.ndim != 3:
        raise ShapeError(f"upsample_bilinear expects (C,h,w), got {x.shape}")
    if factor < 1:
        raise ShapeError("factor must be >= 1")
    c, h, w = x.shape
    ho, wo = h * factor, w * factor
    key = (h, w, factor, np.dtype(x.dtype).str)
    if key not in _INTERP_CACHE:
        _INTERP_CACHE[key] = (
            _interp_matrix(ho, h, x.data.dtype),
            _interp_matrix(wo, w, x.data.dtype),
        )
    rm, cm = _INTERP_CACHE[key]
    out_data = np.matmul(np.matmul(rm, x.data), cm.T)
    _check_finite(out_data, "upsample_bilinear")

    def back(g):
        return (np.matmul(np.matmul(rm.T, g), cm),)

    return _record(Tensor(out_data), (x,), back)


__all__ = [
    "conv2d", "avgpool2d", "sample_bilinear", "gather_bilinear",
    "upsample_bilinear", "conv_out_dim",
]
