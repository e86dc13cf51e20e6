"""Flow -> RGB visualization using the classic 55-bin color wheel."""

from __future__ import annotations

import numpy as np


def _make_colorwheel() -> np.ndarray:
    """Standard RY/YG/GC/CB/BM/MR transition wheel, shape (55, 3) uint8."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    ncols = RY + YG + GC + CB + BM + MR
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel.astype(np.uint8)


_WHEEL = _make_colorwheel()


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Map a (H, W, 2) flow to (H, W, 3) uint8 RGB.

    Hue encodes direction, saturation magnitude. Magnitudes are divided by
    max_mag (default: the field's own max, so the brightest pixel is fully
    saturated; zero flow maps to pure white).
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"expected (H, W, 2), got {flow.shape}")
    u = flow[..., 0]
    v = flow[..., 1]
    mag = np.sqrt(u ** 2 + v ** 2)
    if max_mag is None:
        max_mag = float(mag.max())
    scale = max(max_mag, 1e-9)
    u = u / scale
    v = v / scale
    rad = np.sqrt(u ** 2 + v ** 2)
    rad = np.minimum(rad, 1.0)

    ncols = _WHEEL.shape[0]
    angle = np.arctan2(-v, -u) / np.pi          # [-1, 1]
    fk = (angle + 1) / 2 * (ncols - 1)           # [0, ncols-1]
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col0 = _WHEEL[k0].astype(np.float64) / 255.0
    col1 = _WHEEL[k1].astype(np.float64) / 255.0
    col = (1 - f) * col0 + f * col1
    col = 1 - rad[..., None] * (1 - col)         # desaturate toward white
    return np.floor(255.0 * col).astype(np.uint8)


__all__ = ["flow_to_color"]
