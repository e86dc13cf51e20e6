"""Backward warping of images by a flow field."""

from __future__ import annotations

import numpy as np


def warp_backward(img2: np.ndarray, flow: np.ndarray):
    """Sample img2 at p + flow(p) for every pixel p of frame 1.

    img2: (H, W) or (H, W, C) float array.
    flow: (H, W, 2) (u, v) in pixels.

    Returns (warped, in_bounds) where in_bounds marks sample points that
    landed inside [0, W-1] x [0, H-1]. Out-of-bounds pixels are filled by
    clamped-edge sampling but flagged false; callers must not trust them.
    A zero flow therefore yields warped == img2 with an all-true mask.
    """
    img2 = np.asarray(img2, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    squeeze = img2.ndim == 2
    if squeeze:
        img2 = img2[..., None]
    H, W = img2.shape[:2]
    if flow.shape != (H, W, 2):
        raise ValueError(f"flow shape {flow.shape} != {(H, W, 2)}")

    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    px = xs + flow[..., 0]
    py = ys + flow[..., 1]
    in_bounds = (px >= 0) & (px <= W - 1) & (py >= 0) & (py <= H - 1)

    cx = np.clip(px, 0, W - 1)
    cy = np.clip(py, 0, H - 1)
    x0 = np.clip(np.floor(cx).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(cy).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (cx - x0)[..., None]
    wy = (cy - y0)[..., None]

    top = img2[y0, x0] * (1 - wx) + img2[y0, x1] * wx
    bot = img2[y1, x0] * (1 - wx) + img2[y1, x1] * wx
    warped = top * (1 - wy) + bot * wy
    if squeeze:
        warped = warped[..., 0]
    return warped, in_bounds


__all__ = ["warp_backward"]
