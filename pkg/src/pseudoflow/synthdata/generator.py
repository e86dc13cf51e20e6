"""Procedural image-pair generator with exact analytic ground-truth flow.

A scene is 1-3 textured layers: layer 0 is an infinite background plane,
layers 1+ are elliptical patches stacked in z-order. Each layer moves by a
similarity transform p2 = c + t + s*R(theta)(p - c). Textures are
continuous multi-octave value-noise functions of world coordinates, so the
second frame is rendered by evaluating the *same* texture at the inverse-
mapped position -- correspondence is exact, not resampled.

Ground-truth flow at a pixel is the closed-form displacement of the
front-most layer owning it; the validity mask clears pixels that leave the
frame or whose target is (even partially, at bilinear-footprint level)
covered by a nearer layer in frame 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


class DegenerateSceneError(ValueError):
    """Scene spec describes a zero-area or otherwise unusable layer."""


# ---------------------------------------------------------------------------
# continuous value-noise texture


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> uniform-ish values in [0, 1)."""
    seed_term = (int(seed) * 2246822519) & 0xFFFFFFFF
    h = (ix.astype(np.uint64) * np.uint64(374761393)
         + iy.astype(np.uint64) * np.uint64(668265263)
         + np.uint64(seed_term)) & np.uint64(0xFFFFFFFF)
    h = ((h ^ (h >> np.uint64(13))) * np.uint64(1274126177)) & np.uint64(0xFFFFFFFF)
    h = h ^ (h >> np.uint64(16))
    return h.astype(np.float64) / float(2 ** 32)


def _value_noise(x: np.ndarray, y: np.ndarray, spacing: float, seed: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise at world coords (x, y)."""
    gx = x / spacing
    gy = y / spacing
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    # C1 smoothstep keeps the field differentiable across cell edges
    ux = fx * fx * (3.0 - 2.0 * fx)
    uy = fy * fy * (3.0 - 2.0 * fy)
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    v00 = _hash01(ix, iy, seed)
    v10 = _hash01(ix + 1, iy, seed)
    v01 = _hash01(ix, iy + 1, seed)
    v11 = _hash01(ix + 1, iy + 1, seed)
    top = v00 * (1 - ux) + v10 * ux
    bot = v01 * (1 - ux) + v11 * ux
    return top * (1 - uy) + bot * uy


def texture(x: np.ndarray, y: np.ndarray, seed: int, octaves: int = 3,
            contrast: float = 0.7, base_spacing: float = 16.0) -> np.ndarray:
    """Multi-octave value noise in [0,1], centered on 0.5.

    Octave o uses lattice spacing base_spacing / 2**o (floored at 4 px so
    bilinear re-interpolation of rendered frames stays accurate) with
    *flat* weights: local patches need real energy at 4-8 px wavelengths
    or nothing in the scene is matchable at patch scale. The mixed field
    concentrates near 0.5, so a tanh curve (coordinate-independent, hence
    correspondence-exact) spreads it back out; contrast scales the tanh
    gain.
    """
    total = np.zeros(np.broadcast(x, y).shape, dtype=np.float64)
    wsum = 0.0
    for o in range(octaves):
        spacing = max(base_spacing / (2.0 ** o), 4.0)
        w = 1.0
        total += w * _value_noise(x, y, spacing, seed * 1013 + o)
        wsum += w
    total /= wsum
    return 0.5 + 0.48 * np.tanh(6.0 * contrast * (total - 0.5))


# ---------------------------------------------------------------------------
# scene specification


@dataclass(frozen=True)
class LayerSpec:
    """One moving layer. Background layers ignore center/radii/angle."""
    tx: float
    ty: float
    theta: float = 0.0
    scale: float = 1.0
    cx: float = 0.0
    cy: float = 0.0
    rx: float = 0.0        # ellipse radii; unused for the background
    ry: float = 0.0
    tilt: float = 0.0      # ellipse orientation
    tex_seed: int = 0
    octaves: int = 3
    contrast: float = 0.7

    def validate(self, is_background: bool, max_disp: float) -> None:
        if abs(self.tx) > max_disp or abs(self.ty) > max_disp:
            raise DegenerateSceneError(
                f"translation ({self.tx}, {self.ty}) exceeds max displacement {max_disp}")
        if not (0.8 <= self.scale <= 1.25):
            raise DegenerateSceneError(f"scale {self.scale} outside [0.8, 1.25]")
        if not is_background and (self.rx <= 0 or self.ry <= 0):
            raise DegenerateSceneError("zero-area layer")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    layers: tuple = ()
    max_disp: float = 8.0
    occlusion: bool = True   # False forces a single (background-only) scene

    def __post_init__(self):
        if not self.layers:
            raise DegenerateSceneError("scene needs at least one layer")
        if not 1 <= len(self.layers) <= 3:
            raise DegenerateSceneError("layer count must be 1-3")
        for i, layer in enumerate(self.layers):
            layer.validate(i == 0, self.max_disp)

    @property
    def effective_layers(self) -> tuple:
        return self.layers if self.occlusion else self.layers[:1]


def random_scene(seed: int, height: int = 64, width: int = 64,
                 max_disp: float = 8.0, n_layers: int | None = None,
                 occlusion: bool = True) -> SceneSpec:
    """Draw a SceneSpec deterministically from an integer seed."""
    rng = np.random.default_rng(seed)
    if n_layers is None:
        n_layers = int(rng.integers(2, 4))  # 2 or 3 by default
    layers = []
    for i in range(n_layers):
        tx, ty = rng.uniform(-max_disp, max_disp, size=2)
        theta = float(rng.uniform(-0.15, 0.15))
        scale = float(rng.uniform(0.9, 1.12))
        if i == 0:
            # gentler background motion so most of the frame stays in view
            tx *= 0.5
            ty *= 0.5
            theta *= 0.5
            scale = float(rng.uniform(0.95, 1.06))
            cx, cy = width / 2.0, height / 2.0
            rx = ry = 0.0
            tilt = 0.0
        else:
            cx = float(rng.uniform(0.2 * width, 0.8 * width))
            cy = float(rng.uniform(0.2 * height, 0.8 * height))
            rx = float(rng.uniform(0.12, 0.3) * width)
            ry = float(rng.uniform(0.12, 0.3) * height)
            tilt = float(rng.uniform(0, math.pi))
        layers.append(LayerSpec(
            tx=float(tx), ty=float(ty), theta=theta, scale=scale,
            cx=cx, cy=cy, rx=rx, ry=ry, tilt=tilt,
            tex_seed=int(rng.integers(0, 2 ** 31 - 1)),
            octaves=int(rng.integers(3, 5)),
            contrast=float(rng.uniform(0.55, 0.8)),
        ))
    return SceneSpec(seed=seed, height=height, width=width,
                     layers=tuple(layers), max_disp=max_disp,
                     occlusion=occlusion)


# ---------------------------------------------------------------------------
# rendering


@dataclass
class LabeledPair:
    """An image pair with dense ground-truth flow and a validity mask."""
    img1: np.ndarray          # (H, W) float64 in [0, 1]
    img2: np.ndarray
    flow: np.ndarray          # (H, W, 2) float64, (u, v) px
    mask: np.ndarray          # (H, W) bool
    seed: int = 0

    def copy(self) -> "LabeledPair":
        return LabeledPair(self.img1.copy(), self.img2.copy(),
                           self.flow.copy(), self.mask.copy(), self.seed)


def _forward_map(layer: LayerSpec, cx: float, cy: float,
                 px: np.ndarray, py: np.ndarray):
    ct, st = math.cos(layer.theta), math.sin(layer.theta)
    dx = px - cx
    dy = py - cy
    qx = cx + layer.tx + layer.scale * (ct * dx - st * dy)
    qy = cy + layer.ty + layer.scale * (st * dx + ct * dy)
    return qx, qy


def _inverse_map(layer: LayerSpec, cx: float, cy: float,
                 qx: np.ndarray, qy: np.ndarray):
    ct, st = math.cos(layer.theta), math.sin(layer.theta)
    dx = (qx - cx - layer.tx) / layer.scale
    dy = (qy - cy - layer.ty) / layer.scale
    px = cx + ct * dx + st * dy
    py = cy - st * dx + ct * dy
    return px, py


def _inside(layer: LayerSpec, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Membership of frame-1 points in the layer's elliptical support."""
    ct, st = math.cos(layer.tilt), math.sin(layer.tilt)
    dx = px - layer.cx
    dy = py - layer.cy
    ex = ct * dx + st * dy
    ey = -st * dx + ct * dy
    return (ex / layer.rx) ** 2 + (ey / layer.ry) ** 2 <= 1.0


def gen_pair(spec: SceneSpec) -> LabeledPair:
    """Render both frames plus exact GT flow and validity mask."""
    H, W = spec.height, spec.width
    layers = spec.effective_layers
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)

    # frame-1 ownership: highest layer whose support contains the pixel
    owner1 = np.zeros((H, W), dtype=np.int64)
    for i, layer in enumerate(layers[1:], start=1):
        owner1[_inside(layer, xs, ys)] = i

    img1 = np.zeros((H, W), dtype=np.float64)
    for i, layer in enumerate(layers):
        sel = owner1 == i
        img1[sel] = texture(xs[sel], ys[sel], layer.tex_seed,
                            layer.octaves, layer.contrast)

    # frame-2 ownership + rendering: for each target pixel, the highest
    # layer whose inverse-mapped source point lies in its support
    owner2 = np.zeros((H, W), dtype=np.int64)
    bg = layers[0]
    bx, by = _inverse_map(bg, W / 2.0, H / 2.0, xs, ys)
    img2 = texture(bx, by, bg.tex_seed, bg.octaves, bg.contrast)
    for i, layer in enumerate(layers[1:], start=1):
        sx, sy = _inverse_map(layer, layer.cx, layer.cy, xs, ys)
        covered = _inside(layer, sx, sy)
        owner2[covered] = i
        img2[covered] = texture(sx[covered], sy[covered], layer.tex_seed,
                                layer.octaves, layer.contrast)

    # GT flow of the owning layer, in closed form
    flow = np.zeros((H, W, 2), dtype=np.float64)
    for i, layer in enumerate(layers):
        sel = owner1 == i
        if not sel.any():
            continue
        cx = layer.cx if i > 0 else W / 2.0
        cy = layer.cy if i > 0 else H / 2.0
        qx, qy = _forward_map(layer, cx, cy, xs[sel], ys[sel])
        flow[sel, 0] = qx - xs[sel]
        flow[sel, 1] = qy - ys[sel]

    # validity: target inside the raster AND every integer pixel under the
    # bilinear footprint still belongs to the same layer (otherwise the
    # correspondence is occluded or contaminated at the silhouette)
    tqx = xs + flow[..., 0]
    tqy = ys + flow[..., 1]
    mask = (tqx >= 0) & (tqx <= W - 1) & (tqy >= 0) & (tqy <= H - 1)
    x0 = np.clip(np.floor(tqx).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(tqy).astype(np.int64), 0, max(H - 2, 0))
    for dx in (0, 1):
        for dy in (0, 1):
            corner_owner = owner2[np.clip(y0 + dy, 0, H - 1),
                                  np.clip(x0 + dx, 0, W - 1)]
            mask &= corner_owner == owner1
    return LabeledPair(img1=img1, img2=img2, flow=flow, mask=mask,
                       seed=spec.seed)


# ---------------------------------------------------------------------------
# domain shift


@dataclass(frozen=True)
class DomainShift:
    """Photometric perturbation applied identically (in distribution) to
    both frames; labels are untouched."""
    noise_sigma: float = 0.0
    gamma: float = 1.0
    brightness: float = 0.0
    blur_radius: float = 0.0
    palette_swap: bool = False

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.blur_radius < 0:
            raise ValueError("blur radius must be >= 0")

    def is_identity(self) -> bool:
        return (self.noise_sigma == 0 and self.gamma == 1.0 and
                self.brightness == 0 and self.blur_radius == 0 and
                not self.palette_swap)


def _shift_image(img: np.ndarray, shift: DomainShift,
                 rng: np.random.Generator) -> np.ndarray:
    out = img.astype(np.float64)
    if shift.palette_swap:
        out = 1.0 - out
    if shift.gamma != 1.0:
        out = np.clip(out, 0.0, 1.0) ** shift.gamma
    if shift.brightness != 0.0:
        out = out + shift.brightness
    if shift.blur_radius > 0:
        import cv2
        out = cv2.GaussianBlur(out, ksize=(0, 0), sigmaX=shift.blur_radius)
    if shift.noise_sigma > 0:
        out = out + rng.standard_normal(out.shape) * shift.noise_sigma
    return np.clip(out, 0.0, 1.0)


def apply_shift(pair: LabeledPair, shift: DomainShift, seed: int) -> LabeledPair:
    """Perturb both images (independent noise draws); flow/mask unchanged."""
    if shift.is_identity():
        return pair.copy()
    rng = np.random.default_rng([seed, 0x5EED])
    img1 = _shift_image(pair.img1, shift, rng)
    img2 = _shift_image(pair.img2, shift, rng)
    return LabeledPair(img1=img1, img2=img2, flow=pair.flow.copy(),
                       mask=pair.mask.copy(), seed=pair.seed)


__all__ = [
    "DegenerateSceneError",
    "DomainShift",
    "LabeledPair",
    "LayerSpec",
    "SceneSpec",
    "apply_shift",
    "gen_pair",
    "random_scene",
    "texture",
]
