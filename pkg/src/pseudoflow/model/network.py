"""Minimal recurrent correlation-volume flow network.

Pipeline per pair: (optional) coordinate encoding -> shared feature
encoder on both frames (cosine-normalized for matching) -> all-pairs
correlation volume + 4-level pooled pyramid -> T refinement steps, each
sampling the pyramid in a (2r+1)^2 window around the current flow
target. The window goes through a per-level softmax; the flow update is
the window's expected offset (a parameter-free soft-argmax data term)
plus a learned residual from a conv GRU. Coarse flow is upsampled
bilinearly (values scaled by stride).

Everything runs on the tensorcore autodiff types; a forward pass returns
the full-resolution flow sequence plus both feature maps (the contrastive
loss needs them).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..tensorcore import (
    Tensor,
    avgpool2d,
    concat,
    conv2d,
    exp,
    gather_bilinear,
    matmul,
    sigmoid,
    sqrt,
    tanh,
    relu,
    upsample_bilinear,
)


def l2_normalize_channels(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Unit-norm each position's channel vector of a (C, H, W) tensor."""
    return x / sqrt((x * x).sum(axis=0, keepdims=True) + eps)


def expected_offset(p: Tensor, radius: int) -> Tensor:
    """(K, H', W') window probabilities -> (2, H', W') expected offset.

    Parameter-free soft-argmax over the window; channel order matches
    lookup (dy slow, dx fast), offsets in level-0 cells. Feeding this
    straight into the flow update makes "read the correlation peak" the
    path of least resistance — tiny models otherwise find appearance
    memorization long before they discover peak decoding, and plateau at
    predicting the dataset-mean flow on unseen scenes.
    """
    r = radius
    win = np.arange(-r, r + 1, dtype=p.data.dtype)
    dy, dx = np.meshgrid(win, win, indexing="ij")
    dxs = Tensor(np.ascontiguousarray(dx.reshape(-1, 1, 1)))
    dys = Tensor(np.ascontiguousarray(dy.reshape(-1, 1, 1)))
    ex = (p * dxs).sum(axis=0, keepdims=True)
    ey = (p * dys).sum(axis=0, keepdims=True)
    return concat([ex, ey], axis=0)


def window_softmax(feat: Tensor, n_levels: int, beta: float) -> Tensor:
    """Per-position softmax over each level's lookup window.

    feat: (L*K, H', W') stacked window samples. Raw similarity windows
    carry a per-position nuisance offset (how self-similar the local
    texture is) that a 1x1 conv cannot remove; mapping each window to a
    probability distribution makes the peak position linearly readable
    (soft-argmax is then just a fixed linear layer away).
    """
    LK = feat.shape[0]
    K = LK // n_levels
    out = []
    for lvl in range(n_levels):
        e = exp(feat[lvl * K:(lvl + 1) * K] * beta)
        out.append(e / e.sum(axis=0, keepdims=True))
    return concat(out, axis=0)


@dataclass(frozen=True)
class ModelConfig:
    """corr_normalize: L2-normalize feature vectors per position before the
    correlation volume (cosine similarity). Raw dot products have no
    guaranteed peak at the true match — a high-norm feature elsewhere can
    out-score the identical patch — and at this model scale training never
    recovers from that; cosine makes the volume informative from
    initialization. corr_scaled (1/sqrt(C)) applies to the unnormalized
    path only."""

    stride: int = 8
    feat_channels: int = 64
    refine_steps: int = 8
    lookup_radius: int = 3
    hidden_channels: int = 64
    context_channels: int = 32
    coord_encode: bool = True
    corr_scaled: bool = True
    corr_normalize: bool = True
    corr_window_softmax: float = 10.0   # 0 disables; meant for cosine volumes
    soft_argmax: bool = True            # level-0 expected-offset data term

    def __post_init__(self):
        if self.stride not in (4, 8):
            raise ValueError(f"stride must be 4 or 8, got {self.stride}")
        if self.refine_steps < 1:
            raise ValueError("refine_steps must be >= 1")
        if self.lookup_radius < 1:
            raise ValueError("lookup_radius must be >= 1")
        if not (np.isfinite(self.corr_window_softmax)
                and self.corr_window_softmax >= 0):
            raise ValueError("corr_window_softmax must be finite and >= 0")
        if self.soft_argmax and self.corr_window_softmax == 0:
            raise ValueError("soft_argmax needs corr_window_softmax > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def coordinate_encode(img: np.ndarray) -> np.ndarray:
    """Append normalized x/y coordinate channels to an (H, W, C) image.

    x = 2u/(W-1) - 1 (left edge -1, right edge +1); same for y. A
    single-column (or -row) image gets the constant -1 channel.
    """
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"expected (H, W, C), got {img.shape}")
    H, W = img.shape[:2]
    xs = (2.0 * np.arange(W) / (W - 1) - 1.0) if W > 1 else np.full(1, -1.0)
    ys = (2.0 * np.arange(H) / (H - 1) - 1.0) if H > 1 else np.full(1, -1.0)
    xc = np.broadcast_to(xs[None, :], (H, W)).astype(img.dtype)
    yc = np.broadcast_to(ys[:, None], (H, W)).astype(img.dtype)
    return np.concatenate([img, xc[..., None], yc[..., None]], axis=2)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Flat name -> Tensor registry; iteration order is sorted by name."""

    def __init__(self, dtype=np.float32):
        self._params = {}
        self.dtype = np.dtype(dtype)

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def named(self):
        return sorted(self._params.items())

    def tensors(self):
        return [t for _, t in self.named()]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def state_arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays: dict) -> None:
        mine = set(self._params)
        theirs = set(arrays)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise ValueError(f"param mismatch: missing {missing}, extra {extra}")
        for k, v in arrays.items():
            if self._params[k].data.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}")
            self._params[k].data = v.astype(self.dtype).copy()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None


class Conv:
    """3x3/1x1 conv layer bound to a ParamStore."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int,
                 ksize: int, rng: np.random.Generator, stride: int = 1,
                 act: str | None = None, gain: float | None = None):
        fan_in = cin * ksize * ksize
        if gain is None:
            gain = math.sqrt(2.0) if act == "relu" else 1.0
        std = gain / math.sqrt(fan_in)
        w = rng.standard_normal((cout, cin, ksize, ksize)) * std
        self.w = store.add(name + ".w", w)
        self.b = store.add(name + ".b", np.zeros(cout))
        self.stride = stride
        self.pad = ksize // 2
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.w, self.b, stride=self.stride, padding=self.pad)
        if self.act == "relu":
            y = relu(y)
        elif self.act == "tanh":
            y = tanh(y)
        return y


class ConvGRU:
    """Single convolutional gated recurrent cell with 3x3 kernels."""

    def __init__(self, store: ParamStore, name: str, hidden: int, cin: int,
                 rng: np.random.Generator):
        total = hidden + cin
        self.wz = Conv(store, name + ".z", total, hidden, 3, rng)
        self.wr = Conv(store, name + ".r", total, hidden, 3, rng)
        self.wh = Conv(store, name + ".h", total, hidden, 3, rng)

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        hx = concat([h, x], axis=0)
        z = sigmoid(self.wz(hx))
        r = sigmoid(self.wr(hx))
        cand = tanh(self.wh(concat([r * h, x], axis=0)))
        return (1.0 - z) * h + z * cand


# ---------------------------------------------------------------------------
# network


class FlowNet:
    """Parameter container + forward pass. Construction is deterministic
    given (config, seed)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = ParamStore(dtype=dtype)
        self.last_flow_bases = None
        rng = np.random.default_rng([seed, 0xF10])
        C = cfg.feat_channels
        cin = 5 if cfg.coord_encode else 3
        n_down = int(round(math.log2(cfg.stride)))

        widths = [max(C * m // 8, 4) for m in (3, 5, 7)][:n_down]
        self.fnet = []
        c_prev = cin
        for i, w in enumerate(widths):
            self.fnet.append(Conv(self.params, f"fnet.{i}", c_prev, w, 3, rng,
                                  stride=2, act="relu"))
            c_prev = w
        self.fnet.append(Conv(self.params, f"fnet.{n_down}", c_prev, C, 1, rng))

        ctx_out = cfg.hidden_channels + cfg.context_channels
        cwidths = [max(w // 2, 4) for w in widths]
        self.cnet = []
        c_prev = cin
        for i, w in enumerate(cwidths):
            self.cnet.append(Conv(self.params, f"cnet.{i}", c_prev, w, 3, rng,
                                  stride=2, act="relu"))
            c_prev = w
        self.cnet.append(Conv(self.params, f"cnet.{n_down}", c_prev, ctx_out, 1, rng))

        K = 4 * (2 * cfg.lookup_radius + 1) ** 2
        mot = 48
        self.corr_conv = Conv(self.params, "motion.corr", K, mot, 1, rng, act="relu")
        self.flow_conv = Conv(self.params, "motion.flow", 2, 16, 3, rng, act="relu")
        self.mix_conv = Conv(self.params, "motion.mix", mot + 16, mot, 3, rng,
                             act="relu")
        self.gru = ConvGRU(self.params, "gru", cfg.hidden_channels,
                           mot + cfg.context_channels, rng)
        self.head1 = Conv(self.params, "head.0", cfg.hidden_channels, 40, 3, rng,
                          act="relu")
        # small output gain keeps early flow deltas near zero
        self.head2 = Conv(self.params, "head.1", 40, 2, 3, rng, gain=0.01)

    # -- pieces ------------------------------------------------------------

    def prep(self, img: np.ndarray) -> Tensor:
        """Grayscale/RGB (H, W[, C]) numpy -> constant (3 or 5, H, W) Tensor."""
        img = np.asarray(img, dtype=self.dtype)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        if img.shape[2] != 3:
            raise ValueError(f"expected 3 image channels, got {img.shape[2]}")
        if self.cfg.coord_encode:
            img = coordinate_encode(img)
        H, W = img.shape[:2]
        if H % self.cfg.stride or W % self.cfg.stride:
            raise ValueError(f"dims {H}x{W} not divisible by stride {self.cfg.stride}")
        return Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)))

    def encode_features(self, x: Tensor) -> Tensor:
        for layer in self.fnet:
            x = layer(x)
        return x

    def encode_context(self, x: Tensor):
        for layer in self.cnet:
            x = layer(x)
        h0 = tanh(x[: self.cfg.hidden_channels])
        ctx = relu(x[self.cfg.hidden_channels:])
        return h0, ctx

    # -- forward -----------------------------------------------------------

    def forward(self, img1: np.ndarray, img2: np.ndarray, steps: int | None = None,
                flow_bases=None):
        """Run the full pipeline.

        Returns (flow_seq, g1, g2): flow_seq is a list of (2, H, W) Tensors
        (length T), g1/g2 the (C, H', W') feature maps.

        The coarse flow entering each refinement step is detached (gradient
        crosses steps only through the GRU state). The detached values are
        kept in ``self.last_flow_bases``; passing them back via
        ``flow_bases`` pins the detach boundary so finite differences can
        probe exactly the objective the tape differentiates.
        """
        cfg = self.cfg
        T = cfg.refine_steps if steps is None else steps
        x1 = self.prep(img1)
        x2 = self.prep(img2)
        g1 = self.encode_features(x1)
        g2 = self.encode_features(x2)
        if cfg.corr_normalize:
            g1 = l2_normalize_channels(g1)
            g2 = l2_normalize_channels(g2)
        h, ctx = self.encode_context(x1)

        pyr = correlation_pyramid(
            g1, g2, scaled=cfg.corr_scaled and not cfg.corr_normalize)
        Hc, Wc = g1.data.shape[1:]
        flow = np.zeros((2, Hc, Wc), dtype=self.dtype)

        outputs = []
        bases = []
        for t in range(T):
            if flow_bases is not None:
                flow = flow_bases[t]
            bases.append(flow)
            corr_feat = lookup(pyr, flow, cfg.lookup_radius)
            if cfg.corr_window_softmax > 0:
                corr_feat = window_softmax(corr_feat, len(pyr),
                                           cfg.corr_window_softmax)
            flow_const = Tensor(flow)
            m = self.corr_conv(corr_feat)
            fm = self.flow_conv(flow_const)
            m = self.mix_conv(concat([m, fm], axis=0))
            h = self.gru(h, concat([m, ctx], axis=0))
            delta = self.head2(self.head1(h))
            if cfg.soft_argmax:
                K = (2 * cfg.lookup_radius + 1) ** 2
                delta = delta + expected_offset(corr_feat[:K],
                                                cfg.lookup_radius)
            flow_t = flow_const + delta
            up = upsample_bilinear(flow_t, cfg.stride) * float(cfg.stride)
            outputs.append(up)
            flow = flow_t.data  # detach for the next refinement step
        self.last_flow_bases = bases
        return outputs, g1, g2

    def predict(self, img1: np.ndarray, img2: np.ndarray) -> np.ndarray:
        """Inference-only final flow as (H, W, 2) float32 numpy.

        Runs outside any tape, so nothing is recorded.
        """
        seq, _, _ = self.forward(img1, img2)
        return np.ascontiguousarray(
            seq[-1].data.transpose(1, 2, 0)).astype(np.float32)


# ---------------------------------------------------------------------------
# correlation machinery (module-level so tests can poke them directly)


def correlation_volume(g1: Tensor, g2: Tensor, scaled: bool = True) -> Tensor:
    """All-pairs inner products: (C,H,W),(C,H,W) -> (H*W, H, W)."""
    C, H, W = g1.data.shape
    if g2.data.shape != (C, H, W):
        raise ValueError(f"feature shapes differ: {g1.data.shape} vs {g2.data.shape}")
    a = g1.reshape((C, H * W)).transpose((1, 0))     # (M, C)
    b = g2.reshape((C, H * W))                        # (C, M)
    vol = matmul(a, b)                                # (M, M)
    if scaled:
        vol = vol * (1.0 / math.sqrt(C))
    return vol.reshape((H * W, H, W))


def correlation_pyramid(g1: Tensor, g2: Tensor, scaled: bool = True,
                        levels: int = 4):
    """Level 1 = raw volume; level s pools the target dims by 2^(s-1).

    Grids too small for the full chain saturate at the global average
    (a 1x1 map is its own pool), so the level count — and with it the
    lookup channel width — never depends on input size.
    """
    vol = correlation_volume(g1, g2, scaled=scaled)
    pyr = [vol]
    for _ in range(levels - 1):
        prev = pyr[-1]
        h, w = prev.data.shape[1:]
        if h == 1 and w == 1:
            pyr.append(prev)
            continue
        if h % 2 or w % 2:
            raise ValueError(f"cannot halve pyramid level of dims {h}x{w}")
        pyr.append(avgpool2d(prev, 2))
    return pyr


def lookup(pyr, flow: np.ndarray, radius: int) -> Tensor:
    """Sample each pyramid level on a (2r+1)^2 window around p + flow(p).

    flow: (2, H', W') numpy (treated as constant). Returns a Tensor of
    shape (L*(2r+1)^2, H', W'); border samples clamp to the volume edge.
    """
    Hc, Wc = flow.shape[1:]
    B = Hc * Wc
    ys, xs = np.mgrid[0:Hc, 0:Wc].astype(np.float64)
    tx = (xs + flow[0]).reshape(B)
    ty = (ys + flow[1]).reshape(B)
    r = radius
    win = np.arange(-r, r + 1, dtype=np.float64)
    dy, dx = np.meshgrid(win, win, indexing="ij")
    dx = dx.reshape(-1)
    dy = dy.reshape(-1)

    feats = []
    for lvl, vol in enumerate(pyr):
        scale = 1.0 / (2 ** lvl)
        sx = tx[:, None] * scale + dx[None, :]
        sy = ty[:, None] * scale + dy[None, :]
        samples = gather_bilinear(vol, sx, sy)       # (B, K)
        feats.append(samples)
    out = concat(feats, axis=1)                       # (B, L*K)
    LK = out.data.shape[1]
    return out.transpose((1, 0)).reshape((LK, Hc, Wc))


__all__ = [
    "Conv",
    "ConvGRU",
    "FlowNet",
    "expected_offset",
    "l2_normalize_channels",
    "window_softmax",
    "ModelConfig",
    "ParamStore",
    "coordinate_encode",
    "correlation_pyramid",
    "correlation_volume",
    "lookup",
]
