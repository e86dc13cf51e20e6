"""Training losses: supervised sequence loss, contrastive flow loss, and
their weighted combination.

The contrastive term treats each valid feature-grid position i of frame 1
as a query; its positive key is frame 2's feature map bilinearly sampled
at j = i + f_i/stride (f is the ground-truth or pseudo flow), and the
negatives are every frame-2 grid position except the one nearest to j.
All query-key similarities come from a single matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..flowcore.metrics import EmptyMaskError
from ..tensorcore import Tensor, abs_, concat, exp, gather_bilinear, log, matmul


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    gamma: float = 0.8
    lambda_ct: float = 0.1
    query_subsample: int = 0   # 0 = use every valid query position

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.lambda_ct < 0:
            raise ValueError("lambda_ct must be >= 0")
        if self.query_subsample < 0:
            raise ValueError("query_subsample must be >= 0")


def sequence_loss(seq, gt: np.ndarray, mask: np.ndarray, gamma: float = 0.8) -> Tensor:
    """sum_t gamma^(T-t) * mean_valid(|u_t - u*| + |v_t - v*|).

    seq: list of (2, H, W) flow Tensors, t = 1..T (last weighted 1.0).
    gt: (H, W, 2) array; mask: (H, W) bool.
    """
    if not seq:
        raise ValueError("empty flow sequence")
    mask = np.asarray(mask, dtype=bool)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise EmptyMaskError("no valid pixels for sequence loss")
    H, W = mask.shape
    dtype = seq[0].data.dtype
    gt_t = np.ascontiguousarray(np.asarray(gt).transpose(2, 0, 1), dtype=dtype)
    m = Tensor(mask[None].astype(dtype))
    gt_c = Tensor(gt_t)
    T = len(seq)
    total = None
    for t, f in enumerate(seq):
        w = gamma ** (T - 1 - t)
        term = (abs_(f - gt_c) * m).sum() * (w / n_valid)
        total = term if total is None else total + term
    return total


def _coarse_grid(flow: np.ndarray, mask: np.ndarray, shape_feat):
    """Subsample full-res flow/mask at the feature-grid anchor pixels."""
    Hc, Wc = shape_feat
    H, W = mask.shape
    stride = H // Hc
    if Hc * stride != H or Wc * stride != W:
        raise ValueError(
            f"image {H}x{W} not an integer multiple of feature grid {Hc}x{Wc}")
    return flow[::stride, ::stride], mask[::stride, ::stride], stride


def contrastive_flow_loss(g1: Tensor, g2: Tensor, flow: np.ndarray,
                          mask: np.ndarray, temperature: float = 0.07,
                          subsample: int = 0, rng=None) -> Tensor:
    """InfoNCE over feature-grid positions; see module docstring.

    flow is full-resolution (H, W, 2); it is rescaled internally. Queries
    whose target j leaves the feature grid are dropped; raises
    EmptyMaskError when nothing remains.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    C, Hc, Wc = g1.data.shape
    if g2.data.shape != (C, Hc, Wc):
        raise ValueError("feature map shapes differ")
    mask = np.asarray(mask, dtype=bool)
    f_c, m_c, stride = _coarse_grid(np.asarray(flow), mask, (Hc, Wc))

    ys, xs = np.mgrid[0:Hc, 0:Wc].astype(np.float64)
    jx = xs + f_c[..., 0] / stride
    jy = ys + f_c[..., 1] / stride
    valid = m_c & (jx >= 0) & (jx <= Wc - 1) & (jy >= 0) & (jy <= Hc - 1)
    q_idx = np.flatnonzero(valid.reshape(-1))
    if q_idx.size == 0:
        raise EmptyMaskError("no valid contrastive queries")
    if subsample and q_idx.size > subsample:
        if rng is None:
            rng = np.random.default_rng(0)
        q_idx = np.sort(rng.choice(q_idx, size=subsample, replace=False))

    M = Hc * Wc
    Q = q_idx.size
    a = g1.reshape((C, M)).transpose((1, 0))[q_idx]      # (Q, C)
    b = g2.reshape((C, M))                               # (C, M)
    logits = matmul(a, b) * (1.0 / temperature)          # (Q, M)

    # positive logit: bilinear interpolation of the logit row at j
    # (inner products are linear in g2, so this equals <g1_i, g2 interp at j>)
    jxq = jx.reshape(-1)[q_idx]
    jyq = jy.reshape(-1)[q_idx]
    pos = gather_bilinear(logits.reshape((Q, Hc, Wc)),
                          jxq[:, None], jyq[:, None])    # (Q, 1)
    pos = pos.reshape((Q,))

    # the grid cell nearest to j is excluded from the negative set; a
    # 0/1 mask keeps the exclusion exact (subtracting its exp after the
    # fact cancels catastrophically when that cell dominates the row)
    nx = np.clip(np.round(jxq), 0, Wc - 1).astype(np.int64)
    ny = np.clip(np.round(jyq), 0, Hc - 1).astype(np.int64)
    neg_mask = np.ones((Q, M), dtype=logits.data.dtype)
    neg_mask[np.arange(Q), ny * Wc + nx] = 0.0

    # stabilized log-denominator: shift by the detached max over the
    # terms that actually appear (positive + kept negatives); the masked
    # cell is pushed to exp(-1000) = 0 *inside* the exp so an excluded
    # high-correlation cell can never overflow
    masked = np.where(neg_mask > 0, logits.data, -np.inf)
    shift_np = np.maximum(np.max(masked, axis=1), pos.data)
    shift = Tensor(shift_np)
    shifted = (logits - shift.reshape((Q, 1))) * Tensor(neg_mask) \
        + Tensor((neg_mask - 1.0) * 1000.0)
    e_neg = exp(shifted).sum(axis=1)
    den = exp(pos - shift) + e_neg
    loss_i = log(den) + shift - pos
    return loss_i.mean()


def total_loss(seq, gt_flow: np.ndarray, mask: np.ndarray, g1: Tensor,
               g2: Tensor, cfg: LossConfig, rng=None):
    """sequence_loss + lambda * contrastive_flow_loss (on the same labels).

    Returns (scalar Tensor, dict of float terms for logging).
    """
    seq_term = sequence_loss(seq, gt_flow, mask, gamma=cfg.gamma)
    terms = {"seq_loss": float(seq_term.data)}
    if cfg.lambda_ct == 0:
        terms["ct_loss"] = 0.0
        terms["total"] = terms["seq_loss"]
        return seq_term, terms
    ct = contrastive_flow_loss(g1, g2, gt_flow, mask,
                               temperature=cfg.temperature,
                               subsample=cfg.query_subsample, rng=rng)
    total = seq_term + ct * cfg.lambda_ct
    terms["ct_loss"] = float(ct.data)
    terms["total"] = float(total.data)
    return total, terms


__all__ = ["LossConfig", "contrastive_flow_loss", "sequence_loss", "total_loss"]
