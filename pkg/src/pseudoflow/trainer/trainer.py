"""Shared optimization loop for all training phases.

One step = sample a batch (with optional random crop), run the network on
each pair, average total_loss, backprop through the tape, clip the global
gradient norm, and apply a decoupled-weight-decay Adam update under a
constant or one-cycle schedule. Metrics stream to a JSON-lines log.

All randomness (batch order, crop offsets) comes from a Generator seeded
by (seed, phase salt), so two runs with the same config are bit-identical
and two different models trained with the same seed see the same data
order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from ..flowcore.metrics import epe, f1_all, outlier_counts
from ..losses import LossConfig, total_loss
from ..model import FlowNet, save_checkpoint
from ..tensorcore import NonFiniteError, Tape


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"divergence at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    crop: int = 64
    lr: float = 2e-4
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    schedule: str = "one_cycle"   # "one_cycle" | "constant"
    total_steps: int = 1000
    warmup_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.schedule not in ("one_cycle", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


class AdamW:
    """Adam with decoupled weight decay over a ParamStore."""

    def __init__(self, params, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.named()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.named()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.named():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data = p.data - np.asarray(lr * update, dtype=p.data.dtype)


def lr_at(cfg: TrainConfig, step: int, total: int | None = None) -> float:
    """Learning rate for 0-based step index."""
    if cfg.schedule == "constant":
        return cfg.lr
    total = total if total is not None else cfg.total_steps
    if total <= 1:
        return cfg.lr
    warm = max(int(total * cfg.warmup_frac), 1)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(total - warm, 1)
    return cfg.lr * (1.0 - 0.99 * min(frac, 1.0))


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is <= max_norm.

    Returns the pre-clip norm; raises on non-finite gradients.
    """
    sq = 0.0
    for k, p in params.named():
        if p.grad is None:
            continue
        sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for k, p in params.named():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def _crop_pair(pair, crop: int, rng: np.random.Generator):
    H, W = pair.mask.shape
    if crop >= H and crop >= W:
        return pair.img1, pair.img2, pair.flow, pair.mask
    y0 = int(rng.integers(0, H - crop + 1)) if H > crop else 0
    x0 = int(rng.integers(0, W - crop + 1)) if W > crop else 0
    sl = (slice(y0, y0 + crop), slice(x0, x0 + crop))
    return pair.img1[sl], pair.img2[sl], pair.flow[sl], pair.mask[sl]


def step(net: FlowNet, batch, loss_cfg: LossConfig, opt: AdamW, lr: float,
         clip_norm: float = 1.0, ct_rng=None) -> dict:
    """One optimization step on a list of (img1, img2, flow, mask) tuples."""
    n = len(batch)
    acc = {"seq_loss": 0.0, "ct_loss": 0.0, "total": 0.0}
    with Tape() as tape:
        loss = None
        for img1, img2, flow, mask in batch:
            seq, g1, g2 = net.forward(img1, img2)
            L, terms = total_loss(seq, flow, mask, g1, g2, loss_cfg, rng=ct_rng)
            for key in acc:
                acc[key] += terms[key] / n
            loss = L if loss is None else loss + L
        loss = loss * (1.0 / n)
        net.params.zero_grad()
        tape.backward(loss)
    gnorm = clip_gradients(net.params, clip_norm)
    opt.step(lr)
    acc["grad_norm"] = gnorm
    acc["lr"] = lr
    return acc


def train_loop(net: FlowNet, pairs, tcfg: TrainConfig, loss_cfg: LossConfig,
               *, phase: str = "train", steps: int | None = None,
               log_fh=None, ckpt_every: int = 0, ckpt_dir: str | None = None,
               ckpt_flags: dict | None = None, salt: int = 0) -> list:
    """Run `steps` (default tcfg.total_steps) optimization steps.

    Returns the per-step metric dicts. Checkpoints land in ckpt_dir as
    step_NNNNNN.ckpt at every ckpt_every-th step when requested.
    Divergence raises DivergenceError; the caller owns recovery.
    """
    total = tcfg.total_steps if steps is None else steps
    rng = np.random.default_rng([tcfg.seed, salt, 0xBA7C4])
    ct_rng = np.random.default_rng([tcfg.seed, salt, 0xC07])
    opt = AdamW(net.params, weight_decay=tcfg.weight_decay)
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    history = []
    for s in range(total):
        idx = rng.integers(0, len(pairs), size=tcfg.batch_size)
        batch = [_crop_pair(pairs[i], tcfg.crop, rng) for i in idx]
        lr = lr_at(tcfg, s, total)
        try:
            metrics = step(net, batch, loss_cfg, opt, lr,
                           clip_norm=tcfg.clip_norm, ct_rng=ct_rng)
        except NonFiniteError as e:
            raise DivergenceError(s, str(e)) from e
        metrics = {"phase": phase, "step": s + 1, **metrics}
        history.append(metrics)
        if log_fh is not None:
            log_fh.write(json.dumps(metrics, sort_keys=True) + "\n")
        if ckpt_every and ckpt_dir and (s + 1) % ckpt_every == 0:
            save_checkpoint(os.path.join(ckpt_dir, f"step_{s + 1:06d}.ckpt"),
                            net, flags=dict(ckpt_flags or {}, phase=phase,
                                            step=s + 1))
    if log_fh is not None:
        log_fh.flush()
    return history


def eval_loss(net: FlowNet, pairs, loss_cfg: LossConfig) -> float:
    """Mean total loss over a probe set, no parameter updates."""
    vals = []
    for p in pairs:
        seq, g1, g2 = net.forward(p.img1, p.img2)
        _, terms = total_loss(seq, p.flow, p.mask, g1, g2, loss_cfg)
        vals.append(terms["total"])
    return float(np.mean(vals))


def evaluate(net: FlowNet, pairs) -> dict:
    """EPE / F1-all over a labeled split.

    mean epe = mean of per-pair EPEs; f1_all is pooled over all valid
    pixels of the split (per-pair values also reported).
    """
    epes, f1s = [], []
    out_tot = val_tot = 0
    for p in pairs:
        pred = net.predict(p.img1, p.img2)
        epes.append(epe(pred, p.flow, p.mask))
        f1s.append(f1_all(pred, p.flow, p.mask))
        o, v = outlier_counts(pred, p.flow, p.mask)
        out_tot += o
        val_tot += v
    return {
        "epe": float(np.mean(epes)),
        "f1_all": float(100.0 * out_tot / val_tot),
        "per_pair_epe": epes,
        "per_pair_f1": f1s,
    }


def pretrain(data_pairs, model_seed: int, tcfg: TrainConfig,
             loss_cfg_ours: LossConfig, out_bs: str, out_ours: str,
             log_fh=None, model_kwargs: dict | None = None) -> tuple:
    """Train the two starting checkpoints on the labeled source pool.

    Baseline: no coordinate encoding, sequence loss only. Ours: coordinate
    encoding plus the contrastive term. Both see the identical batch
    sequence (same seed/salt).
    """
    from ..model import ModelConfig

    kw = dict(model_kwargs or {})
    cfg_bs = ModelConfig(coord_encode=False, **kw)
    cfg_ours = ModelConfig(coord_encode=True, **kw)
    loss_bs = LossConfig(temperature=loss_cfg_ours.temperature,
                         gamma=loss_cfg_ours.gamma, lambda_ct=0.0,
                         query_subsample=loss_cfg_ours.query_subsample)

    net_bs = FlowNet(cfg_bs, seed=model_seed)
    train_loop(net_bs, data_pairs, tcfg, loss_bs, phase="pretrain_bs",
               log_fh=log_fh, salt=101)
    save_checkpoint(out_bs, net_bs, flags={"role": "baseline",
                                           "contrastive": False})

    net_ours = FlowNet(cfg_ours, seed=model_seed)
    train_loop(net_ours, data_pairs, tcfg, loss_cfg_ours, phase="pretrain_ours",
               log_fh=log_fh, salt=101)
    save_checkpoint(out_ours, net_ours, flags={"role": "ours_init",
                                               "contrastive": loss_cfg_ours.lambda_ct > 0})
    return net_bs, net_ours


__all__ = [
    "AdamW",
    "DivergenceError",
    "TrainConfig",
    "clip_gradients",
    "eval_loss",
    "evaluate",
    "lr_at",
    "pretrain",
    "step",
    "train_loop",
]
