"""End-to-end gradient audit of the full model + loss pipeline.

Complements the per-op finite-difference registry in tensorcore: builds a
tiny double-precision network (stride 4, 16 feature channels, 2 refinement
steps) on a 16x16 pair, runs the combined sequence + contrastive loss, and
checks a deterministic subsample of coordinates in every parameter tensor
against central differences.
"""

from __future__ import annotations

import numpy as np

from .losses import LossConfig, total_loss
from .model import FlowNet, ModelConfig
from .tensorcore import grad_check

TINY_MODEL = ModelConfig(stride=4, feat_channels=16, refine_steps=2,
                         lookup_radius=2, hidden_channels=16,
                         context_channels=8)


def _tiny_inputs(seed: int):
    rng = np.random.default_rng([seed, 0xE2E])
    h = w = 16
    img1 = rng.uniform(0.0, 1.0, size=(h, w))
    img2 = rng.uniform(0.0, 1.0, size=(h, w))
    # smooth low-magnitude affine flow; keeps contrastive targets in-bounds
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    flow = np.stack([0.7 + 0.02 * xs - 0.01 * ys,
                     -0.4 + 0.01 * ys], axis=-1)
    mask = np.ones((h, w), dtype=bool)
    return img1, img2, flow, mask


def tiny_model_grad_audit(seed: int = 0, coords_per_tensor: int = 6,
                          eps: float = 1e-6, tol: float = 1e-5,
                          verbose: bool = False):
    """Finite-difference the whole forward pass w.r.t. every parameter.

    Returns (name, max_rel_err) per parameter tensor; raises
    AssertionError listing offenders above tol.
    """
    net = FlowNet(TINY_MODEL, seed=seed, dtype=np.float64)
    img1, img2, flow, mask = _tiny_inputs(seed)
    lcfg = LossConfig(temperature=0.5, gamma=0.8, lambda_ct=0.1)

    # Evaluate at a generic point: fresh zero biases put relu
    # pre-activations exactly on the kink (step-1 flow input is zero),
    # where central differences are one-sided and meaningless.
    jit = np.random.default_rng([seed, 0x7E5])
    for _, p in net.params.named():
        p.data = p.data + jit.uniform(-0.05, 0.05, size=p.data.shape)

    # The flow entering each refinement step is detached by design, so the
    # tape differentiates a truncated objective. Pin those boundary values
    # and finite-difference the same truncated function.
    net.forward(img1, img2)
    bases = [b.copy() for b in net.last_flow_bases]

    def objective():
        seq, g1, g2 = net.forward(img1, img2, flow_bases=bases)
        loss, _ = total_loss(seq, flow, mask, g1, g2, lcfg)
        return loss

    results = []
    crng = np.random.default_rng([seed, 0xC0DE])
    for name, param in net.params.named():
        err = grad_check(lambda _t: objective(), param, eps=eps,
                         max_coords=coords_per_tensor, rng=crng)
        results.append((name, err))
        if verbose:
            status = "ok" if err < tol else "FAIL"
            print(f"  {name:<28s} max rel err {err:.3e}  [{status}]")
    bad = [(n, e) for n, e in results if not (e < tol)]
    if bad:
        raise AssertionError(f"model gradient audit failures: {bad}")
    return results


__all__ = ["TINY_MODEL", "tiny_model_grad_audit"]
