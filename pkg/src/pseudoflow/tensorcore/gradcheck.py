"""Finite-difference verification of analytic gradients.

``grad_check`` compares the taped gradient of a scalar function against
central differences. ``OP_CHECKS`` registers one or more cases per
differentiable op; ``audit_ops`` sweeps them all and is the backing of the
``grad-audit`` CLI command.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import Tape, Tensor


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max over coordinates of |analytic - central-diff| / max(1, |analytic|).

    ``f`` must map ``x`` to a scalar Tensor and be evaluable at x +/- eps
    perturbations. Use float64 data for meaningful tolerances. When
    ``max_coords`` is set, a deterministic random subset of coordinates is
    checked instead of all of them.
    """
    if not np.issubdtype(x.dtype, np.float64):
        raise TypeError("grad_check requires float64 inputs")
    x.grad = None
    prev = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            out = f(x)
        if out.size != 1:
            raise ad.ShapeError("grad_check target must be scalar")
        tape.backward(out)
    finally:
        x.requires_grad = prev
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    x.grad = None

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    aflat = analytic.reshape(-1)
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + eps
        fp = float(f(x).data)
        flat[c] = orig - eps
        fm = float(f(x).data)
        flat[c] = orig
        fd = (fp - fm) / (2.0 * eps)
        err = abs(aflat[c] - fd) / max(1.0, abs(aflat[c]))
        if err > worst:
            worst = err
    return worst


class OpCheck:
    """One gradient-audit case: named inputs plus a scalar objective."""

    def __init__(self, name: str, build: Callable[[np.random.Generator], Tuple[List[Tensor], Callable]]):
        self.name = name
        self.build = build

    def run(self, seed: int = 0, eps: float = 1e-6) -> float:
        rng = np.random.default_rng(seed)
        inputs, f = self.build(rng)
        worst = 0.0
        for t in inputs:
            for other in inputs:
                other.requires_grad = True
            err = grad_check(lambda _t: f(), t, eps=eps)
            worst = max(worst, err)
        return worst


def _r(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _pos(rng, *shape, lo=0.2, hi=1.5):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _away_from_kink(rng, *shape):
    # |x| >= 0.1 keeps central differences away from the abs/relu kink
    mag = rng.uniform(0.1, 1.0, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(mag * sign, requires_grad=True, dtype=np.float64)


def _weighted(rng, shape):
    w = rng.standard_normal(shape)
    return lambda t: (t * w).sum()


def _build_registry() -> List[OpCheck]:
    checks: List[OpCheck] = []

    def simple(name, make_inputs, expr):
        def build(rng):
            ins = make_inputs(rng)
            wsum = None

            def f():
                out = expr(*ins)
                nonlocal wsum
                if wsum is None:
                    wsum = _weighted(np.random.default_rng(123), out.shape)
                return wsum(out)

            return ins, f

        checks.append(OpCheck(name, build))

    simple("add", lambda r: [_r(r, 3, 4), _r(r, 3, 4)], ad.add)
    simple("add_broadcast", lambda r: [_r(r, 3, 4), _r(r, 1, 4)], ad.add)
    simple("sub", lambda r: [_r(r, 3, 4), _r(r, 3, 4)], ad.sub)
    simple("mul", lambda r: [_r(r, 2, 3, 4), _r(r, 2, 3, 4)], ad.mul)
    simple("mul_broadcast", lambda r: [_r(r, 2, 3, 4), _r(r, 2, 1, 1)], ad.mul)
    simple("div", lambda r: [_r(r, 3, 4), _pos(r, 3, 4)], ad.div)
    simple("neg", lambda r: [_r(r, 5)], ad.neg)
    simple("exp", lambda r: [_r(r, 3, 3)], ad.exp)
    simple("log", lambda r: [_pos(r, 3, 3)], ad.log)
    simple("sqrt", lambda r: [_pos(r, 3, 3)], ad.sqrt)
    simple("tanh", lambda r: [_r(r, 3, 3)], ad.tanh)
    simple("sigmoid", lambda r: [_r(r, 3, 3)], ad.sigmoid)
    simple("relu", lambda r: [_away_from_kink(r, 4, 4)], ad.relu)
    simple("abs", lambda r: [_away_from_kink(r, 4, 4)], ad.abs_)
    simple("pow", lambda r: [_pos(r, 3, 3)], lambda t: ad.pow_const(t, 3.0))
    simple("sum_axis", lambda r: [_r(r, 3, 4, 2)], lambda t: ad.sum_(t, axis=(0, 2)))
    simple("mean", lambda r: [_r(r, 3, 4)], lambda t: ad.mean(t, axis=1))
    simple("reshape", lambda r: [_r(r, 3, 4)], lambda t: ad.reshape(t, (2, 6)))
    simple("transpose", lambda r: [_r(r, 2, 3, 4)], lambda t: ad.transpose(t, (2, 0, 1)))
    simple("getitem", lambda r: [_r(r, 4, 5)], lambda t: t[1:3, ::2])
    simple("concat", lambda r: [_r(r, 2, 3), _r(r, 4, 3)],
           lambda a, b: ad.concat([a, b], axis=0))
    simple("matmul", lambda r: [_r(r, 3, 4), _r(r, 4, 2)], ad.matmul)
    simple("conv2d", lambda r: [_r(r, 2, 5, 5), _r(r, 3, 2, 3, 3), _r(r, 3)],
           lambda x, w, b: nnops.conv2d(x, w, b, stride=1, padding=1))
    simple("conv2d_stride2", lambda r: [_r(r, 2, 6, 6), _r(r, 3, 2, 3, 3), _r(r, 3)],
           lambda x, w, b: nnops.conv2d(x, w, b, stride=2, padding=1))
    simple("conv2d_1x1", lambda r: [_r(r, 3, 4, 4), _r(r, 2, 3, 1, 1)],
           lambda x, w: nnops.conv2d(x, w, stride=1, padding=0))
    simple("avgpool2d", lambda r: [_r(r, 3, 4, 4)], lambda t: nnops.avgpool2d(t, 2))
    simple("avgpool2d_nd", lambda r: [_r(r, 2, 3, 4, 4)], lambda t: nnops.avgpool2d(t, 4))
    simple("upsample_bilinear", lambda r: [_r(r, 2, 3, 3)],
           lambda t: nnops.upsample_bilinear(t, 4))

    def build_sample(rng):
        img = _r(rng, 3, 5, 6)
        xs = rng.uniform(-0.5, 5.5, size=(7,))
        ys = rng.uniform(-0.5, 4.5, size=(7,))
        wsum = _weighted(np.random.default_rng(7), (3, 7))
        return [img], lambda: wsum(nnops.sample_bilinear(img, xs, ys))

    checks.append(OpCheck("sample_bilinear", build_sample))

    def build_gather(rng):
        vol = _r(rng, 4, 5, 5)
        xs = rng.uniform(0.0, 4.0, size=(4, 6))
        ys = rng.uniform(0.0, 4.0, size=(4, 6))
        wsum = _weighted(np.random.default_rng(8), (4, 6))
        return [vol], lambda: wsum(nnops.gather_bilinear(vol, xs, ys))

    checks.append(OpCheck("gather_bilinear", build_gather))

    return checks


OP_CHECKS: List[OpCheck] = _build_registry()


def audit_ops(seed: int = 0, eps: float = 1e-6, tol: float = 1e-5,
              verbose: bool = False) -> List[Tuple[str, float]]:
    """Run every registered op check; returns (name, max_rel_err) pairs.

    Raises AssertionError listing the offenders if any exceeds ``tol``.
    """
    results = []
    for check in OP_CHECKS:
        err = check.run(seed=seed, eps=eps)
        results.append((check.name, err))
        if verbose:
            status = "ok" if err < tol else "FAIL"
            print(f"  {check.name:<22s} max rel err {err:.3e}  [{status}]")
    bad = [(n, e) for n, e in results if not (e < tol)]
    if bad:
        raise AssertionError(f"gradient audit failures: {bad}")
    return results


__all__ = ["grad_check", "OpCheck", "OP_CHECKS", "audit_ops"]
