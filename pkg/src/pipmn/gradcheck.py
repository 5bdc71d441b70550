"""Finite-difference verification of every differentiable op and the tiny full model.

All checks run in float64. Each check reduces the op output to a scalar with a
fixed random projection so that every output coordinate contributes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, grad_check
from .model import (DenseMlpBlock, PipConfig, PipmnModel, dense_mlp, depth_block, forward,
                    temporal_feedforward, temporal_mlp)
from .train import bce_multilabel, cross_entropy_smoothed

TOL = 1e-4
TINY = dict(n=2, kappas=[2, 3], time_length=3, in_dim=6, alpha=2, num_classes=3)


def _project(out, rng):
    r = rng.standard_normal(out.shape)
    return ad.tensor_sum(ad.mul(out, ad.Tensor(r)))


def _param(rng, name, shape, scale=1.0):
    return Parameter(name, rng.standard_normal(shape) * scale)


def _check(name, build, params, rng, tol, max_coords):
    proj = {}

    def f():
        out = build()
        if out.data.size == 1:
            return out
        if "r" not in proj:
            proj["r"] = ad.Tensor(rng.standard_normal(out.shape))
        return ad.tensor_sum(ad.mul(out, proj["r"]))

    return grad_check(f, params, tol=tol, max_coords=max_coords, name=name)


def run_suite(tol=TOL, seed=0, max_coords=64, size="tiny"):
    """Return a list of GradCheckReport, one per op/block plus the full model."""
    if size != "tiny":
        raise ValueError(f"unknown gradcheck size {size!r}; only 'tiny' is defined")
    reports = []
    with ad.precision(np.float64):
        rng = np.random.default_rng(seed)
        B, D, L = 2, 5, 4
        x3 = _param(rng, "x", (B, D, L))

        w, b = _param(rng, "w", (L, 3)), _param(rng, "b", (3,))
        reports.append(_check("linear", lambda: ad.linear(x3, w, b), [x3, w, b], rng, tol, max_coords))

        g, be = Parameter("gamma", 1 + 0.3 * rng.standard_normal(L)), _param(rng, "beta", (L,))
        reports.append(_check("layer_norm", lambda: ad.layer_norm(x3, g, be), [x3, g, be],
                              rng, tol, max_coords))
        reports.append(_check("gelu", lambda: ad.gelu(x3), [x3], rng, tol, max_coords))

        k, kb = _param(rng, "k", (D, 3)), _param(rng, "kb", (D,))
        reports.append(_check("depthwise_conv1d", lambda: ad.depthwise_conv1d(x3, k, kb),
                              [x3, k, kb], rng, tol, max_coords))

        xt = _param(rng, "x_time", (B, 7, D))
        reports.append(_check("adaptive_avg_pool_time", lambda: ad.adaptive_avg_pool_time(xt, 3),
                              [xt], rng, tol, max_coords))
        reports.append(_check("permute_last_two", lambda: ad.permute_last_two(x3), [x3],
                              rng, tol, max_coords))
        x3b = _param(rng, "x2", (B, D, 2))
        reports.append(_check("concat_last", lambda: ad.concat_last([x3, x3b, x3]), [x3, x3b],
                              rng, tol, max_coords))
        s, y3 = Parameter("s", np.array(0.7)), _param(rng, "y", (B, D, L))
        reports.append(_check("scale_add", lambda: ad.scale_add(x3, s, y3), [x3, s, y3],
                              rng, tol, max_coords))
        reports.append(_check("mean_over_time", lambda: ad.mean_over_time(x3), [x3],
                              rng, tol, max_coords))

        logits = _param(rng, "logits", (4, 5))
        tgt = np.array([0, 3, 1, 4])
        reports.append(_check("cross_entropy_smoothed",
                              lambda: cross_entropy_smoothed(logits, tgt, 0.1), [logits],
                              rng, tol, max_coords))
        multi = (rng.random((4, 5)) < 0.4).astype(float)
        reports.append(_check("bce_multilabel", lambda: bce_multilabel(logits, multi), [logits],
                              rng, tol, max_coords))

        cfg = PipConfig(n=1, kappas=[2], time_length=3, in_dim=4, alpha=2, num_classes=3)
        blk = DenseMlpBlock("blk", 4, 8, cfg, rng)
        _perturb_affine(blk, rng)
        xb = _param(rng, "x_blk", (2, 4, 3))  # (B, D, L)
        reports.append(_check("temporal_mlp", lambda: temporal_mlp(xb, blk),
                              [xb] + blk.parameters(), rng, tol, max_coords))
        reports.append(_check("temporal_feedforward", lambda: temporal_feedforward(xb, blk),
                              [xb] + blk.parameters(), rng, tol, max_coords))
        xd = _param(rng, "x_depth", (2, 3, 4))  # (B, L, D)
        reports.append(_check("depth_block", lambda: depth_block(xd, blk),
                              [xd] + blk.parameters(), rng, tol, max_coords))
        reports.append(_check("dense_mlp", lambda: dense_mlp(xd, blk),
                              [xd] + blk.parameters(), rng, tol, max_coords))

        model = PipmnModel(PipConfig(**TINY), seed=seed).astype(np.float64)
        for blk_ in model.stages:
            _perturb_affine(blk_, rng)
        for rho in model.rhos:
            rho.data = np.array(0.6)
        xm = rng.standard_normal((2, 8, TINY["in_dim"]))
        ym = np.array([0, 2])
        reports.append(_check("pipmn_tiny", lambda: cross_entropy_smoothed(forward(model, xm), ym),
                              model.parameters(), rng, tol, max_coords))
    return reports


def _perturb_affine(block, rng):
    """Move norms and layer scales off their init so every gradient term is exercised."""
    for p in block.parameters():
        if p.name.endswith(("gamma", "beta")):
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
        elif p.name.endswith(("eps1", "eps2")):
            p.data = np.array(0.5 + rng.random())


def format_reports(reports):
    lines = [f"{'check':<24} {'max rel err':>12} {'coords':>7}  worst coordinate"]
    for r in reports:
        worst = "-" if r.worst is None else f"{r.worst[0]}[{r.worst[1]}] ana={r.worst[2]:.6g} num={r.worst[3]:.6g}"
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<24} {r.max_rel_error:12.3e} {r.checked:7d}  {worst}  {status}")
        lines.extend(f"    {msg}" for msg in r.failures)
    return "\n".join(lines)
