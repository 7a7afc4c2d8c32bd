"""Training objectives: reconstruction, latent prior, edge-aware flow
coherence, their weighted total, and the confidence-mask objective.

Every loss averages over the batch so the weight defaults transfer across
batch sizes. All functions build on the autodiff ops and are differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .warp import FlowField

MASK_CLAMP = 1e-7


@dataclass
class LossWeights:
    """Weights of the composite objective and the confidence-label temperature."""

    lambda_prior: float = 0.003
    lambda_flow: float = 0.001
    alpha: float = 0.5
    beta: float = 0.1
    neighborhood_radius: int = 3

    def __post_init__(self):
        if self.lambda_prior < 0 or self.lambda_flow < 0:
            raise ValueError("loss weights must be non-negative")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.neighborhood_radius < 1:
            raise ValueError(
                f"neighborhood radius must be >= 1, got {self.neighborhood_radius}")


def _batched(x, ndim_unbatched: int) -> tuple[Tensor, int]:
    """Promote an unbatched tensor to batch size 1; returns (tensor, batch)."""
    t = as_tensor(x)
    if t.ndim == ndim_unbatched:
        return ad.reshape(t, (1,) + t.data.shape), 1
    return t, t.data.shape[0]


def reconstruction_loss(target, warped) -> Tensor:
    """Squared L2 difference summed over pixels and channels, batch-averaged."""
    t, w = as_tensor(target), as_tensor(warped)
    if t.data.shape != w.data.shape:
        raise ValueError(
            f"reconstruction_loss shape mismatch: target {tuple(t.shape)} "
            f"vs warped {tuple(w.shape)}")
    t, n = _batched(t, 3)
    w, _ = _batched(w, 3)
    diff = ad.sub(t, w)
    return ad.scale(ad.tensor_sum(ad.mul(diff, diff)), 1.0 / n)


def prior_loss(mu, log_var) -> Tensor:
    """Divergence of the approximate posterior from the unit Gaussian,
    computed from log-variance and batch-averaged."""
    m, lv = as_tensor(mu), as_tensor(log_var)
    if m.data.shape != lv.data.shape:
        raise ValueError(
            f"prior_loss shape mismatch: mu {tuple(m.shape)} vs log_var {tuple(lv.shape)}")
    n = m.data.shape[0] if m.ndim >= 2 else 1
    term = ad.sub(ad.add(1.0, lv), ad.add(ad.mul(m, m), ad.exp(lv)))
    return ad.scale(ad.neg(ad.tensor_sum(term)), 1.0 / n)


def _flow_nchw(flow) -> Tensor:
    """Canonicalize a flow to (N, 2, H, W) for spatial cropping."""
    if isinstance(flow, FlowField):
        flow = Tensor(flow.coords, dtype=np.float64)
    f = as_tensor(flow)
    if f.ndim == 3:
        f, _ = _batched(f, 3)
    if f.ndim != 4 or f.data.shape[3] != 2:
        raise ValueError(f"flow must be (H,W,2) or (N,H,W,2), got {tuple(f.shape)}")
    return ad.transpose(f, (0, 3, 1, 2))


def _target_nchw(target) -> np.ndarray:
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.ndim == 2:
        t = t[None]
    if t.ndim == 3:
        t = t[None]
    return t


def flow_coherence_loss(flow, target, weights: LossWeights) -> Tensor:
    """Pairwise flow smoothness over a (2r+1)^2 neighborhood, attenuated by
    target color affinity and squared pixel distance; ordered pairs counted
    both ways; batch-averaged."""
    f = _flow_nchw(flow)
    t = _target_nchw(target)
    n, _, h, w = f.data.shape
    if t.shape[2] != h or t.shape[3] != w:
        raise ValueError(
            f"flow extents {h}x{w} do not match target extents {t.shape[2]}x{t.shape[3]}")
    r = weights.neighborhood_radius
    alpha = weights.alpha
    total = None
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            y0, y1 = max(0, -dy), h - max(0, dy)
            x0, x1 = max(0, -dx), w - max(0, dx)
            if y1 <= y0 or x1 <= x0:
                continue
            fa = ad.crop_hw(f, y0, y1, x0, x1)
            fb = ad.crop_hw(f, y0 + dy, y1 + dy, x0 + dx, x1 + dx)
            diff = ad.sub(fa, fb)
            sq = ad.tensor_sum(ad.mul(diff, diff), axis=1, keepdims=True)
            ta = t[:, :, y0:y1, x0:x1]
            tb = t[:, :, y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            col = ((ta - tb) ** 2).sum(axis=1, keepdims=True)
            wgt = np.exp(-(alpha * col + float(dy * dy + dx * dx)))
            term = ad.tensor_sum(ad.mul(sq, wgt.astype(f.data.dtype)))
            total = term if total is None else ad.add(total, term)
    if total is None:
        return Tensor(np.zeros((), dtype=f.data.dtype))
    return ad.scale(total, 1.0 / n)


def total_loss(recon, prior, coherence, weights: LossWeights) -> Tensor:
    """Weighted sum of the three objectives; rejects non-finite components."""
    parts = {"reconstruction": as_tensor(recon), "prior": as_tensor(prior),
             "flow coherence": as_tensor(coherence)}
    for name, t in parts.items():
        if not np.isfinite(t.item()):
            raise ValueError(f"{name} loss is not finite")
    return ad.add(parts["reconstruction"],
                  ad.add(ad.scale(parts["prior"], weights.lambda_prior),
                         ad.scale(parts["flow coherence"], weights.lambda_flow)))


def soft_confidence_label(target, warped, beta: float) -> Tensor:
    """Per-pixel confidence label from the channel-summed squared residual."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    t, w = as_tensor(target), as_tensor(warped)
    if t.data.shape != w.data.shape:
        raise ValueError(
            f"soft_confidence_label shape mismatch: {tuple(t.shape)} vs {tuple(w.shape)}")
    t, _ = _batched(t, 3)
    w, _ = _batched(w, 3)
    diff = ad.sub(t, w)
    sq = ad.tensor_sum(ad.mul(diff, diff), axis=1, keepdims=True)
    return ad.exp(ad.scale(sq, -1.0 / beta))


def mask_cross_entropy(label, mask) -> Tensor:
    """Per-pixel cross entropy between soft labels and mask predictions,
    summed over pixels and batch-averaged. The mask is clamped away from
    {0, 1} before the logs."""
    y, m = as_tensor(label), as_tensor(mask)
    if y.data.shape != m.data.shape:
        raise ValueError(
            f"mask_cross_entropy shape mismatch: label {tuple(y.shape)} "
            f"vs mask {tuple(m.shape)}")
    n = m.data.shape[0] if m.ndim >= 4 else 1
    mc = ad.clip(m, MASK_CLAMP, 1.0 - MASK_CLAMP)
    pos = ad.mul(y, ad.log(mc))
    negt = ad.mul(ad.sub(1.0, y), ad.log(ad.sub(1.0, mc)))
    return ad.scale(ad.neg(ad.tensor_sum(ad.add(pos, negt))), 1.0 / n)
