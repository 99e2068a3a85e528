"""Adaptive Wing loss, its masked form, PAF MSE and the hybrid objective.

Everything here is written against torch tensors so autograd can drive
training; :func:`awing_grad` gives the closed-form derivative with respect to
the prediction for gradient verification.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class AwingParams:
    omega: float = 14.0
    theta: float = 0.5
    epsilon: float = 1.0
    alpha: float = 2.1

    def __post_init__(self):
        if not (self.omega > 0 and self.theta > 0 and self.epsilon > 0):
            raise ValueError(f"omega, theta and epsilon must be positive: {self}")
        # alpha - gt must stay positive for every gt in [0, 1]
        if not self.alpha > 1:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")


@dataclass(frozen=True)
class HybridWeights:
    w1: float = 1.0
    w2: float = 1.0
    w_mask: float = 10.0

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or self.w_mask < 0:
            raise ValueError(f"weights must be non-negative: {self}")
        if self.w1 + self.w2 <= 0:
            raise ValueError("w1 + w2 must be positive")


def awing_constants(gt: torch.Tensor, p: AwingParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Slope ``A`` and offset ``C`` of the linear branch for each target value."""
    power = p.alpha - gt
    ratio = p.theta / p.epsilon
    rp = torch.pow(torch.as_tensor(ratio, dtype=gt.dtype), power)
    a = p.omega * (1.0 / (1.0 + rp)) * power * torch.pow(torch.as_tensor(ratio, dtype=gt.dtype), power - 1.0) / p.epsilon
    c = p.theta * a - p.omega * torch.log1p(rp)
    return a, c


def awing(pred: torch.Tensor, gt: torch.Tensor, p: AwingParams = AwingParams(), reduction: str = "none") -> torch.Tensor:
    diff = torch.abs(pred - gt)
    a, c = awing_constants(gt, p)
    # clamp keeps the unused branch finite so torch.where does not leak NaN gradients
    small = torch.clamp(diff, max=p.theta)
    log_branch = p.omega * torch.log1p(torch.pow(small / p.epsilon, p.alpha - gt))
    lin_branch = a * diff - c
    loss = torch.where(diff <= p.theta, log_branch, lin_branch)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    if reduction != "none":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss


def awing_grad(pred: torch.Tensor, gt: torch.Tensor, p: AwingParams = AwingParams()) -> torch.Tensor:
    """d awing / d pred, elementwise."""
    diff = pred - gt
    ad = torch.abs(diff)
    power = p.alpha - gt
    a, _ = awing_constants(gt, p)
    x = torch.clamp(ad, max=p.theta) / p.epsilon
    inner = p.omega * power * torch.pow(x, power - 1.0) / (p.epsilon * (1.0 + torch.pow(x, power)))
    mag = torch.where(ad <= p.theta, inner, a)
    return torch.sign(diff) * mag


def masked_awing(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor, p: AwingParams = AwingParams(),
                 w_mask: float = 10.0) -> torch.Tensor:
    if not (pred.shape == gt.shape == mask.shape):
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, mask {tuple(mask.shape)}")
    return (awing(pred, gt, p) * (w_mask * mask + 1.0)).mean()


def paf_mse(pred_paf: torch.Tensor, gt_paf: torch.Tensor) -> torch.Tensor:
    if pred_paf.shape != gt_paf.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_paf.shape)} vs {tuple(gt_paf.shape)}")
    return ((pred_paf - gt_paf) ** 2).mean()


def heatmap_mse(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).mean()


def hybrid_loss(pred_hm, gt_hm, mask, pred_paf, gt_paf, weights: HybridWeights = HybridWeights(),
                params: AwingParams = AwingParams(), heatmap_loss: str = "awing"):
    """Weighted heatmap + PAF objective.

    Returns ``(total, components)``; ``components`` holds detached floats for
    ``heatmap``, ``paf_mse`` and ``total``. With ``heatmap_loss="mse"`` the
    masked Adaptive Wing term is replaced by plain MSE (loss comparison runs).
    """
    if heatmap_loss == "awing":
        hm = masked_awing(pred_hm, gt_hm, mask, params, weights.w_mask)
    elif heatmap_loss == "mse":
        hm = heatmap_mse(pred_hm, gt_hm)
    else:
        raise ValueError(f"unknown heatmap loss {heatmap_loss!r}")
    pl = paf_mse(pred_paf, gt_paf)
    total = weights.w1 * hm + weights.w2 * pl
    return total, {"heatmap": float(hm.detach()), "paf_mse": float(pl.detach()), "total": float(total.detach())}
