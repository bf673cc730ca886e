"""Identity + mask-usage objective.

total = arcface_ce + ln(1 + mask_ce) + weight_decay * sum of squared weights

The logarithm damps the mask term so the identity loss dominates the
gradient: d total / d mask_ce = 1 / (1 + mask_ce) <= 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import InvalidLossTerm, NonFiniteLoss

DEFAULT_WEIGHT_DECAY = 5e-4


def _check_finite(logits: torch.Tensor) -> None:
    finite = torch.isfinite(logits).all(dim=1)
    if not bool(finite.all()):
        bad = int((~finite).nonzero()[0, 0])
        raise NonFiniteLoss(f"non-finite logit in batch row {bad}", batch_index=bad)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean categorical cross-entropy through a max-shifted log-sum-exp."""
    _check_finite(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}")
    if bool(((labels < 0) | (labels >= logits.shape[1])).any()):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    shift = logits.max(dim=1, keepdim=True).values.detach()
    z = logits - shift
    log_norm = torch.log(torch.exp(z).sum(dim=1))
    target = z.gather(1, labels[:, None]).squeeze(1)
    return (log_norm - target).mean()


def arcface_loss(logits_arcface: torch.Tensor, labels_id) -> torch.Tensor:
    return cross_entropy(logits_arcface, labels_id)


def mask_loss(logits_mask: torch.Tensor, mask_labels) -> torch.Tensor:
    """Cross-entropy of the 2-way mask logits against the mask flags (index 1 = masked)."""
    if logits_mask.shape[-1] != 2:
        raise ValueError(f"mask logits need 2 columns, got {logits_mask.shape[-1]}")
    mask_labels = torch.as_tensor(mask_labels, dtype=torch.long)
    if bool(((mask_labels != 0) & (mask_labels != 1)).any()):
        raise ValueError("mask labels must be 0 or 1")
    return cross_entropy(logits_mask, mask_labels)


def _value(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def mtarcface_loss(loss_arcface, loss_mask, mask_weight: float = 1.0):
    """``loss_arcface + ln(loss_mask + 1)``; floats or scalar tensors.

    ``mask_weight`` scales the damped term and only exists so an ArcFace-only
    baseline (weight 0) can share the training path.
    """
    a, m = _value(loss_arcface), _value(loss_mask)
    if not (math.isfinite(a) and math.isfinite(m)):
        raise InvalidLossTerm(f"loss terms must be finite, got {a}, {m}")
    if a < 0 or m < 0:
        raise InvalidLossTerm(f"loss terms must be non-negative, got {a}, {m}")
    if isinstance(loss_mask, torch.Tensor):
        damped = torch.log1p(loss_mask)
    else:
        damped = math.log1p(loss_mask)
    if mask_weight == 1.0:
        return loss_arcface + damped
    return loss_arcface + mask_weight * damped


def regularization_loss(weights, weight_decay: float):
    if weight_decay < 0:
        raise ValueError("weight_decay must be >= 0")
    total = None
    for w in weights:
        term = (w * w).sum()
        total = term if total is None else total + term
    if total is None:
        return 0.0
    return weight_decay * total


@dataclass
class MTLossBreakdown:
    loss_arcface: torch.Tensor
    loss_mask: torch.Tensor
    loss_mtarcface: torch.Tensor
    loss_regularization: torch.Tensor
    loss_total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: _value(v) for k, v in self.__dict__.items()}


def total_loss(loss_arcface, loss_mask, weights, weight_decay: float = DEFAULT_WEIGHT_DECAY,
               mask_weight: float = 1.0) -> MTLossBreakdown:
    """Assemble every loss term; ``weights`` are the decayed weight matrices."""
    mt = mtarcface_loss(loss_arcface, loss_mask, mask_weight)
    reg = regularization_loss(weights, weight_decay)
    return MTLossBreakdown(loss_arcface, loss_mask, mt, reg, mt + reg)
