"""Training objectives.

Every loss sums over pixels (and channels/classes) and averages over the
batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import LabelError, ParameterError, ShapeError

EPS = 1e-8


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.total.detach())

    def component_items(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.components.items()}


def mrn_loss(recon: torch.Tensor, target: torch.Tensor) -> LossValue:
    """Mean over the batch of the squared l2 distance per image.

    Works for real or complex tensors; the first axis is the batch.
    """
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction {tuple(recon.shape)} vs target {tuple(target.shape)}")
    diff = recon - target
    sq = diff.real**2 + diff.imag**2 if diff.is_complex() else diff**2
    total = sq.reshape(sq.shape[0], -1).sum(dim=1).mean()
    return LossValue(total, {"mrn": total})


def _one_hot(labels: torch.Tensor, n_classes: int, like: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, device=like.device).long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in 0..{n_classes - 1}")
    return torch.nn.functional.one_hot(labels, n_classes).movedim(-1, -3).to(like.dtype)


def msn_loss(probs: torch.Tensor, labels) -> LossValue:
    """Pixel-wise cross-entropy on (B, C, H, W) probabilities, clamped at ``EPS``."""
    if probs.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W) probabilities, got {tuple(probs.shape)}")
    target = _one_hot(labels, probs.shape[1], probs)
    if target.shape != probs.shape:
        raise ShapeError(f"labels {tuple(target.shape)} do not match probabilities {tuple(probs.shape)}")
    ce = -(target * torch.log(probs.clamp_min(EPS)))
    total = ce.reshape(ce.shape[0], -1).sum(dim=1).mean()
    n_pixels = probs.shape[-1] * probs.shape[-2]
    return LossValue(total, {"msn": total, "per_pixel": total / n_pixels})


def omsn_loss(merged: torch.Tensor, per_block: Sequence[torch.Tensor], labels) -> LossValue:
    """Average of the merged-map loss and the N per-block losses."""
    if len(per_block) == 0:
        raise ParameterError("omsn_loss needs at least one per-block prediction")
    merged_term = msn_loss(merged, labels).total
    block_terms = [msn_loss(p, labels).total for p in per_block]
    total = (merged_term + sum(block_terms)) / (len(block_terms) + 1)
    components = {"mmsn": merged_term}
    components.update({f"smsn_{i + 1}": t for i, t in enumerate(block_terms)})
    components["omsn"] = total
    return LossValue(total, components)


def segnetmri_loss(outputs, target: torch.Tensor, labels, lam: float = 0.01) -> LossValue:
    """Final-block reconstruction loss plus ``lam`` times the ensemble segmentation loss."""
    if lam < 0:
        raise ParameterError(f"lambda must be non-negative, got {lam}")
    rec = mrn_loss(outputs.reconstruction, target).total
    seg = omsn_loss(outputs.merged_segmentation, outputs.per_block_segmentations, labels)
    total = rec + lam * seg.total
    return LossValue(total, {"mrn": rec, "omsn": seg.total, **{k: v for k, v in seg.components.items() if k != "omsn"}})
