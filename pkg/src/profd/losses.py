"""Identity cross-entropy, batch-hard triplet loss and the total objective.

The total objective sums ten terms (identity and triplet losses on global
and concatenated part features, diversity, both contrastive memory terms,
alignment, attention and visibility) with per-term weights defaulting
to 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

TERM_NAMES = ("id_g", "tri_g", "id_c", "tri_c", "div", "pcl_p", "pcl_g", "align", "attn", "vis")


class NaNLossError(RuntimeError):
    """A loss term turned non-finite; the training step must abort."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term


def id_loss(logits: Tensor, targets: Tensor, smoothing: float = 0.1) -> Tensor:
    """Mean cross-entropy over identities with label smoothing."""
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise ValueError("expected [B, C] logits with [B] targets")
    n_classes = logits.shape[1]
    if bool((targets < 0).any()) or bool((targets >= n_classes).any()):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return F.cross_entropy(logits, targets, label_smoothing=smoothing)


def triplet_loss(features: Tensor, targets: Tensor, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss on L2-normalized features.

    Per anchor: hardest (farthest) positive minus hardest (closest)
    negative, hinged at zero with the margin, averaged over anchors.
    Every anchor needs at least one positive and one negative in the
    batch, which PK sampling guarantees.
    """
    if features.ndim != 2 or targets.ndim != 1 or features.shape[0] != targets.shape[0]:
        raise ValueError("expected [B, w] features with [B] targets")
    b = features.shape[0]
    x = F.normalize(features, dim=-1, eps=1e-12)
    dist = torch.cdist(x, x)
    same = targets.unsqueeze(0) == targets.unsqueeze(1)
    eye = torch.eye(b, dtype=torch.bool, device=features.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not bool(pos_mask.any(dim=1).all()):
        raise ValueError("every anchor needs a positive: some identity has a single sample")
    if not bool(neg_mask.any(dim=1).all()):
        raise ValueError("every anchor needs a negative: batch holds a single identity")
    big = torch.finfo(dist.dtype).max
    d_ap = dist.masked_fill(~pos_mask, -big).max(dim=1).values
    d_an = dist.masked_fill(~neg_mask, big).min(dim=1).values
    return F.relu(d_ap - d_an + margin).mean()


@dataclass
class LossReport:
    """All objective terms of one step plus their weighted total.

    Terms stay as 0-dim tensors so the total can flow gradients;
    `scalars()` converts everything for logging.
    """

    terms: dict[str, Tensor]
    weights: dict[str, float]
    total: Tensor

    def scalars(self) -> dict[str, float]:
        out = {name: float(t.detach()) for name, t in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def total_loss(terms: dict[str, Tensor], weights: dict[str, float] | None = None) -> LossReport:
    """Weighted sum of all ten terms; non-finite terms abort the step.

    Missing weights default to 1 (the plain unweighted sum); unknown term
    or weight names are rejected.
    """
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    missing = set(TERM_NAMES) - set(terms)
    if missing:
        raise ValueError(f"missing loss terms: {sorted(missing)}")
    weights = dict(weights or {})
    unknown_w = set(weights) - set(TERM_NAMES)
    if unknown_w:
        raise ValueError(f"unknown loss weights: {sorted(unknown_w)}")
    full_weights = {name: float(weights.get(name, 1.0)) for name in TERM_NAMES}
    for name in TERM_NAMES:
        value = float(terms[name].detach())
        if not math.isfinite(value):
            raise NaNLossError(name, value)
    total = None
    for name in TERM_NAMES:
        piece = full_weights[name] * terms[name]
        total = piece if total is None else total + piece
    return LossReport(terms=dict(terms), weights=full_weights, total=total)
