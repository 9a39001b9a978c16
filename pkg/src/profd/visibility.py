"""Per-part visibility scores and the visibility-weighted retrieval distance.

Each part gets its own binary classifier over its feature row; targets
come from the external masks (a part counts as visible when any of its
pixels survives).  At retrieval time, the query-gallery distance averages
the cosine distances of parts visible on both sides plus the global
distance, which always participates with weight 1.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .decoder import PartFeatures


class PersonEmbedding(NamedTuple):
    """One retrieval item: global feature, part rows, visibility scores."""

    global_vec: Tensor  # [d]
    parts: Tensor  # [N, d]
    visibility: Tensor  # [N], in [0, 1]


class VisibilityHead(nn.Module):
    """N independent linear-sigmoid classifiers, one per part row."""

    def __init__(self, n_parts: int, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_parts, d) * 0.01)
        self.bias = nn.Parameter(torch.zeros(n_parts))

    def forward(self, part_features: PartFeatures | Tensor) -> Tensor:
        f = part_features.per_part if isinstance(part_features, PartFeatures) else part_features
        if f.shape[-2:] != self.weight.shape:
            raise ValueError(
                f"expected part features [.., {self.weight.shape[0]}, "
                f"{self.weight.shape[1]}], got {tuple(f.shape)}"
            )
        logits = (f * self.weight).sum(dim=-1) + self.bias
        return torch.sigmoid(logits)


def predict_visibility(part_features: PartFeatures | Tensor, head: VisibilityHead) -> Tensor:
    """Per-part visibility scores in (0, 1); the global feature is always 1."""
    return head(part_features)


def visibility_targets(mask: Tensor, threshold: float = 0.5) -> Tensor:
    """Boolean [N] (or [B, N]): part visible iff any pixel exceeds threshold.

    Accepts masks shaped [H', W', N] or batched [B, H', W', N].
    """
    if mask.ndim not in (3, 4):
        raise ValueError("mask must be [H', W', N] or [B, H', W', N]")
    if mask.min() < 0 or mask.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")
    return mask.amax(dim=(-3, -2)) > threshold


def focal_loss(v: Tensor, targets: Tensor, alpha: float = 0.65, gamma: float = 2.0) -> Tensor:
    """Class-balanced focal loss over part visibility, mean over parts.

    Positive parts contribute -alpha (1-v)^gamma log v, negative parts
    -(1-alpha) v^gamma log(1-v).  Scores are clamped away from {0, 1}
    before the log.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if gamma < 0.0:
        raise ValueError("gamma must be >= 0")
    if v.shape != targets.shape:
        raise ValueError(f"shape mismatch: v {tuple(v.shape)} vs targets {tuple(targets.shape)}")
    v = v.clamp(1e-7, 1.0 - 1e-7)
    t = targets.to(v.dtype)
    pos = -alpha * (1.0 - v) ** gamma * torch.log(v)
    neg = -(1.0 - alpha) * v**gamma * torch.log(1.0 - v)
    return (t * pos + (1.0 - t) * neg).mean()


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """1 - cosine similarity along the last dim; range [0, 2]."""
    return 1.0 - F.cosine_similarity(a, b, dim=-1, eps=1e-12)


def pairwise_distance(
    query: PersonEmbedding, gallery: PersonEmbedding, binarize: bool = True
) -> Tensor:
    """Visibility-weighted distance between one query and one gallery item.

    d = (sum_i v_i^q v_i^g d_i + d_g) / (sum_i v_i^q v_i^g + 1) with d_i
    the per-part cosine distance and d_g the global one.  Visibility is
    binarized at 0.5 by default (the inference convention); pass
    binarize=False to use the raw sigmoid scores.
    """
    if query.parts.shape != gallery.parts.shape:
        raise ValueError("query and gallery part shapes differ")
    if query.global_vec.shape != gallery.global_vec.shape:
        raise ValueError("query and gallery global widths differ")
    vq, vg = query.visibility, gallery.visibility
    if binarize:
        vq = (vq >= 0.5).to(query.parts.dtype)
        vg = (vg >= 0.5).to(gallery.parts.dtype)
    w = vq * vg
    d_parts = cosine_distance(query.parts, gallery.parts)
    d_g = cosine_distance(query.global_vec, gallery.global_vec)
    return ((w * d_parts).sum(dim=-1) + d_g) / (w.sum(dim=-1) + 1.0)
