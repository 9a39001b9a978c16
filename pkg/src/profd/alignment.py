"""Prompt-vs-feature-map presence scores and the spatial alignment loss.

The score map is the plain inner product between every patch token and
every prompt row.  Supervision comes from external part masks, average
pooled to the patch grid with the same kernel and stride used to patchify
the image.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .core import Dims, FeatureMap


@dataclass
class PatchLabels:
    """Patch-level part fractions [grid_h, grid_w, N] (optionally batched).

    labels[i, j, n] is the fraction of patch (i, j)'s pixels carrying part
    n.  A patch is `valid` when any part has positive mass there.
    """

    labels: Tensor

    def __post_init__(self) -> None:
        if self.labels.ndim not in (3, 4):
            raise ValueError("labels must be [gh, gw, N] or [B, gh, gw, N]")
        if self.labels.min() < 0 or self.labels.max() > 1:
            raise ValueError("label values must lie in [0, 1]")

    @property
    def valid(self) -> Tensor:
        """Boolean grid marking patches with any part mass."""
        return self.labels.amax(dim=-1) > 0

    @property
    def n_parts(self) -> int:
        return self.labels.shape[-1]

    def flat(self) -> Tensor:
        """[N, HW] (or [B, N, HW]) view used by the attention loss."""
        if self.labels.ndim == 4:
            b, gh, gw, n = self.labels.shape
            return self.labels.reshape(b, gh * gw, n).transpose(1, 2)
        gh, gw, n = self.labels.shape
        return self.labels.reshape(gh * gw, n).T


def score_map(feature_map: FeatureMap | Tensor, prompt_embeds: Tensor) -> Tensor:
    """Inner product of every patch with every prompt: [.., gh, gw, N].

    With unit-normalized inputs each score is a cosine in [-1, 1].
    """
    patches = feature_map.patches if isinstance(feature_map, FeatureMap) else feature_map
    if patches.shape[-1] != prompt_embeds.shape[-1]:
        raise ValueError(
            f"width mismatch: patches d={patches.shape[-1]}, "
            f"prompts d={prompt_embeds.shape[-1]}"
        )
    return torch.einsum("...d,nd->...n", patches, prompt_embeds)


def pool_mask(mask: Tensor, dims: Dims, resize: bool = True) -> PatchLabels:
    """Average-pool a pixel mask [H', W', N] to patch labels.

    Pooling uses kernel = patch size and stride = the patchify stride, so
    labels line up with encoder tokens exactly.  Masks at a different
    resolution are bilinearly resized to the image size first (disable
    with resize=False to get a hard error instead).
    """
    squeeze = mask.ndim == 3
    if squeeze:
        mask = mask.unsqueeze(0)
    if mask.ndim != 4:
        raise ValueError("mask must be [H', W', N] or [B, H', W', N]")
    if mask.min() < 0 or mask.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")
    x = mask.permute(0, 3, 1, 2)  # [B, N, H', W']
    h, w = x.shape[-2:]
    if (h, w) != (dims.img_h, dims.img_w):
        if not resize:
            raise ValueError(
                f"mask resolution {h}x{w} does not match image "
                f"{dims.img_h}x{dims.img_w} and resize is disabled"
            )
        x = F.interpolate(x, size=(dims.img_h, dims.img_w), mode="bilinear", align_corners=False)
        x = x.clamp(0.0, 1.0)
    pooled = F.avg_pool2d(x, kernel_size=dims.patch, stride=dims.effective_stride)
    labels = pooled.permute(0, 2, 3, 1)
    if squeeze:
        labels = labels[0]
    return PatchLabels(labels)


def alignment_loss(
    scores: Tensor, patch_labels: PatchLabels, hard_targets: bool = False
) -> Tensor:
    """Cross-entropy between per-patch part softmax and pooled labels.

    Targets are the pooled fractions renormalized over parts (or their
    argmax one-hot with hard_targets=True).  Patches with zero part mass
    are excluded; the result is the mean over valid patches, so the
    magnitude does not scale with grid size.
    """
    labels = patch_labels.labels
    if scores.shape != labels.shape:
        raise ValueError(
            f"score grid {tuple(scores.shape)} does not match labels {tuple(labels.shape)}"
        )
    n = labels.shape[-1]
    flat_scores = scores.reshape(-1, n)
    flat_labels = labels.reshape(-1, n)
    mass = flat_labels.sum(dim=-1)
    valid = mass > 0
    if not bool(valid.any()):
        warnings.warn("alignment_loss: no valid patches, returning 0", stacklevel=2)
        return scores.sum() * 0.0
    flat_scores = flat_scores[valid]
    flat_labels = flat_labels[valid]
    if hard_targets:
        target = F.one_hot(flat_labels.argmax(dim=-1), n).to(flat_scores.dtype)
    else:
        target = flat_labels / flat_labels.sum(dim=-1, keepdim=True)
    logp = F.log_softmax(flat_scores, dim=-1)
    return -(target * logp).sum(dim=-1).mean()
