"""Per-identity centroid banks with momentum updates and contrastive losses.

Two banks preserve the encoder's initial knowledge during fine-tuning:
a global bank of identity centroids over global features and a local
bank over concatenated part features.  Losses treat the bank as a
constant snapshot; updates run after the backward pass, one image at a
time in batch order.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from .alignment import PatchLabels


class MemoryBank:
    """[C, width] table of unit-norm identity centroids."""

    def __init__(self, centroids: Tensor, momentum: float, temperature: float):
        if centroids.ndim != 2:
            raise ValueError("centroids must be a [C, width] matrix")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if temperature <= 0.0:
            raise ValueError("temperature must be positive")
        self.centroids = centroids
        self.momentum = momentum
        self.temperature = temperature

    @property
    def n_ids(self) -> int:
        return self.centroids.shape[0]

    @property
    def width(self) -> int:
        return self.centroids.shape[1]

    def state_dict(self) -> dict:
        return {
            "centroids": self.centroids,
            "momentum": self.momentum,
            "temperature": self.temperature,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryBank":
        return cls(state["centroids"], state["momentum"], state["temperature"])


def _normalize_rows(x: Tensor, what: str) -> Tensor:
    norms = x.norm(dim=-1)
    if bool((norms == 0).any()):
        bad = int((norms == 0).nonzero()[0])
        raise ValueError(f"{what}: row {bad} has zero norm and cannot be normalized")
    return x / norms.unsqueeze(-1)


def _group_mean(features: Tensor, ids: Tensor, n_ids: int) -> Tensor:
    if features.ndim != 2 or ids.ndim != 1 or features.shape[0] != ids.shape[0]:
        raise ValueError("expected [M, width] features with matching [M] ids")
    if bool((ids < 0).any()) or bool((ids >= n_ids).any()):
        raise ValueError(f"ids must lie in [0, {n_ids})")
    present = torch.bincount(ids, minlength=n_ids)
    if bool((present == 0).any()):
        missing = int((present == 0).nonzero()[0])
        raise ValueError(f"identity {missing} has no features; every id in [0, C) needs one")
    sums = torch.zeros(n_ids, features.shape[1], dtype=features.dtype)
    sums.index_add_(0, ids, features)
    return sums / present.unsqueeze(1).to(features.dtype)


def init_global_bank(
    features: Tensor,
    ids: Tensor,
    n_ids: int,
    momentum: float = 0.2,
    temperature: float = 0.05,
) -> MemoryBank:
    """Bank of normalized per-identity means of global features."""
    means = _group_mean(features.detach(), ids, n_ids)
    return MemoryBank(_normalize_rows(means, "init_global_bank"), momentum, temperature)


def weighted_average_pool(patches: Tensor, labels: PatchLabels | Tensor) -> Tensor:
    """Label-weighted mean of patch features per part: [.., N, d].

    part_n = sum_ij labels[i,j,n] patches[i,j] / sum_ij labels[i,j,n];
    a part with zero label mass yields the zero vector.
    """
    w = labels.labels if isinstance(labels, PatchLabels) else labels
    if patches.shape[:-1] != w.shape[:-1]:
        raise ValueError(
            f"patch grid {tuple(patches.shape[:-1])} does not match label grid "
            f"{tuple(w.shape[:-1])}"
        )
    num = torch.einsum("...hwn,...hwd->...nd", w.to(patches.dtype), patches)
    mass = w.sum(dim=(-3, -2)).to(patches.dtype)
    return num / mass.unsqueeze(-1).clamp_min(torch.finfo(patches.dtype).tiny)


def init_local_bank(
    patches: Tensor,
    labels: PatchLabels | Tensor,
    ids: Tensor,
    n_ids: int,
    momentum: float = 0.2,
    temperature: float = 0.05,
) -> MemoryBank:
    """Bank over concatenated mask-pooled part features.

    `patches` is [M, gh, gw, d] with per-image labels; pooling by parts
    happens before grouping so the bank starts from the encoder's own
    frozen features rather than decoder output.
    """
    parts = weighted_average_pool(patches.detach(), labels)
    concat = parts.reshape(parts.shape[0], -1)
    means = _group_mean(concat, ids, n_ids)
    return MemoryBank(_normalize_rows(means, "init_local_bank"), momentum, temperature)


def update_bank(bank: MemoryBank, y: int | Tensor, feat: Tensor, m: float | None = None) -> None:
    """Momentum-blend one centroid toward a feature, then renormalize it.

    centroid[y] <- m * centroid[y] + (1 - m) * feat; every other row is
    untouched.  m defaults to the bank's own momentum.
    """
    y = int(y)
    if not 0 <= y < bank.n_ids:
        raise ValueError(f"identity {y} out of range [0, {bank.n_ids})")
    if feat.shape != (bank.width,):
        raise ValueError(f"feature width {tuple(feat.shape)} does not match bank ({bank.width},)")
    m = bank.momentum if m is None else m
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    with torch.no_grad():
        blended = m * bank.centroids[y] + (1.0 - m) * feat.detach().to(bank.centroids.dtype)
        norm = blended.norm()
        if norm == 0:
            raise ValueError(f"update left centroid {y} with zero norm")
        bank.centroids[y] = blended / norm


def pcl_loss(bank: MemoryBank, y: Tensor | int, feat: Tensor) -> Tensor:
    """Prototypical contrastive loss against the bank snapshot.

    -log softmax over identities of cos(centroid, feat)/tau, evaluated at
    the feature's own identity.  Accepts a single feature [width] or a
    batch [B, width] with matching ids; the bank is treated as constant.
    """
    if bank.temperature <= 0:
        raise ValueError("temperature must be positive")
    single = feat.ndim == 1
    feats = feat.unsqueeze(0) if single else feat
    ys = torch.as_tensor([y] if single else y, dtype=torch.long)
    if feats.shape[-1] != bank.width:
        raise ValueError("feature width does not match bank")
    if bool((ys < 0).any()) or bool((ys >= bank.n_ids).any()):
        raise ValueError(f"identity out of range [0, {bank.n_ids})")
    centroids = bank.centroids.detach().to(feats.dtype)
    sims = F.normalize(feats, dim=-1, eps=1e-12) @ centroids.T
    return F.cross_entropy(sims / bank.temperature, ys)
