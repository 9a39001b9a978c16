"""Hybrid-attention decoder turning prompt embeddings into part features.

Per block, with E_pro the N prompt queries and E_pat the HW patch tokens:

  1. reverse cross-attention writes prompt information back into the
     patch tokens (patches are queries, prompts are keys/values);
  2. a spatial branch attends prompts over patches with only key/value
     projections, exposing its pre-softmax affinity for mask supervision;
  3. a semantic branch is standard multi-head cross-attention;
  4. the two branch outputs are summed, fused with the updated patch
     tokens by another cross-attention, and passed through a feed-forward
     network.

Blocks are wired pre-norm: layer normalization before each attention/FFN,
residual addition after, dropout on every sub-layer output.  The spatial
branch is single-head by default so its affinity matches the un-headed
formula it is supervised against.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .alignment import PatchLabels


@dataclass(frozen=True)
class DecoderConfig:
    d: int
    layers: int = 2
    heads: int = 8
    ffn_mult: int = 4
    dropout: float = 0.1
    spa_heads: int = 1

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ValueError("decoder needs at least one block")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % self.spa_heads != 0:
            raise ValueError(f"d={self.d} not divisible by spa_heads={self.spa_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class PartFeatures:
    """Decoder output: per-part rows and their row-major concatenation."""

    per_part: Tensor  # [N, d] or [B, N, d]

    def __post_init__(self) -> None:
        if self.per_part.ndim not in (2, 3):
            raise ValueError("part features must be [N, d] or [B, N, d]")
        if not torch.isfinite(self.per_part).all():
            raise ValueError("part features contain NaN or Inf")

    @property
    def n_parts(self) -> int:
        return self.per_part.shape[-2]

    @property
    def concat(self) -> Tensor:
        """[N*d] (or [B, N*d]): exactly the rows laid out back to back."""
        if self.per_part.ndim == 3:
            return self.per_part.reshape(self.per_part.shape[0], -1)
        return self.per_part.reshape(-1)


def _check_widths(a: Tensor, b: Tensor) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"width mismatch: {a.shape[-1]} vs {b.shape[-1]}")


class MultiheadCrossAttention(nn.Module):
    """Plain multi-head attention with q/k/v/out projections."""

    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d % heads != 0:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d // heads
        self.w_q = nn.Linear(d, d)
        self.w_k = nn.Linear(d, d)
        self.w_v = nn.Linear(d, d)
        self.w_o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.d_head).transpose(-3, -2)

    def forward(self, query: Tensor, memory: Tensor, return_weights: bool = False):
        _check_widths(query, memory)
        q = self._split(self.w_q(query))
        k = self._split(self.w_k(memory))
        v = self._split(self.w_v(memory))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        weights = F.softmax(logits, dim=-1)
        out = self.drop(weights) @ v
        out = out.transpose(-3, -2).reshape(*query.shape)
        out = self.w_o(out)
        if return_weights:
            return out, weights
        return out


def reverse_cross_attention(
    e_pat: Tensor, e_pro: Tensor, attn: MultiheadCrossAttention
) -> Tensor:
    """Patch tokens absorb prompt information: residual + MHA(E_pat, E_pro)."""
    _check_widths(e_pat, e_pro)
    return e_pat + attn(e_pat, e_pro)


def semantic_attention(
    e_pro: Tensor, e_pat: Tensor, attn: MultiheadCrossAttention
) -> Tensor:
    """Prompts as queries over patch tokens, standard MHA."""
    _check_widths(e_pro, e_pat)
    return attn(e_pro, e_pat)


class SpatialAttention(nn.Module):
    """Mask-supervised branch: no query projection, key/value projections only.

    forward returns (out, affinity) where affinity holds the pre-softmax
    logits E_pro (E_pat W_k)^T / sqrt(d_head) — head-averaged when more
    than one head is configured — so the attention loss and attention-map
    export can reuse them.
    """

    def __init__(self, d: int, heads: int = 1):
        super().__init__()
        if d % heads != 0:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d // heads
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.d_head).transpose(-3, -2)

    def forward(self, e_pro: Tensor, e_pat: Tensor) -> tuple[Tensor, Tensor]:
        _check_widths(e_pro, e_pat)
        k = self.w_k(e_pat)
        v = self.w_v(e_pat)
        if self.heads == 1:
            affinity = e_pro @ k.transpose(-2, -1) / math.sqrt(self.d_head)
            out = F.softmax(affinity, dim=-1) @ v
            return out, affinity
        qh, kh, vh = self._split(e_pro), self._split(k), self._split(v)
        logits = qh @ kh.transpose(-2, -1) / math.sqrt(self.d_head)
        out = F.softmax(logits, dim=-1) @ vh
        out = out.transpose(-3, -2).reshape(*e_pro.shape)
        return out, logits.mean(dim=-3)


def spatial_attention(
    e_pro: Tensor, e_pat: Tensor, spa: SpatialAttention
) -> tuple[Tensor, Tensor]:
    """Functional wrapper over SpatialAttention for symmetry with the other ops."""
    return spa(e_pro, e_pat)


def attention_loss(affinity: Tensor, patch_labels: PatchLabels | Tensor) -> Tensor:
    """Cross-entropy between softmaxed patch labels and softmaxed affinity.

    Both target and prediction are distributions over the HW patches, per
    part; the target is softmax(M_p^T) of the raw pooled labels.  The
    result is averaged over parts (and batch), minimized when prediction
    matches target.
    """
    target_logits = patch_labels.flat() if isinstance(patch_labels, PatchLabels) else patch_labels
    if affinity.shape != target_logits.shape:
        raise ValueError(
            f"affinity {tuple(affinity.shape)} does not match labels "
            f"{tuple(target_logits.shape)}"
        )
    target = F.softmax(target_logits.to(affinity.dtype), dim=-1)
    logp = F.log_softmax(affinity, dim=-1)
    return -(target * logp).sum(dim=-1).mean()


def diversity_loss(part_features: PartFeatures | Tensor) -> Tensor:
    """Mean absolute pairwise cosine over part rows, normalizer N(N-1).

    Ranges over [0, 0.5]; zero-norm rows contribute zero cosine (with a
    warning) and N < 2 returns 0.
    """
    f = part_features.per_part if isinstance(part_features, PartFeatures) else part_features
    n = f.shape[-2]
    if n < 2:
        warnings.warn("diversity_loss needs at least two parts, returning 0", stacklevel=2)
        return f.sum() * 0.0
    norms = f.norm(dim=-1, keepdim=True)
    if bool((norms.squeeze(-1) == 0).any()):
        warnings.warn("diversity_loss: zero-norm part feature, treating cosine as 0", stacklevel=2)
    unit = f / norms.clamp_min(torch.finfo(f.dtype).tiny)
    gram = unit @ unit.transpose(-2, -1)
    mask = torch.triu(torch.ones(n, n, dtype=torch.bool, device=f.device), diagonal=1)
    pair_sum = gram.abs().masked_select(
        mask if gram.ndim == 2 else mask.expand_as(gram)
    ).reshape(*gram.shape[:-2], -1).sum(dim=-1)
    return (pair_sum / (n * (n - 1))).mean()


class FeedForward(nn.Module):
    """d -> ffn_mult*d -> d with GELU and dropout in between."""

    def __init__(self, d: int, mult: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d, mult * d),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(mult * d, d),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class HybridBlock(nn.Module):
    """One decoder block; see the module docstring for the wiring."""

    def __init__(self, cfg: DecoderConfig, use_spa: bool = True, use_sea: bool = True):
        super().__init__()
        if not (use_spa or use_sea):
            raise ValueError("hybrid block needs at least one attention branch")
        self.use_spa = use_spa
        self.use_sea = use_sea
        self.ln_pat = nn.LayerNorm(cfg.d)
        self.rca = MultiheadCrossAttention(cfg.d, cfg.heads, cfg.dropout)
        self.ln_hybrid = nn.LayerNorm(cfg.d)
        self.spa = SpatialAttention(cfg.d, cfg.spa_heads) if use_spa else None
        self.sea = MultiheadCrossAttention(cfg.d, cfg.heads, cfg.dropout) if use_sea else None
        self.ln_fuse = nn.LayerNorm(cfg.d)
        self.fuse = MultiheadCrossAttention(cfg.d, cfg.heads, cfg.dropout)
        self.ln_ffn = nn.LayerNorm(cfg.d)
        self.ffn = FeedForward(cfg.d, cfg.ffn_mult, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, e_pro: Tensor, e_pat: Tensor) -> tuple[Tensor, Tensor, Tensor | None]:
        e_pat_new = e_pat + self.drop(self.rca(self.ln_pat(e_pat), e_pro))
        q = self.ln_hybrid(e_pro)
        affinity = None
        branch_sum: Tensor | None = None
        if self.spa is not None:
            spa_out, affinity = self.spa(q, e_pat)
            branch_sum = spa_out
        if self.sea is not None:
            sea_out = self.sea(q, e_pat)
            branch_sum = sea_out if branch_sum is None else branch_sum + sea_out
        y = e_pro + self.drop(branch_sum)
        y = y + self.drop(self.fuse(self.ln_fuse(y), e_pat_new))
        y = y + self.drop(self.ffn(self.ln_ffn(y)))
        return y, e_pat_new, affinity


class HybridDecoder(nn.Module):
    """Stack of hybrid blocks; exposes per-block affinities."""

    def __init__(self, cfg: DecoderConfig, use_spa: bool = True, use_sea: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_spa = use_spa
        self.use_sea = use_sea
        self.blocks = nn.ModuleList(
            HybridBlock(cfg, use_spa, use_sea) for _ in range(cfg.layers)
        )

    def forward(self, e_pro: Tensor, e_pat: Tensor) -> tuple[PartFeatures, list[Tensor]]:
        affinities: list[Tensor] = []
        for block in self.blocks:
            e_pro, e_pat, affinity = block(e_pro, e_pat)
            if affinity is not None:
                affinities.append(affinity)
        return PartFeatures(e_pro), affinities


def hybrid_decode(
    decoder: HybridDecoder,
    e_pro: Tensor,
    e_pat: Tensor,
    patch_labels: PatchLabels | None = None,
) -> tuple[PartFeatures, list[Tensor], list[Tensor]]:
    """Run the decoder; also per-block attention losses when labels are given."""
    parts, affinities = decoder(e_pro, e_pat)
    attn_losses: list[Tensor] = []
    if patch_labels is not None:
        flat = patch_labels.flat()
        attn_losses = [attention_loss(a, flat) for a in affinities]
    return parts, attn_losses, affinities
