"""Part-specific prompts with shared learnable prefix tokens.

Each of the N prompts is the same M trainable prefix embeddings followed
by the frozen tokens of one body-part name.  The frozen text encoder maps
them to an [N, d] matrix; gradients reach only the prefix.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import EncoderHandle, TokenSequence, tokenize


def build_part_prompts(
    part_names: Sequence[str],
    m_prefix: int,
    token_width: int,
    seed: int = 0,
) -> list[TokenSequence]:
    """Create N token sequences sharing one prefix tensor.

    The prefix is literally the same tensor object in every sequence, so
    an optimizer update to it moves all prompts at once.  Prefix values
    are drawn from N(0, 0.02^2) under the given seed.
    """
    _check_names(part_names)
    if m_prefix < 0:
        raise ValueError("m_prefix must be >= 0")
    gen = torch.Generator().manual_seed(seed)
    prefix = torch.randn(m_prefix, token_width, generator=gen) * 0.02
    return [TokenSequence(prefix, tokenize(name)) for name in part_names]


def _check_names(part_names: Sequence[str]) -> None:
    if len(part_names) == 0:
        raise ValueError("part_names must be non-empty")
    if len(set(part_names)) != len(part_names):
        raise ValueError(f"part names must be unique, got {list(part_names)}")


class PromptBank(nn.Module):
    """Owns the learnable prefix and produces prompt embeddings on demand.

    The prefix tokens are the only trainable parameters here.  Embeddings
    are re-encoded every call while training (the prefix moves each step)
    and cached in eval mode; switching back to train mode drops the cache.
    """

    def __init__(
        self,
        part_names: Sequence[str],
        m_prefix: int = 4,
        token_width: int = 768,
        seed: int = 0,
    ):
        super().__init__()
        _check_names(part_names)
        if m_prefix < 0:
            raise ValueError("m_prefix must be >= 0")
        self.part_names = list(part_names)
        gen = torch.Generator().manual_seed(seed)
        self.prefix = nn.Parameter(torch.randn(m_prefix, token_width, generator=gen) * 0.02)
        self.name_ids = [tokenize(name) for name in self.part_names]
        self._cached: Tensor | None = None

    @property
    def n_parts(self) -> int:
        return len(self.part_names)

    def train(self, mode: bool = True) -> "PromptBank":
        self._cached = None
        return super().train(mode)

    def sequences(self) -> list[TokenSequence]:
        return [TokenSequence(self.prefix, ids) for ids in self.name_ids]

    def forward(self, encoder: EncoderHandle) -> Tensor:
        if not self.training and self._cached is not None:
            return self._cached
        out = F.normalize(encoder.encode_text(self.sequences()), dim=-1)
        if not self.training:
            self._cached = out.detach()
            return self._cached
        return out


def prompt_embeddings(bank: PromptBank, encoder: EncoderHandle) -> Tensor:
    """[N, d] prompt matrix with unit-norm rows; grads reach only the prefix."""
    return bank(encoder)
