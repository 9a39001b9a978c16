"""Shared dimension contracts and the pluggable image/text encoder pair.

The encoder interface hides whether features come from a real pretrained
vision-language backbone or from a small deterministic stub.  Everything
downstream (prompts, decoder, losses, retrieval) only sees `FeatureMap`
and prompt embedding matrices, so desk-scale tests run without any
pretrained weights.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

TOKEN_VOCAB_SIZE = 4096
DEFAULT_CONTEXT_WINDOW = 77
DEFAULT_PART_NAMES = (
    "head",
    "upper arms and torso",
    "lower arms and torso",
    "legs",
    "feet",
)


class EncoderFailure(RuntimeError):
    """Raised when an encoder produces non-finite output."""


@dataclass(frozen=True)
class Dims:
    """Global shape contract: image geometry, patch grid, widths, counts.

    `stride` enables the overlapping-patch variant; when None, patches are
    non-overlapping and the stride equals the patch size.
    """

    img_h: int = 256
    img_w: int = 128
    patch: int = 16
    d: int = 512
    n_parts: int = 5
    n_ids: int = 1
    stride: int | None = None

    def __post_init__(self) -> None:
        if self.img_h <= 0 or self.img_w <= 0 or self.patch <= 0:
            raise ValueError("image and patch sizes must be positive")
        if self.img_h % self.patch != 0 or self.img_w % self.patch != 0:
            raise ValueError(
                f"patch size {self.patch} must divide image size "
                f"{self.img_h}x{self.img_w} exactly"
            )
        if self.d < 1 or self.n_parts < 1 or self.n_ids < 1:
            raise ValueError("d, n_parts and n_ids must all be >= 1")
        s = self.stride
        if s is not None and not (0 < s <= self.patch):
            raise ValueError(f"stride must be in (0, patch={self.patch}], got {s}")

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride is not None else self.patch

    @property
    def grid_h(self) -> int:
        return (self.img_h - self.patch) // self.effective_stride + 1

    @property
    def grid_w(self) -> int:
        return (self.img_w - self.patch) // self.effective_stride + 1

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class FeatureMap:
    """Spatial grid of patch embeddings plus one global vector.

    `patches` is [grid_h, grid_w, d] or [B, grid_h, grid_w, d];
    `global_vec` is [d] or [B, d] accordingly.
    """

    patches: Tensor
    global_vec: Tensor

    def __post_init__(self) -> None:
        if self.patches.ndim not in (3, 4):
            raise ValueError(f"patches must be 3- or 4-d, got {self.patches.ndim}-d")
        expected = self.patches.ndim - 2
        if self.global_vec.ndim != expected:
            raise ValueError("global_vec batch rank inconsistent with patches")
        if self.patches.shape[-1] != self.global_vec.shape[-1]:
            raise ValueError("patch and global widths differ")
        if not torch.isfinite(self.patches).all() or not torch.isfinite(self.global_vec).all():
            raise EncoderFailure("feature map contains NaN or Inf entries")

    @property
    def batched(self) -> bool:
        return self.patches.ndim == 4

    @property
    def width(self) -> int:
        return self.patches.shape[-1]

    def tokens(self) -> Tensor:
        """Patch grid flattened row-major to [HW, d] (or [B, HW, d])."""
        if self.batched:
            b = self.patches.shape[0]
            return self.patches.reshape(b, -1, self.width)
        return self.patches.reshape(-1, self.width)


@dataclass
class TokenSequence:
    """One prompt: shared learnable prefix embeddings followed by name tokens.

    `prefix` is an [M, token_width] tensor aliased across all sequences of a
    prompt bank (it may require grad); `name_ids` indexes the encoder's
    frozen vocabulary table.
    """

    prefix: Tensor
    name_ids: Tensor

    def __len__(self) -> int:
        return self.prefix.shape[0] + self.name_ids.shape[0]


def tokenize(text: str, vocab_size: int = TOKEN_VOCAB_SIZE) -> Tensor:
    """Deterministic word-level tokenizer: stable hash of each word.

    Uses sha1 rather than builtin hash() so ids are identical across
    processes and runs.
    """
    words = text.lower().split()
    if not words:
        raise ValueError("cannot tokenize empty text")
    ids = [
        int.from_bytes(hashlib.sha1(w.encode("utf-8")).digest()[:8], "little") % vocab_size
        for w in words
    ]
    return torch.tensor(ids, dtype=torch.long)


class EncoderHandle(nn.Module):
    """Interface both encoder kinds implement.

    Contract:
      * `encode_image` maps an [img_h, img_w, 3] image (or a batch) in
        [0, 1] to a FeatureMap with `dims.n_patches` tokens of width
        `dims.d` plus one global vector.
      * `encode_text` maps token sequences to an [N, d] matrix.  The text
        branch is frozen: its parameters never change across training
        steps, and gradients flow only into the sequences' prefix tokens.
      * When `normalized_output` is True, every patch token, the global
        vector and every text row have unit L2 norm.
    """

    kind: str = "stub"
    normalized_output: bool = True

    def __init__(self, dims: Dims, context_window: int = DEFAULT_CONTEXT_WINDOW):
        super().__init__()
        self.dims = dims
        self.context_window = context_window

    @property
    def token_width(self) -> int:
        raise NotImplementedError

    def encode_image(self, image: Tensor) -> FeatureMap:
        raise NotImplementedError

    def encode_text(self, sequences: Sequence[TokenSequence]) -> Tensor:
        raise NotImplementedError

    def _check_image(self, image: Tensor) -> Tensor:
        if image.ndim == 3:
            image = image.unsqueeze(0)
        if image.ndim != 4 or image.shape[1:] != (self.dims.img_h, self.dims.img_w, 3):
            raise ValueError(
                f"expected image of shape [{self.dims.img_h}, {self.dims.img_w}, 3] "
                f"(optionally batched), got {tuple(image.shape)}"
            )
        if image.min() < 0 or image.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        return image

    def _check_sequences(self, sequences: Sequence[TokenSequence]) -> None:
        if len(sequences) == 0:
            raise ValueError("encode_text requires at least one token sequence")
        for i, seq in enumerate(sequences):
            if len(seq) > self.context_window:
                raise ValueError(
                    f"sequence {i} has {len(seq)} tokens, exceeds context "
                    f"window {self.context_window}"
                )
            if seq.prefix.numel() and seq.prefix.shape[-1] != self.token_width:
                raise ValueError("prefix token width does not match encoder")


class StubEncoder(EncoderHandle):
    """Deterministic drop-in for a pretrained vision-language backbone.

    The image branch is a fixed random linear map over (possibly
    overlapping) patches; the global vector is the projection of the
    mean patch feature.  Only the visual projection `proj` is trainable,
    mirroring a fine-tuned backbone.  The text branch (vocabulary table,
    mixing map and its own projection) is entirely frozen buffers.
    """

    kind = "stub"

    def __init__(
        self,
        dims: Dims,
        seed: int = 0,
        d_native: int = 768,
        vocab_size: int = TOKEN_VOCAB_SIZE,
        context_window: int = DEFAULT_CONTEXT_WINDOW,
    ):
        super().__init__(dims, context_window)
        self.seed = seed
        self.d_native = d_native
        gen = torch.Generator().manual_seed(seed)
        patch_dim = dims.patch * dims.patch * 3
        # Column-centered so a uniform pixel shift maps to zero, like the
        # input standardization a real backbone applies; otherwise every
        # feature shares one dominant direction and cosines degenerate.
        patch_map = torch.randn(patch_dim, d_native, generator=gen) / patch_dim**0.5
        self.register_buffer("patch_map", patch_map - patch_map.mean(dim=0, keepdim=True))
        # Trainable visual projection d_native -> d, seeded independently of
        # the global RNG so construction is reproducible.
        self.proj = nn.Linear(d_native, dims.d, bias=False)
        with torch.no_grad():
            self.proj.weight.copy_(
                torch.randn(dims.d, d_native, generator=gen) / d_native**0.5
            )
        self.register_buffer(
            "token_table", torch.randn(vocab_size, d_native, generator=gen) * 0.02
        )
        self.register_buffer(
            "text_map", torch.randn(d_native, d_native, generator=gen) / d_native**0.5
        )
        self.register_buffer(
            "text_proj", torch.randn(d_native, dims.d, generator=gen) / d_native**0.5
        )

    @property
    def token_width(self) -> int:
        return self.d_native

    def encode_image(self, image: Tensor) -> FeatureMap:
        squeeze = image.ndim == 3
        image = self._check_image(image)
        image = image.to(self.patch_map.dtype)
        x = image.permute(0, 3, 1, 2)  # [B, 3, H, W]
        blocks = F.unfold(x, kernel_size=self.dims.patch, stride=self.dims.effective_stride)
        blocks = blocks.transpose(1, 2)  # [B, HW, patch*patch*3]
        native = blocks @ self.patch_map
        tokens = F.normalize(self.proj(native), dim=-1)
        global_vec = F.normalize(self.proj(native.mean(dim=1)), dim=-1)
        if not torch.isfinite(tokens).all() or not torch.isfinite(global_vec).all():
            raise EncoderFailure("stub encoder produced non-finite features")
        patches = tokens.reshape(-1, self.dims.grid_h, self.dims.grid_w, self.dims.d)
        if squeeze:
            return FeatureMap(patches[0], global_vec[0])
        return FeatureMap(patches, global_vec)

    # Shared prefix tokens enter pooling with a reduced weight; with plain
    # mean pooling the common prefix dominates every sequence and all text
    # rows collapse onto one direction.
    PREFIX_POOL_WEIGHT = 0.3

    def encode_text(self, sequences: Sequence[TokenSequence]) -> Tensor:
        self._check_sequences(sequences)
        rows = []
        for seq in sequences:
            name_emb = self.token_table[seq.name_ids.to(self.token_table.device)]
            pooled = name_emb.mean(dim=0)
            if seq.prefix.shape[0] > 0:
                pooled = pooled + self.PREFIX_POOL_WEIGHT * seq.prefix.to(name_emb.dtype).mean(dim=0)
            rows.append((pooled @ self.text_map) @ self.text_proj)
        out = F.normalize(torch.stack(rows, dim=0), dim=-1)
        if not torch.isfinite(out).all():
            raise EncoderFailure("stub encoder produced non-finite text embeddings")
        return out


class PretrainedVLEncoder(EncoderHandle):
    """Adapter that puts a real vision-language backbone behind the interface.

    The caller supplies `image_fn(image) -> (patch tokens [B, HW, d_native],
    global [B, d_native])` and `text_fn(token embeddings [L, d_native]) ->
    [d_native]`; this class owns the projection to width d and the output
    normalization.  Loading actual pretrained weights is out of scope here.
    """

    kind = "pretrained-vl"

    def __init__(
        self,
        dims: Dims,
        image_fn: Callable[[Tensor], tuple[Tensor, Tensor]],
        text_fn: Callable[[Tensor], Tensor],
        token_table: Tensor,
        d_native: int,
        context_window: int = DEFAULT_CONTEXT_WINDOW,
    ):
        super().__init__(dims, context_window)
        self.image_fn = image_fn
        self.text_fn = text_fn
        self.d_native = d_native
        self.register_buffer("token_table", token_table)
        self.proj = nn.Linear(d_native, dims.d, bias=False)
        self.register_buffer(
            "text_proj_weight", torch.eye(d_native, dims.d)
        )

    @property
    def token_width(self) -> int:
        return self.d_native

    def encode_image(self, image: Tensor) -> FeatureMap:
        squeeze = image.ndim == 3
        image = self._check_image(image)
        tokens_native, global_native = self.image_fn(image)
        if tokens_native.shape[1] != self.dims.n_patches:
            raise ValueError(
                f"backbone produced {tokens_native.shape[1]} tokens, dims expect "
                f"{self.dims.n_patches}"
            )
        tokens = F.normalize(self.proj(tokens_native), dim=-1)
        global_vec = F.normalize(self.proj(global_native), dim=-1)
        if not torch.isfinite(tokens).all() or not torch.isfinite(global_vec).all():
            raise EncoderFailure("backbone produced non-finite features")
        patches = tokens.reshape(-1, self.dims.grid_h, self.dims.grid_w, self.dims.d)
        if squeeze:
            return FeatureMap(patches[0], global_vec[0])
        return FeatureMap(patches, global_vec)

    def encode_text(self, sequences: Sequence[TokenSequence]) -> Tensor:
        self._check_sequences(sequences)
        rows = []
        for seq in sequences:
            name_emb = self.token_table[seq.name_ids.to(self.token_table.device)]
            emb = torch.cat([seq.prefix.to(name_emb.dtype), name_emb], dim=0)
            rows.append(self.text_fn(emb) @ self.text_proj_weight)
        return F.normalize(torch.stack(rows, dim=0), dim=-1)


def make_encoder(dims: Dims, kind: str = "stub", seed: int = 0, d_native: int = 768) -> EncoderHandle:
    """Factory for the encoder kinds named in configs."""
    if kind == "stub":
        return StubEncoder(dims, seed=seed, d_native=d_native)
    if kind == "pretrained-vl":
        raise NotImplementedError(
            "no pretrained backbone is bundled; wrap yours with PretrainedVLEncoder"
        )
    raise ValueError(f"unknown encoder kind {kind!r}")
