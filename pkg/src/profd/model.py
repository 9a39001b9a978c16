"""Full model: encoder, prompt bank, hybrid decoder, visibility, classifiers.

With both attention branches disabled the decoder is bypassed entirely
and part features fall back to mask-weighted average pooling of the
feature map (the no-attention baseline), which then requires masks at
inference time too.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .alignment import PatchLabels, pool_mask, score_map
from .config import TrainConfig
from .core import Dims, EncoderHandle, FeatureMap, make_encoder
from .decoder import DecoderConfig, HybridDecoder, PartFeatures, attention_loss
from .memory import weighted_average_pool
from .prompts import PromptBank
from .visibility import VisibilityHead


@dataclass
class ModelOutput:
    feature_map: FeatureMap
    global_feats: Tensor  # [B, d]
    prompt_embeds: Tensor  # [N, d]
    scores: Tensor  # [B, gh, gw, N]
    parts: PartFeatures  # [B, N, d]
    visibility: Tensor  # [B, N]
    logits_global: Tensor | None  # [B, C]
    logits_parts: Tensor | None  # [B, C]
    affinities: list[Tensor]  # per decoder block, [B, N, HW]


class ProFDModel(nn.Module):
    """Prompt-guided part disentangling model over a pluggable encoder."""

    def __init__(
        self,
        cfg: TrainConfig,
        n_classes: int,
        encoder: EncoderHandle | None = None,
    ):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.n_classes = n_classes
        self.dims: Dims = cfg.dims(n_classes)
        self.encoder = encoder if encoder is not None else make_encoder(
            self.dims, kind=cfg.encoder, seed=cfg.seed, d_native=cfg.d_native
        )
        self.prompts = PromptBank(
            cfg.parts, m_prefix=cfg.m_prefix, token_width=self.encoder.token_width, seed=cfg.seed
        )
        self.use_decoder = cfg.use_spa or cfg.use_sea
        if self.use_decoder:
            dec_cfg = DecoderConfig(
                d=cfg.d,
                layers=cfg.decoder_layers,
                heads=cfg.decoder_heads,
                ffn_mult=cfg.ffn_mult,
                dropout=cfg.dropout,
                spa_heads=cfg.spa_heads,
            )
            self.decoder = HybridDecoder(dec_cfg, use_spa=cfg.use_spa, use_sea=cfg.use_sea)
        else:
            self.decoder = None
        self.visibility_head = VisibilityHead(cfg.n_parts, cfg.d)
        self.classifier_global = nn.Linear(cfg.d, n_classes)
        self.classifier_parts = nn.Linear(cfg.n_parts * cfg.d, n_classes)

    @property
    def needs_masks_at_inference(self) -> bool:
        return not self.use_decoder

    def pool_labels(self, masks: Tensor) -> PatchLabels:
        return pool_mask(masks, self.dims)

    def forward(
        self,
        images: Tensor,
        patch_labels: PatchLabels | None = None,
        classify: bool = True,
    ) -> ModelOutput:
        if images.ndim == 3:
            images = images.unsqueeze(0)
        fmap = self.encoder.encode_image(images)
        e_pro = self.prompts(self.encoder)
        scores = score_map(fmap, e_pro)
        tokens = fmap.tokens()
        if self.decoder is not None:
            batch_pro = e_pro.unsqueeze(0).expand(tokens.shape[0], -1, -1)
            parts, affinities = self.decoder(batch_pro, tokens)
        else:
            if patch_labels is None:
                raise ValueError(
                    "no attention branches are enabled; the pooling baseline needs masks"
                )
            parts = PartFeatures(weighted_average_pool(fmap.patches, patch_labels))
            affinities = []
        visibility = self.visibility_head(parts)
        logits_global = self.classifier_global(fmap.global_vec) if classify else None
        logits_parts = self.classifier_parts(parts.concat) if classify else None
        return ModelOutput(
            feature_map=fmap,
            global_feats=fmap.global_vec,
            prompt_embeds=e_pro,
            scores=scores,
            parts=parts,
            visibility=visibility,
            logits_global=logits_global,
            logits_parts=logits_parts,
            affinities=affinities,
        )

    def attention_term(self, affinities: list[Tensor], patch_labels: PatchLabels) -> Tensor:
        """Attention loss over the configured subset of decoder blocks."""
        if not affinities:
            raise ValueError("no affinities available (spatial branch disabled?)")
        mode = self.cfg.attn_loss_blocks
        flat = patch_labels.flat()
        if mode == "first":
            picked = [affinities[0]]
        elif mode == "last":
            picked = [affinities[-1]]
        else:
            picked = affinities
        losses = [attention_loss(a, flat) for a in picked]
        return torch.stack(losses).mean()
