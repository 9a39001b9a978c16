"""Training configuration: defaults, flat-key config files, hashing.

Config files are YAML with flat dotted keys, e.g.

    seed: 7
    dims.d: 64
    parts: [head, torso, legs]
    optimizer.lr: 3.0e-4
    ablation.spa: false

Unknown keys are rejected.  The environment variable PROFD_SEED, when
set, overrides the seed from the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .core import DEFAULT_PART_NAMES, Dims

_WEIGHT_KEYS = ("id_g", "tri_g", "id_c", "tri_c", "div", "pcl_p", "pcl_g", "align", "attn", "vis")


@dataclass
class TrainConfig:
    # geometry / encoder
    img_h: int = 256
    img_w: int = 128
    patch: int = 16
    stride: int | None = None
    d: int = 512
    d_native: int = 768
    encoder: str = "stub"
    # prompts
    parts: tuple[str, ...] = DEFAULT_PART_NAMES
    m_prefix: int = 4
    # decoder
    decoder_layers: int = 2
    decoder_heads: int = 8
    ffn_mult: int = 4
    dropout: float = 0.1
    spa_heads: int = 1
    attn_loss_blocks: str = "first"  # first | all | last
    # optimizer / schedule
    lr: float = 5e-5
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (30, 50)
    gamma: float = 0.1
    epochs: int = 120
    # batching
    batch_p: int = 16
    batch_k: int = 4
    iters_per_epoch: int | None = None  # None: walk each image ~once per epoch
    # loss hyper-parameters
    weights: dict[str, float] = field(default_factory=dict)
    focal_alpha: float = 0.65
    focal_gamma: float = 2.0
    pcl_tau: float = 0.05
    momentum_global: float = 0.2
    momentum_local: float = 0.2
    triplet_margin: float = 0.3
    label_smoothing: float = 0.1
    hard_align_targets: bool = False
    vis_threshold: float = 0.5
    # ablation switches
    use_spa: bool = True
    use_sea: bool = True
    use_global_mem: bool = True
    use_local_mem: bool = True
    use_align: bool = True
    use_div: bool = True
    # misc
    augment: bool = True
    binarize_visibility: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        self.parts = tuple(self.parts)
        self.milestones = tuple(self.milestones)
        if self.attn_loss_blocks not in ("first", "all", "last"):
            raise ValueError("attn_loss_blocks must be first|all|last")
        unknown = set(self.weights) - set(_WEIGHT_KEYS)
        if unknown:
            raise ValueError(f"unknown loss-weight keys: {sorted(unknown)}")

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    def dims(self, n_ids: int = 1) -> Dims:
        return Dims(
            img_h=self.img_h,
            img_w=self.img_w,
            patch=self.patch,
            d=self.d,
            n_parts=self.n_parts,
            n_ids=max(1, n_ids),
            stride=self.stride,
        )

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs)


_FLAT_KEYS = {
    "dims.img_h": "img_h",
    "dims.img_w": "img_w",
    "dims.patch": "patch",
    "dims.stride": "stride",
    "dims.d": "d",
    "dims.d_native": "d_native",
    "encoder": "encoder",
    "parts": "parts",
    "prompt.m_prefix": "m_prefix",
    "decoder.layers": "decoder_layers",
    "decoder.heads": "decoder_heads",
    "decoder.ffn_mult": "ffn_mult",
    "decoder.dropout": "dropout",
    "decoder.spa_heads": "spa_heads",
    "attn_loss.blocks": "attn_loss_blocks",
    "optimizer.lr": "lr",
    "optimizer.weight_decay": "weight_decay",
    "schedule.milestones": "milestones",
    "schedule.gamma": "gamma",
    "schedule.epochs": "epochs",
    "batch.p": "batch_p",
    "batch.k": "batch_k",
    "batch.iters_per_epoch": "iters_per_epoch",
    "losses.focal_alpha": "focal_alpha",
    "losses.focal_gamma": "focal_gamma",
    "losses.pcl_tau": "pcl_tau",
    "losses.momentum_global": "momentum_global",
    "losses.momentum_local": "momentum_local",
    "losses.triplet_margin": "triplet_margin",
    "losses.label_smoothing": "label_smoothing",
    "losses.hard_align_targets": "hard_align_targets",
    "losses.vis_threshold": "vis_threshold",
    "ablation.spa": "use_spa",
    "ablation.sea": "use_sea",
    "ablation.global_mem": "use_global_mem",
    "ablation.local_mem": "use_local_mem",
    "ablation.align": "use_align",
    "ablation.div": "use_div",
    "augment": "augment",
    "eval.binarize_visibility": "binarize_visibility",
    "seed": "seed",
}
_WEIGHT_PREFIX = "losses.weights."


def config_from_flat(flat: dict) -> TrainConfig:
    kwargs: dict = {}
    weights: dict[str, float] = {}
    for key, value in flat.items():
        if key.startswith(_WEIGHT_PREFIX):
            weights[key[len(_WEIGHT_PREFIX) :]] = float(value)
        elif key in _FLAT_KEYS:
            kwargs[_FLAT_KEYS[key]] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    if weights:
        kwargs["weights"] = weights
    return TrainConfig(**kwargs)


def config_to_flat(cfg: TrainConfig) -> dict:
    inverse = {attr: key for key, attr in _FLAT_KEYS.items()}
    flat: dict = {}
    for f in dataclasses.fields(cfg):
        if f.name == "weights":
            for name, value in sorted(cfg.weights.items()):
                flat[_WEIGHT_PREFIX + name] = value
            continue
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = list(value)
        flat[inverse[f.name]] = value
    return flat


def load_config(path: str | Path) -> TrainConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a flat mapping")
    cfg = config_from_flat(raw)
    env_seed = os.environ.get("PROFD_SEED")
    if env_seed is not None:
        cfg = cfg.replace(seed=int(env_seed))
    return cfg


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_flat(cfg), sort_keys=True))


def config_hash(cfg: TrainConfig) -> str:
    flat = config_to_flat(cfg)
    canonical = "\n".join(f"{k}={flat[k]!r}" for k in sorted(flat))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
