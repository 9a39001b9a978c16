"""Training loop, checkpointing, evaluation and the ablation harness.

One step runs: encode -> prompts -> alignment loss -> hybrid decode
(+ attention and diversity losses) -> visibility loss -> identity and
triplet losses on global and concatenated part features -> contrastive
losses against both banks -> weighted sum -> optimizer step -> momentum
bank updates (one image at a time, in batch order).
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .alignment import alignment_loss
from .config import TrainConfig, config_from_flat, config_hash, config_to_flat
from .data import DatasetSplits, PKSampler, Sample, _rng, augment_batch
from .decoder import diversity_loss
from .evaluation import EmbeddingSet, MetricsReport, cmc_map, distance_matrix, write_embeddings
from .losses import LossReport, id_loss, total_loss, triplet_loss
from .memory import MemoryBank, init_global_bank, init_local_bank, pcl_loss, update_bank
from .model import ModelOutput, ProFDModel
from .visibility import focal_loss, visibility_targets


def lr_for_epoch(base: float, milestones: Sequence[int], gamma: float, epoch: int) -> float:
    """Step schedule: multiply by gamma at each milestone epoch."""
    return base * gamma ** bisect_right(sorted(milestones), epoch)


@dataclass
class TrainResult:
    model: ProFDModel
    global_bank: MemoryBank
    local_bank: MemoryBank
    id_map: dict[int, int]
    log: list[dict]
    checkpoint_path: Path | None = None


def _check_mask_requirements(cfg: TrainConfig, dataset: DatasetSplits) -> None:
    if dataset.has_masks:
        return
    reasons = []
    if cfg.use_align:
        reasons.append("alignment loss (ablation.align)")
    if cfg.use_spa:
        reasons.append("mask-supervised attention (ablation.spa)")
    if cfg.use_local_mem:
        reasons.append("local memory bank init (ablation.local_mem)")
    if not (cfg.use_spa or cfg.use_sea):
        reasons.append("pooling baseline part features")
    if cfg.weights.get("vis", 1.0) != 0.0:
        reasons.append("visibility loss (set losses.weights.vis: 0 to run without)")
    if reasons:
        raise ValueError(
            "dataset has no masks but the configuration needs them for: " + "; ".join(reasons)
        )


def _to_batch(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray | None]:
    images = np.stack([s.image for s in samples])
    if any(s.mask is None for s in samples):
        return images, None
    masks = np.stack([s.mask for s in samples])
    return images, masks


def init_banks(
    model: ProFDModel,
    train_samples: Sequence[Sample],
    id_map: dict[int, int],
    cfg: TrainConfig,
    chunk: int = 32,
) -> tuple[MemoryBank, MemoryBank]:
    """Both banks from the encoder's current (initial) frozen-state features."""
    model.eval()
    globals_, patch_feats, label_list = [], [], []
    with torch.no_grad():
        for start in range(0, len(train_samples), chunk):
            part = train_samples[start : start + chunk]
            images, masks = _to_batch(part)
            fmap = model.encoder.encode_image(torch.from_numpy(images))
            globals_.append(fmap.global_vec)
            if masks is not None:
                patch_feats.append(fmap.patches)
                label_list.append(model.pool_labels(torch.from_numpy(masks)).labels)
    ids = torch.tensor([id_map[s.id] for s in train_samples], dtype=torch.long)
    n_ids = len(id_map)
    g_feats = torch.cat(globals_)
    global_bank = init_global_bank(
        g_feats, ids, n_ids, momentum=cfg.momentum_global, temperature=cfg.pcl_tau
    )
    if patch_feats:
        from .alignment import PatchLabels

        local_bank = init_local_bank(
            torch.cat(patch_feats),
            PatchLabels(torch.cat(label_list)),
            ids,
            n_ids,
            momentum=cfg.momentum_local,
            temperature=cfg.pcl_tau,
        )
    else:
        # no masks: start the local bank from tiled global centroids
        tiled = global_bank.centroids.repeat(1, model.cfg.n_parts)
        local_bank = MemoryBank(
            torch.nn.functional.normalize(tiled, dim=-1),
            cfg.momentum_local,
            cfg.pcl_tau,
        )
    model.train()
    return global_bank, local_bank


def _step_losses(
    cfg: TrainConfig,
    model: ProFDModel,
    out: ModelOutput,
    labels,
    masks: torch.Tensor | None,
    y: torch.Tensor,
    global_bank: MemoryBank,
    local_bank: MemoryBank,
) -> LossReport:
    zero = torch.zeros(())
    terms = {
        "id_g": id_loss(out.logits_global, y, cfg.label_smoothing),
        "tri_g": triplet_loss(out.global_feats, y, cfg.triplet_margin),
        "id_c": id_loss(out.logits_parts, y, cfg.label_smoothing),
        "tri_c": triplet_loss(out.parts.concat, y, cfg.triplet_margin),
        "div": diversity_loss(out.parts) if cfg.use_div else zero,
        "pcl_g": pcl_loss(global_bank, y, out.global_feats) if cfg.use_global_mem else zero,
        "pcl_p": pcl_loss(local_bank, y, out.parts.concat) if cfg.use_local_mem else zero,
        "align": (
            alignment_loss(out.scores, labels, cfg.hard_align_targets)
            if cfg.use_align and labels is not None
            else zero
        ),
        "attn": (
            model.attention_term(out.affinities, labels)
            if cfg.use_spa and labels is not None and out.affinities
            else zero
        ),
        "vis": (
            focal_loss(
                out.visibility,
                visibility_targets(masks, cfg.vis_threshold),
                cfg.focal_alpha,
                cfg.focal_gamma,
            )
            if masks is not None and cfg.weights.get("vis", 1.0) != 0.0
            else zero
        ),
    }
    return total_loss(terms, cfg.weights)


def train_model(
    cfg: TrainConfig, dataset: DatasetSplits, out_dir: str | Path | None = None
) -> TrainResult:
    """Run the full loop; deterministic for a fixed config and seed."""
    _check_mask_requirements(cfg, dataset)
    torch.manual_seed(cfg.seed)
    id_map = {identity: index for index, identity in enumerate(dataset.train_ids)}
    model = ProFDModel(cfg, n_classes=len(id_map))
    global_bank, local_bank = init_banks(model, dataset.train, id_map, cfg)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    sampler = PKSampler([s.id for s in dataset.train], cfg.batch_p, cfg.batch_k, cfg.seed)

    log: list[dict] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        lr = lr_for_epoch(cfg.lr, cfg.milestones, cfg.gamma, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        aug_rng = _rng(cfg.seed, 424243, epoch)
        for batch_idx in sampler.batches(epoch, iters=cfg.iters_per_epoch):
            batch = [dataset.train[i] for i in batch_idx]
            images, masks = _to_batch(batch)
            if cfg.augment:
                images, masks = augment_batch(images, masks, aug_rng)
            image_t = torch.from_numpy(np.ascontiguousarray(images))
            mask_t = torch.from_numpy(np.ascontiguousarray(masks)) if masks is not None else None
            labels = model.pool_labels(mask_t) if mask_t is not None else None
            y = torch.tensor([id_map[s.id] for s in batch], dtype=torch.long)

            out = model(image_t, patch_labels=labels, classify=True)
            report = _step_losses(cfg, model, out, labels, mask_t, y, global_bank, local_bank)
            optimizer.zero_grad()
            report.total.backward()
            optimizer.step()

            with torch.no_grad():
                for i in range(len(batch)):
                    update_bank(global_bank, int(y[i]), out.global_feats[i])
                    update_bank(local_bank, int(y[i]), out.parts.concat[i])

            record = {"epoch": epoch, "step": step, "lr": lr}
            record.update(report.scalars())
            log.append(record)
            step += 1

    result = TrainResult(model, global_bank, local_bank, id_map, log)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out_dir / "checkpoint.pt"
        save_checkpoint(result, cfg, result.checkpoint_path)
        with open(out_dir / "train_log.jsonl", "w") as f:
            for record in log:
                f.write(json.dumps(record) + "\n")
    return result


def save_checkpoint(result: TrainResult, cfg: TrainConfig, path: str | Path) -> None:
    torch.save(
        {
            "model": result.model.state_dict(),
            "global_bank": result.global_bank.state_dict(),
            "local_bank": result.local_bank.state_dict(),
            "id_map": result.id_map,
            "config": config_to_flat(cfg),
            "config_hash": config_hash(cfg),
            "n_classes": result.model.n_classes,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[ProFDModel, TrainConfig, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = config_from_flat(ckpt["config"])
    model = ProFDModel(cfg, n_classes=ckpt["n_classes"])
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, cfg, ckpt


def embed_samples(
    model: ProFDModel, samples: Sequence[Sample], cfg: TrainConfig, chunk: int = 32
) -> EmbeddingSet:
    """Run the model in eval mode and collect retrieval embeddings."""
    model.eval()
    g_list, p_list, v_list = [], [], []
    with torch.no_grad():
        for start in range(0, len(samples), chunk):
            part = samples[start : start + chunk]
            images, masks = _to_batch(part)
            labels = None
            if model.needs_masks_at_inference:
                if masks is None:
                    raise ValueError("pooling baseline requires masks for embedding")
                labels = model.pool_labels(torch.from_numpy(masks))
            out = model(torch.from_numpy(images), patch_labels=labels, classify=False)
            g_list.append(out.global_feats)
            p_list.append(out.parts.per_part)
            v_list.append(out.visibility)
    return EmbeddingSet(
        global_feats=torch.cat(g_list).numpy().astype(np.float32),
        parts=torch.cat(p_list).numpy().astype(np.float32),
        visibility=torch.cat(v_list).numpy().astype(np.float32),
        ids=np.array([s.id for s in samples], dtype=np.int64),
        cams=np.array([s.cam for s in samples], dtype=np.int64),
    )


def evaluate_model(
    model: ProFDModel,
    dataset: DatasetSplits,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> MetricsReport:
    """Embed query and gallery, optionally write PFEM files, run the metrics."""
    query = embed_samples(model, dataset.query, cfg)
    gallery = embed_samples(model, dataset.gallery, cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_embeddings(out_dir / "query.pfem", query)
        write_embeddings(out_dir / "gallery.pfem", gallery)
    dist = distance_matrix(query, gallery, binarize=cfg.binarize_visibility)
    report = cmc_map(dist, query.ids, gallery.ids, query.cams, gallery.cams)
    if out_dir is not None:
        (out_dir / "metrics.txt").write_text(report.as_text() + "\n")
        (out_dir / "metrics.json").write_text(json.dumps(report.as_record()) + "\n")
    return report


def visibility_accuracy(model: ProFDModel, samples: Sequence[Sample], cfg: TrainConfig) -> float:
    """Accuracy of binarized visibility against occlusion ground truth."""
    withgt = [s for s in samples if s.occluded_parts is not None]
    if not withgt:
        raise ValueError("no samples carry occlusion ground truth")
    emb = embed_samples(model, withgt, cfg)
    predicted = emb.visibility >= 0.5
    actual = ~np.stack([s.occluded_parts for s in withgt])
    return float((predicted == actual).mean())


# ---------------------------------------------------------------------------
# Ablation harness

ATTENTION_GROUP = (
    ("no-attn", {"use_spa": False, "use_sea": False}),
    ("sea-only", {"use_spa": False, "use_sea": True}),
    ("spa-only", {"use_spa": True, "use_sea": False}),
    ("spa+sea", {"use_spa": True, "use_sea": True}),
)
MEMORY_GROUP = (
    ("no-mem", {"use_global_mem": False, "use_local_mem": False}),
    ("global", {"use_global_mem": True, "use_local_mem": False}),
    ("local", {"use_global_mem": False, "use_local_mem": True}),
    ("global+local", {"use_global_mem": True, "use_local_mem": True}),
)
LOSS_GROUP = (
    ("plain", {"use_align": False, "use_div": False}),
    ("align", {"use_align": True, "use_div": False}),
    ("div", {"use_align": False, "use_div": True}),
    ("align+div", {"use_align": True, "use_div": True}),
)

_FLAG_NAMES = ("use_spa", "use_sea", "use_global_mem", "use_local_mem", "use_align", "use_div")


def ablation_suite(
    cfg: TrainConfig,
    dataset: DatasetSplits,
    seeds: Sequence[int] = (0,),
) -> list[dict]:
    """Short trainings over the three ablation axes, one group at a time.

    Each row varies one axis (attention branches, memory banks, auxiliary
    losses) while the other axes stay at the base configuration.  Runs
    sharing an identical flag set and seed are trained once and reused.
    """
    rows: list[dict] = []
    cache: dict[tuple, MetricsReport] = {}
    for group_name, group in (
        ("attention", ATTENTION_GROUP),
        ("memory", MEMORY_GROUP),
        ("losses", LOSS_GROUP),
    ):
        for label, overrides in group:
            for seed in seeds:
                variant = cfg.replace(seed=seed, **overrides)
                key = tuple(getattr(variant, name) for name in _FLAG_NAMES) + (seed,)
                if key not in cache:
                    result = train_model(variant, dataset)
                    cache[key] = evaluate_model(result.model, dataset, variant)
                report = cache[key]
                rows.append(
                    {
                        "group": group_name,
                        "label": label,
                        "seed": seed,
                        "rank1": report.rank_k[1],
                        "mAP": report.mAP,
                    }
                )
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    header = f"{'group':<10} {'config':<14} {'seed':>4} {'rank-1':>8} {'mAP':>8}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['group']:<10} {row['label']:<14} {row['seed']:>4} "
            f"{row['rank1']:>8.4f} {row['mAP']:>8.4f}"
        )
    return "\n".join(lines)


def ablation_gaps(rows: list[dict], slack: float = 0.02) -> list[dict]:
    """Compare the full configuration against every reduced one per group.

    Returns one record per (group, label) with seed-averaged mAP, the full
    model's seed-averaged mAP in that group, and whether the full model
    stays within `slack` below the variant.
    """
    full_labels = {"attention": "spa+sea", "memory": "global+local", "losses": "align+div"}
    by_config: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        by_config.setdefault((row["group"], row["label"]), []).append(row["mAP"])
    out = []
    for (group, label), maps in sorted(by_config.items()):
        full_maps = by_config[(group, full_labels[group])]
        mean_map = float(np.mean(maps))
        full_mean = float(np.mean(full_maps))
        out.append(
            {
                "group": group,
                "label": label,
                "mAP": mean_map,
                "full_mAP": full_mean,
                "ok": bool(full_mean >= mean_map - slack),
            }
        )
    return out
