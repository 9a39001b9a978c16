"""Trainer: schedule, determinism, checkpointing, ablation harness, config."""

import dataclasses
import math

import numpy as np
import pytest
import torch

from profd.config import (
    TrainConfig,
    config_from_flat,
    config_hash,
    config_to_flat,
    load_config,
    save_config,
)
from profd.data import DatasetSplits, SyntheticSpec, generate_dataset
from profd.model import ProFDModel
from profd.training import (
    ablation_gaps,
    ablation_suite,
    embed_samples,
    evaluate_model,
    format_ablation_table,
    load_checkpoint,
    lr_for_epoch,
    save_checkpoint,
    train_model,
    visibility_accuracy,
)

TINY_SPEC = SyntheticSpec(
    n_ids=6, imgs_per_id=4, n_cams=2, occlusion_rate=0.5, seed=13,
    img_h=64, img_w=32, occluder_size_range=(12, 32),
)


def tiny_config(**kw):
    base = dict(
        img_h=64, img_w=32, patch=16, d=16, d_native=32,
        decoder_layers=1, decoder_heads=2, ffn_mult=2,
        epochs=2, batch_p=2, batch_k=2, lr=1e-3, milestones=(30, 50),
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(TINY_SPEC)


class TestLrSchedule:
    def test_reference_epochs(self):
        assert lr_for_epoch(5e-5, (30, 50), 0.1, 0) == 5e-5
        assert lr_for_epoch(5e-5, (30, 50), 0.1, 29) == 5e-5
        assert lr_for_epoch(5e-5, (30, 50), 0.1, 30) == 5e-5 * 0.1
        assert lr_for_epoch(5e-5, (30, 50), 0.1, 49) == 5e-5 * 0.1
        assert lr_for_epoch(5e-5, (30, 50), 0.1, 50) == 5e-5 * 0.1 * 0.1
        assert lr_for_epoch(5e-5, (30, 50), 0.1, 119) == pytest.approx(5e-7, rel=1e-12)


class TestConfig:
    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 5e-5
        assert cfg.weight_decay == 5e-4
        assert cfg.milestones == (30, 50)
        assert cfg.gamma == 0.1
        assert cfg.epochs == 120
        assert (cfg.batch_p, cfg.batch_k) == (16, 4)
        assert (cfg.focal_alpha, cfg.focal_gamma) == (0.65, 2.0)
        assert cfg.pcl_tau == 0.05
        assert (cfg.momentum_global, cfg.momentum_local) == (0.2, 0.2)
        assert cfg.triplet_margin == 0.3
        assert (cfg.img_h, cfg.img_w, cfg.patch, cfg.d) == (256, 128, 16, 512)
        assert cfg.parts == (
            "head", "upper arms and torso", "lower arms and torso", "legs", "feet",
        )
        assert (cfg.decoder_layers, cfg.decoder_heads) == (2, 8)

    def test_flat_roundtrip(self):
        cfg = tiny_config(weights={"div": 0.5}, use_spa=False)
        flat = config_to_flat(cfg)
        again = config_from_flat(flat)
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            config_from_flat({"nonsense.key": 1})

    def test_file_roundtrip_and_env_seed(self, tmp_path, monkeypatch):
        cfg = tiny_config(seed=3)
        path = tmp_path / "c.yaml"
        save_config(cfg, path)
        assert load_config(path) == cfg
        monkeypatch.setenv("PROFD_SEED", "99")
        assert load_config(path).seed == 99

    def test_hash_sensitive_to_values(self):
        a = config_hash(tiny_config())
        b = config_hash(tiny_config(lr=2e-3))
        assert a != b
        assert a == config_hash(tiny_config())


class TestTraining:
    def test_zero_epochs_equals_initialization(self, tiny_data):
        cfg = tiny_config(epochs=0)
        result = train_model(cfg, tiny_data)
        assert result.log == []
        torch.manual_seed(cfg.seed)
        fresh = ProFDModel(cfg, n_classes=len(result.id_map))
        for (ka, va), (kb, vb) in zip(
            sorted(result.model.state_dict().items()), sorted(fresh.state_dict().items())
        ):
            assert ka == kb and torch.equal(va, vb)
        assert result.global_bank.n_ids == len(result.id_map)
        assert result.local_bank.centroids.shape[1] == cfg.n_parts * cfg.d

    def test_same_seed_same_trajectory(self, tiny_data):
        cfg = tiny_config(epochs=2)
        a = train_model(cfg, tiny_data)
        b = train_model(cfg, tiny_data)
        assert a.log[-1]["total"] == pytest.approx(b.log[-1]["total"], abs=1e-6)
        for ka, va in a.model.state_dict().items():
            assert torch.equal(va, b.model.state_dict()[ka])

    def test_different_seed_different_trajectory(self, tiny_data):
        a = train_model(tiny_config(seed=0), tiny_data)
        b = train_model(tiny_config(seed=1), tiny_data)
        assert a.log[-1]["total"] != b.log[-1]["total"]

    def test_flag_and_zero_weight_trajectories_match(self, tiny_data):
        by_flag = train_model(tiny_config(use_align=False, use_div=False), tiny_data)
        by_weight = train_model(
            tiny_config(weights={"align": 0.0, "div": 0.0}), tiny_data
        )
        for k, v in by_flag.model.state_dict().items():
            assert torch.allclose(v, by_weight.model.state_dict()[k], atol=1e-7), k

    def test_log_records_carry_all_terms(self, tiny_data):
        result = train_model(tiny_config(epochs=1), tiny_data)
        record = result.log[0]
        for name in ("epoch", "step", "lr", "id_g", "tri_g", "id_c", "tri_c",
                     "div", "pcl_p", "pcl_g", "align", "attn", "vis", "total"):
            assert name in record

    def test_lr_applied_per_epoch(self, tiny_data):
        cfg = tiny_config(epochs=3, milestones=(1, 2), gamma=0.1, lr=1e-3)
        result = train_model(cfg, tiny_data)
        lrs = {rec["epoch"]: rec["lr"] for rec in result.log}
        assert lrs[0] == 1e-3
        assert lrs[1] == pytest.approx(1e-4)
        assert lrs[2] == pytest.approx(1e-5)

    def test_text_encoder_frozen_through_training(self, tiny_data):
        cfg = tiny_config(epochs=2)
        result = train_model(cfg, tiny_data)
        torch.manual_seed(cfg.seed)
        fresh = ProFDModel(cfg, n_classes=len(result.id_map))
        for name in ("token_table", "text_map", "text_proj"):
            assert torch.equal(
                getattr(result.model.encoder, name), getattr(fresh.encoder, name)
            )

    def test_bank_rows_unit_norm_after_training(self, tiny_data):
        result = train_model(tiny_config(epochs=2), tiny_data)
        for bank in (result.global_bank, result.local_bank):
            norms = bank.centroids.norm(dim=-1)
            assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)

    def test_masks_required_when_enabled(self, tiny_data):
        bare = DatasetSplits(
            train=[dataclasses.replace(s, mask=None, occluded_parts=None) for s in tiny_data.train],
            query=list(tiny_data.query),
            gallery=list(tiny_data.gallery),
        )
        with pytest.raises(ValueError, match="no masks"):
            train_model(tiny_config(), bare)

    def test_maskless_training_possible_with_everything_disabled(self, tiny_data):
        bare = DatasetSplits(
            train=[dataclasses.replace(s, mask=None, occluded_parts=None) for s in tiny_data.train],
            query=[dataclasses.replace(s, mask=None, occluded_parts=None) for s in tiny_data.query],
            gallery=[dataclasses.replace(s, mask=None, occluded_parts=None) for s in tiny_data.gallery],
        )
        cfg = tiny_config(
            epochs=1, use_align=False, use_spa=False, use_local_mem=False,
            weights={"vis": 0.0},
        )
        result = train_model(cfg, bare)
        report = evaluate_model(result.model, bare, cfg)
        assert 0.0 <= report.mAP <= 1.0


class TestBaselineMode:
    def test_decoder_bypassed(self, tiny_data):
        cfg = tiny_config(use_spa=False, use_sea=False, epochs=1)
        result = train_model(cfg, tiny_data)
        assert result.model.decoder is None
        assert result.model.needs_masks_at_inference
        report = evaluate_model(result.model, tiny_data, cfg)
        assert 0.0 <= report.mAP <= 1.0

    def test_embedding_requires_masks(self, tiny_data):
        cfg = tiny_config(use_spa=False, use_sea=False, epochs=0)
        result = train_model(cfg, tiny_data)
        bare = [dataclasses.replace(s, mask=None) for s in tiny_data.query]
        with pytest.raises(ValueError, match="masks"):
            embed_samples(result.model, bare, cfg)


class TestCheckpointRoundTrip:
    def test_bitwise_identical_metrics(self, tiny_data, tmp_path):
        cfg = tiny_config(epochs=1)
        result = train_model(cfg, tiny_data, out_dir=tmp_path)
        before = evaluate_model(result.model, tiny_data, cfg)
        model, cfg2, ckpt = load_checkpoint(result.checkpoint_path)
        after = evaluate_model(model, tiny_data, cfg2)
        assert before.rank_k == after.rank_k
        assert before.mAP == after.mAP
        assert ckpt["config_hash"] == config_hash(cfg)
        assert (tmp_path / "train_log.jsonl").exists()

    def test_checkpoint_holds_banks_and_optimizer_free_state(self, tiny_data, tmp_path):
        cfg = tiny_config(epochs=1)
        result = train_model(cfg, tiny_data)
        path = tmp_path / "ck.pt"
        save_checkpoint(result, cfg, path)
        blob = torch.load(path, weights_only=False)
        assert set(blob) >= {"model", "global_bank", "local_bank", "config", "config_hash", "id_map"}
        assert torch.equal(blob["global_bank"]["centroids"], result.global_bank.centroids)


class TestVisibilityAccuracy:
    def test_range_and_gt_requirement(self, tiny_data):
        cfg = tiny_config(epochs=0)
        result = train_model(cfg, tiny_data)
        acc = visibility_accuracy(result.model, tiny_data.query + tiny_data.gallery, cfg)
        assert 0.0 <= acc <= 1.0
        stripped = [dataclasses.replace(s, occluded_parts=None) for s in tiny_data.query]
        with pytest.raises(ValueError, match="ground truth"):
            visibility_accuracy(result.model, stripped, cfg)


class TestAblationHarness:
    def test_structure_and_gaps(self, tiny_data):
        cfg = tiny_config(epochs=1)
        rows = ablation_suite(cfg, tiny_data, seeds=(0,))
        assert len(rows) == 12
        groups = {(r["group"], r["label"]) for r in rows}
        assert ("attention", "no-attn") in groups
        assert ("memory", "global+local") in groups
        assert ("losses", "align+div") in groups
        table = format_ablation_table(rows)
        assert "rank-1" in table and "no-attn" in table
        gaps = ablation_gaps(rows)
        assert len(gaps) == 12
        full_rows = [g for g in gaps if g["label"] in ("spa+sea", "global+local", "align+div")]
        assert all(g["ok"] for g in full_rows)  # full vs itself always holds

    def test_full_config_reused_across_groups(self, tiny_data, monkeypatch):
        import profd.training as tr

        calls = []
        original = tr.train_model

        def counting(cfg, dataset, out_dir=None):
            calls.append(1)
            return original(cfg, dataset, out_dir)

        monkeypatch.setattr(tr, "train_model", counting)
        tr.ablation_suite(tiny_config(epochs=1), tiny_data, seeds=(0,))
        assert len(calls) == 10  # 12 rows, full config trained once
