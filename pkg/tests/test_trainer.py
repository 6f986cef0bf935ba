import math

import numpy as np
import pytest

from _helpers import make_synth_bundle
from fame.backbone import BackboneConfig, score_sequence as backbone_score
from fame.checkpoint import load_backbone, save_backbone, save_fame
from fame.data import EmbeddingMatrix, pseudo_embed_catalog
from fame.evaluation import evaluate
from fame.fame_layer import FameConfig, score_sequence as fame_score
from fame.numerics import Rng
from fame.pretrain import (
    PretrainConfig,
    ProjectorConfig,
    alternating_pretrain,
    export_item_embeddings,
    init_projector,
)
from fame.trainer import ConfigError, TrainConfig, finetune_fame, grid_sweep, sweep_csv, train_backbone


def small_bundle():
    return make_synth_bundle(num_users=60, num_items=30, classes_per_facet=5, seed=3,
                             min_seq_len=8, max_seq_len=14)


def bconfig_for(catalog, dataset, dim=16, heads=2, layers=2, dropout=0.1):
    return BackboneConfig(
        num_items=len(catalog), dim=dim, num_heads=heads, num_layers=layers,
        max_len=dataset.max_len, dropout=dropout,
    )


class TestTrainBackbone:
    def test_epoch_zero_loss_near_log_vocab(self):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset)
        # batch >= users: the first epoch's loss is measured entirely at init
        tconfig = TrainConfig(backbone_epochs=1, batch_size=512, seed=0)
        _, logs = train_backbone(dataset, bconfig, tconfig)
        assert abs(logs[0]["loss"] - math.log(len(catalog))) <= 0.05 * math.log(len(catalog))

    def test_loss_nonincreasing_first_epochs(self):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset)
        tconfig = TrainConfig(backbone_epochs=5, batch_size=16, seed=0)
        _, logs = train_backbone(dataset, bconfig, tconfig)
        losses = [entry["loss"] for entry in logs]
        for a, b in zip(losses, losses[1:]):
            assert b <= a + 1e-6

    def test_planted_memorization_cuts_loss_to_quarter(self):
        catalog, dataset, *_ = make_synth_bundle(
            num_users=30, num_items=50, classes_per_facet=5, seed=3,
            min_seq_len=10, max_seq_len=16,
        )
        bconfig = bconfig_for(catalog, dataset, dim=64, dropout=0.0)
        tconfig = TrainConfig(backbone_epochs=50, batch_size=8, lr=0.005, seed=0)
        _, logs = train_backbone(dataset, bconfig, tconfig)
        assert logs[-1]["loss"] < 0.25 * logs[0]["loss"]

    def test_deterministic_checkpoints(self, tmp_path):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset)
        blobs = []
        for run in range(2):
            tconfig = TrainConfig(backbone_epochs=2, batch_size=16, seed=11)
            params, logs = train_backbone(dataset, bconfig, tconfig)
            path = tmp_path / f"run{run}.fckp"
            save_backbone(path, params, bconfig)
            blobs.append((path.read_bytes(), logs))
        assert blobs[0][0] == blobs[1][0]
        assert blobs[0][1] == blobs[1][1]

    def test_text_mode_requires_embeddings(self):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset)
        with pytest.raises(ConfigError):
            train_backbone(dataset, bconfig, TrainConfig(init_mode="text_raw", backbone_epochs=1))

    def test_text_facet_dim_mismatch_rejected(self):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset, dim=16)
        emb = pseudo_embed_catalog(catalog, 24, seed=0)  # wrong width
        with pytest.raises(ConfigError):
            train_backbone(
                dataset, bconfig, TrainConfig(init_mode="text_facet", backbone_epochs=1), emb
            )

    def test_text_facet_init_has_unit_subvector_norms(self):
        catalog, dataset, facets, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset, dim=16)
        raw = pseudo_embed_catalog(catalog, 24, seed=0)
        projector = init_projector(ProjectorConfig(input_dim=24, output_dim=16, num_heads=2), Rng(1))
        alternating_pretrain(
            raw.values, facets, projector,
            PretrainConfig(p_classes=2, k_per_class=3, epochs=1, seed=1),
        )
        eprime = EmbeddingMatrix(
            values=export_item_embeddings(projector, raw.values), item_ids=list(catalog.item_ids)
        )
        params, _ = train_backbone(
            dataset, bconfig,
            TrainConfig(init_mode="text_facet", backbone_epochs=0, seed=1), eprime,
        )
        table = params.item_table.value
        for h in range(2):
            norms = np.linalg.norm(table[:, h * 8 : (h + 1) * 8], axis=1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_text_raw_trains_projection(self, tmp_path):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset, dim=16)
        emb = pseudo_embed_catalog(catalog, 24, seed=2)
        tconfig = TrainConfig(init_mode="text_raw", backbone_epochs=3, batch_size=16, seed=4)
        params, logs = train_backbone(dataset, bconfig, tconfig, emb)
        assert params.projected_embedder
        assert logs[-1]["loss"] <= logs[0]["loss"] + 1e-6
        # the realized item table stays consistent with the affine map
        np.testing.assert_allclose(
            params.item_table.value,
            params.embed_base @ params.embed_w.value + params.embed_b.value,
            atol=1e-6,
        )
        path = tmp_path / "raw.fckp"
        save_backbone(path, params, bconfig)
        loaded, _ = load_backbone(path)
        np.testing.assert_array_equal(loaded.item_table.value, params.item_table.value)


class TestFinetune:
    def test_function_preserving_init_keeps_valid_metrics(self):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset, dim=16, heads=1)
        params, _ = train_backbone(dataset, bconfig, TrainConfig(backbone_epochs=3, batch_size=16, seed=5))
        backbone_report = evaluate(
            lambda p: backbone_score(params, bconfig, p), dataset, "valid", ks=(10,)
        )
        fconfig = FameConfig(num_heads=1, num_experts=1, dim=16, dropout=bconfig.dropout)
        model, _ = finetune_fame(
            params, bconfig, dataset, fconfig,
            TrainConfig(finetune_epochs=0, seed=5),
            expert_noise=0.0, function_preserving=True,
        )
        fame_report = evaluate(lambda p: fame_score(model, p), dataset, "valid", ks=(10,))
        assert abs(fame_report.hr[10] - backbone_report.hr[10]) <= 1e-6
        assert abs(fame_report.ndcg[10] - backbone_report.ndcg[10]) <= 1e-6

    def test_loss_nonincreasing_first_epochs(self):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset, dim=16)
        params, _ = train_backbone(dataset, bconfig, TrainConfig(backbone_epochs=2, batch_size=16, seed=6))
        fconfig = FameConfig(num_heads=2, num_experts=2, dim=16, dropout=bconfig.dropout)
        _, logs = finetune_fame(
            params, bconfig, dataset, fconfig, TrainConfig(finetune_epochs=5, batch_size=16, seed=6)
        )
        losses = [entry["loss"] for entry in logs]
        for a, b in zip(losses, losses[1:]):
            assert b <= a + 1e-6

    def test_deterministic_checkpoints(self, tmp_path):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset, dim=16)
        params, _ = train_backbone(dataset, bconfig, TrainConfig(backbone_epochs=1, batch_size=16, seed=7))
        blobs = []
        for run in range(2):
            fconfig = FameConfig(num_heads=2, num_experts=2, dim=16, dropout=bconfig.dropout)
            model, _ = finetune_fame(
                params, bconfig, dataset, fconfig, TrainConfig(finetune_epochs=2, batch_size=16, seed=7)
            )
            path = tmp_path / f"fame{run}.fckp"
            save_fame(path, model)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]


class TestGridSweep:
    def test_single_cell_equals_single_run(self):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset, dim=16, heads=2)
        tconfig = TrainConfig(backbone_epochs=1, finetune_epochs=1, batch_size=16, seed=8)
        rows = grid_sweep(dataset, bconfig, [2], [2], tconfig, ks=(20,))
        assert len(rows) == 1

        params, _ = train_backbone(dataset, bconfig, tconfig)
        fconfig = FameConfig(num_heads=2, num_experts=2, dim=16, dropout=bconfig.dropout)
        model, _ = finetune_fame(params, bconfig, dataset, fconfig, tconfig)
        report = evaluate(lambda p: fame_score(model, p), dataset, "valid", ks=(20,))
        assert rows[0]["hr20"] == report.hr[20]
        assert rows[0]["ndcg20"] == report.ndcg[20]

    def test_grid_shape_and_independence(self):
        catalog, dataset, *_ = small_bundle()
        bconfig = bconfig_for(catalog, dataset, dim=16, heads=2)
        tconfig = TrainConfig(backbone_epochs=1, finetune_epochs=1, batch_size=16, seed=9)
        rows = grid_sweep(dataset, bconfig, [1, 2], [1], tconfig, ks=(20,))
        assert len(rows) == 2
        csv = sweep_csv(rows, ks=(20,))
        assert len(csv.strip().split("\n")) == 3
        # each cell equals its own single run with the same seed
        for row in rows:
            cell_bconfig = bconfig_for(catalog, dataset, dim=16, heads=row["num_heads"])
            params, _ = train_backbone(dataset, cell_bconfig, tconfig)
            fconfig = FameConfig(
                num_heads=row["num_heads"], num_experts=row["num_experts"], dim=16,
                dropout=cell_bconfig.dropout,
            )
            model, _ = finetune_fame(params, cell_bconfig, dataset, fconfig, tconfig)
            report = evaluate(lambda p: fame_score(model, p), dataset, "valid", ks=(20,))
            assert row["hr20"] == report.hr[20]
            assert row["ndcg20"] == report.ndcg[20]
