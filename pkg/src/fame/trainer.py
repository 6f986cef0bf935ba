"""Two-stage training pipeline: encoder pre-training on next-item cross
entropy, then replacement of the final layer by the facet head and
end-to-end fine-tuning.  The item table can start from random draws, from
projected raw text embeddings, or from the facet-aware pre-trained
embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    BackboneConfig,
    BackboneParams,
    init_backbone,
    score_sequence as backbone_score,
    sequence_loss_and_backward,
)
from .data import EmbeddingMatrix, SequenceDataset
from .evaluation import evaluate
from .fame_layer import (
    FameConfig,
    FameModel,
    fame_sequence_loss_and_backward,
    init_from_backbone,
    score_sequence as fame_score,
)
from .numerics import Param, Rng, adam_step

INIT_MODES = ("random", "text_raw", "text_facet")


class ConfigError(ValueError):
    """Invalid or inconsistent training configuration."""


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 256
    backbone_epochs: int = 200
    finetune_epochs: int = 100
    seed: int = 0
    init_mode: str = "random"
    item_scale: float = 1.0          # applied to pre-trained embeddings at init
    eval_every: int = 0              # validate every N epochs (0 = off)
    early_stop_patience: int = 0     # stop after N stale validations (0 = off)

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.backbone_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")


def _apply_init_mode(
    params: BackboneParams,
    bconfig: BackboneConfig,
    tconfig: TrainConfig,
    embeddings: EmbeddingMatrix | None,
    rng: Rng,
) -> None:
    if tconfig.init_mode == "random":
        return
    if embeddings is None:
        raise ConfigError(f"init_mode {tconfig.init_mode!r} requires an item embedding matrix")
    if embeddings.values.shape[0] != bconfig.num_items:
        raise ConfigError(
            f"embedding matrix has {embeddings.values.shape[0]} rows, catalog has {bconfig.num_items}"
        )
    if tconfig.init_mode == "text_facet":
        if embeddings.dim != bconfig.dim:
            raise ConfigError(
                f"text_facet init needs dim {bconfig.dim} embeddings, got {embeddings.dim}"
            )
        params.item_table.value[...] = embeddings.values * tconfig.item_scale
    else:  # text_raw: frozen base + trainable affine projection
        dtype = params.item_table.value.dtype
        params.embed_base = embeddings.values.astype(dtype)
        params.embed_w = Param.of(rng.xavier_uniform((embeddings.dim, bconfig.dim), dtype))
        params.embed_b = Param.of(np.zeros(bconfig.dim, dtype=dtype))
        params.refresh_item_table()


def _run_epochs(
    dataset: SequenceDataset,
    tconfig: TrainConfig,
    epochs: int,
    stage: str,
    rng: Rng,
    loss_fn,
    trainables,
    scorer,
    refresh=None,
    propagate=None,
) -> list[dict]:
    """Shared mini-batch loop: per-user loss accumulation, per-batch Adam
    step with mean-over-pairs normalization, optional validation and
    early stopping."""
    drop_rng = rng.split("dropout")
    logs: list[dict] = []
    best_metric, stale = -1.0, 0
    for epoch in range(epochs):
        order = rng.split(f"order{epoch}").permutation(dataset.num_users)
        total_loss, total_pairs = 0.0, 0
        for start in range(0, len(order), tconfig.batch_size):
            batch = order[start : start + tconfig.batch_size]
            if refresh is not None:
                refresh()
            batch_loss, batch_pairs = 0.0, 0
            for u in batch:
                loss, pairs = loss_fn(dataset.train_region(int(u)), drop_rng)
                batch_loss += loss
                batch_pairs += pairs
            if batch_pairs == 0:
                for _, p in trainables():
                    p.zero_grad()
                continue
            if propagate is not None:
                propagate()
            inv = 1.0 / batch_pairs
            for _, p in trainables():
                p.grad *= inv
                adam_step(p, lr=tconfig.lr, beta1=tconfig.beta1, beta2=tconfig.beta2)
            total_loss += batch_loss
            total_pairs += batch_pairs
        if refresh is not None:
            refresh()
        entry = {
            "stage": stage,
            "epoch": epoch,
            "loss": total_loss / max(1, total_pairs),
        }
        if tconfig.eval_every and (epoch + 1) % tconfig.eval_every == 0:
            report = evaluate(scorer, dataset, "valid", ks=(10,))
            entry["valid_hr10"] = report.hr[10]
            entry["valid_ndcg10"] = report.ndcg[10]
            if tconfig.early_stop_patience:
                if report.ndcg[10] > best_metric + 1e-12:
                    best_metric, stale = report.ndcg[10], 0
                else:
                    stale += 1
        logs.append(entry)
        if tconfig.early_stop_patience and stale >= tconfig.early_stop_patience:
            break
    return logs


def train_backbone(
    dataset: SequenceDataset,
    bconfig: BackboneConfig,
    tconfig: TrainConfig,
    embeddings: EmbeddingMatrix | None = None,
) -> tuple[BackboneParams, list[dict]]:
    """Stage 1: train the encoder on next-item cross entropy over all
    train-region prefix positions, mini-batched by user."""
    if dataset.num_users == 0:
        raise ConfigError("dataset has no users")
    rng = Rng(tconfig.seed)
    params = init_backbone(bconfig, rng.split("init"))
    _apply_init_mode(params, bconfig, tconfig, embeddings, rng.split("embed-proj"))

    logs = _run_epochs(
        dataset,
        tconfig,
        tconfig.backbone_epochs,
        "backbone",
        rng.split("train"),
        loss_fn=lambda items, drop_rng: sequence_loss_and_backward(
            items, params, bconfig, rng=drop_rng, training=True
        ),
        trainables=lambda: params.trainable_params(),
        scorer=lambda prefix: backbone_score(params, bconfig, prefix),
        refresh=params.refresh_item_table if params.projected_embedder else None,
        propagate=params.propagate_item_grad if params.projected_embedder else None,
    )
    return params, logs


def finetune_fame(
    backbone_params: BackboneParams,
    bconfig: BackboneConfig,
    dataset: SequenceDataset,
    fconfig: FameConfig,
    tconfig: TrainConfig,
    expert_noise: float = 0.01,
    function_preserving: bool = False,
) -> tuple[FameModel, list[dict]]:
    """Stage 2: replace the final layer by the facet head and fine-tune
    every parameter end-to-end."""
    rng = Rng(tconfig.seed)
    model = init_from_backbone(
        backbone_params,
        bconfig,
        fconfig,
        rng.split("fame-init"),
        expert_noise=expert_noise,
        function_preserving=function_preserving,
    )
    logs = _run_epochs(
        dataset,
        tconfig,
        tconfig.finetune_epochs,
        "finetune",
        rng.split("finetune"),
        loss_fn=lambda items, drop_rng: fame_sequence_loss_and_backward(
            items, model, rng=drop_rng, training=True
        ),
        trainables=lambda: model.trainable_params(),
        scorer=lambda prefix: fame_score(model, prefix),
        refresh=model.backbone.refresh_item_table if model.backbone.projected_embedder else None,
        propagate=model.backbone.propagate_item_grad if model.backbone.projected_embedder else None,
    )
    return model, logs


def grid_sweep(
    dataset: SequenceDataset,
    bconfig: BackboneConfig,
    head_values: list[int],
    expert_values: list[int],
    tconfig: TrainConfig,
    ks: tuple[int, ...] = (20,),
    embeddings: EmbeddingMatrix | None = None,
) -> list[dict]:
    """Train and validate one full two-stage run per (heads, experts)
    cell, each with the same seed, so cells are independent and
    individually reproducible.  The stage-1 encoder is deterministic per
    head count, so it is shared across expert counts."""
    rows = []
    for heads in head_values:
        cell_bconfig = BackboneConfig(**{**bconfig.to_dict(), "num_heads": heads})
        params, _ = train_backbone(dataset, cell_bconfig, tconfig, embeddings=embeddings)
        for experts in expert_values:
            fconfig = FameConfig(
                num_heads=heads,
                num_experts=experts,
                dim=cell_bconfig.dim,
                dropout=cell_bconfig.dropout,
                eps=cell_bconfig.eps,
            )
            model, _ = finetune_fame(params, cell_bconfig, dataset, fconfig, tconfig)
            report = evaluate(lambda prefix: fame_score(model, prefix), dataset, "valid", ks=ks)
            row = {"num_heads": heads, "num_experts": experts}
            for k in ks:
                row[f"hr{k}"] = report.hr[k]
                row[f"ndcg{k}"] = report.ndcg[k]
            rows.append(row)
    return rows


def sweep_csv(rows: list[dict], ks: tuple[int, ...] = (20,)) -> str:
    cols = ["num_heads", "num_experts"] + [f"{m}{k}" for k in ks for m in ("hr", "ndcg")]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(
            ",".join(
                f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c]) for c in cols
            )
        )
    return "\n".join(lines) + "\n"
