"""Command-line pipeline: data preparation, synthetic benchmark
generation, embeddings, facet pre-training, two-stage training,
evaluation, grid sweeps, and per-user explanations.

Every command accepts ``--config FILE`` (flat ``key = value``) plus
repeatable ``--set key=value`` overrides; dedicated flags win over both.
Outputs default into ``runs/<config-digest>/`` and each output directory
receives the resolved configuration for provenance.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .backbone import BackboneConfig, InputError, score_sequence as backbone_score
from .checkpoint import TAG_BACKBONE, TAG_FAME, load_backbone, load_fame, read_container, save_backbone, save_fame
from .config import Config, ConfigFileError, resolve_config
from .evaluation import evaluate, explain_user, metrics_csv, metrics_table
from .fame_layer import ConfigMismatchError, FameConfig, score_sequence as fame_score
from .numerics import ParameterError, Rng
from .pretrain import (
    FacetMismatchError,
    PretrainConfig,
    ProjectorConfig,
    SamplerError,
    alternating_pretrain,
    export_item_embeddings,
    init_projector,
)
from .synth import SynthConfig, generate
from .trainer import ConfigError, TrainConfig, finetune_fame, grid_sweep, sweep_csv, train_backbone

ERROR_CATEGORIES = [
    ("config", (ConfigError, ConfigFileError, ConfigMismatchError, FacetMismatchError, ParameterError)),
    ("data", (D.ParseError, D.FormatError, D.ConsistencyError, D.SplitError, FileNotFoundError)),
    ("sampler", (SamplerError,)),
    ("input", (InputError, IndexError)),
]


def _categorize(exc: Exception) -> str:
    for label, types in ERROR_CATEGORIES:
        if isinstance(exc, types):
            return label
    return "runtime"


def _overrides(args: argparse.Namespace, mapping: dict[str, str]) -> dict:
    out = {}
    for pair in args.set or []:
        if "=" not in pair:
            raise ConfigFileError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    for flag, key in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def _resolve(args: argparse.Namespace, mapping: dict[str, str] | None = None) -> Config:
    return resolve_config(args.config, _overrides(args, mapping or {}))


def _out_path(explicit: str | None, config: Config, name: str) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        path = Path("runs") / config.digest() / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_config_copy(directory: Path, config: Config) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.used").write_text(config.render(), encoding="utf-8")


def _write_log(path: Path, entries: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _scheme_facets(scheme: str) -> tuple[str, ...]:
    return D.AMAZON_FACETS if scheme == "amazon" else D.MOVIELENS_FACETS


def _prepare_bundle(
    interactions: list[D.Interaction],
    metadata: dict[str, dict],
    scheme: str,
    config: Config,
    out_dir: Path,
    extra_manifest: dict,
) -> dict:
    if not interactions:
        raise D.ParseError("no interactions in input")
    filtered = D.k_core_filter(interactions, config.min_core)
    if not filtered:
        raise D.ConsistencyError(f"no interactions survive the {config.min_core}-core filter")

    item_ids = sorted({x.item for x in filtered})
    texts_by_id = {i: D.build_text_string(metadata.get(i, {}), scheme) for i in item_ids}
    catalog = D.build_catalog(filtered, texts_by_id)
    dataset = D.build_sequences(filtered, catalog, config.max_len)
    if dataset.num_users == 0:
        raise D.ConsistencyError("no user has 3 or more interactions after filtering")

    price_edges = config.price_edge_list()
    if scheme == "amazon" and config.price_binning == "quantile" and price_edges is None:
        prices = [
            float(metadata[i]["price"])
            for i in catalog.item_ids
            if isinstance(metadata.get(i, {}).get("price"), (int, float))
        ]
        price_edges = D.quantile_price_edges(prices)

    facet_names = list(_scheme_facets(scheme))
    raw_labels = [[] for _ in facet_names]
    for item in catalog.item_ids:
        extracted = D.extract_facets(metadata.get(item, {}), scheme, price_edges)
        for f, name in enumerate(facet_names):
            raw_labels[f].append(extracted[name])
    facets = D.build_facet_table(facet_names, raw_labels)

    manifest = D.save_bundle(
        out_dir,
        catalog,
        dataset,
        facets,
        extra_manifest={"scheme": scheme, **extra_manifest},
    )
    _write_config_copy(out_dir, config)
    return manifest


def cmd_prepare_data(args) -> int:
    config = _resolve(args, {"scheme": "scheme"})
    out_dir = Path(args.out)
    interactions = D.load_interactions(args.interactions)
    metadata = D.load_metadata(args.metadata) if args.metadata else {}
    manifest = _prepare_bundle(interactions, metadata, config.scheme, config, out_dir, {})
    print(f"bundle written to {out_dir}: {manifest['num_users']} users, {manifest['num_items']} items")
    return 0


def cmd_synth(args) -> int:
    config = _resolve(args, {"seed": "seed"})
    synth_config = SynthConfig(
        num_users=args.users,
        num_items=args.items,
        num_facets=args.facets,
        classes_per_facet=args.classes_per_facet,
        seed=config.seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    interactions, records, _ = generate(synth_config)
    with open(out_dir / "interactions.tsv", "w", encoding="utf-8") as fh:
        for x in interactions:
            fh.write(f"{x.user}\t{x.item}\t{x.timestamp}\n")
    with open(out_dir / "metadata.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    metadata = {record["item_id"]: record for record in records}
    manifest = _prepare_bundle(
        interactions,
        metadata,
        "amazon",
        config,
        out_dir,
        {
            "generator": {
                "num_users": synth_config.num_users,
                "num_items": synth_config.num_items,
                "num_facets": synth_config.num_facets,
                "classes_per_facet": synth_config.classes_per_facet,
                "seed": synth_config.seed,
            }
        },
    )
    print(f"synthetic bundle written to {out_dir}: {manifest['num_users']} users")
    return 0


def cmd_embed(args) -> int:
    config = _resolve(args, {"dim": "text_dim", "seed": "seed"})
    catalog, _, _, _ = D.load_bundle(args.bundle)
    out = _out_path(args.out, config, "items.femb")
    if args.mode == "pseudo":
        matrix = D.pseudo_embed_catalog(catalog, config.text_dim, config.seed)
        comments = [f"pseudo encoder dim={config.text_dim} seed={config.seed}"]
    else:
        if not args.femb:
            raise ConfigError("--mode import requires --femb FILE")
        matrix = D.load_embedding_matrix(args.femb, catalog)
        comments = [f"imported from {Path(args.femb).name}"]
    D.write_embedding_matrix(out, matrix.values, matrix.item_ids, sidecar_comments=comments)
    print(f"embedding matrix written to {out} ({matrix.values.shape[0]}x{matrix.values.shape[1]})")
    return 0


def cmd_pretrain_facets(args) -> int:
    config = _resolve(args, {"epochs": "pretrain_epochs", "seed": "seed"})
    catalog, _, facets, manifest = D.load_bundle(args.bundle)
    emb = D.load_embedding_matrix(args.embeddings, catalog)
    names = config.facet_list(facets.facet_names)
    table = facets.select(names)
    projector_config = ProjectorConfig(
        input_dim=emb.dim,
        output_dim=config.dim,
        num_heads=config.pretrain_heads,
        mid_dim=config.projector_mid_dim or None,
    )
    params = init_projector(projector_config, Rng(config.seed).split("projector"))
    pretrain_config = PretrainConfig(
        tau=config.tau,
        p_classes=config.p_classes,
        k_per_class=config.k_per_class,
        epochs=config.pretrain_epochs,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        seed=config.seed,
    )
    logs = alternating_pretrain(emb.values, table, params, pretrain_config)
    out = _out_path(args.out, config, "facet_items.femb")
    values = export_item_embeddings(params, emb.values)
    D.write_embedding_matrix(
        out, values, catalog.item_ids, sidecar_comments=[f"facet pretraining on {','.join(names)}"]
    )
    _write_log(Path(str(out) + ".log.jsonl"), logs)
    print(f"facet-aware embeddings written to {out} ({len(logs)} steps)")
    return 0


def _bundle_backbone_config(config: Config, num_items: int, max_len: int) -> BackboneConfig:
    return BackboneConfig(
        num_items=num_items,
        dim=config.dim,
        num_heads=config.num_heads,
        num_layers=config.num_layers,
        max_len=max_len,
        dropout=config.dropout,
        eps=config.eps,
    )


def _train_config(config: Config) -> TrainConfig:
    return TrainConfig(
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        batch_size=config.batch_size,
        backbone_epochs=config.backbone_epochs,
        finetune_epochs=config.finetune_epochs,
        seed=config.seed,
        init_mode=config.init_mode,
        item_scale=config.item_scale,
        eval_every=config.eval_every,
        early_stop_patience=config.early_stop_patience,
    )


def cmd_train_backbone(args) -> int:
    config = _resolve(args, {"epochs": "backbone_epochs", "seed": "seed", "init_mode": "init_mode"})
    catalog, dataset, _, _ = D.load_bundle(args.bundle)
    bconfig = _bundle_backbone_config(config, len(catalog), dataset.max_len)
    tconfig = _train_config(config)
    embeddings = None
    if tconfig.init_mode != "random":
        if not args.embeddings:
            raise ConfigError(f"init_mode {tconfig.init_mode!r} requires --embeddings FILE")
        embeddings = D.load_embedding_matrix(args.embeddings, catalog)
    params, logs = train_backbone(dataset, bconfig, tconfig, embeddings=embeddings)
    out = _out_path(args.out, config, "backbone.fckp")
    save_backbone(out, params, bconfig)
    _write_log(Path(str(out) + ".log.jsonl"), logs)
    tail = f" (final loss {logs[-1]['loss']:.4f})" if logs else ""
    print(f"backbone checkpoint written to {out}{tail}")
    return 0


def cmd_finetune(args) -> int:
    config = _resolve(
        args,
        {"epochs": "finetune_epochs", "seed": "seed", "heads": "num_heads", "experts": "num_experts"},
    )
    catalog, dataset, _, _ = D.load_bundle(args.bundle)
    if not Path(args.backbone).exists():
        raise ConfigError(f"backbone checkpoint {args.backbone} not found")
    params, bconfig = load_backbone(args.backbone)
    if bconfig.num_items != len(catalog):
        raise ConfigMismatchError(
            f"checkpoint was trained on {bconfig.num_items} items, bundle has {len(catalog)}"
        )
    fconfig = FameConfig(
        num_heads=config.num_heads,
        num_experts=config.num_experts,
        dim=bconfig.dim,
        dropout=bconfig.dropout,
        eps=bconfig.eps,
    )
    tconfig = _train_config(config)
    model, logs = finetune_fame(
        params, bconfig, dataset, fconfig, tconfig, expert_noise=config.expert_noise
    )
    out = _out_path(args.out, config, "fame.fckp")
    save_fame(out, model)
    _write_log(Path(str(out) + ".log.jsonl"), logs)
    tail = f" (final loss {logs[-1]['loss']:.4f})" if logs else ""
    print(f"facet-head checkpoint written to {out}{tail}")
    return 0


def _load_scorer(path: str):
    tag, _, _ = read_container(path)
    if tag == TAG_BACKBONE:
        params, bconfig = load_backbone(path)
        return lambda prefix: backbone_score(params, bconfig, prefix), bconfig.num_items, None
    if tag == TAG_FAME:
        model = load_fame(path)
        return lambda prefix: fame_score(model, prefix), model.backbone_config.num_items, model
    raise D.FormatError(f"unknown checkpoint tag {tag!r}")


def cmd_evaluate(args) -> int:
    config = _resolve(args, {"ks": "ks"})
    catalog, dataset, _, _ = D.load_bundle(args.bundle)
    scorer, num_items, _ = _load_scorer(args.checkpoint)
    if num_items != len(catalog):
        raise ConfigMismatchError(
            f"checkpoint was trained on {num_items} items, bundle has {len(catalog)}"
        )
    report = evaluate(scorer, dataset, args.split, ks=config.ks_list())
    print(metrics_table(report))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(metrics_csv(report), encoding="utf-8")
        print(f"metrics written to {out}")
    return 0


def cmd_sweep(args) -> int:
    config = _resolve(args, {"seed": "seed"})
    catalog, dataset, _, _ = D.load_bundle(args.bundle)
    heads = [int(tok) for tok in args.heads.split(",") if tok.strip()]
    experts = [int(tok) for tok in args.experts.split(",") if tok.strip()]
    bconfig = _bundle_backbone_config(config, len(catalog), dataset.max_len)
    embeddings = None
    if config.init_mode != "random":
        if not args.embeddings:
            raise ConfigError(f"init_mode {config.init_mode!r} requires --embeddings FILE")
        embeddings = D.load_embedding_matrix(args.embeddings, catalog)
    rows = grid_sweep(dataset, bconfig, heads, experts, _train_config(config), embeddings=embeddings)
    out = _out_path(args.out, config, "sweep.csv")
    out.write_text(sweep_csv(rows), encoding="utf-8")
    print(f"sweep grid ({len(rows)} cells) written to {out}")
    return 0


def cmd_explain(args) -> int:
    config = _resolve(args, {})
    catalog, dataset, _, _ = D.load_bundle(args.bundle)
    tag, _, _ = read_container(args.checkpoint)
    if tag != TAG_FAME:
        raise ConfigError("explain requires a facet-head checkpoint")
    model = load_fame(args.checkpoint)
    try:
        user_index = dataset.user_ids.index(args.user)
    except ValueError:
        raise D.ConsistencyError(f"user {args.user!r} not in dataset") from None
    report = explain_user(model, dataset, catalog, user_index, top_k=args.top_k)
    blob = json.dumps(report, sort_keys=True, indent=2)
    print(blob)
    if args.out:
        Path(args.out).write_text(blob + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fame",
        description="facet-aware multi-head mixture-of-experts sequential recommender",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("prepare-data", help="build a dataset bundle from raw files")
    common(p)
    p.add_argument("--interactions", required=True)
    p.add_argument("--metadata", default=None)
    p.add_argument("--scheme", choices=("amazon", "movielens"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("synth", help="generate a planted-facet synthetic bundle")
    common(p)
    p.add_argument("--users", type=int, default=300)
    p.add_argument("--items", type=int, default=60)
    p.add_argument("--facets", type=int, default=2)
    p.add_argument("--classes-per-facet", type=int, default=6)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("embed", help="produce a catalog-aligned embedding matrix")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--mode", choices=("pseudo", "import"), default="pseudo")
    p.add_argument("--dim", type=int, default=None, help="pseudo-encoder dimension")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--femb", default=None, help="existing FEMB file to import")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("pretrain-facets", help="facet-aware contrastive pre-training")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pretrain_facets)

    p = sub.add_parser("train-backbone", help="stage-1 encoder training")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--init-mode", choices=("random", "text_raw", "text_facet"), default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("finetune", help="stage-2 facet-head fine-tuning")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--experts", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="leave-one-out ranking metrics")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--ks", default=None)
    p.add_argument("--out", default=None, help="write CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid search over heads x experts")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--heads", default="1,2")
    p.add_argument("--experts", default="1,2")
    p.add_argument("--embeddings", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("explain", help="gate weights and top-k lists for one user")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_explain)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # categorized nonzero exit
        print(f"error[{_categorize(exc)}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
