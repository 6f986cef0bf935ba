"""Versioned binary checkpoint container (magic ``FCKP``).

Layout: magic, u32 version, 4-byte section tag (``BKBN`` for the encoder,
``FAME`` for the facet-head model), length-prefixed JSON config record,
u32 matrix count, then each parameter matrix as an FEMB-style payload in
declaration order.  Round trips are bit-exact for float32 models.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, BackboneParams, init_backbone, init_layer
from .data import FEMB_MAGIC, FEMB_VERSION, FormatError
from .numerics import Param, Rng

FCKP_MAGIC = b"FCKP"
FCKP_VERSION = 1
TAG_BACKBONE = b"BKBN"
TAG_FAME = b"FAME"


def _write_matrix(fh, arr: np.ndarray) -> None:
    mat = np.ascontiguousarray(arr, dtype="<f4")
    if mat.ndim == 1:
        mat = mat.reshape(1, -1)
    fh.write(FEMB_MAGIC)
    fh.write(struct.pack("<III", FEMB_VERSION, mat.shape[0], mat.shape[1]))
    fh.write(mat.tobytes())


def _read_matrix(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != FEMB_MAGIC:
        raise FormatError(f"bad matrix magic {magic!r}")
    version, rows, cols = struct.unpack("<III", fh.read(12))
    if version != FEMB_VERSION:
        raise FormatError(f"unsupported matrix version {version}")
    payload = fh.read(rows * cols * 4)
    if len(payload) != rows * cols * 4:
        raise FormatError("truncated matrix payload")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


def write_container(path: str | Path, tag: bytes, config: dict, matrices: list[np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FCKP_MAGIC)
        fh.write(struct.pack("<I", FCKP_VERSION))
        fh.write(tag)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(matrices)))
        for mat in matrices:
            _write_matrix(fh, mat)


def read_container(path: str | Path) -> tuple[bytes, dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FCKP_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FCKP_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        tag = fh.read(4)
        (config_len,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(config_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        matrices = [_read_matrix(fh) for _ in range(count)]
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return tag, config, matrices


def _fill(param: Param, mat: np.ndarray) -> None:
    if mat.size != param.value.size:
        raise FormatError(f"matrix size {mat.shape} does not fit parameter {param.value.shape}")
    param.value[...] = mat.reshape(param.value.shape)


# ---------------------------------------------------------------------------
# backbone checkpoints
# ---------------------------------------------------------------------------


def save_backbone(path: str | Path, params: BackboneParams, config: BackboneConfig) -> None:
    record = {"config": config.to_dict(), "embedder": "projected" if params.projected_embedder else "table"}
    matrices = [param.value for _, param in params.named_params()]
    if params.projected_embedder:
        record["text_dim"] = int(params.embed_base.shape[1])
        matrices.append(params.embed_base)
    write_container(path, TAG_BACKBONE, record, matrices)


def load_backbone(path: str | Path) -> tuple[BackboneParams, BackboneConfig]:
    tag, record, matrices = read_container(path)
    if tag != TAG_BACKBONE:
        raise FormatError(f"expected backbone checkpoint, found tag {tag!r}")
    config = BackboneConfig(**record["config"])
    params = init_backbone(config, Rng(0))
    if record.get("embedder") == "projected":
        text_dim = int(record["text_dim"])
        params.embed_base = matrices[-1]
        params.embed_w = Param.of(np.zeros((text_dim, config.dim), dtype=np.float32))
        params.embed_b = Param.of(np.zeros(config.dim, dtype=np.float32))
        matrices = matrices[:-1]
    slots = [param for _, param in params.named_params()]
    if len(slots) != len(matrices):
        raise FormatError(f"checkpoint holds {len(matrices)} matrices, model needs {len(slots)}")
    for param, mat in zip(slots, matrices):
        _fill(param, mat)
    return params, config


# ---------------------------------------------------------------------------
# facet-head model checkpoints
# ---------------------------------------------------------------------------


def save_fame(path: str | Path, model) -> None:
    from .fame_layer import FameModel

    assert isinstance(model, FameModel)
    record = {
        "backbone": model.backbone_config.to_dict(),
        "fame": model.config.to_dict(),
        "embedder": "projected" if model.backbone.projected_embedder else "table",
    }
    matrices = [param.value for _, param in model.named_params()]
    if model.backbone.projected_embedder:
        record["text_dim"] = int(model.backbone.embed_base.shape[1])
        matrices.append(model.backbone.embed_base)
    write_container(path, TAG_FAME, record, matrices)


def load_fame(path: str | Path):
    from .fame_layer import FameConfig, FameModel, init_fame_params

    tag, record, matrices = read_container(path)
    if tag != TAG_FAME:
        raise FormatError(f"expected facet-head checkpoint, found tag {tag!r}")
    backbone_config = BackboneConfig(**record["backbone"])
    fame_config = FameConfig(**record["fame"])
    trunk_config = BackboneConfig(**{**record["backbone"], "num_layers": max(1, backbone_config.num_layers - 1)})
    trunk = init_backbone(trunk_config, Rng(0))
    trunk.layers = trunk.layers[: backbone_config.num_layers - 1]
    fame = init_fame_params(fame_config, Rng(0))
    model = FameModel(backbone=trunk, fame=fame, config=fame_config, backbone_config=backbone_config)
    if record.get("embedder") == "projected":
        text_dim = int(record["text_dim"])
        trunk.embed_base = matrices[-1]
        trunk.embed_w = Param.of(np.zeros((text_dim, backbone_config.dim), dtype=np.float32))
        trunk.embed_b = Param.of(np.zeros(backbone_config.dim, dtype=np.float32))
        matrices = matrices[:-1]
    slots = [param for _, param in model.named_params()]
    if len(slots) != len(matrices):
        raise FormatError(f"checkpoint holds {len(matrices)} matrices, model needs {len(slots)}")
    for param, mat in zip(slots, matrices):
        _fill(param, mat)
    return model
