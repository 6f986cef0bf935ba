"""Run a frozen pretrained text encoder over templated item texts and
write a catalog-aligned FEMB matrix.

Input is the ``texts.tsv`` emitted by the recommender's data preparation
(one ``item_id<TAB>template-string`` per line).  Each text is encoded
once in inference mode, mean-pooled over non-padding token outputs, and
written as 32-bit floats; the sidecar lists one item id per row after a
header comment recording the encoder name.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

FEMB_MAGIC = b"FEMB"
FEMB_VERSION = 1


class ExportError(RuntimeError):
    """Input file or encoder is unusable."""


@dataclass
class ExportJob:
    texts_path: str
    model_name: str
    output_path: str
    max_length: int = 256
    batch_size: int = 16
    device: str = "cpu"


def read_texts_file(path: str | Path) -> tuple[list[str], list[str]]:
    """One ``id<TAB>text`` record per line, order preserved."""
    ids, texts = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            item_id, sep, text = line.partition("\t")
            if not sep:
                raise ExportError(f"{path}:{lineno}: expected 'id<TAB>text'")
            ids.append(item_id)
            texts.append(text)
    if not ids:
        raise ExportError(f"{path}: no input texts")
    return ids, texts


def write_femb(path: str | Path, values: np.ndarray, item_ids: list[str], comments: list[str]) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(FEMB_MAGIC)
        fh.write(struct.pack("<III", FEMB_VERSION, values.shape[0], values.shape[1]))
        fh.write(values.tobytes())
    with open(Path(str(path) + ".ids"), "w", encoding="utf-8") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        for item_id in item_ids:
            fh.write(f"{item_id}\n")


def validate_femb(path: str | Path) -> tuple[int, int]:
    """Check the FEMB grammar; returns (rows, cols)."""
    raw = Path(path).read_bytes()
    if raw[:4] != FEMB_MAGIC:
        raise ExportError(f"{path}: bad magic {raw[:4]!r}")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != FEMB_VERSION:
        raise ExportError(f"{path}: unsupported version {version}")
    if len(raw) != 16 + rows * cols * 4:
        raise ExportError(f"{path}: payload size mismatch")
    return rows, cols


def load_encoder(model_name: str, device: str = "cpu"):
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_name)
        model = AutoModel.from_pretrained(model_name)
    except OSError as exc:
        raise ExportError(f"encoder {model_name!r} is not available locally: {exc}") from None
    model.to(device)
    model.eval()
    return tokenizer, model


def mean_pool(last_hidden: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
    """Average token outputs, excluding padding positions."""
    mask = attention_mask.unsqueeze(-1).to(last_hidden.dtype)
    summed = (last_hidden * mask).sum(dim=1)
    counts = mask.sum(dim=1).clamp(min=1.0)
    return summed / counts


def export(job: ExportJob) -> dict:
    """Encode every text once and write the FEMB matrix + id sidecar.

    Returns a stats record (rows, dim, truncated count).
    """
    ids, texts = read_texts_file(job.texts_path)
    tokenizer, model = load_encoder(job.model_name, job.device)

    rows = []
    truncated = 0
    with torch.no_grad():
        for start in range(0, len(texts), job.batch_size):
            chunk = texts[start : start + job.batch_size]
            full = tokenizer(chunk, padding=False, truncation=False)["input_ids"]
            truncated += sum(len(seq) > job.max_length for seq in full)
            enc = tokenizer(
                chunk,
                padding=True,
                truncation=True,
                max_length=job.max_length,
                return_tensors="pt",
            ).to(job.device)
            out = model(**enc)
            pooled = mean_pool(out.last_hidden_state, enc["attention_mask"])
            rows.append(pooled.cpu().numpy().astype(np.float32))

    values = np.concatenate(rows, axis=0)
    write_femb(job.output_path, values, ids, comments=[f"encoder: {job.model_name}"])
    return {
        "rows": int(values.shape[0]),
        "dim": int(values.shape[1]),
        "truncated": int(truncated),
        "max_length": job.max_length,
    }
