"""Interaction/metadata ingestion and preprocessing.

Covers the raw-file formats, the iterative k-core filter, chronological
sequence building with leave-one-out splits, facet label extraction, the
item text templates, and the FEMB binary embedding format (plus a
deterministic pseudo-encoder so the pipeline runs without any external
text model).
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Array

FEMB_MAGIC = b"FEMB"
FEMB_VERSION = 1

AMAZON_FACETS = ("category", "brand", "price")
MOVIELENS_FACETS = ("genre", "director", "cast")
SCHEMES = ("amazon", "movielens")

DEFAULT_PRICE_EDGES = [0.0, 50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 350.0, 400.0, 450.0]


class ParseError(ValueError):
    """A raw input line could not be parsed."""


class FormatError(ValueError):
    """A binary or sidecar file violates its declared format."""


class ConsistencyError(ValueError):
    """Cross-references between dataset pieces do not line up."""


class SplitError(ValueError):
    """A sequence is too short for the leave-one-out protocol."""


# ---------------------------------------------------------------------------
# raw interactions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int


def load_interactions(path: str | Path) -> list[Interaction]:
    """Parse a tab-separated ``user<TAB>item<TAB>timestamp`` file."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
            user, item, raw_ts = parts
            try:
                ts = int(raw_ts)
            except ValueError:
                raise ParseError(f"line {lineno}: timestamp {raw_ts!r} is not an integer") from None
            if ts < 0:
                raise ParseError(f"line {lineno}: negative timestamp {ts}")
            out.append(Interaction(user, item, ts))
    return out


def k_core_filter(interactions: list[Interaction], k: int) -> list[Interaction]:
    """Iteratively drop users/items with fewer than ``k`` interactions until
    a fixpoint: the result is empty or every remaining user and item has
    at least ``k`` interactions."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    current = interactions
    while True:
        user_deg = Counter(x.user for x in current)
        item_deg = Counter(x.item for x in current)
        kept = [
            x for x in current
            if user_deg[x.user] >= k and item_deg[x.item] >= k
        ]
        if len(kept) == len(current):
            return kept
        current = kept


# ---------------------------------------------------------------------------
# catalog and sequences
# ---------------------------------------------------------------------------


@dataclass
class Catalog:
    """Dense item index space; external ids kept for reports."""

    item_ids: list[str]
    index_of: dict[str, int]
    texts: list[str] = field(default_factory=list)

    @classmethod
    def from_items(cls, item_ids: list[str], texts: list[str] | None = None) -> "Catalog":
        index_of = {item: i for i, item in enumerate(item_ids)}
        if len(index_of) != len(item_ids):
            raise ConsistencyError("duplicate item ids in catalog")
        return cls(item_ids=list(item_ids), index_of=index_of, texts=list(texts or []))

    def __len__(self) -> int:
        return len(self.item_ids)


def build_catalog(interactions: list[Interaction], texts_by_id: dict[str, str] | None = None) -> Catalog:
    """Catalog over the distinct items, ordered by sorted external id so
    indexing is reproducible regardless of interaction order."""
    item_ids = sorted({x.item for x in interactions})
    texts = [texts_by_id.get(i, "") for i in item_ids] if texts_by_id is not None else []
    return Catalog.from_items(item_ids, texts)


@dataclass
class SequenceDataset:
    """Per-user chronological item-index sequences (already truncated to
    ``max_len``); every sequence has length >= 3 so the leave-one-out
    split is defined."""

    user_ids: list[str]
    sequences: list[list[int]]
    max_len: int

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    def train_region(self, u: int) -> list[int]:
        return self.sequences[u][:-2]

    def valid_example(self, u: int) -> tuple[list[int], int]:
        seq = self.sequences[u]
        return seq[:-2], seq[-2]

    def test_example(self, u: int) -> tuple[list[int], int]:
        seq = self.sequences[u]
        return seq[:-1], seq[-1]


def build_sequences(
    interactions: list[Interaction],
    catalog: Catalog,
    max_len: int = 50,
) -> SequenceDataset:
    """Group interactions per user, sort by timestamp (ties keep input
    order), truncate to the most recent ``max_len`` items, and drop users
    with fewer than 3 items."""
    per_user: dict[str, list[tuple[int, int, int]]] = defaultdict(list)
    for order, x in enumerate(interactions):
        idx = catalog.index_of.get(x.item)
        if idx is None:
            raise ConsistencyError(f"item {x.item!r} missing from catalog")
        per_user[x.user].append((x.timestamp, order, idx))

    user_ids, sequences = [], []
    for user in sorted(per_user):
        events = sorted(per_user[user], key=lambda e: (e[0], e[1]))
        seq = [idx for _, _, idx in events][-max_len:]
        if len(seq) < 3:
            continue
        user_ids.append(user)
        sequences.append(seq)
    return SequenceDataset(user_ids=user_ids, sequences=sequences, max_len=max_len)


def leave_one_out_split(seq: list[int]):
    """(train next-item pairs, valid example, test example) for one sequence.

    The last item is the test target, the penultimate the validation
    target, and the remaining prefix supplies next-item training pairs.
    """
    if len(seq) < 3:
        raise SplitError(f"need at least 3 items for a leave-one-out split, got {len(seq)}")
    test = (seq[:-1], seq[-1])
    valid = (seq[:-2], seq[-2])
    region = seq[:-2]
    train = [(region[: i + 1], region[i + 1]) for i in range(len(region) - 1)]
    return train, valid, test


# ---------------------------------------------------------------------------
# facets
# ---------------------------------------------------------------------------


@dataclass
class FacetTable:
    """Per-item discrete class labels for each configured facet.

    Class 0 is the sentinel for missing metadata; real labels are densely
    indexed 1..class_count-1 in sorted label order.
    """

    facet_names: list[str]
    labels: list[np.ndarray]          # per facet: (num_items,) int32
    class_counts: list[int]
    label_names: list[list[str]]      # per facet: class index -> label string ("" = sentinel)

    @property
    def num_facets(self) -> int:
        return len(self.facet_names)

    def select(self, facet_names: list[str]) -> "FacetTable":
        keep = [self.facet_names.index(n) for n in facet_names]
        return FacetTable(
            facet_names=[self.facet_names[i] for i in keep],
            labels=[self.labels[i] for i in keep],
            class_counts=[self.class_counts[i] for i in keep],
            label_names=[self.label_names[i] for i in keep],
        )


def build_facet_table(facet_names: list[str], raw_labels: list[list[str | None]]) -> FacetTable:
    """Dense-index raw label strings per facet; None/empty maps to the
    sentinel class 0."""
    labels, counts, names = [], [], []
    for per_item in raw_labels:
        distinct = sorted({lab for lab in per_item if lab})
        index = {lab: i + 1 for i, lab in enumerate(distinct)}
        arr = np.array([index.get(lab, 0) if lab else 0 for lab in per_item], dtype=np.int32)
        labels.append(arr)
        counts.append(len(distinct) + 1)
        names.append([""] + distinct)
    return FacetTable(list(facet_names), labels, counts, names)


def price_bin(price: float, edges: list[float] | None = None) -> int:
    """Index of the fixed-range interval containing ``price``; the last
    interval is open-ended."""
    edges = edges if edges is not None else DEFAULT_PRICE_EDGES
    bin_idx = 0
    for i, lo in enumerate(edges):
        if price >= lo:
            bin_idx = i
    return bin_idx


def quantile_price_edges(prices: list[float], bins: int = 10) -> list[float]:
    """Equal-frequency alternative to the fixed-width default."""
    if not prices:
        return list(DEFAULT_PRICE_EDGES)
    qs = np.quantile(np.array(prices, dtype=np.float64), np.linspace(0.0, 1.0, bins + 1)[:-1])
    edges = []
    for q in qs:
        q = float(q)
        if not edges or q > edges[-1]:
            edges.append(q)
    return edges


def extract_facets(
    record: dict,
    scheme: str,
    price_edges: list[float] | None = None,
) -> dict[str, str | None]:
    """Raw facet label strings for one metadata record; None marks a
    missing field (mapped to the sentinel class downstream)."""
    if scheme == "amazon":
        category = None
        cats = record.get("category") or []
        if isinstance(cats, str):
            cats = [cats]
        if len(cats) >= 2:
            category = str(cats[1])
        elif len(cats) == 1:
            category = str(cats[0])
        brand = record.get("brand") or None
        brand = str(brand) if brand else None
        price = record.get("price")
        if isinstance(price, (int, float)):
            price_label = f"price_bin_{price_bin(float(price), price_edges)}"
        else:
            price_label = None
        return {"category": category, "brand": brand, "price": price_label}
    if scheme == "movielens":
        out: dict[str, str | None] = {}
        for facet, key in zip(MOVIELENS_FACETS, ("genres", "directors", "cast")):
            values = record.get(key) or []
            if isinstance(values, str):
                values = [values]
            out[facet] = str(values[0]) if values else None
        return out
    raise ValueError(f"unknown scheme {scheme!r}")


def _join(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


def build_text_string(record: dict, scheme: str) -> str:
    """Linearized metadata string fed to the text encoder; missing fields
    render as empty values."""
    title = _join(record.get("title"))
    desc = _join(record.get("description"))
    if scheme == "amazon":
        return (
            f'"title": {title}; "description": {desc}; '
            f'"category": {_join(record.get("category"))}; "brand": {_join(record.get("brand"))}'
        )
    if scheme == "movielens":
        return (
            f'"title": {title}; "description": {desc}; '
            f'"genres": {_join(record.get("genres"))}; '
            f'"directors": {_join(record.get("directors"))}; "cast": {_join(record.get("cast"))}'
        )
    raise ValueError(f"unknown scheme {scheme!r}")


def load_metadata(path: str | Path) -> dict[str, dict]:
    """JSON-lines metadata keyed by item_id."""
    records: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if "item_id" not in obj:
                raise ParseError(f"line {lineno}: metadata record missing item_id")
            records[str(obj["item_id"])] = obj
    return records


# ---------------------------------------------------------------------------
# embedding matrices (FEMB binary format)
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingMatrix:
    values: Array               # (num_items, dim) float32, catalog row order
    item_ids: list[str]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def write_embedding_matrix(
    path: str | Path,
    values: Array,
    item_ids: list[str],
    sidecar_comments: list[str] | None = None,
) -> None:
    """FEMB: magic, u32 version, u32 rows, u32 cols, row-major f32 LE;
    sidecar ``<path>.ids`` lists one external id per row (comment lines
    start with '#')."""
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise FormatError("embedding matrix must be 2-D")
    if values.shape[0] != len(item_ids):
        raise FormatError(f"{values.shape[0]} rows but {len(item_ids)} ids")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(FEMB_MAGIC)
        fh.write(struct.pack("<III", FEMB_VERSION, values.shape[0], values.shape[1]))
        fh.write(values.tobytes())
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        for comment in sidecar_comments or []:
            fh.write(f"# {comment}\n")
        for item in item_ids:
            fh.write(f"{item}\n")


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".ids")


def read_embedding_file(path: str | Path) -> EmbeddingMatrix:
    """Read an FEMB file and its sidecar without any catalog reordering."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEMB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {FEMB_MAGIC!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError("truncated FEMB header")
        version, rows, cols = struct.unpack("<III", header)
        if version != FEMB_VERSION:
            raise FormatError(f"unsupported FEMB version {version}")
        payload = fh.read(rows * cols * 4)
        if len(payload) != rows * cols * 4:
            raise FormatError("truncated FEMB payload")
        values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    ids = []
    with open(sidecar_path(path), encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            ids.append(line)
    if len(ids) != rows:
        raise FormatError(f"sidecar lists {len(ids)} ids for {rows} rows")
    return EmbeddingMatrix(values=values, item_ids=ids)


def load_embedding_matrix(path: str | Path, catalog: Catalog) -> EmbeddingMatrix:
    """Load an FEMB file and reorder rows into catalog index order."""
    raw = read_embedding_file(path)
    if len(raw.item_ids) != len(catalog):
        raise FormatError(f"file has {len(raw.item_ids)} rows, catalog has {len(catalog)} items")
    row_of = {}
    for row, item in enumerate(raw.item_ids):
        if item not in catalog.index_of:
            raise FormatError(f"embedding row for unknown item {item!r}")
        if item in row_of:
            raise FormatError(f"duplicate embedding row for item {item!r}")
        row_of[item] = row
    order = [row_of[item] for item in catalog.item_ids]
    return EmbeddingMatrix(values=raw.values[order], item_ids=list(catalog.item_ids))


# ---------------------------------------------------------------------------
# deterministic pseudo-encoder
# ---------------------------------------------------------------------------


def _token_vector(token: str, dim: int, seed: int) -> Array:
    digest = hashlib.blake2b(
        token.encode("utf-8") + seed.to_bytes(8, "little", signed=False),
        digest_size=8,
    ).digest()
    gen = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    return gen.standard_normal(dim)


def pseudo_embed(text: str, dim: int, seed: int) -> Array:
    """Deterministic stand-in for a text encoder: mean of seeded Gaussian
    token vectors, L2-normalized; empty text maps to the zero vector."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    tokens = text.split()
    if not tokens:
        return np.zeros(dim, dtype=np.float32)
    acc = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        acc += _token_vector(token, dim, seed)
    acc /= len(tokens)
    norm = float(np.linalg.norm(acc))
    if norm > 0.0:
        acc /= norm
    return acc.astype(np.float32)


def pseudo_embed_catalog(catalog: Catalog, dim: int, seed: int) -> EmbeddingMatrix:
    values = np.stack([pseudo_embed(text, dim, seed) for text in catalog.texts])
    return EmbeddingMatrix(values=values.astype(np.float32), item_ids=list(catalog.item_ids))


# ---------------------------------------------------------------------------
# dataset bundle on disk
# ---------------------------------------------------------------------------

BUNDLE_FILES = ("catalog.txt", "users.txt", "sequences.tsv", "facets.csv", "texts.tsv")


def export_facet_csv(path: str | Path, catalog: Catalog, table: FacetTable) -> None:
    """CSV ``item_id,facet_name,class_label`` (empty label = missing)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item_id", "facet_name", "class_label"])
        for idx, item in enumerate(catalog.item_ids):
            for f, facet in enumerate(table.facet_names):
                cls = int(table.labels[f][idx])
                writer.writerow([item, facet, table.label_names[f][cls]])


def load_facet_csv(path: str | Path, catalog: Catalog) -> FacetTable:
    per_facet: dict[str, list[str | None]] = {}
    order: list[str] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["item_id", "facet_name", "class_label"]:
            raise FormatError(f"unexpected facet CSV header {header}")
        for row in reader:
            if len(row) != 3:
                raise FormatError(f"facet CSV row must have 3 fields, got {row}")
            item, facet, label = row
            idx = catalog.index_of.get(item)
            if idx is None:
                raise ConsistencyError(f"facet row for unknown item {item!r}")
            if facet not in per_facet:
                per_facet[facet] = [None] * len(catalog)
                order.append(facet)
            per_facet[facet][idx] = label or None
    return build_facet_table(order, [per_facet[f] for f in order])


def save_bundle(
    out_dir: str | Path,
    catalog: Catalog,
    dataset: SequenceDataset,
    facets: FacetTable,
    extra_manifest: dict | None = None,
) -> dict:
    """Write a dataset bundle directory; the manifest carries counts and a
    content hash over the data files so reruns are verifiably no-ops."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "catalog.txt", "w", encoding="utf-8") as fh:
        fh.writelines(f"{item}\n" for item in catalog.item_ids)
    with open(out / "users.txt", "w", encoding="utf-8") as fh:
        fh.writelines(f"{user}\n" for user in dataset.user_ids)
    with open(out / "sequences.tsv", "w", encoding="utf-8") as fh:
        for user, seq in zip(dataset.user_ids, dataset.sequences):
            fh.write(user + "\t" + ",".join(str(i) for i in seq) + "\n")
    export_facet_csv(out / "facets.csv", catalog, facets)
    with open(out / "texts.tsv", "w", encoding="utf-8") as fh:
        for item, text in zip(catalog.item_ids, catalog.texts):
            clean = text.replace("\t", " ").replace("\n", " ")
            fh.write(f"{item}\t{clean}\n")

    digest = hashlib.sha256()
    for name in BUNDLE_FILES:
        digest.update((out / name).read_bytes())
    manifest = {
        "num_users": dataset.num_users,
        "num_items": len(catalog),
        "num_interactions": int(sum(len(s) for s in dataset.sequences)),
        "max_len": dataset.max_len,
        "facet_names": facets.facet_names,
        "facet_class_counts": facets.class_counts,
        "content_hash": digest.hexdigest(),
    }
    manifest.update(extra_manifest or {})
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def load_bundle(bundle_dir: str | Path) -> tuple[Catalog, SequenceDataset, FacetTable, dict]:
    bundle = Path(bundle_dir)
    manifest = json.loads((bundle / "manifest.json").read_text(encoding="utf-8"))
    item_ids = (bundle / "catalog.txt").read_text(encoding="utf-8").splitlines()
    texts_by_id: dict[str, str] = {}
    for line in (bundle / "texts.tsv").read_text(encoding="utf-8").splitlines():
        item, _, text = line.partition("\t")
        texts_by_id[item] = text
    catalog = Catalog.from_items(item_ids, [texts_by_id.get(i, "") for i in item_ids])

    user_ids, sequences = [], []
    for line in (bundle / "sequences.tsv").read_text(encoding="utf-8").splitlines():
        user, _, items = line.partition("\t")
        user_ids.append(user)
        sequences.append([int(tok) for tok in items.split(",")])
    dataset = SequenceDataset(user_ids=user_ids, sequences=sequences, max_len=int(manifest["max_len"]))
    facets = load_facet_csv(bundle / "facets.csv", catalog)
    return catalog, dataset, facets, manifest
