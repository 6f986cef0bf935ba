"""Full-catalog leave-one-out ranking evaluation (HR@k / NDCG@k) and the
per-user gate-weight explanation report."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Catalog, SequenceDataset
from .numerics import Array

Scorer = Callable[[list[int]], Array]

DEFAULT_KS = (5, 10, 20)


@dataclass
class MetricsReport:
    split: str
    ks: tuple[int, ...]
    hr: dict[int, float]
    ndcg: dict[int, float]
    num_users: int


def rank_of_target(scores: Array, target: int) -> int:
    """1-based rank of the target under full-catalog ranking; ties are
    broken by ascending item index."""
    scores = np.asarray(scores)
    target_score = scores[target]
    higher = int((scores > target_score).sum())
    tied_before = int((scores[:target] == target_score).sum())
    return 1 + higher + tied_before


def hr_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single relevant item, so the ideal DCG is 1."""
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def _split_example(dataset: SequenceDataset, u: int, split: str) -> tuple[list[int], int]:
    if split == "valid":
        return dataset.valid_example(u)
    if split == "test":
        return dataset.test_example(u)
    raise ValueError(f"split must be 'valid' or 'test', got {split!r}")


def evaluate(
    scorer: Scorer,
    dataset: SequenceDataset,
    split: str,
    ks: tuple[int, ...] = DEFAULT_KS,
    filter_seen: bool = False,
    num_threads: int | None = None,
) -> MetricsReport:
    """Score every user's split prefix, rank the held-out target over the
    whole catalog, and average HR/NDCG.  ``FAME_NUM_THREADS`` bounds the
    evaluation fan-out (aggregation order stays fixed by user index)."""
    if num_threads is None:
        num_threads = int(os.environ.get("FAME_NUM_THREADS", "1"))

    def user_rank(u: int) -> int:
        prefix, target = _split_example(dataset, u, split)
        scores = np.asarray(scorer(prefix), dtype=np.float64)
        if filter_seen:
            scores = scores.copy()
            seen = [i for i in set(prefix) if i != target]
            scores[seen] = -np.inf
        return rank_of_target(scores, target)

    users = range(dataset.num_users)
    if num_threads > 1:
        with ThreadPoolExecutor(max_workers=num_threads) as pool:
            ranks = list(pool.map(user_rank, users))
    else:
        ranks = [user_rank(u) for u in users]

    n = max(1, len(ranks))
    hr = {k: sum(hr_at_k(r, k) for r in ranks) / n for k in ks}
    ndcg = {k: sum(ndcg_at_k(r, k) for r in ranks) / n for k in ks}
    return MetricsReport(split=split, ks=tuple(ks), hr=hr, ndcg=ndcg, num_users=len(ranks))


def metrics_csv(report: MetricsReport) -> str:
    lines = ["split,k,HR,NDCG,users"]
    for k in report.ks:
        lines.append(f"{report.split},{k},{report.hr[k]:.6f},{report.ndcg[k]:.6f},{report.num_users}")
    return "\n".join(lines) + "\n"


def metrics_table(report: MetricsReport) -> str:
    header = f"{report.split} metrics over {report.num_users} users"
    rows = [header, f"{'k':>4}  {'HR@k':>8}  {'NDCG@k':>8}"]
    for k in report.ks:
        rows.append(f"{k:>4}  {report.hr[k]:>8.4f}  {report.ndcg[k]:>8.4f}")
    return "\n".join(rows)


def explain_user(
    model,
    dataset: SequenceDataset,
    catalog: Catalog,
    user_index: int,
    top_k: int = 10,
) -> dict:
    """Gate weights plus per-head and fused top-k recommendation lists for
    one user's test prefix."""
    from .fame_layer import FameModel, fame_forward

    assert isinstance(model, FameModel)
    prefix, target = dataset.test_example(user_index)
    window = prefix[-model.backbone_config.max_len:]
    fused, gate, cache = fame_forward(window, model)

    def top_items(scores: Array) -> list[str]:
        order = np.lexsort((np.arange(len(scores)), -scores))
        return [catalog.item_ids[i] for i in order[:top_k]]

    heads = []
    for h in range(model.config.num_heads):
        scores = cache["layer"]["heads"][h]["scores"][-1]
        heads.append({"head": h, "gate_weight": float(gate[-1][h]), "top_items": top_items(scores)})
    return {
        "user": dataset.user_ids[user_index],
        "gate_weights": [float(g) for g in gate[-1]],
        "heads": heads,
        "fused_top_items": top_items(fused[-1]),
        "target_item": catalog.item_ids[target],
        "target_rank": rank_of_target(fused[-1], target),
    }
