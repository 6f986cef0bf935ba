"""Planted-structure synthetic dataset generator.

Items carry ground-truth facet labels; every user has a dominant facet
and one or two preferred classes in it, and each next item is drawn from
the preferred classes with a fixed match probability (and from the
complement otherwise).  Item texts are built from the label tokens, so
the deterministic pseudo-encoder clusters by class construction.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import Interaction
from .numerics import Rng

FACET_FIELDS = ("category", "brand", "price")


@dataclass
class SynthConfig:
    num_users: int = 300
    num_items: int = 60
    num_facets: int = 2
    classes_per_facet: int = 6
    seed: int = 0
    min_seq_len: int = 14
    max_seq_len: int = 24
    match_prob: float = 0.9
    two_class_prob: float = 0.3

    def __post_init__(self):
        if not 1 <= self.num_facets <= len(FACET_FIELDS):
            raise ValueError(f"num_facets must be in [1, {len(FACET_FIELDS)}]")
        if self.num_items < self.classes_per_facet:
            raise ValueError("need at least one item per class")
        if not 0.0 < self.match_prob < 1.0:
            raise ValueError("match_prob must be in (0, 1)")


@dataclass
class SynthTruth:
    """Ground truth kept for diagnostics: per-facet item labels and each
    user's dominant facet / preferred classes."""

    item_labels: list[list[int]]            # [facet][item] -> class 0..C-1
    dominant_facet: list[int]               # per user
    preferred: list[list[list[int]]]        # [user][facet] -> class list
    match_flags: list[list[bool]]           # per user, per drawn item


def _balanced_labels(num_items: int, classes: int, rng: Rng) -> list[int]:
    labels = [i % classes for i in range(num_items)]
    rng.shuffle(labels)
    return labels


def generate(config: SynthConfig):
    """Returns (interactions, metadata records, truth)."""
    rng = Rng(config.seed)
    label_rng = rng.split("labels")
    item_labels = [
        _balanced_labels(config.num_items, config.classes_per_facet, label_rng.split(f"facet{f}"))
        for f in range(config.num_facets)
    ]
    members = [
        {c: [i for i in range(config.num_items) if item_labels[f][i] == c]
         for c in range(config.classes_per_facet)}
        for f in range(config.num_facets)
    ]

    records = []
    for i in range(config.num_items):
        item_id = f"i{i:04d}"
        tokens = []
        record: dict = {"item_id": item_id, "title": f"item{i:04d}"}
        for f in range(config.num_facets):
            cls = item_labels[f][i]
            field = FACET_FIELDS[f]
            token = f"{field}{cls}"
            tokens.append(token)
            if field == "category":
                record["category"] = ["synthetic", token]
            elif field == "brand":
                record["brand"] = token
            else:  # price facet: class c sits inside fixed bin c
                record["price"] = 50.0 * cls + 25.0
        record["description"] = " ".join(tokens + tokens)  # label tokens dominate the text
        records.append(record)

    interactions: list[Interaction] = []
    dominant, preferred, match_flags = [], [], []
    user_rng = rng.split("users")
    for u in range(config.num_users):
        urng = user_rng.split(f"user{u}")
        dom = int(urng.integers(0, config.num_facets))
        prefs: list[list[int]] = []
        for f in range(config.num_facets):
            count = 2 if urng.random() < config.two_class_prob else 1
            classes = sorted(int(c) for c in urng.choice(config.classes_per_facet, size=count, replace=False))
            prefs.append(classes)
        dominant.append(dom)
        preferred.append(prefs)

        matching = sorted({i for c in prefs[dom] for i in members[dom][c]})
        complement = [i for i in range(config.num_items) if i not in set(matching)]
        length = int(urng.integers(config.min_seq_len, config.max_seq_len + 1))
        flags = []
        user_id = f"u{u:04d}"
        for t in range(length):
            hit = bool(urng.random() < config.match_prob) and matching
            pool = matching if hit else (complement or matching)
            item = int(pool[int(urng.integers(0, len(pool)))])
            flags.append(bool(hit))
            interactions.append(Interaction(user_id, f"i{item:04d}", t))
        match_flags.append(flags)

    truth = SynthTruth(
        item_labels=item_labels,
        dominant_facet=dominant,
        preferred=preferred,
        match_flags=match_flags,
    )
    return interactions, records, truth
