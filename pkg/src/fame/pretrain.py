"""Text-enhanced facet-aware contrastive pre-training.

Frozen item text embeddings pass through a shared MLP and per-facet
projection heads onto unit hyperspheres.  Heads are trained round-robin
with a supervised contrastive objective over class-balanced batches, so
every anchor is guaranteed positive partners; the per-facet unit vectors
are finally concatenated into the item embedding that initializes the
recommender.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FacetTable
from .numerics import (
    Array,
    DEFAULT_DTYPE,
    Param,
    Rng,
    adam_step,
    relu,
    relu_backward,
)

NORM_EPS = 1e-12


class SamplerError(ValueError):
    """Not enough valid classes to build class-balanced batches."""


class BatchError(ValueError):
    """A contrastive batch violates its preconditions."""


class FacetMismatchError(ValueError):
    """Facet table width does not match the projector head count."""


@dataclass
class ProjectorConfig:
    input_dim: int          # frozen text embedding width
    output_dim: int         # concatenated facet embedding width
    num_heads: int = 2
    mid_dim: int | None = None  # defaults to output_dim

    def __post_init__(self):
        if self.output_dim % self.num_heads != 0:
            raise ValueError(f"output dim {self.output_dim} not divisible by {self.num_heads} heads")
        if self.mid_dim is None:
            self.mid_dim = self.output_dim

    @property
    def facet_dim(self) -> int:
        return self.output_dim // self.num_heads


@dataclass
class ProjectorParams:
    w_shared: Param             # (input_dim, mid_dim)
    b_shared: Param             # (mid_dim,)
    head_w: list[Param]         # per head (mid_dim, facet_dim)
    head_b: list[Param]         # per head (facet_dim,)

    def shared_params(self):
        yield "w_shared", self.w_shared
        yield "b_shared", self.b_shared

    def head_params(self, head: int):
        yield f"head{head}.w", self.head_w[head]
        yield f"head{head}.b", self.head_b[head]

    def named_params(self):
        yield from self.shared_params()
        for h in range(len(self.head_w)):
            yield from self.head_params(h)


@dataclass
class PretrainConfig:
    tau: float = 0.1
    p_classes: int = 4
    k_per_class: int = 8
    epochs: int = 300
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.p_classes < 2 or self.k_per_class < 2:
            raise ValueError("need at least 2 classes and 2 samples per class")


@dataclass
class SupConBatch:
    indices: Array
    head: int
    labels: Array


def init_projector(config: ProjectorConfig, rng: Rng, dtype=DEFAULT_DTYPE) -> ProjectorParams:
    return ProjectorParams(
        w_shared=Param.of(rng.xavier_uniform((config.input_dim, config.mid_dim), dtype)),
        b_shared=Param.of(np.zeros(config.mid_dim, dtype=dtype)),
        head_w=[
            Param.of(rng.xavier_uniform((config.mid_dim, config.facet_dim), dtype))
            for _ in range(config.num_heads)
        ],
        head_b=[Param.of(np.zeros(config.facet_dim, dtype=dtype)) for _ in range(config.num_heads)],
    )


# ---------------------------------------------------------------------------
# projector forward/backward
# ---------------------------------------------------------------------------


def encode_forward(emb: Array, params: ProjectorParams):
    pre = emb @ params.w_shared.value + params.b_shared.value
    return relu(pre), {"emb": emb, "pre": pre}


def encode_items(emb: Array, params: ProjectorParams) -> Array:
    hidden, _ = encode_forward(emb, params)
    return hidden


def encode_backward(d_hidden: Array, cache: dict, params: ProjectorParams) -> None:
    d_pre = relu_backward(d_hidden, cache["pre"])
    params.w_shared.grad += cache["emb"].T @ d_pre
    params.b_shared.grad += d_pre.sum(axis=0)


def project_forward(hidden: Array, params: ProjectorParams, head: int):
    u = hidden @ params.head_w[head].value + params.head_b[head].value
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    z = u / (norm + NORM_EPS)
    return z, {"hidden": hidden, "u": u, "norm": norm}


def project_facet(hidden: Array, params: ProjectorParams, head: int) -> Array:
    """Affine map into the facet subspace followed by L2 normalization."""
    z, _ = project_forward(np.atleast_2d(hidden), params, head)
    return z[0] if np.asarray(hidden).ndim == 1 else z


def project_backward(d_z: Array, cache: dict, params: ProjectorParams, head: int) -> Array:
    u, norm = cache["u"], cache["norm"]
    denom = norm + NORM_EPS
    safe_norm = np.maximum(norm, 1e-30)
    dot = (d_z * u).sum(axis=-1, keepdims=True)
    d_u = d_z / denom - u * (dot / (safe_norm * denom * denom))
    params.head_w[head].grad += cache["hidden"].T @ d_u
    params.head_b[head].grad += d_u.sum(axis=0)
    return d_u @ params.head_w[head].value.T


# ---------------------------------------------------------------------------
# supervised contrastive loss
# ---------------------------------------------------------------------------


def build_mask(labels) -> Array:
    """M[i][j] = 1 iff labels match and i != j (zero diagonal)."""
    labels = np.asarray(labels)
    mask = (labels[:, None] == labels[None, :]).astype(np.int64)
    np.fill_diagonal(mask, 0)
    return mask


def supcon_loss(z: Array, labels, tau: float) -> tuple[float, Array]:
    """Mean, over anchors that have at least one same-label partner, of
    the negative log-likelihood of the anchor's positives against all
    other batch members.  Returns (loss, d_loss/d_z); anchors without
    positives contribute nothing.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(z)
    b = z.shape[0]
    if b < 2:
        raise BatchError(f"contrastive batch needs at least 2 rows, got {b}")
    mask = build_mask(labels).astype(z.dtype)
    pos_counts = mask.sum(axis=1)
    contributing = pos_counts >= 1
    n_contrib = int(contributing.sum())
    if n_contrib == 0:
        return 0.0, np.zeros_like(z)

    sim = (z @ z.T) / tau
    off_diag = sim.copy()
    np.fill_diagonal(off_diag, -np.inf)
    row_max = off_diag.max(axis=1, keepdims=True)
    exp = np.exp(off_diag - row_max)
    denom = exp.sum(axis=1, keepdims=True)
    lse = np.log(denom[:, 0]) + row_max[:, 0]

    pos_mean = np.where(contributing, (mask * sim).sum(axis=1) / np.maximum(pos_counts, 1.0), 0.0)
    loss = float(np.mean((lse - pos_mean)[contributing]))

    probs = exp / denom  # softmax over j != i, zero on the diagonal
    g = probs - mask / np.maximum(pos_counts[:, None], 1.0)
    g[~contributing] = 0.0
    g /= n_contrib
    d_z = ((g + g.T) @ z) / tau
    return loss, d_z


# ---------------------------------------------------------------------------
# fair class-balanced sampler
# ---------------------------------------------------------------------------


def valid_classes(labels: Array, k_per_class: int) -> dict[int, np.ndarray]:
    """Classes (excluding the missing-data sentinel 0) with at least
    ``k_per_class`` members."""
    labels = np.asarray(labels)
    out = {}
    for cls in np.unique(labels):
        if cls == 0:
            continue
        members = np.flatnonzero(labels == cls)
        if len(members) >= k_per_class:
            out[int(cls)] = members
    return out


def pk_sample(
    labels: Array,
    p_classes: int,
    k_per_class: int,
    rng: Rng,
    facet_name: str = "",
) -> list[Array]:
    """One fair epoch of class-balanced batches: every batch holds exactly
    P distinct classes x K members (drawn without replacement inside a
    batch), and every valid class appears in the epoch before any class is
    revisited more than once."""
    classes = valid_classes(labels, k_per_class)
    if len(classes) < p_classes:
        raise SamplerError(
            f"facet {facet_name or '?'}: {len(classes)} classes have >= {k_per_class} members, "
            f"need at least {p_classes}"
        )
    order = sorted(classes)
    rng.shuffle(order)
    batches = []
    for start in range(0, len(order), p_classes):
        chunk = order[start : start + p_classes]
        if len(chunk) < p_classes:
            # top up the final short chunk with already-visited classes
            others = [c for c in order if c not in chunk]
            rng.shuffle(others)
            chunk = chunk + others[: p_classes - len(chunk)]
        indices = []
        for cls in chunk:
            members = classes[cls]
            pick = rng.choice(len(members), size=k_per_class, replace=False)
            indices.extend(members[pick])
        batches.append(np.asarray(indices, dtype=np.intp))
    return batches


# ---------------------------------------------------------------------------
# alternating training and export
# ---------------------------------------------------------------------------


def alternating_pretrain(
    emb: Array,
    facets: FacetTable,
    params: ProjectorParams,
    config: PretrainConfig,
) -> list[dict]:
    """Round-robin per-facet contrastive training: each step draws a
    class-balanced batch for the active facet and updates the shared MLP
    plus that facet's head only.  Returns the per-step training log."""
    num_heads = len(params.head_w)
    if facets.num_facets != num_heads:
        raise FacetMismatchError(
            f"projector has {num_heads} heads but facet table has {facets.num_facets} facets"
        )
    rng = Rng(config.seed)
    logs: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        plans = [
            pk_sample(
                facets.labels[h],
                config.p_classes,
                config.k_per_class,
                rng.split(f"epoch{epoch}-facet{h}"),
                facet_name=facets.facet_names[h],
            )
            for h in range(num_heads)
        ]
        for i in range(max(len(plan) for plan in plans)):
            for head in range(num_heads):
                if i >= len(plans[head]):
                    continue
                batch = SupConBatch(
                    indices=plans[head][i],
                    head=head,
                    labels=facets.labels[head][plans[head][i]],
                )
                hidden, enc_cache = encode_forward(emb[batch.indices], params)
                z, proj_cache = project_forward(hidden, params, head)
                loss, d_z = supcon_loss(z, batch.labels, config.tau)
                d_hidden = project_backward(d_z, proj_cache, params, head)
                encode_backward(d_hidden, enc_cache, params)
                for _, p in list(params.shared_params()) + list(params.head_params(head)):
                    adam_step(p, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
                logs.append({"step": step, "epoch": epoch, "head": head, "loss": loss})
                step += 1
    return logs


def export_item_embeddings(params: ProjectorParams, emb: Array) -> Array:
    """Concatenate the per-facet unit vectors of every item: (V, D)."""
    hidden, _ = encode_forward(emb, params)
    pieces = []
    for head in range(len(params.head_w)):
        z, _ = project_forward(hidden, params, head)
        pieces.append(z)
    return np.concatenate(pieces, axis=1).astype(np.float32)
