"""Causal multi-head self-attention encoder for next-item prediction.

One layer is: multi-head causal attention (heads concatenated), then a
position-wise feed-forward block wrapped in dropout, a residual connection
and layer norm.  The last position's final-layer output is the sequence
representation; item scores are dot products against the item table.

Every forward function has a hand-derived backward companion that
accumulates into ``Param.grad``; the pairing is validated against the
finite-difference oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Array,
    DEFAULT_DTYPE,
    Param,
    Rng,
    dropout_mask,
    layer_norm_backward,
    layer_norm_forward,
    relu,
    relu_backward,
    softmax_rows,
    softmax_rows_backward,
)


class InputError(ValueError):
    """A sequence violates a forward-pass precondition."""


@dataclass
class BackboneConfig:
    num_items: int
    dim: int = 64
    num_heads: int = 2
    num_layers: int = 2
    max_len: int = 50
    dropout: float = 0.2
    eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if self.num_layers < 1:
            raise ValueError("need at least one attention layer")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_items": self.num_items,
            "dim": self.dim,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
            "max_len": self.max_len,
            "dropout": self.dropout,
            "eps": self.eps,
        }


@dataclass
class LayerParams:
    w_q: Param  # (d, d), head h occupies columns [h*d', (h+1)*d')
    w_k: Param
    w_v: Param
    ffn_w1: Param  # (d, d)
    ffn_b1: Param  # (d,)
    ffn_w2: Param
    ffn_b2: Param
    ln_gamma: Param  # (d,)
    ln_beta: Param

    def named_params(self, prefix: str):
        for name in ("w_q", "w_k", "w_v", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln_gamma", "ln_beta"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class BackboneParams:
    item_table: Param  # (num_items, d)
    pos_table: Param   # (max_len, d)
    layers: list[LayerParams]
    # optional frozen-text embedder: item_table is rematerialized as
    # embed_base @ embed_w + embed_b and only the affine map trains
    embed_base: Array | None = None
    embed_w: Param | None = None
    embed_b: Param | None = None

    @property
    def projected_embedder(self) -> bool:
        return self.embed_base is not None

    def refresh_item_table(self) -> None:
        if self.projected_embedder:
            self.item_table.value[...] = self.embed_base @ self.embed_w.value + self.embed_b.value

    def propagate_item_grad(self) -> None:
        """Route accumulated item-table gradient into the affine embedder."""
        if self.projected_embedder:
            self.embed_w.grad += self.embed_base.T @ self.item_table.grad
            self.embed_b.grad += self.item_table.grad.sum(axis=0)
            self.item_table.zero_grad()

    def named_params(self):
        """All stored parameters, in the fixed declaration order used by
        checkpoints and the optimizer."""
        yield "item_table", self.item_table
        yield "pos_table", self.pos_table
        if self.projected_embedder:
            yield "embed_w", self.embed_w
            yield "embed_b", self.embed_b
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"layer{i}")

    def trainable_params(self):
        for name, param in self.named_params():
            if self.projected_embedder and name == "item_table":
                continue
            yield name, param


def init_layer(dim: int, rng: Rng, dtype=DEFAULT_DTYPE) -> LayerParams:
    return LayerParams(
        w_q=Param.of(rng.xavier_uniform((dim, dim), dtype)),
        w_k=Param.of(rng.xavier_uniform((dim, dim), dtype)),
        w_v=Param.of(rng.xavier_uniform((dim, dim), dtype)),
        ffn_w1=Param.of(rng.xavier_uniform((dim, dim), dtype)),
        ffn_b1=Param.of(np.zeros(dim, dtype=dtype)),
        ffn_w2=Param.of(rng.xavier_uniform((dim, dim), dtype)),
        ffn_b2=Param.of(np.zeros(dim, dtype=dtype)),
        ln_gamma=Param.of(np.ones(dim, dtype=dtype)),
        ln_beta=Param.of(np.zeros(dim, dtype=dtype)),
    )


def init_backbone(config: BackboneConfig, rng: Rng, dtype=DEFAULT_DTYPE) -> BackboneParams:
    """Random initialization: embedding tables ~ N(0, 0.02^2), projections
    Xavier-uniform, biases zero."""
    table_rng = rng.split("tables")
    layer_rng = rng.split("layers")
    return BackboneParams(
        item_table=Param.of(table_rng.normal((config.num_items, config.dim), std=0.02, dtype=dtype)),
        pos_table=Param.of(table_rng.normal((config.max_len, config.dim), std=0.02, dtype=dtype)),
        layers=[init_layer(config.dim, layer_rng.split(f"layer{i}"), dtype) for i in range(config.num_layers)],
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def embed_forward(
    items: list[int],
    params: BackboneParams,
    p_drop: float,
    rng: Rng | None,
    training: bool,
):
    """Row i = item embedding + position embedding, then dropout."""
    t = len(items)
    if t == 0:
        raise InputError("empty sequence")
    if t > params.pos_table.value.shape[0]:
        raise InputError(f"sequence length {t} exceeds max_len {params.pos_table.value.shape[0]}")
    idx = np.asarray(items, dtype=np.intp)
    if idx.min() < 0 or idx.max() >= params.item_table.value.shape[0]:
        raise IndexError("item index out of range")
    x = params.item_table.value[idx] + params.pos_table.value[:t]
    if training and p_drop > 0.0:
        mask = dropout_mask(x.shape, p_drop, rng, x.dtype)
        x = x * mask
    else:
        mask = None
    return x, {"items": idx, "mask": mask}


def embed_backward(d_x: Array, cache: dict, params: BackboneParams) -> None:
    if cache["mask"] is not None:
        d_x = d_x * cache["mask"]
    np.add.at(params.item_table.grad, cache["items"], d_x)
    params.pos_table.grad[: d_x.shape[0]] += d_x


def causal_mask(t: int, dtype) -> Array:
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def attention_forward(
    x: Array,
    layer: LayerParams,
    num_heads: int,
    eps: float,
    p_drop: float,
    rng: Rng | None,
    training: bool,
):
    """Multi-head causal attention then the feed-forward block with
    dropout, residual and layer norm."""
    t, dim = x.shape
    dh = dim // num_heads
    scale = 1.0 / np.sqrt(dh)
    mask = causal_mask(t, x.dtype)

    q = x @ layer.w_q.value
    k = x @ layer.w_k.value
    v = x @ layer.w_v.value

    head_probs, head_outs = [], []
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = (q[:, sl] @ k[:, sl].T) * scale + mask
        probs = softmax_rows(scores)
        head_probs.append(probs)
        head_outs.append(probs @ v[:, sl])
    f = np.concatenate(head_outs, axis=1)

    h_pre = f @ layer.ffn_w1.value + layer.ffn_b1.value
    h_act = relu(h_pre)
    ffn_out = h_act @ layer.ffn_w2.value + layer.ffn_b2.value
    if training and p_drop > 0.0:
        drop = dropout_mask(ffn_out.shape, p_drop, rng, x.dtype)
        ffn_out = ffn_out * drop
    else:
        drop = None
    out, ln_cache = layer_norm_forward(f + ffn_out, layer.ln_gamma.value, layer.ln_beta.value, eps)

    cache = {
        "x": x,
        "q": q,
        "k": k,
        "v": v,
        "head_probs": head_probs,
        "head_outs": head_outs,
        "f": f,
        "h_pre": h_pre,
        "h_act": h_act,
        "drop": drop,
        "ln_cache": ln_cache,
        "scale": scale,
    }
    return out, cache


def attention_backward(d_out: Array, cache: dict, layer: LayerParams, num_heads: int) -> Array:
    """Accumulates parameter gradients on ``layer`` and returns d_x."""
    x, q, k, v = cache["x"], cache["q"], cache["k"], cache["v"]
    t, dim = x.shape
    dh = dim // num_heads
    scale = cache["scale"]

    d_res, d_gamma, d_beta = layer_norm_backward(d_out, cache["ln_cache"])
    layer.ln_gamma.grad += d_gamma
    layer.ln_beta.grad += d_beta

    d_f = d_res.copy()  # residual branch
    d_ffn_out = d_res if cache["drop"] is None else d_res * cache["drop"]
    layer.ffn_w2.grad += cache["h_act"].T @ d_ffn_out
    layer.ffn_b2.grad += d_ffn_out.sum(axis=0)
    d_h_act = d_ffn_out @ layer.ffn_w2.value.T
    d_h_pre = relu_backward(d_h_act, cache["h_pre"])
    layer.ffn_w1.grad += cache["f"].T @ d_h_pre
    layer.ffn_b1.grad += d_h_pre.sum(axis=0)
    d_f += d_h_pre @ layer.ffn_w1.value.T

    d_q = np.zeros_like(q)
    d_k = np.zeros_like(k)
    d_v = np.zeros_like(v)
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        probs = cache["head_probs"][h]
        d_head = d_f[:, sl]
        d_probs = d_head @ v[:, sl].T
        d_v[:, sl] = probs.T @ d_head
        d_scores = softmax_rows_backward(d_probs, probs)
        d_q[:, sl] = (d_scores @ k[:, sl]) * scale
        d_k[:, sl] = (d_scores.T @ q[:, sl]) * scale

    layer.w_q.grad += x.T @ d_q
    layer.w_k.grad += x.T @ d_k
    layer.w_v.grad += x.T @ d_v
    return d_q @ layer.w_q.value.T + d_k @ layer.w_k.value.T + d_v @ layer.w_v.value.T


def backbone_forward(
    items: list[int],
    params: BackboneParams,
    config: BackboneConfig,
    rng: Rng | None = None,
    training: bool = False,
):
    """Embed then run all attention layers; returns per-position outputs
    (last row is the sequence representation) and the backward caches."""
    x, embed_cache = embed_forward(items, params, config.dropout, rng, training)
    layer_caches = []
    for layer in params.layers:
        x, cache = attention_forward(x, layer, config.num_heads, config.eps, config.dropout, rng, training)
        layer_caches.append(cache)
    return x, {"embed": embed_cache, "layers": layer_caches}


def backbone_backward(d_outputs: Array, caches: dict, params: BackboneParams, config: BackboneConfig) -> None:
    d_x = d_outputs
    for layer, cache in zip(reversed(params.layers), reversed(caches["layers"])):
        d_x = attention_backward(d_x, cache, layer, config.num_heads)
    embed_backward(d_x, caches["embed"], params)


# ---------------------------------------------------------------------------
# public operation surface
# ---------------------------------------------------------------------------


def embed_sequence(
    items: list[int],
    params: BackboneParams,
    rng: Rng | None = None,
    training: bool = False,
    p_drop: float = 0.0,
) -> Array:
    x, _ = embed_forward(items, params, p_drop, rng, training)
    return x


def causal_attention_layer(
    x: Array,
    layer: LayerParams,
    num_heads: int,
    eps: float = 1e-5,
    p_drop: float = 0.0,
    rng: Rng | None = None,
    training: bool = False,
) -> Array:
    out, _ = attention_forward(x, layer, num_heads, eps, p_drop, rng, training)
    return out


def sasrec_scores(f_t: Array, item_table: Array) -> Array:
    """logit_v = item embedding . sequence representation, for every item."""
    if f_t.shape[-1] != item_table.shape[1]:
        raise ValueError(f"dim mismatch: {f_t.shape} vs {item_table.shape}")
    return item_table @ f_t


def score_sequence(params: BackboneParams, config: BackboneConfig, items: list[int]) -> Array:
    """Eval-mode logits over the whole catalog for one input prefix."""
    window = items[-config.max_len:]
    outputs, _ = backbone_forward(window, params, config, training=False)
    return sasrec_scores(outputs[-1], params.item_table.value)


def sequence_loss_and_backward(
    items: list[int],
    params: BackboneParams,
    config: BackboneConfig,
    rng: Rng | None = None,
    training: bool = True,
) -> tuple[float, int]:
    """Summed next-item cross entropy over every prefix position of the
    sequence; when training, accumulates the (unscaled) gradient of that
    sum into every parameter.  Returns (loss_sum, pair_count) so the
    caller can normalize a whole mini-batch uniformly."""
    from .numerics import cross_entropy_from_logits

    if len(items) < 2:
        return 0.0, 0
    outputs, caches = backbone_forward(items, params, config, rng, training)
    table = params.item_table.value
    d_outputs = np.zeros_like(outputs)
    loss_sum = 0.0
    for pos in range(len(items) - 1):
        logits = table @ outputs[pos]
        loss, d_logits = cross_entropy_from_logits(logits, items[pos + 1])
        loss_sum += loss
        if training:
            d_outputs[pos] += table.T @ d_logits
            params.item_table.grad += np.outer(d_logits, outputs[pos])
    if training:
        backbone_backward(d_outputs, caches, params, config)
    return loss_sum, len(items) - 1
