"""Facet-aware multi-head prediction layer with mixture-of-experts
query attention.

The final encoder layer is replaced by this block: inside every attention
head, N expert query projections each attend over the (shared) keys and
values; a learned router blends the expert outputs into one per-head
representation.  Each head then scores the whole catalog against its own
item sub-embeddings, and a gate network fuses the per-head score vectors
into the final ranking.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .backbone import (
    BackboneConfig,
    BackboneParams,
    InputError,
    attention_backward,
    attention_forward,
    causal_mask,
    embed_backward,
    embed_forward,
)
from .numerics import (
    Array,
    DEFAULT_DTYPE,
    Param,
    Rng,
    cross_entropy_from_logits,
    dropout_mask,
    layer_norm_backward,
    layer_norm_forward,
    relu,
    relu_backward,
    softmax_rows,
    softmax_rows_backward,
)


class ConfigMismatchError(ValueError):
    """Backbone and facet-head configurations do not line up."""


@dataclass
class FameConfig:
    num_heads: int = 2
    num_experts: int = 2
    dim: int = 64
    dropout: float = 0.2
    eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if self.num_experts < 1:
            raise ValueError("need at least one expert per head")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_heads": self.num_heads,
            "num_experts": self.num_experts,
            "dim": self.dim,
            "dropout": self.dropout,
            "eps": self.eps,
        }


@dataclass
class FameParams:
    expert_q: list[list[Param]]   # [head][expert], each (d, d')
    w_k: list[Param]              # per head (d, d')
    w_v: list[Param]              # per head (d, d')
    w_facet: list[Param]          # per head (d, d'): item sub-embedding projection
    router: list[Param]           # per head (N*d', N)
    ffn_w1: Param                 # (d', d'), shared across heads
    ffn_b1: Param
    ffn_w2: Param
    ffn_b2: Param
    ln_gamma: Param               # (d',)
    ln_beta: Param
    gate_w: Param                 # (d, H)
    gate_b: Param                 # (H,)

    def named_params(self, prefix: str = "fame"):
        for h in range(len(self.w_k)):
            for n, param in enumerate(self.expert_q[h]):
                yield f"{prefix}.head{h}.expert{n}.w_q", param
            yield f"{prefix}.head{h}.w_k", self.w_k[h]
            yield f"{prefix}.head{h}.w_v", self.w_v[h]
            yield f"{prefix}.head{h}.w_facet", self.w_facet[h]
            yield f"{prefix}.head{h}.router", self.router[h]
        for name in ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln_gamma", "ln_beta", "gate_w", "gate_b"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class FameModel:
    """Retained encoder trunk (embeddings + all but the final layer) plus
    the facet-head final layer."""

    backbone: BackboneParams        # layers = the retained trunk layers
    fame: FameParams
    config: FameConfig
    backbone_config: BackboneConfig  # original encoder config (pre-replacement)

    def named_params(self):
        yield from self.backbone.named_params()
        yield from self.fame.named_params()

    def trainable_params(self):
        yield from self.backbone.trainable_params()
        yield from self.fame.named_params()


def init_fame_params(config: FameConfig, rng: Rng, dtype=DEFAULT_DTYPE) -> FameParams:
    d, dh = config.dim, config.head_dim
    heads, experts = config.num_heads, config.num_experts
    return FameParams(
        expert_q=[
            [Param.of(rng.xavier_uniform((d, dh), dtype)) for _ in range(experts)]
            for _ in range(heads)
        ],
        w_k=[Param.of(rng.xavier_uniform((d, dh), dtype)) for _ in range(heads)],
        w_v=[Param.of(rng.xavier_uniform((d, dh), dtype)) for _ in range(heads)],
        w_facet=[Param.of(rng.xavier_uniform((d, dh), dtype)) for _ in range(heads)],
        router=[Param.of(rng.xavier_uniform((experts * dh, experts), dtype)) for _ in range(heads)],
        ffn_w1=Param.of(rng.xavier_uniform((dh, dh), dtype)),
        ffn_b1=Param.of(np.zeros(dh, dtype=dtype)),
        ffn_w2=Param.of(rng.xavier_uniform((dh, dh), dtype)),
        ffn_b2=Param.of(np.zeros(dh, dtype=dtype)),
        ln_gamma=Param.of(np.ones(dh, dtype=dtype)),
        ln_beta=Param.of(np.zeros(dh, dtype=dtype)),
        gate_w=Param.of(rng.xavier_uniform((d, heads), dtype)),
        gate_b=Param.of(np.zeros(heads, dtype=dtype)),
    )


def _copy_param(param: Param) -> Param:
    return Param.of(param.value.copy())


def init_from_backbone(
    params: BackboneParams,
    backbone_config: BackboneConfig,
    fame_config: FameConfig,
    rng: Rng,
    expert_noise: float = 0.01,
    function_preserving: bool = False,
) -> FameModel:
    """Replace the final encoder layer: keys and values keep the trained
    head slices, each expert query starts from the trained query slice
    plus small noise, and the new components (shared FFN, sub-embedding
    projections, gate, routers) are freshly initialized.

    ``function_preserving`` (single-head, single-expert only) additionally
    copies the final layer's FFN/layer-norm, uses an identity sub-embedding
    projection and a zero gate/router, so the initial model scores exactly
    like the trained encoder.
    """
    if backbone_config.dim != fame_config.dim:
        raise ConfigMismatchError(
            f"encoder dim {backbone_config.dim} != facet-head dim {fame_config.dim}"
        )
    if backbone_config.num_heads != fame_config.num_heads:
        raise ConfigMismatchError(
            f"encoder has {backbone_config.num_heads} heads, facet head expects {fame_config.num_heads}"
        )
    if function_preserving and (fame_config.num_heads != 1 or fame_config.num_experts != 1):
        raise ConfigMismatchError("function-preserving init requires one head and one expert")

    dh = fame_config.head_dim
    final = params.layers[-1]
    fame = init_fame_params(fame_config, rng.split("fame-init"))
    noise_rng = rng.split("expert-noise")
    dtype = params.item_table.value.dtype
    for h in range(fame_config.num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        fame.w_k[h] = Param.of(final.w_k.value[:, sl].copy())
        fame.w_v[h] = Param.of(final.w_v.value[:, sl].copy())
        for n in range(fame_config.num_experts):
            noise = noise_rng.normal((backbone_config.dim, dh), std=expert_noise, dtype=dtype)
            fame.expert_q[h][n] = Param.of(final.w_q.value[:, sl] + noise)
    if function_preserving:
        fame.ffn_w1 = _copy_param(final.ffn_w1)
        fame.ffn_b1 = _copy_param(final.ffn_b1)
        fame.ffn_w2 = _copy_param(final.ffn_w2)
        fame.ffn_b2 = _copy_param(final.ffn_b2)
        fame.ln_gamma = _copy_param(final.ln_gamma)
        fame.ln_beta = _copy_param(final.ln_beta)
        fame.w_facet = [Param.of(np.eye(fame_config.dim, dtype=dtype))]
        fame.gate_w = Param.of(np.zeros_like(fame.gate_w.value))
        fame.gate_b = Param.of(np.zeros_like(fame.gate_b.value))
        fame.router = [Param.of(np.zeros_like(fame.router[0].value))]

    trunk = BackboneParams(
        item_table=_copy_param(params.item_table),
        pos_table=_copy_param(params.pos_table),
        layers=[
            type(layer)(**{name.split(".")[-1]: _copy_param(p) for name, p in layer.named_params("x")})
            for layer in params.layers[:-1]
        ],
        embed_base=None if params.embed_base is None else params.embed_base.copy(),
        embed_w=None if params.embed_w is None else _copy_param(params.embed_w),
        embed_b=None if params.embed_b is None else _copy_param(params.embed_b),
    )
    return FameModel(backbone=trunk, fame=fame, config=fame_config, backbone_config=backbone_config)


# ---------------------------------------------------------------------------
# per-piece operations
# ---------------------------------------------------------------------------


def expert_queries(x_i: Array, fame: FameParams, head: int) -> list[Array]:
    """One query vector per expert for a single item embedding."""
    return [x_i @ w.value for w in fame.expert_q[head]]


def moe_head_attention(x: Array, fame: FameParams, head: int) -> Array:
    """Per-expert causal attention outputs for one head: (t, N, d')."""
    outs, _ = _moe_attention_forward(x, fame, head)
    return np.stack(outs, axis=1)


def route_experts(f_experts: Array, fame: FameParams, head: int) -> tuple[Array, Array]:
    """Blend one position's N expert outputs: returns (weights, blended)."""
    f_experts = np.asarray(f_experts)
    concat = f_experts.reshape(1, -1)
    beta = softmax_rows(concat @ fame.router[head].value)[0]
    return beta, beta @ f_experts


def head_ffn(f: Array, fame: FameParams, eps: float = 1e-5) -> Array:
    """Shared reduced-dimension feed-forward with residual + layer norm."""
    h = relu(f @ fame.ffn_w1.value + fame.ffn_b1.value)
    out = h @ fame.ffn_w2.value + fame.ffn_b2.value
    y, _ = layer_norm_forward(f + out, fame.ln_gamma.value, fame.ln_beta.value, eps)
    return y


def facet_subembeddings(item_table: Array, fame: FameParams) -> list[Array]:
    """Per-head item sub-embedding matrices (num_items, d')."""
    return [item_table @ w.value for w in fame.w_facet]


def head_scores(f_head: Array, sub_embeddings: Array) -> Array:
    """Per-head preference logits over the catalog."""
    return sub_embeddings @ f_head


def gate_heads(head_reprs: list[Array], fame: FameParams) -> Array:
    """Softmax head-importance weights from the concatenated per-head
    representations."""
    concat = np.concatenate(head_reprs).reshape(1, -1)
    logits = concat @ fame.gate_w.value + fame.gate_b.value
    return softmax_rows(logits)[0]


# ---------------------------------------------------------------------------
# full forward/backward
# ---------------------------------------------------------------------------


def _moe_attention_forward(x: Array, fame: FameParams, head: int):
    t = x.shape[0]
    dh = fame.w_k[head].value.shape[1]
    scale = 1.0 / np.sqrt(dh)
    mask = causal_mask(t, x.dtype)
    k = x @ fame.w_k[head].value
    v = x @ fame.w_v[head].value
    outs, probs_list, queries = [], [], []
    for w in fame.expert_q[head]:
        q = x @ w.value
        probs = softmax_rows((q @ k.T) * scale + mask)
        outs.append(probs @ v)
        probs_list.append(probs)
        queries.append(q)
    cache = {"k": k, "v": v, "probs": probs_list, "queries": queries, "scale": scale}
    return outs, cache


def fame_layer_forward(
    x: Array,
    fame: FameParams,
    config: FameConfig,
    item_table: Array,
    rng: Rng | None = None,
    training: bool = False,
):
    """Full facet-head layer on trunk output ``x``: returns fused logits
    for every position (t, num_items) plus the backward cache."""
    heads = []
    head_reprs = []
    for h in range(config.num_heads):
        expert_outs, attn_cache = _moe_attention_forward(x, fame, h)
        r_in = np.concatenate(expert_outs, axis=1)                      # (t, N*d')
        beta = softmax_rows(r_in @ fame.router[h].value)                # (t, N)
        f_h = sum(beta[:, n : n + 1] * expert_outs[n] for n in range(config.num_experts))

        h_pre = f_h @ fame.ffn_w1.value + fame.ffn_b1.value
        h_act = relu(h_pre)
        ffn_out = h_act @ fame.ffn_w2.value + fame.ffn_b2.value
        if training and config.dropout > 0.0:
            drop = dropout_mask(ffn_out.shape, config.dropout, rng, x.dtype)
            ffn_out = ffn_out * drop
        else:
            drop = None
        f_big, ln_cache = layer_norm_forward(
            f_h + ffn_out, fame.ln_gamma.value, fame.ln_beta.value, config.eps
        )
        sub = item_table @ fame.w_facet[h].value                        # (V, d')
        scores = f_big @ sub.T                                          # (t, V)
        heads.append(
            {
                "attn": attn_cache,
                "expert_outs": expert_outs,
                "r_in": r_in,
                "beta": beta,
                "f_h": f_h,
                "h_pre": h_pre,
                "h_act": h_act,
                "drop": drop,
                "ln_cache": ln_cache,
                "f_big": f_big,
                "sub": sub,
                "scores": scores,
            }
        )
        head_reprs.append(f_big)

    gate_in = np.concatenate(head_reprs, axis=1)                        # (t, d)
    gate = softmax_rows(gate_in @ fame.gate_w.value + fame.gate_b.value)  # (t, H)
    fused = sum(gate[:, h : h + 1] * heads[h]["scores"] for h in range(config.num_heads))
    cache = {"x": x, "heads": heads, "gate_in": gate_in, "gate": gate, "item_table": item_table}
    return fused, gate, cache


def fame_layer_backward(
    d_fused: Array,
    cache: dict,
    fame: FameParams,
    config: FameConfig,
    d_item_table: Array,
) -> Array:
    """Backward through the facet head; accumulates parameter grads, adds
    the item-table contribution to ``d_item_table``, returns d_x."""
    x = cache["x"]
    gate = cache["gate"]
    item_table = cache["item_table"]
    num_heads, num_experts = config.num_heads, config.num_experts
    dh = config.head_dim

    d_gate = np.zeros_like(gate)
    d_f_bigs = []
    for h in range(num_heads):
        head = cache["heads"][h]
        d_gate[:, h] = (d_fused * head["scores"]).sum(axis=1)
        d_scores = gate[:, h : h + 1] * d_fused
        d_f_big = d_scores @ head["sub"]
        d_sub = d_scores.T @ head["f_big"]
        fame.w_facet[h].grad += item_table.T @ d_sub
        d_item_table += d_sub @ fame.w_facet[h].value.T
        d_f_bigs.append(d_f_big)

    d_gate_logits = softmax_rows_backward(d_gate, gate)
    fame.gate_w.grad += cache["gate_in"].T @ d_gate_logits
    fame.gate_b.grad += d_gate_logits.sum(axis=0)
    d_gate_in = d_gate_logits @ fame.gate_w.value.T

    d_x = np.zeros_like(x)
    for h in range(num_heads):
        head = cache["heads"][h]
        d_f_big = d_f_bigs[h] + d_gate_in[:, h * dh : (h + 1) * dh]

        d_res, d_gamma, d_beta = layer_norm_backward(d_f_big, head["ln_cache"])
        fame.ln_gamma.grad += d_gamma
        fame.ln_beta.grad += d_beta
        d_f_h = d_res.copy()
        d_ffn_out = d_res if head["drop"] is None else d_res * head["drop"]
        fame.ffn_w2.grad += head["h_act"].T @ d_ffn_out
        fame.ffn_b2.grad += d_ffn_out.sum(axis=0)
        d_h_act = d_ffn_out @ fame.ffn_w2.value.T
        d_h_pre = relu_backward(d_h_act, head["h_pre"])
        fame.ffn_w1.grad += head["f_h"].T @ d_h_pre
        fame.ffn_b1.grad += d_h_pre.sum(axis=0)
        d_f_h += d_h_pre @ fame.ffn_w1.value.T

        beta = head["beta"]
        expert_outs = head["expert_outs"]
        d_beta_w = np.zeros_like(beta)
        d_experts = []
        for n in range(num_experts):
            d_beta_w[:, n] = (d_f_h * expert_outs[n]).sum(axis=1)
            d_experts.append(beta[:, n : n + 1] * d_f_h)
        d_r_logits = softmax_rows_backward(d_beta_w, beta)
        fame.router[h].grad += head["r_in"].T @ d_r_logits
        d_r_in = d_r_logits @ fame.router[h].value.T
        for n in range(num_experts):
            d_experts[n] += d_r_in[:, n * dh : (n + 1) * dh]

        attn = head["attn"]
        k, v, scale = attn["k"], attn["v"], attn["scale"]
        d_k = np.zeros_like(k)
        d_v = np.zeros_like(v)
        for n in range(num_experts):
            probs = attn["probs"][n]
            q = attn["queries"][n]
            d_out_n = d_experts[n]
            d_probs = d_out_n @ v.T
            d_v += probs.T @ d_out_n
            d_s = softmax_rows_backward(d_probs, probs)
            d_q = (d_s @ k) * scale
            d_k += (d_s.T @ q) * scale
            fame.expert_q[h][n].grad += x.T @ d_q
            d_x += d_q @ fame.expert_q[h][n].value.T
        fame.w_k[h].grad += x.T @ d_k
        fame.w_v[h].grad += x.T @ d_v
        d_x += d_k @ fame.w_k[h].value.T + d_v @ fame.w_v[h].value.T
    return d_x


def fame_forward(
    items: list[int],
    model: FameModel,
    rng: Rng | None = None,
    training: bool = False,
):
    """Embed, run the retained trunk layers, then the facet head.

    Returns (fused logits (t, num_items), gate weights (t, H), cache).
    """
    bc = model.backbone_config
    x, embed_cache = embed_forward(items, model.backbone, bc.dropout, rng, training)
    trunk_caches = []
    for layer in model.backbone.layers:
        x, c = attention_forward(x, layer, bc.num_heads, bc.eps, bc.dropout, rng, training)
        trunk_caches.append(c)
    fused, gate, layer_cache = fame_layer_forward(
        x, model.fame, model.config, model.backbone.item_table.value, rng, training
    )
    return fused, gate, {"embed": embed_cache, "trunk": trunk_caches, "layer": layer_cache}


def fame_backward(d_fused: Array, caches: dict, model: FameModel) -> None:
    bc = model.backbone_config
    d_item = np.zeros_like(model.backbone.item_table.grad)
    d_x = fame_layer_backward(d_fused, caches["layer"], model.fame, model.config, d_item)
    model.backbone.item_table.grad += d_item
    for layer, cache in zip(reversed(model.backbone.layers), reversed(caches["trunk"])):
        d_x = attention_backward(d_x, cache, layer, bc.num_heads)
    embed_backward(d_x, caches["embed"], model.backbone)


def fame_scores(
    items: list[int],
    model: FameModel,
    rng: Rng | None = None,
    training: bool = False,
) -> tuple[Array, Array]:
    """Fused next-item logits and gate weights for the last position."""
    if len(items) == 0:
        raise InputError("empty sequence")
    fused, gate, _ = fame_forward(items, model, rng, training)
    return fused[-1], gate[-1]


def score_sequence(model: FameModel, items: list[int]) -> Array:
    window = items[-model.backbone_config.max_len:]
    logits, _ = fame_scores(window, model)
    return logits


def fame_sequence_loss_and_backward(
    items: list[int],
    model: FameModel,
    rng: Rng | None = None,
    training: bool = True,
) -> tuple[float, int]:
    """Summed next-item cross entropy over all prefix positions through
    the facet head; accumulates unscaled gradients when training."""
    if len(items) < 2:
        return 0.0, 0
    fused, _, caches = fame_forward(items, model, rng, training)
    d_fused = np.zeros_like(fused)
    loss_sum = 0.0
    for pos in range(len(items) - 1):
        loss, d_logits = cross_entropy_from_logits(fused[pos], items[pos + 1])
        loss_sum += loss
        if training:
            d_fused[pos] = d_logits
    if training:
        fame_backward(d_fused, caches, model)
    return loss_sum, len(items) - 1
