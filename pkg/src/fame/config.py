"""Flat ``key = value`` run configuration with flag overrides.

Precedence: command-line flag > config file > built-in default.  Unknown
keys are rejected; the resolved configuration is rendered back to the
same flat format and checked into every output directory for provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigFileError(ValueError):
    """Malformed or unknown configuration input."""


@dataclass
class Config:
    dim: int = 64
    num_heads: int = 2
    num_experts: int = 2
    num_layers: int = 2
    max_len: int = 50
    dropout: float = 0.2
    eps: float = 1e-5
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 256
    backbone_epochs: int = 200
    finetune_epochs: int = 100
    pretrain_epochs: int = 300
    tau: float = 0.1
    p_classes: int = 4
    k_per_class: int = 8
    seed: int = 0
    init_mode: str = "random"
    scheme: str = "amazon"
    facets: str = ""            # comma-separated facet names; "" = scheme facets 1,2
    price_binning: str = "fixed"  # or "quantile"
    price_edges: str = ""       # comma-separated bin lower bounds; "" = default
    ks: str = "5,10,20"
    text_dim: int = 64
    pretrain_heads: int = 2
    projector_mid_dim: int = 0  # 0 = same as dim
    item_scale: float = 1.0
    expert_noise: float = 0.01
    min_core: int = 5
    eval_every: int = 0
    early_stop_patience: int = 0

    def ks_list(self) -> tuple[int, ...]:
        return tuple(int(tok) for tok in self.ks.split(",") if tok.strip())

    def facet_list(self, available: list[str]) -> list[str]:
        if self.facets.strip():
            names = [tok.strip() for tok in self.facets.split(",") if tok.strip()]
        else:
            names = available[:2]
        for name in names:
            if name not in available:
                raise ConfigFileError(f"facet {name!r} not in bundle facets {available}")
        return names

    def price_edge_list(self) -> list[float] | None:
        if not self.price_edges.strip():
            return None
        return [float(tok) for tok in self.price_edges.split(",") if tok.strip()]

    def render(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()[:16]


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _coerce(name: str, raw: str):
    field = _FIELDS.get(name)
    if field is None:
        raise ConfigFileError(f"unknown config key {name!r}")
    raw = raw.strip()
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigFileError(f"config key {name!r}: cannot parse {raw!r}") from None
    return raw


def parse_config_file(path: str | Path) -> dict:
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigFileError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            values[key] = _coerce(key, raw)
    return values


def resolve_config(config_path: str | Path | None, overrides: dict) -> Config:
    """defaults < config file < flags."""
    values: dict = {}
    if config_path is not None:
        values.update(parse_config_file(config_path))
    for key, raw in overrides.items():
        if raw is None:
            continue
        values[key] = _coerce(key, str(raw))
    return Config(**values)
