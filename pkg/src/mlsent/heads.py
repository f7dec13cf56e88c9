"""Classification heads: stacked fully-connected layers and projected attention.

Both heads take the full encoder output plus its key mask and return raw
per-label logits; the sigmoid is left to the loss and to prediction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import NUM_LABELS
from .encoder import cls_pool, linear, multi_head_attention
from .tensor import ForwardMode, ShapeError, Tensor

HEAD_SITE = 10_000


@dataclass(frozen=True)
class FcHeadConfig:
    num_layers: int = 1
    classifier_size: int = 64
    dropout_p: float = 0.1
    num_labels: int = NUM_LABELS

    def __post_init__(self):
        if self.num_layers < 1 or self.classifier_size < 1:
            raise ValueError("fc head needs num_layers >= 1 and classifier_size >= 1")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must be in [0, 1], got {self.dropout_p}")


@dataclass(frozen=True)
class ProjAttHeadConfig:
    attention_dim: int = 16
    num_heads: int = 1
    num_labels: int = NUM_LABELS

    def __post_init__(self):
        if self.attention_dim < 1 or self.num_heads < 1:
            raise ValueError("projected attention needs attention_dim >= 1 and num_heads >= 1")
        if self.attention_dim % self.num_heads:
            raise ValueError(
                f"attention_dim {self.attention_dim} is not divisible by num_heads {self.num_heads}"
            )


def _init_linear(rng, params: dict, prefix: str, n_in: int, n_out: int, std: float | None):
    scale = 1.0 / np.sqrt(n_in) if std is None else std
    params[f"{prefix}.w"] = rng.normal(0.0, scale, size=(n_in, n_out))
    params[f"{prefix}.b"] = np.zeros(n_out)


def _expect(params, name: str, shape: tuple[int, ...]):
    if name not in params:
        raise ShapeError(f"missing head parameter {name}")
    if params[name].shape != shape:
        raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")


def fc_head_forward(pooled: Tensor, params, config: FcHeadConfig, mode: ForwardMode | None = None) -> Tensor:
    """l x (linear -> ReLU -> dropout), then a final linear layer to the labels."""
    mode = mode or ForwardMode.eval()
    x = pooled
    n_in = pooled.shape[-1]
    for i in range(config.num_layers):
        _expect(params, f"head.fc{i}.w", (n_in, config.classifier_size))
        x = T.relu(linear(x, params, f"head.fc{i}"))
        x = T.dropout(x, config.dropout_p, mode.rng(HEAD_SITE + i))
        n_in = config.classifier_size
    _expect(params, "head.out.w", (n_in, config.num_labels))
    return linear(x, params, "head.out")


def proj_att_head_forward(
    hidden: Tensor, key_mask: np.ndarray, params, config: ProjAttHeadConfig, mode: ForwardMode | None = None
) -> Tensor:
    """Project every position to ``attention_dim``, self-attend (PAD masked), classify position 0."""
    mode = mode or ForwardMode.eval()
    d = config.attention_dim
    _expect(params, "head.proj.w", (hidden.shape[-1], d))
    _expect(params, "head.out.w", (d, config.num_labels))
    z = linear(hidden, params, "head.proj")
    z = multi_head_attention(z, params, "head.attn", config.num_heads, key_mask, mode)
    return linear(cls_pool(z), params, "head.out")


class FcHead:
    kind = "fc"

    def __init__(
        self, hidden_size: int, config: FcHeadConfig = FcHeadConfig(), seed: int = 0, init_std: float | None = None
    ):
        self.hidden_size = hidden_size
        self.config = config
        rng = np.random.default_rng([seed, 2])
        p = {}
        n_in = hidden_size
        for i in range(config.num_layers):
            _init_linear(rng, p, f"head.fc{i}", n_in, config.classifier_size, init_std)
            n_in = config.classifier_size
        _init_linear(rng, p, "head.out", n_in, config.num_labels, init_std)
        self.params = T.as_parameters(p)

    def forward(self, hidden: Tensor, key_mask: np.ndarray, mode: ForwardMode | None = None) -> Tensor:
        return fc_head_forward(cls_pool(hidden), self.params, self.config, mode)

    def to_dict(self) -> dict:
        return {"type": self.kind, **asdict(self.config)}


class ProjAttHead:
    kind = "projatt"

    def __init__(
        self, hidden_size: int, config: ProjAttHeadConfig = ProjAttHeadConfig(), seed: int = 0, init_std: float | None = None
    ):
        self.hidden_size = hidden_size
        self.config = config
        rng = np.random.default_rng([seed, 3])
        d = config.attention_dim
        p: dict = {}
        _init_linear(rng, p, "head.proj", hidden_size, d, init_std)
        for proj in ("q", "k", "v", "o"):
            _init_linear(rng, p, f"head.attn.{proj}", d, d, init_std)
        _init_linear(rng, p, "head.out", d, config.num_labels, init_std)
        self.params = T.as_parameters(p)

    def forward(self, hidden: Tensor, key_mask: np.ndarray, mode: ForwardMode | None = None) -> Tensor:
        return proj_att_head_forward(hidden, key_mask, self.params, self.config, mode)

    def to_dict(self) -> dict:
        return {"type": self.kind, **asdict(self.config)}


Head = FcHead | ProjAttHead


def make_head(spec: dict, hidden_size: int, seed: int = 0, init_std: float | None = None) -> Head:
    """Build a head from ``{"type": "fc" | "projatt", **config fields}``.

    Weights default to N(0, 1/fan_in); pass ``init_std`` to override.
    """
    spec = dict(spec)
    kind = spec.pop("type")
    if kind == "fc":
        return FcHead(hidden_size, FcHeadConfig(**spec), seed, init_std)
    if kind == "projatt":
        return ProjAttHead(hidden_size, ProjAttHeadConfig(**spec), seed, init_std)
    raise ValueError(f"unknown head type {kind!r}")


def count_parameters(head: Head) -> int:
    """Number of trainable scalars in the head."""
    return T.count(head.params.values())


def describe(head: Head) -> str:
    if head.kind == "fc":
        return f"fc {head.config.classifier_size}x{head.config.num_layers}"
    return f"projatt {head.config.attention_dim}x{head.config.num_heads}"
