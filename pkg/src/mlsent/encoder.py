"""Mini BERT-style bidirectional encoder with an MLM output layer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import PAD
from .tensor import ForwardMode, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_size: int = 64
    num_layers: int = 2
    num_attention_heads: int = 2
    ff_size: int = 128
    max_len: int = 64
    dropout_p: float = 0.1
    activation: str = "gelu"
    init_std: float = 0.02
    layer_norm_eps: float = 1e-5
    tie_mlm: bool = False

    def __post_init__(self):
        if self.hidden_size % self.num_attention_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by num_attention_heads {self.num_attention_heads}"
            )
        if self.max_len < 3:
            raise ValueError(f"max_len must be at least 3, got {self.max_len}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return asdict(self)


# Sizes of the published checkpoints; kept for parameter accounting only.
PRESETS = {
    "mini": dict(hidden_size=64, num_layers=2, num_attention_heads=2, ff_size=128, max_len=64),
    "bert-base": dict(hidden_size=768, num_layers=12, num_attention_heads=12, ff_size=3072, max_len=512),
    "bert-large": dict(hidden_size=1024, num_layers=24, num_attention_heads=16, ff_size=4096, max_len=512),
    "roberta-base": dict(hidden_size=768, num_layers=12, num_attention_heads=12, ff_size=3072, max_len=514),
    "roberta-large": dict(hidden_size=1024, num_layers=24, num_attention_heads=16, ff_size=4096, max_len=514),
}


def preset(name: str, vocab_size: int, **overrides) -> EncoderConfig:
    return EncoderConfig(vocab_size=vocab_size, **{**PRESETS[name], **overrides})


def _linear_init(rng, params, prefix, n_in, n_out, std):
    params[f"{prefix}.w"] = rng.normal(0.0, std, size=(n_in, n_out))
    params[f"{prefix}.b"] = np.zeros(n_out)


def init_attention(rng, params: dict, prefix: str, dim: int, std: float):
    for proj in ("q", "k", "v", "o"):
        _linear_init(rng, params, f"{prefix}.{proj}", dim, dim, std)


def init_encoder(cfg: EncoderConfig, seed: int) -> dict[str, Tensor]:
    """Weights ~ N(0, init_std^2), biases 0, layer-norm scale 1 / shift 0."""
    rng = np.random.default_rng([seed, 1])
    h, std = cfg.hidden_size, cfg.init_std
    p: dict[str, np.ndarray] = {
        "emb.token": rng.normal(0.0, std, size=(cfg.vocab_size, h)),
        "emb.position": rng.normal(0.0, std, size=(cfg.max_len, h)),
    }
    for i in range(cfg.num_layers):
        pre = f"layer{i}"
        init_attention(rng, p, f"{pre}.attn", h, std)
        p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"] = np.ones(h), np.zeros(h)
        _linear_init(rng, p, f"{pre}.ff1", h, cfg.ff_size, std)
        _linear_init(rng, p, f"{pre}.ff2", cfg.ff_size, h, std)
        p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"] = np.ones(h), np.zeros(h)
    if not cfg.tie_mlm:
        p["mlm.w"] = rng.normal(0.0, std, size=(h, cfg.vocab_size))
    p["mlm.b"] = np.zeros(cfg.vocab_size)
    return T.as_parameters(p)


def linear(x: Tensor, params, prefix: str) -> Tensor:
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


def multi_head_attention(
    x: Tensor,
    params,
    prefix: str,
    num_heads: int,
    key_mask: np.ndarray,
    mode: ForwardMode,
    dropout_p: float = 0.0,
    site: int = 0,
) -> Tensor:
    """Scaled dot-product self-attention; keys where ``key_mask`` is False get zero weight."""
    b, t, d = x.shape
    dh = d // num_heads

    def heads(z):
        return T.transpose(T.reshape(z, (b, t, num_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(x, params, f"{prefix}.q"))
    k = heads(linear(x, params, f"{prefix}.k"))
    v = heads(linear(x, params, f"{prefix}.v"))
    scores = T.scale(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    probs = T.softmax(scores, mask=key_mask[:, None, None, :])
    probs = T.dropout(probs, dropout_p, mode.rng(site))
    ctx = T.reshape(T.transpose(probs @ v, (0, 2, 1, 3)), (b, t, d))
    return linear(ctx, params, f"{prefix}.o")


def encode_forward(params, cfg: EncoderConfig, ids: np.ndarray, mode: ForwardMode | None = None) -> Tensor:
    """Hidden states (B, max_len, h) for a batch of encoded sequences."""
    mode = mode or ForwardMode.eval()
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] != cfg.max_len:
        raise ValueError(f"expected token ids of shape (B, {cfg.max_len}), got {ids.shape}")
    key_mask = ids != PAD
    p_drop = cfg.dropout_p
    x = T.embedding(params["emb.token"], ids) + params["emb.position"]
    x = T.dropout(x, p_drop, mode.rng(0))
    for i in range(cfg.num_layers):
        pre, site = f"layer{i}", 100 * (i + 1)
        att = multi_head_attention(
            x, params, f"{pre}.attn", cfg.num_attention_heads, key_mask, mode, p_drop, site + 1
        )
        x = T.layer_norm(
            x + T.dropout(att, p_drop, mode.rng(site + 2)),
            params[f"{pre}.ln1.gamma"],
            params[f"{pre}.ln1.beta"],
            cfg.layer_norm_eps,
        )
        ff = linear(T.activation(linear(x, params, f"{pre}.ff1"), cfg.activation), params, f"{pre}.ff2")
        x = T.layer_norm(
            x + T.dropout(ff, p_drop, mode.rng(site + 3)),
            params[f"{pre}.ln2.gamma"],
            params[f"{pre}.ln2.beta"],
            cfg.layer_norm_eps,
        )
    return x


def cls_pool(hidden: Tensor) -> Tensor:
    return hidden[:, 0, :]


def _mlm_weight(params, cfg: EncoderConfig) -> Tensor:
    return params["emb.token"].T if cfg.tie_mlm else params["mlm.w"]


def mlm_logits(hidden: Tensor, params, cfg: EncoderConfig) -> Tensor:
    """Unnormalised vocabulary scores at every position, (B, max_len, V)."""
    return hidden @ _mlm_weight(params, cfg) + params["mlm.b"]


def mlm_logits_at(hidden: Tensor, params, cfg: EncoderConfig, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Vocabulary scores only at positions ``(rows[j], cols[j])``, shape (M, V)."""
    return hidden[rows, cols] @ _mlm_weight(params, cfg) + params["mlm.b"]
