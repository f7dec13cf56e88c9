"""Encoder + head bundle with checkpoint I/O."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import PAD, Vocabulary, encode_batch, SPECIAL_TOKENS
from .encoder import EncoderConfig, encode_forward, init_encoder
from .heads import Head, make_head
from .tensor import ForwardMode, Tensor


class Classifier:
    def __init__(self, encoder_cfg: EncoderConfig, encoder_params: dict[str, Tensor], head: Head, vocab: Vocabulary):
        if len(vocab) != encoder_cfg.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} entries but encoder expects {encoder_cfg.vocab_size}")
        self.encoder_cfg = encoder_cfg
        self.encoder_params = encoder_params
        self.head = head
        self.vocab = vocab

    @classmethod
    def create(
        cls, vocab: Vocabulary, head_spec: dict, seed: int = 0, head_init_std: float | None = None, **encoder_overrides
    ) -> "Classifier":
        cfg = EncoderConfig(vocab_size=len(vocab), **encoder_overrides)
        head = make_head(head_spec, cfg.hidden_size, seed=seed, init_std=head_init_std)
        return cls(cfg, init_encoder(cfg, seed), head, vocab)

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.encoder_params, **self.head.params}

    @property
    def max_len(self) -> int:
        return self.encoder_cfg.max_len

    def encode(self, texts) -> np.ndarray:
        return encode_batch(list(texts), self.vocab, self.max_len)

    def logits(self, ids: np.ndarray, mode: ForwardMode | None = None) -> Tensor:
        hidden = encode_forward(self.encoder_params, self.encoder_cfg, ids, mode)
        return self.head.forward(hidden, np.asarray(ids) != PAD, mode)

    def predict_logits(self, ids: np.ndarray, batch_size: int = 64) -> np.ndarray:
        ids = np.asarray(ids)
        out = []
        with T.no_grad():
            for lo in range(0, len(ids), batch_size):
                out.append(self.logits(ids[lo : lo + batch_size]).data)
        if not out:
            return np.zeros((0, self.head.config.num_labels))
        return np.concatenate(out)

    def predict_proba(self, ids: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return T._stable_sigmoid(self.predict_logits(ids, batch_size))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def meta(self) -> dict:
        return {
            "encoder": asdict(self.encoder_cfg),
            "head": self.head.to_dict(),
            "vocab": list(self.vocab.content_tokens),
        }

    def save(self, path: str | Path, arrays: dict[str, np.ndarray] | None = None):
        T.save_checkpoint(path, arrays if arrays is not None else self.state_arrays(), self.meta())

    @classmethod
    def load(cls, path: str | Path) -> "Classifier":
        arrays, meta = T.load_checkpoint(path)
        vocab = Vocabulary(SPECIAL_TOKENS + tuple(meta["vocab"]))
        cfg = EncoderConfig(**meta["encoder"])
        head = make_head(meta["head"], cfg.hidden_size)
        enc = T.as_parameters({k: v for k, v in arrays.items() if not k.startswith("head.")})
        model = cls(cfg, enc, head, vocab)
        model.load_arrays(arrays)
        return model
