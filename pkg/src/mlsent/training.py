"""AdamW, MLM masking, continued pre-training and multi-label fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import CLS, LABELS, MASK, NUM_SPECIAL, PAD, SEP, Dataset, LabelSet, encode_batch
from .encoder import EncoderConfig, encode_forward, mlm_logits_at
from .metrics import evaluate
from .model import Classifier
from .tensor import ForwardMode, Tensor

logger = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """A NaN or infinity showed up in a loss or gradient."""


class LabelUniverseError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "finetune"
    epochs: int = 30
    lr: float = 2e-5
    weight_decay: float = 0.01
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask_prob: float = 0.15
    mask_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    threshold: float = 0.5
    select_metric: str = "micro_f1"

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def pretrain_defaults(cls, **overrides) -> "TrainConfig":
        return cls(**{"mode": "pretrain", "epochs": 50, "lr": 2e-5, "weight_decay": 0.01, **overrides})

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        return cls(**{"mode": "finetune", "epochs": 30, "lr": 2e-5, "weight_decay": 0.01, "batch_size": 32, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)


def adamw_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState
) -> dict[str, np.ndarray]:
    """One AdamW update. Decay ``p -= lr*wd*p`` is applied first, then the bias-corrected Adam step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name} at optimizer step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        denom = np.sqrt(v / c2) + state.eps
        update = np.divide(m / c1, denom, out=np.zeros_like(p), where=denom > 0)
        decayed = p - state.lr * state.weight_decay * p
        out[name] = decayed - state.lr * update
    return out


def apply_step(params: Mapping[str, Tensor], state: OptimizerState, loss: Tensor) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss at optimizer step {state.step + 1}")
    grads = T.gradients(loss, params)
    updated = adamw_step({k: p.data for k, p in params.items()}, grads, state)
    for name, p in params.items():
        p.data = updated[name]
    return value


# ---------------------------------------------------------------------------
# Masked language modelling
# ---------------------------------------------------------------------------


@dataclass
class MaskingOutcome:
    inputs: np.ndarray
    targets: np.ndarray  # original ids at selected positions, PAD elsewhere
    selected: np.ndarray  # bool


def mask_tokens(
    ids: np.ndarray,
    p: float,
    seed,
    vocab_size: int,
    split: Sequence[float] = (0.8, 0.1, 0.1),
) -> MaskingOutcome:
    """Select each non-special position with probability ``p`` and corrupt it.

    Selected positions become [MASK], a random content token, or stay
    unchanged according to ``split``. [CLS], [SEP] and [PAD] are never selected.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"masking probability must be in [0, 1], got {p}")
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
        raise ValueError(f"mask split must be three fractions summing to 1, got {split}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.asarray(ids)
    eligible = (ids != PAD) & (ids != CLS) & (ids != SEP)
    selected = eligible & (rng.random(ids.shape) < p)
    action = rng.random(ids.shape)
    if vocab_size > NUM_SPECIAL:
        random_tokens = rng.integers(NUM_SPECIAL, vocab_size, size=ids.shape)
    else:
        random_tokens = np.full(ids.shape, MASK)
    inputs = ids.copy()
    to_mask = selected & (action < split[0])
    to_random = selected & (action >= split[0]) & (action < split[0] + split[1])
    inputs[to_mask] = MASK
    inputs[to_random] = random_tokens[to_random]
    targets = np.where(selected, ids, PAD)
    return MaskingOutcome(inputs, targets, selected)


def mlm_loss(params, cfg: EncoderConfig, outcome: MaskingOutcome, mode: ForwardMode | None = None) -> Tensor | None:
    """Mean cross-entropy at the selected positions, or None if nothing was selected."""
    rows, cols = np.nonzero(outcome.selected)
    if rows.size == 0:
        return None
    hidden = encode_forward(params, cfg, outcome.inputs, mode)
    logits = mlm_logits_at(hidden, params, cfg, rows, cols)
    return T.cross_entropy(logits, outcome.targets[rows, cols])


def evaluate_mlm(params, cfg: EncoderConfig, ids: np.ndarray, p: float, seed, batch_size: int = 64) -> float:
    """Eval-mode masked-token loss under a fixed masking draw, averaged over selected tokens."""
    total, count = 0.0, 0
    with T.no_grad():
        for b, lo in enumerate(range(0, len(ids), batch_size)):
            outcome = mask_tokens(ids[lo : lo + batch_size], p, [*np.atleast_1d(seed), b], cfg.vocab_size)
            loss = mlm_loss(params, cfg, outcome)
            if loss is not None:
                n = int(outcome.selected.sum())
                total += loss.item() * n
                count += n
    return total / count if count else float("nan")


def masked_recovery_accuracy(params, cfg: EncoderConfig, ids: np.ndarray) -> float:
    """Mask each content position alone and check the argmax prediction restores it."""
    hits, total = 0, 0
    with T.no_grad():
        for seq in np.atleast_2d(ids):
            positions = np.flatnonzero((seq != PAD) & (seq != CLS) & (seq != SEP))
            if positions.size == 0:
                continue
            batch = np.repeat(seq[None, :], positions.size, axis=0)
            batch[np.arange(positions.size), positions] = MASK
            hidden = encode_forward(params, cfg, batch)
            logits = mlm_logits_at(hidden, params, cfg, np.arange(positions.size), positions).data
            hits += int((logits.argmax(axis=1) == seq[positions]).sum())
            total += positions.size
    return hits / total if total else float("nan")


@dataclass
class CurvePoint:
    epoch: int
    step: int
    split: str
    metric: str
    value: float


@dataclass
class PretrainResult:
    params: dict[str, Tensor]
    curve: list[CurvePoint]


def _texts(corpus) -> list[str]:
    return corpus.texts if isinstance(corpus, Dataset) else list(corpus)


def pretrain(
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    corpus,
    vocab,
    train_cfg: TrainConfig,
    eval_corpus=None,
) -> PretrainResult:
    """Continued MLM pre-training on the text field only.

    Epoch 0 of the curve is measured before any update. Train and eval losses
    are recomputed after every epoch in eval mode under fixed masking draws so
    the two splits are directly comparable.
    """
    if train_cfg.mode != "pretrain":
        raise ValueError("pretrain needs a TrainConfig with mode='pretrain'")
    texts = _texts(corpus)
    if not texts:
        raise ValueError("cannot pre-train on an empty corpus")
    ids = encode_batch(texts, vocab, cfg.max_len)
    eval_ids = encode_batch(_texts(eval_corpus), vocab, cfg.max_len) if eval_corpus is not None else None
    state = OptimizerState.from_config(train_cfg)
    seed = train_cfg.seed
    curve: list[CurvePoint] = []

    def record(epoch):
        curve.append(CurvePoint(epoch, state.step, "train", "mlm_loss",
                                evaluate_mlm(params, cfg, ids, train_cfg.mask_prob, [seed, 7])))
        if eval_ids is not None and len(eval_ids):
            curve.append(CurvePoint(epoch, state.step, "eval", "mlm_loss",
                                    evaluate_mlm(params, cfg, eval_ids, train_cfg.mask_prob, [seed, 8])))

    record(0)
    for epoch in range(1, train_cfg.epochs + 1):
        order = np.random.default_rng([seed, 11, epoch]).permutation(len(ids))
        step_losses = []
        for b, lo in enumerate(range(0, len(ids), train_cfg.batch_size)):
            batch = ids[order[lo : lo + train_cfg.batch_size]]
            outcome = mask_tokens(batch, train_cfg.mask_prob, [seed, 12, epoch, b], cfg.vocab_size, train_cfg.mask_split)
            loss = mlm_loss(params, cfg, outcome, ForwardMode(True, seed, state.step))
            if loss is None:
                continue
            step_losses.append(apply_step(params, state, loss))
        if step_losses:
            curve.append(CurvePoint(epoch, state.step, "train", "mlm_step_loss", float(np.mean(step_losses))))
        record(epoch)
        logger.info("pretrain epoch %d: %s", epoch, curve[-1])
    return PretrainResult(params, curve)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def logits_to_labels(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Label on iff sigmoid(logit) >= threshold, compared in log-odds space.

    Comparing log-odds keeps threshold 1.0 unreachable for finite logits even
    where the float sigmoid saturates to exactly 1.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    with np.errstate(divide="ignore"):
        cut = np.log(threshold) - np.log1p(-threshold)
    return (np.asarray(logits) >= cut).astype(np.int64)


def predict(model: Classifier, batch, threshold: float = 0.5) -> list[LabelSet]:
    """Predicted label sets for a batch of texts (list of str) or encoded ids."""
    ids = model.encode(batch) if not isinstance(batch, np.ndarray) else batch
    return [LabelSet.from_vector(row) for row in logits_to_labels(model.predict_logits(ids), threshold)]


@dataclass
class FinetuneResult:
    best_arrays: dict[str, np.ndarray]
    final_arrays: dict[str, np.ndarray]
    best_epoch: int
    curve: list[CurvePoint]


def _check_labels(model: Classifier, *datasets: Dataset | None):
    for d in datasets:
        if d is not None and tuple(d.labels) != LABELS:
            raise LabelUniverseError(f"dataset label universe {d.labels} differs from {LABELS}")
    if model.head.config.num_labels != len(LABELS):
        raise LabelUniverseError(f"head predicts {model.head.config.num_labels} labels, expected {len(LABELS)}")


def finetune(model: Classifier, train: Dataset, dev: Dataset | None, cfg: TrainConfig) -> FinetuneResult:
    """Train encoder + head with summed per-label BCE.

    Dev metrics are logged each epoch; the parameters of the epoch with the
    best ``cfg.select_metric`` on dev (train when no dev set) are retained.
    The model is left holding the best parameters.
    """
    if cfg.mode != "finetune":
        raise ValueError("finetune needs a TrainConfig with mode='finetune'")
    if len(train) == 0:
        raise ValueError("cannot fine-tune on an empty dataset")
    _check_labels(model, train, dev)
    params = model.params
    ids, y = model.encode(train.texts), train.label_matrix()
    has_dev = dev is not None and len(dev) > 0
    sel_ids, sel_y = (model.encode(dev.texts), dev.label_matrix()) if has_dev else (ids, y)
    sel_split = "dev" if has_dev else "train"
    state = OptimizerState.from_config(cfg)
    curve: list[CurvePoint] = []

    def record(epoch, step_losses):
        if step_losses:
            curve.append(CurvePoint(epoch, state.step, "train", "bce_step_loss", float(np.mean(step_losses))))
        logits = model.predict_logits(sel_ids)
        report = evaluate(logits_to_labels(logits, cfg.threshold), sel_y)
        with T.no_grad():
            bce = T.bce_with_logits(Tensor(logits), sel_y).item()
        curve.append(CurvePoint(epoch, state.step, sel_split, "bce_loss", bce))
        for metric, value in report.summary().items():
            curve.append(CurvePoint(epoch, state.step, sel_split, metric, value))
        return report.summary()[cfg.select_metric]

    best_score, best_epoch, best_arrays = record(0, []), 0, model.state_arrays()
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, 21, epoch]).permutation(len(ids))
        step_losses = []
        for lo in range(0, len(ids), cfg.batch_size):
            rows = order[lo : lo + cfg.batch_size]
            logits = model.logits(ids[rows], ForwardMode(True, cfg.seed, state.step))
            step_losses.append(apply_step(params, state, T.bce_with_logits(logits, y[rows])))
        score = record(epoch, step_losses)
        if score > best_score:
            best_score, best_epoch, best_arrays = score, epoch, model.state_arrays()
        logger.info("finetune epoch %d: %s=%.4f", epoch, cfg.select_metric, score)
    final_arrays = model.state_arrays()
    model.load_arrays(best_arrays)
    return FinetuneResult(best_arrays, final_arrays, best_epoch, curve)
