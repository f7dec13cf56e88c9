"""Shapley-value token attributions for per-label probabilities.

A coalition is a boolean mask over the content tokens of one text. Tokens
outside the coalition are replaced by [MASK] (or deleted, if requested) and
the model's sigmoid probability for the target label is the coalition value.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .data import CLS, LABELS, MASK, PAD, SEP, content_positions

EXACT_LIMIT = 12

# value(masks: (m, n) bool) -> (m,) floats
BatchValue = Callable[[np.ndarray], np.ndarray]


def label_index(label) -> int:
    if isinstance(label, (int, np.integer)):
        if not 0 <= label < len(LABELS):
            raise ValueError(f"label index {label} outside 0..{len(LABELS) - 1}")
        return int(label)
    for i, name in enumerate(LABELS):
        if str(label).lower() == name.lower():
            return i
    raise ValueError(f"unknown label {label!r}; expected one of {', '.join(LABELS)}")


class TokenValue:
    """Coalition value function bound to (model, text, label).

    ``model`` needs ``encode(texts) -> ids``, ``predict_proba(ids) -> (B, 5)``,
    ``vocab`` and ``max_len``; :class:`mlsent.model.Classifier` qualifies.
    """

    def __init__(self, model, text: str, label, absent: str = "mask"):
        if absent not in ("mask", "delete"):
            raise ValueError(f"absent-token mode must be 'mask' or 'delete', got {absent!r}")
        self.model = model
        self.label = label_index(label)
        self.absent = absent
        self.ids = np.asarray(model.encode([text])[0])
        self.positions = content_positions(self.ids)
        self.tokens = [model.vocab.token(int(i)) for i in self.ids[self.positions]]
        self.n = len(self.positions)

    def inputs(self, masks: np.ndarray) -> np.ndarray:
        masks = np.asarray(masks, dtype=bool).reshape(-1, self.n)
        batch = np.repeat(self.ids[None, :], len(masks), axis=0)
        if self.absent == "mask":
            batch[:, self.positions] = np.where(masks, batch[:, self.positions], MASK)
            return batch
        out = np.full_like(batch, PAD)
        out[:, 0] = CLS
        for r, keep in enumerate(masks):
            kept = self.ids[self.positions[keep]]
            out[r, 1 : 1 + len(kept)] = kept
            out[r, 1 + len(kept)] = SEP
        return out

    def __call__(self, masks: np.ndarray) -> np.ndarray:
        masks = np.asarray(masks, dtype=bool).reshape(-1, self.n)
        return self.model.predict_proba(self.inputs(masks))[:, self.label]

    def value(self, subset) -> float:
        mask = np.zeros(self.n, dtype=bool)
        mask[list(subset)] = True
        return float(self(mask[None, :])[0])


def _all_masks(n: int) -> np.ndarray:
    codes = np.arange(1 << n)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def shapley_exact_values(value: BatchValue, n: int, limit: int = EXACT_LIMIT) -> tuple[np.ndarray, float, float]:
    """Exact Shapley values by enumerating all 2^n coalitions.

    Returns ``(phi, v(empty), v(full))``.
    """
    if n > limit:
        raise ValueError(f"{n} players exceed the exact limit of {limit}; use the sampled estimator")
    masks = _all_masks(n)
    v = np.asarray(value(masks), dtype=np.float64)
    if n == 0:
        return np.zeros(0), float(v[0]), float(v[0])
    codes = np.arange(1 << n)
    sizes = masks.sum(axis=1)
    weights = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])
    phi = np.zeros(n)
    for i in range(n):
        without = codes[(codes >> i & 1) == 0]
        phi[i] = np.sum(weights[sizes[without]] * (v[without | (1 << i)] - v[without]))
    return phi, float(v[0]), float(v[-1])


def shapley_permutation_values(value: BatchValue, n: int, perms: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Average marginal contributions along the given player orderings."""
    perms = np.asarray(perms, dtype=np.int64).reshape(-1, n)
    phi = np.zeros(n)
    if n == 0 or len(perms) == 0:
        return phi
    steps = np.arange(n + 1)
    for lo in range(0, len(perms), chunk):
        block = perms[lo : lo + chunk]
        k = len(block)
        # rank[p, i] = position of player i in permutation p
        rank = np.empty_like(block)
        rank[np.arange(k)[:, None], block] = np.arange(n)
        masks = rank[:, None, :] < steps[None, :, None]  # (k, n+1, n)
        v = np.asarray(value(masks.reshape(-1, n)), dtype=np.float64).reshape(k, n + 1)
        marginal = np.diff(v, axis=1)  # contribution of block[:, j]
        np.add.at(phi, block.ravel(), marginal.ravel())
    return phi / len(perms)


def shapley_sampled_values(value: BatchValue, n: int, n_perm: int, seed: int) -> np.ndarray:
    """Monte-Carlo Shapley estimate from ``n_perm`` uniformly random orderings."""
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    rng = np.random.default_rng([seed, 41])
    perms = np.array([rng.permutation(n) for _ in range(n_perm)]) if n else np.zeros((n_perm, 0), dtype=np.int64)
    return shapley_permutation_values(value, n, perms)


@dataclass
class AttributionReport:
    label: str
    tokens: list[str]
    phi: list[float]
    v_empty: float
    v_full: float
    residual: float
    estimator: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["position", "token", "phi"])
        for i, (tok, val) in enumerate(zip(self.tokens, self.phi)):
            writer.writerow([i, tok, repr(val)])
        return buf.getvalue()


def _report(vf: TokenValue, phi: np.ndarray, v_empty: float, v_full: float, estimator: str) -> AttributionReport:
    return AttributionReport(
        label=LABELS[vf.label],
        tokens=list(vf.tokens),
        phi=[float(x) for x in phi],
        v_empty=v_empty,
        v_full=v_full,
        residual=float(np.sum(phi) - (v_full - v_empty)),
        estimator=estimator,
    )


def shapley_exact(model, text: str, label, absent: str = "mask") -> AttributionReport:
    vf = TokenValue(model, text, label, absent)
    phi, v0, v1 = shapley_exact_values(vf, vf.n)
    return _report(vf, phi, v0, v1, "exact")


def shapley_sampled(model, text: str, label, n_perm: int, seed: int, absent: str = "mask") -> AttributionReport:
    vf = TokenValue(model, text, label, absent)
    phi = shapley_sampled_values(vf, vf.n, n_perm, seed)
    ends = vf(np.array([np.zeros(vf.n, bool), np.ones(vf.n, bool)]))
    return _report(vf, phi, float(ends[0]), float(ends[1]), f"sampled({n_perm})")


def explain(model, text: str, label, n_perm: int = 200, seed: int = 0, absent: str = "mask") -> AttributionReport:
    """Exact attribution when the text has at most 12 content tokens, sampled otherwise."""
    vf = TokenValue(model, text, label, absent)
    if vf.n <= EXACT_LIMIT:
        return shapley_exact(model, text, label, absent)
    return shapley_sampled(model, text, label, n_perm, seed, absent)


@dataclass
class TokenInfluence:
    token: str
    mean_phi: float
    count: int


@dataclass
class ClassReport:
    label: str
    ranking: list[TokenInfluence]  # every token seen, by mean phi descending
    top_k: int

    @property
    def top_positive(self) -> list[TokenInfluence]:
        return self.ranking[: self.top_k]

    @property
    def top_negative(self) -> list[TokenInfluence]:
        return list(reversed(self.ranking[-self.top_k :]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["direction", "rank", "token", "mean_phi", "count"])
        for direction, rows in (("positive", self.top_positive), ("negative", self.top_negative)):
            for r, item in enumerate(rows, 1):
                writer.writerow([direction, r, item.token, repr(item.mean_phi), item.count])
        return buf.getvalue()

    def to_text(self) -> str:
        rows = [("direction", "rank", "token", "mean_phi", "count")]
        for direction, items in (("+", self.top_positive), ("-", self.top_negative)):
            rows += [(direction, str(r), it.token, f"{it.mean_phi:+.5f}", str(it.count)) for r, it in enumerate(items, 1)]
        widths = [max(len(row[c]) for row in rows) for c in range(5)]
        lines = [f"Token influence for {self.label}"]
        lines += ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        return "\n".join(lines) + "\n"


def class_report(model, texts, label, top_k: int = 10, n_perm: int = 200, seed: int = 0, absent: str = "mask") -> ClassReport:
    """Mean attribution of each vocabulary token for one label over a collection of texts."""
    totals: dict[str, float] = {}
    counts: dict[str, int] = {}
    for k, text in enumerate(texts):
        rep = explain(model, text, label, n_perm=n_perm, seed=seed + k, absent=absent)
        for tok, val in zip(rep.tokens, rep.phi):
            totals[tok] = totals.get(tok, 0.0) + val
            counts[tok] = counts.get(tok, 0) + 1
    ranking = [TokenInfluence(tok, totals[tok] / counts[tok], counts[tok]) for tok in totals]
    ranking.sort(key=lambda t: (-t.mean_phi, t.token))
    return ClassReport(LABELS[label_index(label)], ranking, min(top_k, len(ranking)))
