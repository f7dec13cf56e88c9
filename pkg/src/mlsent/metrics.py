"""Multi-label evaluation: subset accuracy, F1 variants, confusion counts, Cohen's kappa.

Zero-division convention throughout: a precision, recall or F1 whose
denominator is zero is reported as 0.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LABELS, Dataset, DatasetError, LabelSet


def _as_matrix(rows) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        return rows.astype(np.int64)
    rows = list(rows)
    if rows and isinstance(rows[0], LabelSet):
        return np.stack([r.to_vector() for r in rows])
    return np.asarray(rows, dtype=np.int64).reshape(len(rows), -1)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class LabelScores:
    label: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    n: int
    subset_accuracy: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_f1: float
    samples_f1: float
    per_label: list[LabelScores] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "TP", "FP", "FN", "TN"])
        for s in self.per_label:
            writer.writerow([s.label, s.tp, s.fp, s.fn, s.tn])
        return buf.getvalue()

    def summary(self) -> dict[str, float]:
        return {
            "subset_accuracy": self.subset_accuracy,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "samples_f1": self.samples_f1,
        }


def evaluate(pred, gold, labels: Sequence[str] = LABELS) -> MetricsReport:
    """Score predicted label sets against gold label sets."""
    p, g = _as_matrix(pred), _as_matrix(gold)
    if p.shape != g.shape:
        raise ValueError(f"prediction and gold shapes differ: {p.shape} vs {g.shape}")
    if len(p) == 0:
        raise ValueError("cannot evaluate zero examples")
    n = len(p)
    tp = (p & g).sum(axis=0)
    fp = (p & (1 - g)).sum(axis=0)
    fn = ((1 - p) & g).sum(axis=0)
    tn = n - tp - fp - fn
    per_label = [
        LabelScores(
            label=name,
            tp=int(tp[i]),
            fp=int(fp[i]),
            fn=int(fn[i]),
            tn=int(tn[i]),
            precision=_ratio(tp[i], tp[i] + fp[i]),
            recall=_ratio(tp[i], tp[i] + fn[i]),
            f1=_ratio(2 * tp[i], 2 * tp[i] + fp[i] + fn[i]),
            support=int(tp[i] + fn[i]),
        )
        for i, name in enumerate(labels)
    ]
    TP, FP, FN = int(tp.sum()), int(fp.sum()), int(fn.sum())
    inter = (p & g).sum(axis=1)
    sizes = p.sum(axis=1) + g.sum(axis=1)
    samples = np.divide(2 * inter, sizes, out=np.zeros(n), where=sizes > 0)
    return MetricsReport(
        n=n,
        subset_accuracy=float(np.all(p == g, axis=1).mean()),
        micro_precision=_ratio(TP, TP + FP),
        micro_recall=_ratio(TP, TP + FN),
        micro_f1=_ratio(2 * TP, 2 * TP + FP + FN),
        macro_f1=float(np.mean([s.f1 for s in per_label])),
        samples_f1=float(samples.mean()),
        per_label=per_label,
    )


def cohens_kappa(a: Sequence[int], b: Sequence[int]) -> float:
    """Chance-corrected agreement of two binary raters.

    When chance agreement is 1 (both raters constant and equal) the score is 1.
    """
    a, b = np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError(f"rater vectors differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n == 0:
        raise ValueError("cohen's kappa needs at least one item")
    agree = int((a == b).sum())
    a1, b1 = int(a.sum()), int(b.sum())
    chance = a1 * b1 + (n - a1) * (n - b1)  # = n^2 * p_e
    if chance == n * n:
        return 1.0
    return (n * agree - chance) / (n * n - chance)


@dataclass
class AnnotationSet:
    annotator: str
    labels: dict[str, LabelSet]


@dataclass
class AgreementReport:
    per_label_kappa: dict[str, float]
    pairwise_kappa: dict[str, dict[str, float]]
    per_annotator: dict[str, MetricsReport]

    def to_dict(self) -> dict:
        return {
            "per_label_kappa": self.per_label_kappa,
            "pairwise_kappa": self.pairwise_kappa,
            "per_annotator": {k: v.to_dict() for k, v in self.per_annotator.items()},
        }


def agreement_report(annotations: Sequence[AnnotationSet], gold: Dataset) -> AgreementReport:
    """Mean pairwise kappa per label, plus each annotator scored against gold."""
    if len(annotations) < 2:
        raise ValueError("agreement needs at least two annotators")
    ids = gold.ids
    for ann in annotations:
        missing = sorted(set(ids) - set(ann.labels))
        extra = sorted(set(ann.labels) - set(ids))
        if missing or extra:
            raise DatasetError(
                f"annotator {ann.annotator}: missing ids {missing}, ids not in gold {extra}"
            )
    matrices = {ann.annotator: _as_matrix([ann.labels[i] for i in ids]) for ann in annotations}
    pairwise: dict[str, dict[str, float]] = {}
    per_label = {}
    for j, name in enumerate(LABELS):
        scores = {}
        for x, y in itertools.combinations(matrices, 2):
            scores[f"{x}|{y}"] = cohens_kappa(matrices[x][:, j], matrices[y][:, j])
        pairwise[name] = scores
        per_label[name] = float(np.mean(list(scores.values())))
    gold_m = gold.label_matrix()
    per_annotator = {who: evaluate(m, gold_m) for who, m in matrices.items()}
    return AgreementReport(per_label, pairwise, per_annotator)


def load_annotations(path: str | Path) -> list[AnnotationSet]:
    """Read ``annotator<TAB>id<TAB>text<TAB>labels`` lines, or JSON lines with an ``annotator`` key."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    grouped: dict[str, dict[str, LabelSet]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if path.suffix.lower() in (".jsonl", ".json"):
            obj = json.loads(line)
            who, ex_id, names = str(obj["annotator"]), str(obj["id"]), obj.get("labels", [])
        else:
            parts = line.split("\t")
            if len(parts) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            who, ex_id, names = parts[0], parts[1], [x for x in parts[3].split(",") if x]
        grouped.setdefault(who, {})[ex_id] = LabelSet.from_names(names)
    return [AnnotationSet(who, labels) for who, labels in grouped.items()]
