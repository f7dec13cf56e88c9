"""Dataset model, text normalisation, whitespace vocabulary and label statistics."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LABELS: tuple[str, ...] = ("Anger", "Fear", "Joy", "Sadness", "Surprise")
NUM_LABELS = len(LABELS)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS: tuple[str, ...] = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIAL = len(SPECIAL_TOKENS)

PROVENANCES = ("original", "generated", "mixed")

_URL_RE = re.compile(r"(?:[a-zA-Z][a-zA-Z0-9+.\-]*://\S*|www\.\S*)")


class DatasetError(ValueError):
    """Raised for malformed dataset files or invalid dataset operations."""


@dataclass(frozen=True, order=True)
class LabelSet:
    """Subset of the fixed label universe, stored as a bitmask (bit i = LABELS[i])."""

    mask: int = 0

    def __post_init__(self):
        if not 0 <= self.mask < (1 << NUM_LABELS):
            raise ValueError(f"label mask out of range: {self.mask}")

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "LabelSet":
        lookup = {name.lower(): i for i, name in enumerate(LABELS)}
        mask = 0
        for name in names:
            key = name.strip().lower()
            if not key:
                continue
            if key not in lookup:
                raise DatasetError(f"unknown label {name!r}; expected one of {', '.join(LABELS)}")
            mask |= 1 << lookup[key]
        return cls(mask)

    @classmethod
    def from_vector(cls, vector: Sequence[int] | np.ndarray) -> "LabelSet":
        vector = np.asarray(vector)
        if vector.shape != (NUM_LABELS,):
            raise ValueError(f"expected a vector of {NUM_LABELS} labels, got shape {vector.shape}")
        return cls(sum(1 << i for i, v in enumerate(vector) if v))

    @property
    def names(self) -> list[str]:
        return [name for i, name in enumerate(LABELS) if self.mask >> i & 1]

    def to_vector(self) -> np.ndarray:
        return np.array([self.mask >> i & 1 for i in range(NUM_LABELS)], dtype=np.int64)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def __len__(self) -> int:
        return bin(self.mask).count("1")


@dataclass(frozen=True)
class Example:
    id: str
    text: str
    labels: LabelSet = LabelSet()


@dataclass
class Dataset:
    examples: list[Example]
    provenance: str = "original"
    labels: tuple[str, ...] = LABELS

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise DatasetError(f"unknown provenance {self.provenance!r}")
        seen = set()
        for ex in self.examples:
            if ex.id in seen:
                raise DatasetError(f"duplicate example id {ex.id!r}")
            seen.add(ex.id)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, idx):
        return self.examples[idx]

    @property
    def texts(self) -> list[str]:
        return [ex.text for ex in self.examples]

    @property
    def ids(self) -> list[str]:
        return [ex.id for ex in self.examples]

    def label_matrix(self) -> np.ndarray:
        """N x 5 matrix of 0/1 label indicators."""
        if not self.examples:
            return np.zeros((0, NUM_LABELS), dtype=np.int64)
        return np.stack([ex.labels.to_vector() for ex in self.examples])


def preprocess(text: str) -> str:
    """Lowercase, strip URLs and punctuation, collapse whitespace."""
    text = _URL_RE.sub(" ", text.lower())
    text = "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in text)
    return " ".join(text.split())


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token -> id map. Ids 0-4 are reserved for the special tokens."""

    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:NUM_SPECIAL] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        idx = self._index.get(token)
        return idx is not None and idx >= NUM_SPECIAL

    def id(self, token: str) -> int:
        idx = self._index.get(token, UNK)
        return UNK if idx < NUM_SPECIAL else idx

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def content_tokens(self) -> tuple[str, ...]:
        return self.tokens[NUM_SPECIAL:]

    def to_json(self) -> str:
        return json.dumps({"version": 1, "tokens": list(self.content_tokens)}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        payload = json.loads(text)
        return cls(SPECIAL_TOKENS + tuple(payload["tokens"]))


def build_vocab(corpus: Dataset | Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Vocabulary of whitespace tokens seen at least ``min_freq`` times.

    Ordering is frequency descending, ties broken lexicographically, so the
    same corpus always yields the same ids.
    """
    texts = corpus.texts if isinstance(corpus, Dataset) else list(corpus)
    if not texts:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in texts for tok in text.split())
    kept = sorted((tok for tok, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIAL_TOKENS + tuple(tok for tok in kept if tok not in SPECIAL_TOKENS))


def encode(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """[CLS] tokens... [SEP] [PAD]..., truncated so the whole sequence fits ``max_len``."""
    if max_len < 3:
        raise ValueError(f"max_len must be at least 3, got {max_len}")
    content = [vocab.id(tok) for tok in text.split()][: max_len - 2]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = CLS
    ids[1 : 1 + len(content)] = content
    ids[1 + len(content)] = SEP
    return ids


def encode_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int) -> np.ndarray:
    if not texts:
        return np.zeros((0, max_len), dtype=np.int64)
    return np.stack([encode(t, vocab, max_len) for t in texts])


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`encode` for the content span (between CLS and SEP)."""
    out = []
    for idx in list(ids)[1:]:
        if idx in (SEP, PAD):
            break
        out.append(vocab.token(int(idx)))
    return " ".join(out)


def content_positions(ids: np.ndarray) -> np.ndarray:
    """Indices of the content tokens of one encoded sequence."""
    ids = np.asarray(ids)
    return np.flatnonzero((ids != PAD) & (ids != CLS) & (ids != SEP))


@dataclass(frozen=True)
class LabelStat:
    label: str
    frequency: int
    probability: float  # percent


def label_distribution(d: Dataset | np.ndarray) -> list[LabelStat]:
    """Per-label frequency and percentage of examples carrying that label."""
    matrix = d.label_matrix() if isinstance(d, Dataset) else np.asarray(d)
    n = len(matrix)
    if n == 0:
        raise DatasetError("label distribution of an empty dataset is undefined")
    freq = matrix.sum(axis=0)
    return [LabelStat(name, int(f), 100.0 * int(f) / n) for name, f in zip(LABELS, freq)]


def split_dataset(d: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Shuffle deterministically and cut into consecutive parts with the given fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise DatasetError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(d))
    bounds = np.round(np.cumsum([0.0, *fractions]) * len(d)).astype(int)
    return [
        Dataset([d.examples[i] for i in order[lo:hi]], d.provenance, d.labels)
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _read_records(path: Path) -> list[tuple[str, str, list[str]]]:
    raw = path.read_text(encoding="utf-8")
    suffix = path.suffix.lower()
    records = []
    if suffix in (".jsonl", ".json"):
        for lineno, line in enumerate(raw.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append((str(obj["id"]), obj["text"], list(obj.get("labels", []))))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad JSON record ({exc})") from exc
    elif suffix == ".csv":
        # SemEval 2025 Task 11 layout: id,text,<one 0/1 column per emotion>
        reader = csv.DictReader(io.StringIO(raw))
        header = {h.lower(): h for h in reader.fieldnames or []}
        if "id" not in header or "text" not in header:
            raise DatasetError(f"{path}: CSV needs id and text columns")
        for row in reader:
            names = [lab for lab in LABELS if lab.lower() in header and row[header[lab.lower()]].strip() == "1"]
            records.append((row[header["id"]], row[header["text"]], names))
    else:
        for lineno, line in enumerate(raw.split("\n"), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            records.append((parts[0], parts[1], [p for p in parts[2].split(",") if p]))
    return records


def load_dataset(path: str | Path, provenance: str = "original", normalize: bool = True) -> Dataset:
    """Read a TSV, JSON-lines or SemEval CSV dataset file.

    Texts are passed through :func:`preprocess` unless ``normalize`` is off;
    examples left empty are dropped with a warning.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    examples = []
    for ex_id, text, names in _read_records(path):
        if normalize:
            text = preprocess(text)
        if not text:
            logger.warning("dropping example %s: empty after preprocessing", ex_id)
            continue
        examples.append(Example(ex_id, text, LabelSet.from_names(names)))
    return Dataset(examples, provenance)


def format_dataset(d: Dataset, fmt: str = "tsv") -> str:
    """Serialise as ``tsv``, ``jsonl`` or the SemEval ``csv`` layout."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "text", *d.labels])
        for ex in d.examples:
            writer.writerow([ex.id, ex.text, *(int(x) for x in ex.labels.to_vector())])
        return buf.getvalue()
    lines = []
    for ex in d.examples:
        if fmt == "jsonl":
            lines.append(json.dumps({"id": ex.id, "text": ex.text, "labels": ex.labels.names}, ensure_ascii=False))
        elif fmt == "tsv":
            if "\t" in ex.text or "\n" in ex.text:
                raise DatasetError(f"example {ex.id!r} cannot be written as TSV")
            lines.append(f"{ex.id}\t{ex.text}\t{','.join(ex.labels.names)}")
        else:
            raise ValueError(f"unknown dataset format {fmt!r}")
    return "".join(line + "\n" for line in lines)


def save_dataset(d: Dataset, path: str | Path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    fmt = "jsonl" if suffix in (".jsonl", ".json") else "csv" if suffix == ".csv" else "tsv"
    path.write_text(format_dataset(d, fmt), encoding="utf-8")
