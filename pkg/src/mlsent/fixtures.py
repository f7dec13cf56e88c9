"""Deterministic synthetic corpora with learnable, cue-driven labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LABELS, Dataset, Example, LabelSet, save_dataset

# Label frequencies of the original training split (2,768 texts).
TABLE1_FREQUENCIES = {"Anger": 333, "Fear": 1611, "Joy": 674, "Sadness": 878, "Surprise": 839}
TABLE1_N = 2768
TABLE1_PROBS = {k: v / TABLE1_N for k, v in TABLE1_FREQUENCIES.items()}

DEFAULT_LEXICONS = {
    "Anger": ("furious", "insulting", "rage", "angry", "annoyed", "outraged"),
    "Fear": ("police", "scared", "terrified", "afraid", "nervous", "panic"),
    "Joy": ("wonderful", "thank", "happy", "delighted", "smile", "great"),
    "Sadness": ("tears", "lonely", "grief", "miss", "heavy", "cried"),
    "Surprise": ("reality", "accidental", "suddenly", "unexpected", "shocked", "wow"),
}

DEFAULT_FILLER = (
    "the", "a", "and", "i", "we", "it", "was", "to", "of", "in", "on", "my", "at", "that", "this",
    "when", "then", "they", "there", "today", "yesterday", "morning", "evening", "house", "street",
    "car", "phone", "work", "school", "friend", "family", "dog", "door", "window", "night", "train",
    "road", "kitchen", "office", "weekend", "after", "before", "while", "just", "really", "still",
    "saw", "heard", "walked", "opened", "called", "told", "left", "came", "back", "home", "room",
    "little", "old", "new", "long", "outside", "around", "about",
)

_PPM = 1_000_000


@dataclass(frozen=True)
class SyntheticSpec:
    """How to draw a synthetic corpus.

    ``subset_probs`` (32 weights indexed by label bitmask) fixes the joint
    label distribution, co-occurrence included; when absent labels are drawn
    independently from ``label_probs``. ``length_words`` bounds the total
    word count, which averages near 15 words / 78 characters by default.
    """

    lexicons: dict = field(default_factory=lambda: dict(DEFAULT_LEXICONS))
    filler: tuple = DEFAULT_FILLER
    label_probs: dict = field(default_factory=lambda: dict(TABLE1_PROBS))
    subset_probs: tuple | None = None
    length_words: tuple[int, int] = (10, 18)
    cues_per_label: tuple[int, int] = (1, 2)
    seed: int = 0


def _validate(spec: SyntheticSpec):
    for label in LABELS:
        if not spec.lexicons.get(label):
            raise ValueError(f"synthetic spec has an empty cue lexicon for {label}")
    if not spec.filler:
        raise ValueError("synthetic spec has an empty filler lexicon")
    cue_words = {w for words in spec.lexicons.values() for w in words}
    if cue_words & set(spec.filler):
        raise ValueError(f"filler overlaps cue words: {sorted(cue_words & set(spec.filler))}")
    if spec.subset_probs is not None and len(spec.subset_probs) != 1 << len(LABELS):
        raise ValueError("subset_probs needs one weight per label subset (32)")


def _draw_labels(rng: np.random.Generator, spec: SyntheticSpec) -> int:
    if spec.subset_probs is not None:
        weights = np.round(np.asarray(spec.subset_probs, dtype=np.float64) * _PPM).astype(np.int64)
        cum = np.cumsum(weights)
        return int(np.searchsorted(cum, rng.integers(0, cum[-1]), side="right"))
    mask = 0
    for i, label in enumerate(LABELS):
        if rng.integers(0, _PPM) < round(spec.label_probs.get(label, 0.0) * _PPM):
            mask |= 1 << i
    return mask


def make_synthetic(spec: SyntheticSpec, n: int, id_prefix: str = "syn") -> Dataset:
    """``n`` examples whose labels are exactly the labels whose cues appear in the text."""
    if n < 1:
        raise ValueError("need n >= 1")
    _validate(spec)
    rng = np.random.default_rng(spec.seed)
    examples = []
    for i in range(n):
        mask = _draw_labels(rng, spec)
        words = []
        for j, label in enumerate(LABELS):
            if mask >> j & 1:
                lex = spec.lexicons[label]
                k = int(rng.integers(spec.cues_per_label[0], spec.cues_per_label[1] + 1))
                words.extend(lex[int(rng.integers(0, len(lex)))] for _ in range(k))
        total = int(rng.integers(spec.length_words[0], spec.length_words[1] + 1))
        while len(words) < total:
            words.append(spec.filler[int(rng.integers(0, len(spec.filler)))])
        order = rng.permutation(len(words))
        text = " ".join(words[int(o)] for o in order)
        examples.append(Example(f"{id_prefix}-{i:05d}", text, LabelSet(mask)))
    return Dataset(examples, "original")


def write_fixture_files(directory: str | Path, n_train: int = 200, n_dev: int = 60, n_test: int = 60, seed: int = 0):
    """Write train.tsv / dev.tsv / test.tsv synthetic splits into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for k, (name, n) in enumerate((("train", n_train), ("dev", n_dev), ("test", n_test))):
        d = make_synthetic(SyntheticSpec(seed=seed * 100 + k), n, id_prefix=name)
        paths[name] = directory / f"{name}.tsv"
        save_dataset(d, paths[name])
    return paths


_GRAMMAR = {
    "det": ("the", "a", "my", "our", "that"),
    "adj": ("old", "quiet", "small", "bright", "cold", "busy", "empty", "strange"),
    "noun": ("neighbour", "teacher", "dog", "driver", "child", "doctor", "stranger", "cat"),
    "verb": ("watched", "followed", "called", "helped", "found", "ignored", "visited", "met"),
    "place": ("station", "market", "garden", "hospital", "library", "bridge", "harbour", "park"),
    "time": ("yesterday", "today", "tonight", "again", "early", "late"),
}
_SENTENCE_TEMPLATES = (
    "det adj noun verb det noun near the place time",
    "det noun verb det adj noun at the place",
    "time det adj noun verb det noun in the place",
    "det noun and det noun verb det adj noun time",
)


def make_sentences(n: int, seed: int = 0, id_prefix: str = "sent") -> Dataset:
    """Unlabelled grammatical sentences for masked-language-model runs.

    Word order follows a handful of templates, so function words and slot
    types are predictable while slot fillers have to be memorised.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng([seed, 5])
    examples = []
    for i in range(n):
        template = _SENTENCE_TEMPLATES[int(rng.integers(0, len(_SENTENCE_TEMPLATES)))]
        words = [_GRAMMAR[w][int(rng.integers(0, len(_GRAMMAR[w])))] if w in _GRAMMAR else w for w in template.split()]
        examples.append(Example(f"{id_prefix}-{i:05d}", " ".join(words), LabelSet()))
    return Dataset(examples, "original")
