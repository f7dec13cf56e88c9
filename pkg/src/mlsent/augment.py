"""Generative data augmentation: generator clients, text splitting and dataset mixing."""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import httpx
import numpy as np

from .data import LABELS, Dataset, Example, LabelSet, load_dataset, preprocess
from .fixtures import DEFAULT_FILLER, DEFAULT_LEXICONS

logger = logging.getLogger(__name__)

DEFAULT_PROMPT = (
    "Generate short texts with their corresponding sentiment labels. "
    "The sentiment labels include Anger, Fear, Joy, Sadness, and Surprise. "
    "The texts are in English and have a maximum length of 256 characters."
)

# Label frequencies over the 11,684 generated texts.
TABLE2_FREQUENCIES = {"Anger": 2227, "Fear": 7606, "Joy": 3577, "Sadness": 4884, "Surprise": 4645}
TABLE2_N = 11684
TABLE2_PROBS = {k: v / TABLE2_N for k, v in TABLE2_FREQUENCIES.items()}


def output_schema(max_chars: int = 256) -> dict:
    return {
        "type": "object",
        "properties": {
            "text": {"type": "string", "minLength": 1, "maxLength": max_chars},
            "labels": {"type": "array", "items": {"type": "string", "enum": list(LABELS)}},
        },
        "required": ["text", "labels"],
        "additionalProperties": False,
    }


@dataclass(frozen=True)
class GenerationRequest:
    system_prompt: str = DEFAULT_PROMPT
    count: int = 1
    max_chars: int = 256

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("generation count must be >= 1")

    @property
    def schema(self) -> dict:
        return output_schema(self.max_chars)


@dataclass(frozen=True)
class GeneratedRecord:
    text: str
    labels: tuple[str, ...]


@dataclass
class GeneratedBatch:
    records: list[GeneratedRecord]
    source: str
    rejected: Counter = field(default_factory=Counter)

    def __len__(self) -> int:
        return len(self.records)

    def to_dataset(self, id_prefix: str = "gen") -> Dataset:
        """Normalised dataset of the pool, in pool order. Texts that normalise to nothing are dropped."""
        examples = []
        for i, rec in enumerate(self.records):
            text = preprocess(rec.text)
            if not text:
                logger.warning("dropping generated record %d: empty after preprocessing", i)
                continue
            examples.append(Example(f"{id_prefix}-{i:05d}", text, LabelSet.from_names(rec.labels)))
        return Dataset(examples, "generated")

    def to_jsonl(self, id_prefix: str = "gen") -> str:
        return "".join(
            json.dumps({"id": f"{id_prefix}-{i:05d}", "text": r.text, "labels": list(r.labels)}, ensure_ascii=False) + "\n"
            for i, r in enumerate(self.records)
        )

    def save(self, path: str | Path, id_prefix: str = "gen"):
        Path(path).write_text(self.to_jsonl(id_prefix), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GeneratedBatch":
        records = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                obj = json.loads(line)
                records.append(GeneratedRecord(obj["text"], tuple(obj.get("labels", []))))
        return cls(records, f"file:{Path(path).name}")


class SchemaViolation(ValueError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def validate_record(obj, max_chars: int = 256) -> GeneratedRecord:
    """Accept ``{"text": str, "labels": [label names]}`` or raise SchemaViolation."""
    if not isinstance(obj, dict) or not isinstance(obj.get("text"), str) or not isinstance(obj.get("labels"), list):
        raise SchemaViolation("malformed")
    text = obj["text"].strip()
    if not text:
        raise SchemaViolation("empty_text")
    if len(text) > max_chars:
        raise SchemaViolation("too_long")
    canonical = {name.lower(): name for name in LABELS}
    labels = []
    for name in obj["labels"]:
        if not isinstance(name, str) or name.strip().lower() not in canonical:
            raise SchemaViolation("unknown_label")
        labels.append(canonical[name.strip().lower()])
    ordered = tuple(name for name in LABELS if name in labels)
    return GeneratedRecord(text, ordered)


# ---------------------------------------------------------------------------
# Remote generator
# ---------------------------------------------------------------------------


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    api_key: str = field(default="", repr=False)
    model: str = "gpt-4o-mini"
    concurrency: int = 4
    max_retries: int = 3
    backoff_s: float = 0.5
    timeout_s: float = 60.0
    max_attempts_factor: int = 3

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        url = os.environ.get("MLSENT_GEN_URL")
        if not url:
            raise GenerationError("MLSENT_GEN_URL is not set")
        return cls(
            url=url,
            api_key=os.environ.get("MLSENT_GEN_API_KEY", ""),
            model=os.environ.get("MLSENT_GEN_MODEL", "gpt-4o-mini"),
            **overrides,
        )


def chat_request_body(req: GenerationRequest, model: str) -> dict:
    return {
        "model": model,
        "messages": [
            {"role": "system", "content": req.system_prompt},
            {"role": "user", "content": "Generate one example as JSON matching the schema."},
        ],
        "response_format": {
            "type": "json_schema",
            "json_schema": {"name": "labeled_text", "schema": req.schema, "strict": True},
        },
    }


def _post_with_retry(client: httpx.Client, endpoint: EndpointConfig, body: dict) -> dict:
    headers = {"Authorization": f"Bearer {endpoint.api_key}"} if endpoint.api_key else {}
    for attempt in range(endpoint.max_retries + 1):
        try:
            logger.debug("POST %s body=%s headers=%s", endpoint.url, json.dumps(body),
                         {k: "***" for k in headers})
            resp = client.post(endpoint.url, json=body, headers=headers, timeout=endpoint.timeout_s)
            if resp.status_code == 429 or resp.status_code >= 500:
                raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
            resp.raise_for_status()
            payload = resp.json()
            logger.debug("response body=%s", json.dumps(payload))
            return payload
        except (httpx.TransportError, httpx.HTTPStatusError) as exc:
            retryable = isinstance(exc, httpx.TransportError) or exc.response.status_code == 429 or exc.response.status_code >= 500
            if not retryable or attempt == endpoint.max_retries:
                raise GenerationError(f"generation request failed after {attempt + 1} attempt(s): {exc}") from exc
            time.sleep(endpoint.backoff_s * 2**attempt)
    raise AssertionError("unreachable")


def _parse_completion(payload: dict):
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        return None
    try:
        return json.loads(content) if isinstance(content, str) else content
    except json.JSONDecodeError:
        return None


def generate_remote(req: GenerationRequest, endpoint: EndpointConfig, client: httpx.Client | None = None) -> GeneratedBatch:
    """Request one labelled text per call until ``req.count`` records validate.

    Records failing the schema are skipped and tallied by reason. Requests run
    ``endpoint.concurrency`` at a time; output order follows request order.
    """
    own = client is None
    client = client or httpx.Client()
    body = chat_request_body(req, endpoint.model)
    records: list[GeneratedRecord] = []
    rejected: Counter = Counter()
    attempts, max_attempts = 0, endpoint.max_attempts_factor * req.count + 10
    try:
        with ThreadPoolExecutor(max_workers=max(1, endpoint.concurrency)) as pool:
            while len(records) < req.count and attempts < max_attempts:
                n = min(req.count - len(records), max_attempts - attempts)
                attempts += n
                for payload in pool.map(lambda _: _post_with_retry(client, endpoint, body), range(n)):
                    try:
                        records.append(validate_record(_parse_completion(payload), req.max_chars))
                    except SchemaViolation as exc:
                        rejected[exc.reason] += 1
    finally:
        if own:
            client.close()
    if len(records) < req.count:
        logger.warning("generator produced %d of %d valid records (rejected: %s)", len(records), req.count, dict(rejected))
    return GeneratedBatch(records, f"remote:{endpoint.url}", rejected)


# ---------------------------------------------------------------------------
# Offline mock generator
# ---------------------------------------------------------------------------

_TEMPLATES = (
    "I {filler} {cue} {filler} {filler}.",
    "The {filler} was so {cue} {filler}!",
    "{Cue} {filler} {filler} {filler} {filler}.",
    "We {filler} {filler} and felt {cue}.",
    "Honestly {cue} {filler} {filler} {cue2}?",
    "My {filler} {filler} {cue} {filler} {filler} {filler}.",
)
_NEUTRAL = ("Nothing much {filler} {filler} {filler}.", "It was a {filler} {filler} {filler} {filler}.")


def generate_mock(req: GenerationRequest, seed: int, target_probs: dict | None = None) -> GeneratedBatch:
    """Template texts whose labels are drawn to match ``target_probs`` (default: augmented-pool rates)."""
    probs = dict(TABLE2_PROBS if target_probs is None else target_probs)
    rng = np.random.default_rng([seed, 31])
    records = []
    for _ in range(req.count):
        names = tuple(name for name in LABELS if rng.random() < probs.get(name, 0.0))
        pieces = []
        slots = [DEFAULT_LEXICONS[n] for n in names] or [None]
        for k in range(int(rng.integers(1, 4))):
            lex = slots[k % len(slots)]
            template = _NEUTRAL[int(rng.integers(0, len(_NEUTRAL)))] if lex is None else _TEMPLATES[int(rng.integers(0, len(_TEMPLATES)))]
            cue = lex[int(rng.integers(0, len(lex)))] if lex else ""
            cue2 = lex[int(rng.integers(0, len(lex)))] if lex else ""
            sentence = template.replace("{Cue}", cue.capitalize()).replace("{cue2}", cue2).replace("{cue}", cue)
            while "{filler}" in sentence:
                sentence = sentence.replace("{filler}", DEFAULT_FILLER[int(rng.integers(0, len(DEFAULT_FILLER)))], 1)
            pieces.append(sentence[0].upper() + sentence[1:])
        # every label must be cued even when there are more labels than sentences
        for extra in slots[len(pieces):]:
            pieces.append(f"So {extra[int(rng.integers(0, len(extra)))]}.")
        text = " ".join(pieces)
        while len(text) > req.max_chars and len(pieces) > 1:
            pieces.pop(0)
            text = " ".join(pieces)
        records.append(GeneratedRecord(text[: req.max_chars], names))
    return GeneratedBatch(records, "mock")


# ---------------------------------------------------------------------------
# Splitting and mixing
# ---------------------------------------------------------------------------

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def _balanced_cuts(lengths: list[int], parts: int) -> tuple[int, ...]:
    """Cut points (between units) minimising the largest deviation from equal part length."""
    total = sum(lengths) + len(lengths) - 1
    target = total / parts
    best, best_cost = None, math.inf
    for cuts in itertools.combinations(range(1, len(lengths)), parts - 1):
        bounds = (0, *cuts, len(lengths))
        sizes = [sum(lengths[a:b]) + (b - a - 1) for a, b in zip(bounds[:-1], bounds[1:])]
        cost = max(abs(s - target) for s in sizes)
        if cost < best_cost:
            best, best_cost = cuts, cost
    return best


def split_text(text: str, target_len: int = 78) -> list[str]:
    """Split a long text into 2-3 near-equal parts at sentence boundaries (words if single sentence)."""
    if len(text) <= 1.5 * target_len:
        return [text]
    parts = min(3, max(2, round(len(text) / target_len)))
    units = [s for s in _SENTENCE_END.split(text.strip()) if s]
    if len(units) < 2:
        units = text.split()
    if len(units) < 2:
        return [text]
    parts = min(parts, len(units))
    cuts = _balanced_cuts([len(u) for u in units], parts)
    bounds = (0, *cuts, len(units))
    return [" ".join(units[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def split_generated(batch: GeneratedBatch, target_len: int = 78) -> GeneratedBatch:
    """Apply :func:`split_text` to every record; every part keeps all parent labels."""
    out = [
        GeneratedRecord(part, rec.labels)
        for rec in batch.records
        for part in split_text(rec.text, target_len)
    ]
    return GeneratedBatch(out, batch.source, Counter(batch.rejected))


def parse_ratio(value) -> Fraction:
    """Parse ``"1/3"``, ``"0.5"`` or a number into an exact fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    return Fraction(value)


def mixed_count(ratio, pool_size: int) -> int:
    """round-half-up(ratio * pool_size), computed exactly."""
    r = parse_ratio(ratio)
    if not 0 <= r <= 1:
        raise ValueError(f"augmentation ratio must be within [0, 1], got {ratio}")
    return math.floor(r * pool_size + Fraction(1, 2))


def mix(original: Dataset, pool: Dataset | GeneratedBatch, ratio) -> Dataset:
    """Original examples followed by the first round(ratio * |pool|) pool examples."""
    pool_ds = pool.to_dataset() if isinstance(pool, GeneratedBatch) else pool
    n = mixed_count(ratio, len(pool_ds))
    return Dataset(list(original.examples) + list(pool_ds.examples[:n]), "mixed", original.labels)


def load_pool(path: str | Path) -> Dataset:
    return load_dataset(path, provenance="generated")
