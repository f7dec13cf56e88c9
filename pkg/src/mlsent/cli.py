"""mlsent command line: pre-training, fine-tuning, augmentation, evaluation, explanations, agreement, matrix.

Exit codes: 0 success, 2 missing file, 3 config or data violation, 4 numeric failure,
1 anything else (for example an unreachable generator endpoint).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import (
    DEFAULT_PROMPT,
    EndpointConfig,
    GeneratedBatch,
    GenerationRequest,
    generate_mock,
    generate_remote,
    mix,
    split_generated,
)
from .data import LABELS, DatasetError, label_distribution, load_dataset, preprocess, save_dataset
from .explain import class_report, explain
from .fixtures import SyntheticSpec, make_synthetic, write_fixture_files
from .metrics import agreement_report, evaluate, load_annotations
from .model import Classifier
from .pipeline import (
    MATRIX_RATIOS,
    ConfigError,
    parse_head,
    reproduce,
    resolve_config,
    run_experiment,
    run_matrix,
    run_pretrain,
)
from .tensor import ShapeError
from .training import LabelUniverseError, NumericalError, logits_to_labels

log = logging.getLogger("mlsent")

EXIT_OK, EXIT_FAILURE, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4


# ---------------------------------------------------------------- config plumbing


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(cfg, dict) or any(isinstance(v, (dict, list)) for v in cfg.values()):
        raise ConfigError(f"{path}: config must be a flat JSON object with dotted keys")
    return cfg


def parse_overrides(pairs: list[str] | None) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = _parse_value(value)
    return out


def _flag_overrides(args) -> dict:
    """Dedicated flags map onto config keys and win over --config and --set."""
    mapping = {
        "train": "data.train",
        "dev": "data.dev",
        "test": "data.test",
        "pool": "data.pool",
        "ratio": "augment.ratio",
        "init": "pretrain.init",
        "seed": "seed",
    }
    out = {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}
    if getattr(args, "pretrain", False):
        out["pretrain.enabled"] = True
    if getattr(args, "head", None):
        out.update(parse_head(args.head))
    return out


def build_config(args) -> dict:
    return resolve_config(load_config_file(args.config), parse_overrides(args.set), _flag_overrides(args))


def _echo(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    summary = run_pretrain(build_config(args), args.out)
    _echo(summary)
    return EXIT_OK


def cmd_finetune(args) -> int:
    summary = run_experiment(build_config(args), args.out)
    _echo(summary)
    return EXIT_OK


def cmd_augment(args) -> int:
    prompt = Path(args.prompt_file).read_text(encoding="utf-8") if args.prompt_file else DEFAULT_PROMPT
    if args.from_pool:
        batch = GeneratedBatch.load(args.from_pool)
    else:
        req = GenerationRequest(prompt, args.count, args.max_chars)
        if args.mock:
            batch = generate_mock(req, args.seed)
        else:
            endpoint = EndpointConfig.from_env(concurrency=args.concurrency)
            batch = generate_remote(req, endpoint)
    if args.split_target:
        batch = split_generated(batch, args.split_target)
    if args.pool_out:
        batch.save(args.pool_out)
    pool = batch.to_dataset()
    report = {
        "generated": len(batch),
        "rejected": dict(batch.rejected),
        "pool_distribution": [s.__dict__ for s in label_distribution(pool)] if len(pool) else [],
    }
    if args.train:
        if args.ratio is None:
            raise ConfigError("--train needs --ratio")
        original = load_dataset(args.train)
        mixed = mix(original, pool, args.ratio)
        report.update(original=len(original), mixed=len(mixed))
        if args.out:
            save_dataset(mixed, args.out)
    _echo(report)
    return EXIT_OK


def _load_predictions(path: str, gold) -> np.ndarray:
    pred = load_dataset(path, normalize=False)
    by_id = {ex.id: ex.labels for ex in pred}
    missing = [i for i in gold.ids if i not in by_id]
    extra = sorted(set(by_id) - set(gold.ids))
    if missing or extra:
        raise DatasetError(f"prediction ids do not match gold: missing {missing[:5]}, extra {extra[:5]}")
    return np.stack([by_id[i].to_vector() for i in gold.ids])


def cmd_evaluate(args) -> int:
    gold = load_dataset(args.gold)
    if bool(args.pred) == bool(args.checkpoint):
        raise ConfigError("give exactly one of --pred or --checkpoint")
    if args.pred:
        pred = _load_predictions(args.pred, gold)
    else:
        model = Classifier.load(args.checkpoint)
        pred = logits_to_labels(model.predict_logits(model.encode(gold.texts)), args.threshold)
    report = evaluate(pred, gold.label_matrix())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json() + "\n")
        (out / "confusion.csv").write_text(report.confusion_csv())
    _echo(report.summary())
    return EXIT_OK


def cmd_explain(args) -> int:
    model = Classifier.load(args.checkpoint)
    if bool(args.text) == bool(args.data):
        raise ConfigError("give exactly one of --text or --data")
    if args.text:
        rep = explain(model, preprocess(args.text), args.label, n_perm=args.n_perm, seed=args.seed, absent=args.absent)
        text = rep.to_csv() if args.format == "csv" else rep.to_json() + "\n"
    else:
        data = load_dataset(args.data)
        texts = data.texts[: args.limit] if args.limit else data.texts
        rep = class_report(model, texts, args.label, args.top_k, args.n_perm, args.seed, args.absent)
        text = rep.to_csv() if args.format == "csv" else rep.to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_agreement(args) -> int:
    report = agreement_report(load_annotations(args.annotations), load_dataset(args.gold))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _echo(report.to_dict())
    return EXIT_OK


def cmd_matrix(args) -> int:
    base = resolve_config(load_config_file(args.config), parse_overrides(args.set), _flag_overrides(args))
    # without --head, both head types run with the sizes from the config
    heads = [parse_head(h) for h in args.heads] if args.heads else [{"head.type": "fc"}, {"head.type": "projatt"}]
    ratios = tuple(r.strip() for r in args.ratios.split(",")) if args.ratios else MATRIX_RATIOS
    rows = run_matrix(base, heads, args.out, workers=args.workers, ratios=ratios)
    print((Path(args.out) / "table3.csv").read_text(), end="")
    log.info("%d rows written to %s", len(rows), Path(args.out) / "matrix.csv")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    result = reproduce(args.manifest, args.out)
    _echo(result)
    return EXIT_OK if result["identical"] else EXIT_FAILURE


def cmd_fixtures(args) -> int:
    out = Path(args.out)
    if args.semeval:
        out.mkdir(parents=True, exist_ok=True)
        d = make_synthetic(SyntheticSpec(seed=args.seed), args.n_train, id_prefix="train")
        path = out / "train.csv"
        save_dataset(d, path)
        _echo({"train": str(path)})
    else:
        paths = write_fixture_files(out, args.n_train, args.n_dev, args.n_test, seed=args.seed)
        _echo({k: str(v) for k, v in paths.items()})
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _run_options(p: argparse.ArgumentParser, data: bool = True):
    p.add_argument("--config", help="flat JSON config file with dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    if data:
        p.add_argument("--train", help="training data (tsv, jsonl or SemEval csv)")
        p.add_argument("--dev", help="development split used for model selection and eval curves")
        p.add_argument("--test", help="held-out split for the final report (defaults to --dev)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlsent", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="continued MLM pre-training of a fresh encoder")
    _run_options(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="(optionally pre-train then) fine-tune and evaluate one configuration")
    _run_options(p)
    p.add_argument("--pool", help="generated pool (jsonl) to mix in")
    p.add_argument("--ratio", help="fraction of the pool to mix in, e.g. 1/3")
    p.add_argument("--pretrain", action="store_true", help="run MLM pre-training on the training text first")
    p.add_argument("--init", help="encoder checkpoint written by `mlsent pretrain`")
    p.add_argument("--head", help="fc:<units>x<layers> or projatt:<dim>x<heads>")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("augment", help="generate a labelled pool and optionally mix it into a dataset")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--mock", action="store_true", help="deterministic offline generator")
    src.add_argument("--from-pool", help="reuse an existing pool file instead of generating")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-chars", type=int, default=256)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--prompt-file", help="system prompt text (default: built-in prompt)")
    p.add_argument("--split-target", type=int, help="split long texts toward this many characters")
    p.add_argument("--pool-out", help="write the generated pool (jsonl)")
    p.add_argument("--train", help="original dataset to mix into")
    p.add_argument("--ratio", help="fraction of the pool to mix in")
    p.add_argument("--out", help="write the mixed dataset here")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("evaluate", help="score predictions (or a checkpoint) against gold labels")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", help="prediction file in any dataset format, ids aligned with gold")
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="directory for metrics.json and confusion.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="Shapley token attributions for one text or a class report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label", required=True, choices=LABELS + tuple(name.lower() for name in LABELS))
    p.add_argument("--text")
    p.add_argument("--data", help="dataset whose texts feed a class-level token ranking")
    p.add_argument("--limit", type=int, help="use only the first N texts of --data")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--n-perm", type=int, default=200, help="permutations when a text exceeds 12 tokens")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--absent", choices=("mask", "delete"), default="mask")
    p.add_argument("--format", choices=("json", "csv", "text"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("agreement", help="Cohen's kappa between annotators and against gold")
    p.add_argument("--annotations", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("matrix", help="pretrain yes/no x augmentation ratio x head grid")
    _run_options(p)
    p.add_argument("--pool", help="generated pool (jsonl)")
    p.add_argument("--head", dest="heads", action="append", help="head spec, repeatable (default: one fc and one projatt head sized by the config)")
    p.add_argument("--ratios", help="comma-separated ratios (default 0,1/3,2/3,1)")
    p.add_argument("--workers", type=int, help="parallel worker processes (default: CPU count)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("reproduce", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("fixtures", help="write synthetic train/dev/test files")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-dev", type=int, default=60)
    p.add_argument("--n-test", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--semeval", action="store_true", help="write a single train.csv in the SemEval layout")
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, LabelUniverseError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
