"""One experiment run: mix -> (pre-train) -> fine-tune -> evaluate, with a reproducible run directory.

Run directory layout::

    manifest.json       resolved config, input hashes, output hashes
    metrics.json        MetricsReport of the best-dev model on the test split
    confusion.csv       per-label TP/FP/FN/TN
    curves.csv          epoch,step,split,metric,value
    curves.png          rendered loss / F1 curves (not hashed)
    checkpoints/best.ckpt, checkpoints/final.ckpt
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .augment import mix, parse_ratio
from .data import SPECIAL_TOKENS, Dataset, Vocabulary, build_vocab, load_dataset
from .encoder import EncoderConfig, init_encoder
from .heads import make_head
from .metrics import evaluate
from .model import Classifier
from .tensor import as_parameters, load_checkpoint, parameter_arrays, save_checkpoint
from .training import CurvePoint, TrainConfig, finetune, logits_to_labels, pretrain

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class ConfigError(ValueError):
    pass


_ENCODER_FIELDS = [f.name for f in fields(EncoderConfig) if f.name != "vocab_size"]

DEFAULTS: dict = {
    "seed": 0,
    "data.train": None,
    "data.dev": None,
    "data.test": None,
    "data.pool": None,
    "data.min_freq": 1,
    "augment.ratio": "0",
    "pretrain.enabled": False,
    "pretrain.init": None,
    "pretrain.epochs": 50,
    "pretrain.lr": 2e-5,
    "pretrain.weight_decay": 0.01,
    "pretrain.batch_size": 32,
    "pretrain.mask_prob": 0.15,
    "finetune.epochs": 30,
    "finetune.lr": 2e-5,
    "finetune.weight_decay": 0.01,
    "finetune.batch_size": 32,
    "finetune.threshold": 0.5,
    "finetune.select_metric": "micro_f1",
    "head.type": "fc",
    "head.num_layers": 1,
    "head.classifier_size": 64,
    "head.dropout_p": 0.1,
    "head.attention_dim": 16,
    "head.num_heads": 1,
    **{f"encoder.{f.name}": f.default for f in fields(EncoderConfig) if f.name != "vocab_size"},
}

INPUT_KEYS = ("data.train", "data.dev", "data.test", "data.pool", "pretrain.init")
HASHED_OUTPUTS = ("metrics.json", "confusion.csv", "curves.csv", "checkpoints/best.ckpt", "checkpoints/final.ckpt")


def resolve_config(*layers: dict) -> dict:
    """Merge flat dotted-key dicts over the defaults; unknown keys are an error."""
    cfg = dict(DEFAULTS)
    for layer in layers:
        for key, value in (layer or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = value
    if cfg["head.type"] not in ("fc", "projatt"):
        raise ConfigError(f"head.type must be 'fc' or 'projatt', got {cfg['head.type']!r}")
    try:
        ratio = parse_ratio(cfg["augment.ratio"])
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad augment.ratio {cfg['augment.ratio']!r}") from exc
    if not 0 <= ratio <= 1:
        raise ConfigError(f"augment.ratio must be within [0, 1], got {cfg['augment.ratio']}")
    cfg["augment.ratio"] = str(ratio)
    return cfg


def head_spec(cfg: dict) -> dict:
    if cfg["head.type"] == "fc":
        return {
            "type": "fc",
            "num_layers": int(cfg["head.num_layers"]),
            "classifier_size": int(cfg["head.classifier_size"]),
            "dropout_p": float(cfg["head.dropout_p"]),
        }
    return {"type": "projatt", "attention_dim": int(cfg["head.attention_dim"]), "num_heads": int(cfg["head.num_heads"])}


def encoder_overrides(cfg: dict) -> dict:
    return {name: cfg[f"encoder.{name}"] for name in _ENCODER_FIELDS}


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format: sha1(b"blob <len>\\0" + data)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path: str | Path) -> str:
    return git_blob_hash(Path(path).read_bytes())


def curves_csv(curve: list[CurvePoint], phase: str = "") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["phase", "epoch", "step", "split", "metric", "value"])
    for p in curve:
        writer.writerow([phase, p.epoch, p.step, p.split, p.metric, repr(p.value)])
    return buf.getvalue()


def render_curves(curves: dict[str, list[CurvePoint]], path: Path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:  # plotting is optional
        return
    panels = [(phase, metric) for phase, metric in (("pretrain", "mlm_loss"), ("finetune", "bce_loss"), ("finetune", "micro_f1"))
              if any(p.metric == metric for p in curves.get(phase, []))]
    if not panels:
        return
    fig, axes = plt.subplots(1, len(panels), figsize=(4.5 * len(panels), 3.2), squeeze=False)
    for ax, (phase, metric) in zip(axes[0], panels):
        pts = [p for p in curves[phase] if p.metric == metric]
        for split in sorted({p.split for p in pts}):
            xs = [p.epoch for p in pts if p.split == split]
            ax.plot(xs, [p.value for p in pts if p.split == split], label=split)
        ax.set_title(f"{phase}: {metric}")
        ax.set_xlabel("epoch")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _load(cfg: dict, key: str, provenance: str = "original") -> Dataset | None:
    path = cfg[key]
    return load_dataset(path, provenance) if path else None


def build_model(cfg: dict, train: Dataset) -> Classifier:
    seed = int(cfg["seed"])
    spec = head_spec(cfg)
    if cfg["pretrain.init"]:
        # encoder weights and vocabulary come from a standalone pre-training checkpoint
        arrays, meta = load_checkpoint(cfg["pretrain.init"])
        vocab = Vocabulary(SPECIAL_TOKENS + tuple(meta["vocab"]))
        enc_cfg = EncoderConfig(**meta["encoder"])
        head = make_head(spec, enc_cfg.hidden_size, seed=seed)
        enc = as_parameters({k: v for k, v in arrays.items() if not k.startswith("head.")})
        return Classifier(enc_cfg, enc, head, vocab)
    vocab = build_vocab(train, int(cfg["data.min_freq"]))
    return Classifier.create(vocab, spec, seed=seed, **encoder_overrides(cfg))


def run_experiment(config: dict, out_dir: str | Path) -> dict:
    """Execute one resolved config and write its run directory. Returns the row summary."""
    cfg = resolve_config(config)
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if not cfg["data.train"]:
        raise ConfigError("data.train is required")
    train = _load(cfg, "data.train")
    dev = _load(cfg, "data.dev")
    test = _load(cfg, "data.test") or dev
    ratio = parse_ratio(cfg["augment.ratio"])
    if ratio > 0:
        if not cfg["data.pool"]:
            raise ConfigError("augment.ratio > 0 needs data.pool")
        train = mix(train, _load(cfg, "data.pool", "generated"), ratio)
    seed = int(cfg["seed"])
    model = build_model(cfg, train)
    curves: dict[str, list[CurvePoint]] = {}
    if cfg["pretrain.enabled"]:
        pcfg = TrainConfig.pretrain_defaults(
            epochs=int(cfg["pretrain.epochs"]),
            lr=float(cfg["pretrain.lr"]),
            weight_decay=float(cfg["pretrain.weight_decay"]),
            batch_size=int(cfg["pretrain.batch_size"]),
            mask_prob=float(cfg["pretrain.mask_prob"]),
            seed=seed,
        )
        curves["pretrain"] = pretrain(model.encoder_params, model.encoder_cfg, train, model.vocab, pcfg, dev).curve
    fcfg = TrainConfig.finetune_defaults(
        epochs=int(cfg["finetune.epochs"]),
        lr=float(cfg["finetune.lr"]),
        weight_decay=float(cfg["finetune.weight_decay"]),
        batch_size=int(cfg["finetune.batch_size"]),
        threshold=float(cfg["finetune.threshold"]),
        select_metric=cfg["finetune.select_metric"],
        seed=seed,
    )
    result = finetune(model, train, dev, fcfg)
    curves["finetune"] = result.curve
    model.save(out / "checkpoints" / "best.ckpt", result.best_arrays)
    model.save(out / "checkpoints" / "final.ckpt", result.final_arrays)

    report = None
    if test is not None and len(test):
        preds = logits_to_labels(model.predict_logits(model.encode(test.texts)), fcfg.threshold)
        report = evaluate(preds, test.label_matrix())
        (out / "metrics.json").write_text(report.to_json() + "\n")
        (out / "confusion.csv").write_text(report.confusion_csv())
    else:
        (out / "metrics.json").write_text("null\n")
        (out / "confusion.csv").write_text("")
    (out / "curves.csv").write_text(
        "".join(curves_csv(c, phase) if i == 0 else curves_csv(c, phase).split("\n", 1)[1]
                for i, (phase, c) in enumerate(curves.items()))
    )
    render_curves(curves, out / "curves.png")

    summary = {
        "head": head_spec(cfg),
        "pretrained": bool(cfg["pretrain.enabled"]),
        "ratio": cfg["augment.ratio"],
        "train_size": len(train),
        "best_epoch": result.best_epoch,
        **(report.summary() if report else {}),
    }
    write_manifest(out, "run", cfg, summary)
    return summary


def run_pretrain(config: dict, out_dir: str | Path) -> dict:
    """Standalone MLM pre-training; writes ``checkpoints/encoder.ckpt`` usable as ``pretrain.init``."""
    cfg = resolve_config(config)
    if not cfg["data.train"]:
        raise ConfigError("data.train is required")
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    train = _load(cfg, "data.train")
    dev = _load(cfg, "data.dev")
    seed = int(cfg["seed"])
    vocab = build_vocab(train, int(cfg["data.min_freq"]))
    enc_cfg = EncoderConfig(vocab_size=len(vocab), **encoder_overrides(cfg))
    params = init_encoder(enc_cfg, seed)
    pcfg = TrainConfig.pretrain_defaults(
        epochs=int(cfg["pretrain.epochs"]),
        lr=float(cfg["pretrain.lr"]),
        weight_decay=float(cfg["pretrain.weight_decay"]),
        batch_size=int(cfg["pretrain.batch_size"]),
        mask_prob=float(cfg["pretrain.mask_prob"]),
        seed=seed,
    )
    curve = pretrain(params, enc_cfg, train, vocab, pcfg, dev).curve
    meta = {"encoder": asdict(enc_cfg), "vocab": list(vocab.content_tokens)}
    save_checkpoint(out / "checkpoints" / "encoder.ckpt", parameter_arrays(params), meta)
    (out / "curves.csv").write_text(curves_csv(curve, "pretrain"))
    render_curves({"pretrain": curve}, out / "curves.png")
    final = {p.split: p.value for p in curve if p.epoch == pcfg.epochs and p.metric == "mlm_loss"}
    summary = {"epochs": pcfg.epochs, "vocab_size": len(vocab), **{f"final_{k}_mlm_loss": v for k, v in final.items()}}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "pretrain", cfg, summary, ("metrics.json", "curves.csv", "checkpoints/encoder.ckpt"))
    return summary


def write_manifest(out: Path, command: str, cfg: dict, summary: dict, outputs=HASHED_OUTPUTS):
    manifest = {
        "format_version": MANIFEST_VERSION,
        "package_version": __version__,
        "command": command,
        "config": cfg,
        "inputs": {k: {"path": str(Path(cfg[k]).resolve()), "hash": file_hash(cfg[k])} for k in INPUT_KEYS if cfg.get(k)},
        "outputs": {name: file_hash(out / name) for name in outputs if (out / name).exists()},
        "summary": summary,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def reproduce(manifest_path: str | Path, out_dir: str | Path) -> dict:
    """Re-run a manifest's config into ``out_dir`` and compare output hashes.

    Returns ``{"identical": bool, "mismatched": [...]}``. Raises ConfigError
    when an input file no longer matches its recorded hash.
    """
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version {manifest.get('format_version')}")
    for key, entry in manifest["inputs"].items():
        if not Path(entry["path"]).exists():
            raise FileNotFoundError(entry["path"])
        if file_hash(entry["path"]) != entry["hash"]:
            raise ConfigError(f"input {key} ({entry['path']}) changed since the manifest was written")
    runner = run_pretrain if manifest["command"] == "pretrain" else run_experiment
    runner(manifest["config"], out_dir)
    fresh = json.loads((Path(out_dir) / "manifest.json").read_text())
    mismatched = sorted(k for k, v in manifest["outputs"].items() if fresh["outputs"].get(k) != v)
    return {"identical": not mismatched, "mismatched": mismatched}


# ---------------------------------------------------------------- matrix

MATRIX_RATIOS = ("0", "1/3", "2/3", "1")
MATRIX_COLUMNS = (
    "row_id", "head", "pretrained", "ratio", "train_size", "best_epoch",
    "subset_accuracy", "micro_f1", "macro_f1", "samples_f1",
)


def parse_head(text: str) -> dict:
    """``fc:768x2`` -> fc head, 768 units, 2 layers; ``projatt:128x1`` -> d=128, k=1."""
    try:
        kind, shape = text.split(":")
        size, count = (int(x) for x in shape.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"head spec {text!r} is not of the form fc:<units>x<layers> or projatt:<dim>x<heads>") from exc
    if kind == "fc":
        return {"head.type": "fc", "head.classifier_size": size, "head.num_layers": count}
    if kind == "projatt":
        return {"head.type": "projatt", "head.attention_dim": size, "head.num_heads": count}
    raise ConfigError(f"unknown head type {kind!r} in {text!r}")


def head_label(cfg: dict) -> str:
    spec = head_spec(cfg)
    if spec["type"] == "fc":
        return f"fc {spec['classifier_size']}x{spec['num_layers']}"
    return f"projatt {spec['attention_dim']}x{spec['num_heads']}"


def matrix_rows(base: dict, heads: list[dict], ratios=MATRIX_RATIOS, pretrain_options=(True, False)) -> list[tuple[str, dict]]:
    """Expand the grid into ``(row_id, resolved config)`` pairs, in table order."""
    rows = []
    for head in heads:
        for pre in pretrain_options:
            for ratio in ratios:
                cfg = resolve_config(base, head, {"pretrain.enabled": pre, "augment.ratio": ratio})
                slug = head_label(cfg).replace(" ", "-")
                row_id = f"{slug}__{'pt' if pre else 'nopt'}__r{cfg['augment.ratio'].replace('/', '-')}"
                rows.append((row_id, cfg))
    return rows


def _run_row(args) -> dict:
    row_id, cfg, out = args
    summary = run_experiment(cfg, out)
    return {"row_id": row_id, **summary}


def _format_row(row_id: str, cfg: dict, summary: dict) -> dict:
    return {
        "row_id": row_id,
        "head": head_label(cfg),
        "pretrained": "yes" if cfg["pretrain.enabled"] else "no",
        "ratio": cfg["augment.ratio"],
        "train_size": summary["train_size"],
        "best_epoch": summary["best_epoch"],
        **{k: repr(summary.get(k, float("nan"))) for k in MATRIX_COLUMNS[6:]},
    }


def table3_csv(rows: list[dict], ratios=MATRIX_RATIOS) -> str:
    """Wide pivot: one line per (head, pretrained), accuracy and micro F1 per ratio."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["head", "pretrained"]
    for r in ratios:
        header += [f"acc@{r}", f"f1@{r}"]
    writer.writerow(header)
    index = {(row["head"], row["pretrained"], row["ratio"]): row for row in rows}
    seen = []
    for row in rows:
        key = (row["head"], row["pretrained"])
        if key not in seen:
            seen.append(key)
    for head, pre in seen:
        line = [head, pre]
        for r in ratios:
            cell = index.get((head, pre, str(parse_ratio(r))))
            line += [cell["subset_accuracy"], cell["micro_f1"]] if cell else ["-", "-"]
        writer.writerow(line)
    return buf.getvalue()


def run_matrix(base: dict, heads: list[dict], out_dir: str | Path, workers: int | None = None,
               ratios=MATRIX_RATIOS, pretrain_options=(True, False)) -> list[dict]:
    """Run every grid row in its own run directory and write matrix.csv and table3.csv.

    Rows share nothing but their inputs, so they run in parallel worker
    processes; ``workers=1`` runs them in-process.
    """
    out = Path(out_dir)
    grid = matrix_rows(base, heads, ratios, pretrain_options)
    jobs = [(row_id, cfg, out / "rows" / row_id) for row_id, cfg in grid]
    workers = workers or os.cpu_count() or 1
    if workers == 1:
        summaries = [_run_row(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            summaries = list(pool.map(_run_row, jobs))
    rows = [_format_row(row_id, cfg, s) for (row_id, cfg), s in zip(grid, summaries)]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MATRIX_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / "matrix.csv").write_text(buf.getvalue())
    (out / "table3.csv").write_text(table3_csv(rows, ratios))
    return rows
