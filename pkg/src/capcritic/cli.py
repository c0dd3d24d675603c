"""Command-line interface.

Every subcommand reads an optional JSON config (``--config``); command-line
flags override it.  Unknown config keys are rejected before any work is
done.  Exit codes: 0 success, 2 usage or configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, evalstats
from .augment import TRANSFORMS
from .corpus import Dataset, Vocabulary, build_vocabulary, load_dataset, read_caption_records, synth_dataset, \
    write_dataset
from .critic import critic_metric, load_model, save_model, score_many
from .errors import ConfigError, DataError
from .trainer import TrainConfig, train, two_fold_score, write_history

log = logging.getLogger("capcritic")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

# Config keys beyond the training hyperparameters.
RUN_KEYS = {
    "captions": str, "features": str, "vocab": str, "model": str, "out_dir": str,
    "generator_name": str, "replicas": int, "t_max": int, "max_vocab": int, "min_freq": int,
    "metrics": list, "robustness_transforms": list, "robustness_grid": list,
    "n_images": int, "vocab_size": int, "d_img": int, "method": str, "human_column": str,
}
RUN_DEFAULTS = {
    "out_dir": ".", "replicas": 1, "t_max": 15, "max_vocab": 10000, "min_freq": 5,
    "metrics": ["critic"], "robustness_transforms": list(TRANSFORMS),
    "robustness_grid": list(evalstats.DEFAULT_ROBUSTNESS_GRID),
    "n_images": 200, "vocab_size": 60, "d_img": 64, "method": "kendall", "human_column": "human_M1",
}


class RunConfig:
    """Training hyperparameters plus paths and subcommand options."""

    def __init__(self, values: dict):
        train_keys = TrainConfig.field_names()
        unknown = set(values) - train_keys - set(RUN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key, kind in RUN_KEYS.items():
            v = values.get(key)
            if v is not None and not isinstance(v, kind):
                raise ConfigError(f"config key {key!r} must be of type {kind.__name__}")
        self.values = {**RUN_DEFAULTS, **values}
        self.train = TrainConfig(**{k: v for k, v in self.values.items() if k in train_keys})
        if self.values["replicas"] < 1:
            raise ConfigError("replicas must be >= 1")

    def __getitem__(self, key):
        if key in TrainConfig.field_names():
            return getattr(self.train, key)
        return self.values.get(key)

    def require(self, key: str):
        v = self[key]
        if v is None:
            raise ConfigError(f"missing required option {key!r} (flag --{key.replace('_', '-')} or config)")
        return v


# ---------------------------------------------------------------------------
# helpers


def _input(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input file not found: {p}")
    return p


class Outputs:
    """Output paths under ``out_dir``; existing files need ``--force``."""

    def __init__(self, out_dir: str, force: bool):
        self.root = Path(out_dir)
        self.force = force

    def path(self, name: str) -> Path:
        p = self.root / name
        if p.exists() and not self.force:
            raise ConfigError(f"refusing to overwrite {p} (pass --force)")
        self.root.mkdir(parents=True, exist_ok=True)
        return p


def _vocab(cfg: RunConfig) -> Vocabulary:
    return Vocabulary.load(_input(cfg.require("vocab")))


def _dataset(cfg: RunConfig, vocab: Vocabulary | None = None) -> Dataset:
    vocab = vocab or _vocab(cfg)
    return load_dataset(_input(cfg.require("captions")), _input(cfg.require("features")), vocab, cfg["t_max"])


def _write_scores(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "caption", "score"])
        for image_id, caption, score in rows:
            w.writerow([image_id, caption, repr(float(score))])


def _human_items(ds: Dataset) -> list[tuple]:
    """Each reference as a candidate, scored against the image's other references."""
    items = []
    for img, refs in zip(ds.images, ds.references):
        for j, cand in enumerate(refs):
            ctx = [r for q, r in enumerate(refs) if q != j] or list(refs)
            items.append((img, ctx, cand))
    return items


def _generated_items(ds: Dataset, name: str) -> list[tuple]:
    if name not in ds.generated:
        raise DataError(f"no generated captions for generator {name!r}")
    return [(img, list(refs), cap) for img, refs, caps in zip(ds.images, ds.references, ds.generated[name])
            for cap in caps]


def _items(ds: Dataset, generator: str | None) -> list[tuple]:
    return _human_items(ds) if generator is None else _generated_items(ds, generator)


def _metric(name: str, cfg: RunConfig, ds: Dataset):
    if name == "critic":
        return critic_metric(load_model(_input(cfg.require("model")), ds.vocab))
    stats = None
    if name == "cider":
        stats = baselines.CiderCorpusStats.from_references(ds.references)
    try:
        return baselines.baseline_metric(name, stats)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_vocab(cfg: RunConfig, out: Outputs, args) -> int:
    path = _input(cfg.require("captions"))
    if path.suffix == ".json":
        texts = [t for rec in read_caption_records(path) for t in rec["references"]]
    else:
        texts = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    vocab = build_vocabulary(texts, cfg["max_vocab"], cfg["min_freq"])
    target = out.path(args.out or "vocab.txt")
    vocab.save(target)
    print(f"{len(vocab)} entries written to {target}")
    return EXIT_OK


def cmd_synth_data(cfg: RunConfig, out: Outputs, args) -> int:
    ds = synth_dataset(cfg["seed"], cfg["n_images"], cfg["vocab_size"], cfg["d_img"], t_max=cfg["t_max"])
    captions, features, vocab = out.path("captions.json"), out.path("features.cfv"), out.path("vocab.txt")
    write_dataset(ds, captions, features)
    ds.vocab.save(vocab)
    print(f"{len(ds)} images written to {out.root}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Outputs, args) -> int:
    ds = _dataset(cfg)
    model_path = out.path(args.out or "model.crt")
    history_path = out.path("history.csv")
    model, history = train(ds, cfg.train)
    save_model(model, model_path)
    write_history(history, history_path)
    print(f"model written to {model_path}")
    return EXIT_OK


def cmd_score(cfg: RunConfig, out: Outputs, args) -> int:
    ds = _dataset(cfg)
    model = load_model(_input(cfg.require("model")), ds.vocab)
    items = _items(ds, cfg["generator_name"])
    target = out.path(args.out or "scores.csv")
    scores = score_many(model, items)
    _write_scores(target, [(img.id, cand.text, s) for (img, _, cand), s in zip(items, scores)])
    print(repr(float(np.mean(scores))) if len(scores) else "nan")
    return EXIT_OK


def cmd_evaluate_generator(cfg: RunConfig, out: Outputs, args) -> int:
    ds = _dataset(cfg)
    name = cfg.require("generator_name")
    target = out.path(args.out or f"evaluation_{name}.csv")
    result = two_fold_score(ds, name, cfg.train, replicas=cfg["replicas"], threads=args.threads)
    _write_scores(target, [(p.image_id, p.caption, p.score) for p in result.pairs])
    print(repr(result.mean_score))
    return EXIT_OK


def cmd_robustness(cfg: RunConfig, out: Outputs, args) -> int:
    ds = _dataset(cfg)
    kinds = list(cfg["robustness_transforms"])
    for k in kinds:
        if k not in TRANSFORMS:
            raise ConfigError(f"unknown transform {k!r}")
    grid = [float(g) for g in cfg["robustness_grid"]]
    try:
        evalstats.check_gamma_grid(grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    target = out.path(args.out or "robustness.csv")
    metrics = [(name, _metric(name, cfg, ds)) for name in cfg["metrics"]]
    jobs = [(name, fn, kind) for name, fn in metrics for kind in kinds]

    def run(job):
        name, fn, kind = job
        return evalstats.robustness_auc(fn, ds, kind, grid, seed=cfg["seed"], metric_name=name)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            curves = list(pool.map(run, jobs))
    else:
        curves = [run(j) for j in jobs]
    evalstats.write_robustness_csv(curves, target)
    print("metric\t" + "\t".join(kinds))
    for name, _ in metrics:
        aucs = [c.auc for c in curves if c.metric == name]
        print(name + "\t" + "\t".join(f"{a:.4f}" for a in aucs))
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _number(value: str, path: Path, column: str) -> float | None:
    if value is None or value.strip() == "":
        return None
    try:
        return float(value)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric {column} value {value!r}") from exc


def _correlation_pairs(cfg: RunConfig, args) -> list[tuple[float, float]]:
    scores_path = _input(args.scores)
    rows = _read_csv(scores_path)
    if args.human:
        human_path = _input(args.human)
        human_rows = _read_csv(human_path)
    else:
        human_path, human_rows = scores_path, rows
    header = set(rows[0]) if rows else set()
    if "unit_id" in header:
        units: dict = defaultdict(lambda: ([], []))
        for r in human_rows:
            h = _number(r.get("human_score"), human_path, "human_score")
            if h is not None:
                units[r["unit_id"]][0].append(h)
        for r in rows:
            s = _number(r.get("metric_score"), scores_path, "metric_score")
            if s is not None:
                units[r["unit_id"]][1].append(s)
        return evalstats.annotation_pairs(units)
    if "system" in header:
        col = cfg["human_column"]
        human = {}
        for r in human_rows:
            if col not in r:
                raise DataError(f"{human_path}: missing column {col!r}")
            human[r["system"]] = _number(r[col], human_path, col)
        pairs = []
        for r in rows:
            if r["system"] not in human:
                raise DataError(f"{scores_path}: system {r['system']!r} has no human judgment")
            pairs.append((human[r["system"]], _number(r.get("metric"), scores_path, "metric")))
        if any(v is None for p in pairs for v in p):
            raise DataError("missing values in system-level correlation input")
        return pairs
    raise DataError(f"{scores_path}: expected a unit_id or system column")


def cmd_correlate(cfg: RunConfig, out: Outputs, args) -> int:
    method = cfg["method"]
    if method not in ("kendall", "pearson"):
        raise ConfigError(f"unknown correlation method {method!r}")
    pairs = _correlation_pairs(cfg, args)
    target = out.path(args.out or "correlation.json")
    try:
        if method == "kendall":
            report = evalstats.kendall_tau(pairs)
        else:
            report = evalstats.pearson_rho([h for h, _ in pairs], [s for _, s in pairs])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    text = json.dumps(report.as_dict(), indent=1, sort_keys=True)
    target.write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_baseline(cfg: RunConfig, out: Outputs, args) -> int:
    ds = _dataset(cfg)
    names = list(cfg["metrics"]) if args.metric is None else [args.metric]
    items = _items(ds, cfg["generator_name"])
    for name in names:
        if name == "critic":
            raise ConfigError("use the score subcommand for the critic")
        fn = _metric(name, cfg, ds)
        target = out.path(f"{name}.csv")
        scores = fn(items)
        _write_scores(target, [(img.id, cand.text, s) for (img, _, cand), s in zip(items, scores)])
        print(f"{name}\t{float(np.mean(scores)):.6f}")
    return EXIT_OK


def cmd_word_freq(cfg: RunConfig, out: Outputs, args) -> int:
    ds = _dataset(cfg)
    refs = evalstats.word_frequency_profile([c for rs in ds.references for c in rs], ds.vocab)
    names = [cfg["generator_name"]] if cfg["generator_name"] else ds.generator_names
    profiles = {}
    for name in names:
        if name not in ds.generated:
            raise DataError(f"no generated captions for generator {name!r}")
        caps = [c for per in ds.generated[name] for c in per]
        if caps:
            profiles[name] = evalstats.word_frequency_profile(caps, ds.vocab)
    target = out.path(args.out or "word_freq.csv")
    words = [w for w in ds.vocab.itos if w in refs or any(w in p for p in profiles.values())]
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "word", "reference"] + list(profiles))
        for word in words:
            w.writerow([ds.vocab.lookup(word), word, repr(refs.get(word, 0.0))]
                       + [repr(p.get(word, 0.0)) for p in profiles.values()])
    for name, p in profiles.items():
        print(f"{name}\ttotal_variation={evalstats.total_variation(refs, p):.6f}")
    return EXIT_OK


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "score": cmd_score,
    "evaluate-generator": cmd_evaluate_generator,
    "robustness": cmd_robustness,
    "correlate": cmd_correlate,
    "baseline": cmd_baseline,
    "word-freq": cmd_word_freq,
}


# ---------------------------------------------------------------------------
# argument parsing


def _add_paths(p, *names):
    for name in names:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, help=f"{name} path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capcritic", description="Learned caption evaluation critic.")
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--seed", type=int, help="seed for every random choice in the run")
    parser.add_argument("--threads", type=int, default=1, help="worker threads (1 = bit reproducible)")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--out-dir", dest="out_dir", help="directory for output files")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary from reference captions")
    _add_paths(p, "captions")
    p.add_argument("--max-vocab", dest="max_vocab", type=int)
    p.add_argument("--min-freq", dest="min_freq", type=int)
    p.add_argument("--out")

    p = sub.add_parser("synth-data", help="write a synthetic dataset")
    p.add_argument("--n-images", dest="n_images", type=int)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--d-img", dest="d_img", type=int)

    p = sub.add_parser("train", help="train a critic")
    _add_paths(p, "captions", "features", "vocab")
    p.add_argument("--epochs", type=int)
    p.add_argument("--context")
    p.add_argument("--fusion")
    p.add_argument("--out")

    p = sub.add_parser("score", help="score captions with a trained critic")
    _add_paths(p, "captions", "features", "vocab", "model")
    p.add_argument("--generator", dest="generator_name")
    p.add_argument("--out")

    p = sub.add_parser("evaluate-generator", help="two-fold evaluation of a caption generator")
    _add_paths(p, "captions", "features", "vocab")
    p.add_argument("--generator", dest="generator_name")
    p.add_argument("--replicas", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")

    p = sub.add_parser("robustness", help="robustness curves and AUC for metrics")
    _add_paths(p, "captions", "features", "vocab", "model")
    p.add_argument("--metrics", type=lambda s: s.split(","), help="comma list, e.g. critic,bleu4,rougeL,cider")
    p.add_argument("--transforms", dest="robustness_transforms", type=lambda s: s.split(","))
    p.add_argument("--out")

    p = sub.add_parser("correlate", help="correlation of metric scores with human judgments")
    p.add_argument("--scores", required=True, help="CSV with unit_id,[human_score,]metric_score or system,metric")
    p.add_argument("--human", help="separate CSV of human judgments (joined on unit_id or system)")
    p.add_argument("--method", choices=("kendall", "pearson"))
    p.add_argument("--human-column", dest="human_column")
    p.add_argument("--out")

    p = sub.add_parser("baseline", help="rule-based metric scores")
    _add_paths(p, "captions", "features", "vocab")
    p.add_argument("--metric", help="bleu1..bleu4, rougeL or cider (default: config metrics)")
    p.add_argument("--generator", dest="generator_name")

    p = sub.add_parser("word-freq", help="word frequency profiles of references and generators")
    _add_paths(p, "captions", "features", "vocab")
    p.add_argument("--generator", dest="generator_name")
    p.add_argument("--out")
    return parser


_NOT_CONFIG = {"config", "threads", "force", "verbose", "command", "out", "scores", "human", "metric"}


def resolve_config(args) -> RunConfig:
    values: dict = {}
    if args.config:
        path = _input(args.config)
        try:
            values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    for key, v in vars(args).items():
        if key not in _NOT_CONFIG and v is not None:
            values[key] = v
    try:
        return RunConfig(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = resolve_config(args)
        out = Outputs(cfg["out_dir"], args.force)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
