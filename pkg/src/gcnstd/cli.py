"""Command-line front end: ``gcnstd <decode|stitch|synth|train|index|search|eval>``.

Every subcommand resolves one effective configuration (defaults, then the
``--config`` JSON file, then command-line flags), prints it, and writes it next
to its outputs. Exit codes: 1 usage/configuration, 2 bad input data,
3 internal error. Outputs created by a failing command are removed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from .cn import ConfusionNetworkError, build_confusion_network, read_gcn_corpus, stitch, window_spans, write_gcn_corpus
from .eval import BETA_FA, MATCH_TOLERANCE_S, UndefinedMetricError, evaluate, read_references
from .grid import GridFormatError, GridValidationError, load_grid, merge_separator_into_blank, save_grid
from .nn import ModelConfig, load_model, save_model
from .search import build_index, load_index, read_hits, save_index, search_terms, write_hits
from .synth import SynthConfig, gen_corpus, write_corpus
from .train import HyperParams, TrainingConfigError, read_transcripts, train

log = logging.getLogger("gcnstd")

SCHEMA_VERSION = 1
EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 1, 2, 3
CONFIG_NAME = "effective_config.json"

DATA_ERRORS = (
    GridFormatError,
    GridValidationError,
    ConfusionNetworkError,
    TrainingConfigError,
    UndefinedMetricError,
    FileNotFoundError,
    NotADirectoryError,
    json.JSONDecodeError,
    UnicodeDecodeError,
    KeyError,
    ValueError,
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# configuration

def default_run_config() -> dict:
    model = asdict(ModelConfig())
    model.pop("graphemes")
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "jobs": os.cpu_count() or 1,
        "decode": {"window_frames": 900, "overlap_frames": 150},
        "synth": SynthConfig().to_dict(),
        "model": model,
        "train": HyperParams().to_dict(),
        "search": {"detect_threshold": 0.5},
        "eval": {"mode": "mtwv", "threshold": None, "beta_fa": BETA_FA, "tolerance": MATCH_TOLERANCE_S},
    }


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge that refuses keys absent from ``base``."""
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise UsageError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {where + k!r} must be an object")
            out[k] = merge_config(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_run_config(path: Optional[str]) -> dict:
    cfg = default_run_config()
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise UsageError("config file must hold a JSON object")
    if user.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise UsageError(f"unsupported config schema_version {user['schema_version']!r}")
    return merge_config(cfg, user)


# flags that override config keys: (flag dest, section, key)
OVERRIDES = [
    ("seed", None, "seed"),
    ("jobs", None, "jobs"),
    ("window_frames", "decode", "window_frames"),
    ("overlap_frames", "decode", "overlap_frames"),
    ("steps", "train", "steps"),
    ("masking_n", "train", "masking_n"),
    ("batch_size", "train", "batch_size"),
    ("peak_lr", "train", "peak_lr"),
    ("chunk_len", "train", "chunk_len"),
    ("hidden_size", "model", "hidden_size"),
    ("num_layers", "model", "num_layers"),
    ("n_train_docs", "synth", "n_train_docs"),
    ("n_dev_docs", "synth", "n_dev_docs"),
    ("n_test_docs", "synth", "n_test_docs"),
    ("noise", "synth", "noise"),
    ("jitter", "synth", "jitter"),
    ("detect_threshold", "search", "detect_threshold"),
    ("mode", "eval", "mode"),
    ("threshold", "eval", "threshold"),
]


def effective_config(args: argparse.Namespace) -> dict:
    cfg = load_run_config(args.config)
    for dest, section, key in OVERRIDES:
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            cfg[key] = value
        else:
            cfg[section] = {**cfg[section], key: value}
    # one seed drives everything random
    cfg["synth"] = {**cfg["synth"], "seed": cfg["seed"]}
    cfg["train"] = {**cfg["train"], "seed": cfg["seed"]}
    if int(cfg["jobs"]) < 1:
        raise UsageError("jobs must be >= 1")
    return cfg


def _build(cls, d: dict, what: str):
    try:
        return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} configuration: {exc}") from None


# outputs

class Outputs:
    """Tracks paths a command creates so they can be removed if it fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def claim(self, path, directory: bool = False) -> Path:
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        if directory:
            path.mkdir(parents=True, exist_ok=True)
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def rollback(self) -> None:
        for p in reversed(self.paths):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _config_path(out: Path, is_dir: bool) -> Path:
    return out / CONFIG_NAME if is_dir else out.with_name(out.name + ".config.json")


def _persist_config(cfg: dict, command: str, out: Path, is_dir: bool, outputs: Outputs) -> None:
    path = outputs.claim(_config_path(out, is_dir))
    path.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# corpus helpers

def _grid_files(paths: Sequence[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("*.gpg")) if p.is_dir() else [p])
    return out


def _decode_file(path: Path):
    grid = load_grid(path)
    if grid.vocab.separator_index is not None:
        grid = merge_separator_into_blank(grid)
    return build_confusion_network(grid, doc_id=path.stem)


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def load_corpus(path: str, jobs: int = 1):
    """A GCN JSON-lines file, or a split directory holding ``grids/*.gpg`` (decoded on the fly)."""
    p = Path(path)
    if p.is_dir():
        if (p / "gcn.jsonl").exists():
            return read_gcn_corpus(p / "gcn.jsonl")
        grids = sorted((p / "grids").glob("*.gpg")) if (p / "grids").is_dir() else sorted(p.glob("*.gpg"))
        if not grids:
            raise DataError(f"{p}: no gcn.jsonl and no grids found")
        return _map(_decode_file, grids, jobs)
    return read_gcn_corpus(p)


def _speech_seconds(args) -> float:
    if args.speech_s is not None:
        return float(args.speech_s)
    if args.meta is None:
        raise UsageError("eval needs --speech-s or --meta")
    meta = json.loads(Path(args.meta).read_text(encoding="utf-8"))
    return float(meta["speech_duration_s"])


def _read_terms(path) -> list[str]:
    terms = [t.strip() for t in Path(path).read_text(encoding="utf-8").splitlines()]
    terms = [t for t in terms if t and not t.startswith("#")]
    if not terms:
        raise DataError(f"{path}: no terms")
    return terms


# commands

def cmd_decode(args, cfg, outputs: Outputs) -> int:
    files = _grid_files(args.grids)
    if not files:
        raise UsageError("decode: no grid files given")
    out = outputs.claim(args.out)
    _persist_config(cfg, "decode", out, False, outputs)
    failures = []

    def one(path):
        try:
            return _decode_file(path)
        except DATA_ERRORS as exc:
            failures.append(f"{path}: {exc}")
            return None

    cnets = _map(one, files, int(cfg["jobs"]))
    if failures:
        for f in sorted(failures):
            print(f"error: {f}", file=sys.stderr)
        raise DataError(f"{len(failures)} of {len(files)} grids failed")
    write_gcn_corpus(out, cnets)
    print(f"decoded {len(cnets)} grids -> {out}")
    return 0


def cmd_stitch(args, cfg, outputs: Outputs) -> int:
    grids = [load_grid(p) for p in args.windows]
    if args.spans:
        spans = [tuple(int(x) for x in s) for s in json.loads(Path(args.spans).read_text(encoding="utf-8"))]
    else:
        total = args.total_frames
        if total is None:
            # recover the total from the last window's extent
            d = cfg["decode"]
            step = d["window_frames"] - d["overlap_frames"]
            total = step * (len(grids) - 1) + grids[-1].num_frames if grids else 0
        spans = window_spans(total, cfg["decode"]["window_frames"], cfg["decode"]["overlap_frames"])
    out = outputs.claim(args.out)
    _persist_config(cfg, "stitch", out, False, outputs)
    merged = stitch(grids, spans)
    save_grid(merged, out)
    print(f"stitched {len(grids)} windows ({merged.num_frames} frames) -> {out}")
    return 0


def cmd_synth(args, cfg, outputs: Outputs) -> int:
    config = _build(SynthConfig, cfg["synth"], "synth")
    out = outputs.claim(args.out, directory=True)
    _persist_config(cfg, "synth", out, True, outputs)
    corpus = gen_corpus(config)
    write_corpus(corpus, out)
    if args.decode:
        jobs = int(cfg["jobs"])
        for split in ("train", "dev", "test"):
            write_gcn_corpus(out / split / "gcn.jsonl", load_corpus(out / split, jobs))
    print(f"wrote synthetic corpus ({len(corpus.query_terms)} query terms) -> {out}")
    return 0


def cmd_train(args, cfg, outputs: Outputs) -> int:
    hyper = _build(HyperParams, cfg["train"], "train")
    model_cfg = _build(ModelConfig, cfg["model"], "model")
    cnets = load_corpus(args.corpus, int(cfg["jobs"]))
    tpath = args.transcripts or (Path(args.corpus) / "transcripts.tsv" if Path(args.corpus).is_dir() else None)
    if tpath is None:
        raise UsageError("train: --transcripts is required when the corpus is a file")
    by_doc: dict[str, list] = {}
    for tok in read_transcripts(tpath):
        by_doc.setdefault(tok.doc_id, []).append(tok)
    out = outputs.claim(args.out, directory=True)
    _persist_config(cfg, "train", out, True, outputs)
    model = train([(c, by_doc.get(c.doc_id, [])) for c in cnets], hyper, model_cfg, log_every=args.log_every)
    save_model(model, out)
    print(f"trained {hyper.steps} steps -> {out}")
    return 0


def cmd_index(args, cfg, outputs: Outputs) -> int:
    model = load_model(args.model)
    cnets = load_corpus(args.corpus, int(cfg["jobs"]))
    out = outputs.claim(args.out, directory=True)
    _persist_config(cfg, "index", out, True, outputs)
    index = build_index(model, cnets, jobs=int(cfg["jobs"]))
    save_index(index, out)
    print(f"indexed {len(index)} documents -> {out}")
    return 0


def cmd_search(args, cfg, outputs: Outputs) -> int:
    model = load_model(args.model)
    index = load_index(args.index)
    terms = _read_terms(args.terms)
    out = outputs.claim(args.out)
    _persist_config(cfg, "search", out, False, outputs)
    hits = search_terms(index, model, terms, float(cfg["search"]["detect_threshold"]))
    write_hits(out, hits)
    print(f"{len(hits)} hits for {len(terms)} terms -> {out}")
    return 0


def cmd_eval(args, cfg, outputs: Outputs) -> int:
    e = cfg["eval"]
    if e["mode"] not in ("mtwv", "atwv"):
        raise UsageError(f"eval mode must be mtwv or atwv, not {e['mode']!r}")
    if e["mode"] == "atwv" and e["threshold"] is None:
        raise UsageError("eval --mode atwv needs --threshold")
    hits = read_hits(args.hits)
    refs = read_references(args.refs)
    terms = _read_terms(args.terms) if args.terms else None
    speech = _speech_seconds(args)
    report = evaluate(hits, refs, speech, e["mode"], e["threshold"], terms, float(e["beta_fa"]), float(e["tolerance"]))
    out = outputs.claim(args.out)
    _persist_config(cfg, "eval", out, False, outputs)
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    value = report.atwv if e["mode"] == "atwv" else report.mtwv
    print(f"{e['mode'].upper()} {value:.4f} (threshold {report.threshold}) -> {out}")
    return 0


COMMANDS = {
    "decode": cmd_decode,
    "stitch": cmd_stitch,
    "synth": cmd_synth,
    "train": cmd_train,
    "index": cmd_index,
    "search": cmd_search,
    "eval": cmd_eval,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker threads for per-document work (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gcnstd", description="Spoken term detection on grapheme confusion networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("decode", parents=[common], help="posterior grids -> GCN JSON lines")
    s.add_argument("grids", nargs="+", help="GPG1 files or directories of them")
    s.add_argument("-o", "--out", required=True)

    s = sub.add_parser("stitch", parents=[common], help="window grids -> one grid")
    s.add_argument("windows", nargs="+")
    s.add_argument("--spans", help="JSON list of [start, length] per window")
    s.add_argument("--total-frames", type=int)
    s.add_argument("--window-frames", type=int)
    s.add_argument("--overlap-frames", type=int)
    s.add_argument("-o", "--out", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--decode", action="store_true", help="also write <split>/gcn.jsonl")
    for flag, typ in (("--n-train-docs", int), ("--n-dev-docs", int), ("--n-test-docs", int), ("--noise", float), ("--jitter", int)):
        s.add_argument(flag, type=typ)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("corpus", help="GCN JSON-lines file or split directory")
    s.add_argument("--transcripts")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--log-every", type=int, default=0)
    for flag, typ in (("--steps", int), ("--masking-n", int), ("--batch-size", int), ("--peak-lr", float), ("--chunk-len", int), ("--hidden-size", int), ("--num-layers", int)):
        s.add_argument(flag, type=typ)

    s = sub.add_parser("index", parents=[common], help="precompute document embeddings")
    s.add_argument("model")
    s.add_argument("corpus")
    s.add_argument("-o", "--out", required=True)

    s = sub.add_parser("search", parents=[common], help="search terms in an index")
    s.add_argument("index")
    s.add_argument("model")
    s.add_argument("terms", help="text file, one term per line")
    s.add_argument("--detect-threshold", type=float)
    s.add_argument("-o", "--out", required=True)

    s = sub.add_parser("eval", parents=[common], help="score hits against references")
    s.add_argument("hits")
    s.add_argument("refs")
    s.add_argument("--speech-s", type=float)
    s.add_argument("--meta", help="meta.json holding speech_duration_s")
    s.add_argument("--terms", help="restrict scoring to these terms")
    s.add_argument("--mode", choices=("mtwv", "atwv"))
    s.add_argument("--threshold", type=float)
    s.add_argument("-o", "--out", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    outputs = Outputs()
    try:
        cfg = effective_config(args)
        print(json.dumps({"command": args.command, "effective_config": cfg}, sort_keys=True))
        print(f"seed {cfg['seed']}")
        return COMMANDS[args.command](args, cfg, outputs)
    except UsageError as exc:
        outputs.rollback()
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, *DATA_ERRORS) as exc:
        outputs.rollback()
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        outputs.rollback()
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
