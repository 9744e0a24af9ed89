"""Command-line verbs: ingest, synth, pretrain-embeddings, pretrain-nids, train, evaluate, report."""

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .app_logging import setup_app_logging
from .embedding import train_skipgram
from .ingest import ingest_pcaps, split_dataset, synthesize_corpus, write_dataset
from .nids import save_nids, train_nids
from .orchestrator import (
    RunConfig,
    embedding_tokens,
    nids_seed,
    evaluate_run,
    input_provenance,
    load_corpus,
    run_experiment,
    save_embedding,
    synth_spec,
)
from .report import build_report
from .settings import ConfigError, load_config_file, parse_overrides, resolve_config
from .utils import ensure_dir

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

VERBS = ("ingest", "synth", "pretrain-embeddings", "pretrain-nids", "train", "evaluate", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file with flat dotted keys (or a run manifest)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", type=Path, required=True, help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trafficgan", description="Constrained adversarial packet generation against black-box NIDS.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log INFO to stderr")
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    ingest = verbs.add_parser("ingest", help="Turn benign/malicious pcaps into a labeled dataset")
    ingest.add_argument("--benign", type=Path, nargs="+", required=True)
    ingest.add_argument("--malicious", type=Path, nargs="+", required=True)
    ingest.add_argument("--length", type=int, default=300)
    ingest.add_argument("--strip-offset", type=int, default=0, help="Bytes of link-layer header to drop")
    ingest.add_argument("--out", type=Path, required=True)

    for name, help_text in (
        ("synth", "Write a synthetic labeled corpus"),
        ("pretrain-embeddings", "Train skip-gram token embeddings"),
        ("pretrain-nids", "Train the black-box NIDS models"),
        ("train", "Run pretraining and adversarial training"),
    ):
        sub = verbs.add_parser(name, help=help_text)
        _add_config_args(sub)
        if name == "train":
            sub.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint in --out")

    evaluate = verbs.add_parser("evaluate", help="Re-measure a finished run on a fresh batch")
    evaluate.add_argument("run_dir", type=Path)
    evaluate.add_argument("--checkpoint", choices=("final", "best"), default="final")
    evaluate.add_argument("--count", type=int, default=None)
    evaluate.add_argument("--seed", type=int, default=None)

    report = verbs.add_parser("report", help="Plots and summary from run metric CSVs")
    report.add_argument("run_dirs", type=Path, nargs="+")
    report.add_argument("--out", type=Path, default=None)
    return parser


def _resolve(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    return RunConfig.from_config(resolve_config(file_values, parse_overrides(args.overrides)))


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _cmd_ingest(args) -> None:
    if args.length < 1:
        raise UsageError(f"--length must be >= 1, got {args.length}")
    if args.strip_offset < 0:
        raise UsageError(f"--strip-offset must be >= 0, got {args.strip_offset}")
    ds = ingest_pcaps(args.benign, args.malicious, args.length, args.strip_offset)
    out = ensure_dir(args.out)
    provenance = {
        "benign": [str(p) for p in args.benign],
        "malicious": [str(p) for p in args.malicious],
        "strip_offset": args.strip_offset,
    }
    write_dataset(out / "dataset.atkd", ds, provenance)


def _cmd_synth(args) -> None:
    cfg = _resolve(args)
    out = ensure_dir(args.out)
    write_dataset(out / "dataset.atkd", synthesize_corpus(synth_spec(cfg)), input_provenance(cfg))


def _cmd_pretrain_embeddings(args) -> None:
    cfg = _resolve(args)
    out = ensure_dir(args.out)
    corpus, _ = load_corpus(cfg)
    train, _ = split_dataset(corpus, cfg.train_fraction, cfg.stream("split"))
    model = train_skipgram(
        embedding_tokens(train, cfg.granularity),
        d=cfg.embed_dim,
        window=cfg.embed_window,
        epochs=cfg.embed_epochs,
        lr=cfg.embed_lr,
        seed=cfg.stream("embedding"),
        granularity=cfg.granularity,
    )
    save_embedding(out / "embedding.atkg", model.embedding())
    _write_json(out / "embedding.json", {"config": cfg.values, "loss_history": model.loss_history})


def _cmd_pretrain_nids(args) -> None:
    cfg = _resolve(args)
    out = ensure_dir(args.out)
    corpus, _ = load_corpus(cfg)
    train, test = split_dataset(corpus, cfg.train_fraction, cfg.stream("split"))
    summary = {}
    for kind in cfg.nids_eval_kinds:
        model = train_nids(kind, train, nids_seed(cfg, kind), test, cfg.nids_extractor)
        save_nids(model, out / f"nids_{kind.value}.joblib")
        summary[kind.value] = model.metrics
    _write_json(out / "nids.json", {"config": cfg.values, "metrics": summary})


def _cmd_train(args) -> None:
    cfg = _resolve(args)
    run_experiment(cfg, args.out, resume=args.resume)


def _cmd_evaluate(args) -> None:
    if args.count is not None and args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    evaluate_run(args.run_dir, args.checkpoint, args.count, args.seed)


def _cmd_report(args) -> None:
    build_report(args.run_dirs, args.out)


_COMMANDS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "pretrain-embeddings": _cmd_pretrain_embeddings,
    "pretrain-nids": _cmd_pretrain_nids,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def failing_module(exc: BaseException) -> str:
    """Name of the innermost package module in the traceback of ``exc``."""
    package_dir = Path(__file__).resolve().parent
    name = "unknown"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename).resolve()
        if path.parent == package_dir:
            name = path.stem
    return name


def _log_dir(args) -> Path:
    if getattr(args, "out", None) is not None:
        return args.out
    if args.verb == "evaluate":
        return args.run_dir
    return args.run_dirs[0]


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(str(e))
        return EXIT_USAGE

    try:
        setup_app_logging(_log_dir(args), verbose=args.verbose)
    except OSError as e:
        sys.stderr.write(f"trafficgan: cannot set up logging: {e}\n")
        return EXIT_RUNTIME

    try:
        _COMMANDS[args.verb](args)
    except (UsageError, ConfigError) as e:
        logger.error("Invalid invocation of %s: %s", args.verb, e)
        sys.stderr.write(f"trafficgan {args.verb}: {e}\n{parser.format_usage()}")
        return EXIT_USAGE
    except Exception as e:
        module = failing_module(e)
        logger.exception("%s failed in module %s", args.verb, module)
        sys.stderr.write(f"trafficgan {args.verb}: failed in module {module}: {type(e).__name__}: {e}\n")
        return EXIT_RUNTIME
    logger.info("%s finished", args.verb)
    return EXIT_OK
