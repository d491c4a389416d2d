"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 partial
coverage (predictions do not cover the whole split; ``--allow-partial``
turns this into a warning).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import harness
from .dataset import (
    PredictionLoad,
    load_corpus,
    load_predictions,
    save_corpus,
    save_predictions,
    split_sizes,
)
from .exceptions import (
    JoinTooSmallError,
    MalformedRecordError,
    ManeuverEvalError,
    MissingActionsError,
    MissingTracesError,
    ProviderUnavailableError,
    SchemaViolationError,
    WrongExampleCountError,
)
from .mms import MultiManeuverScorer
from .prompts import PromptMode

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_PARTIAL = 3

log = logging.getLogger("maneuver_eval")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    pass


def _ext(fmt: str) -> str:
    return "csv" if fmt == "csv" else "md"


def _write(out: str | None, name: str, text: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    target = Path(out)
    target.mkdir(parents=True, exist_ok=True)
    (target / name).write_text(text, encoding="utf-8")


def _require(args, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def _load(args):
    corpus = load_corpus(args.corpus)
    preds = None
    if getattr(args, "predictions", None):
        loads = [load_predictions(p, corpus) for p in args.predictions]
        records = [r for ld in loads for r in ld.records]
        rejections = [r for ld in loads for r in ld.rejections]
        keys = [r.key for r in records]
        if len(keys) != len(set(keys)):
            raise MalformedRecordError("duplicate records across prediction files", 0)
        preds = PredictionLoad(tuple(sorted(records, key=lambda r: r.key)), tuple(rejections))
    return corpus, preds


def _score_report(args):
    _require(args, "corpus", "predictions")
    corpus, preds = _load(args)
    scorer = MultiManeuverScorer(checkpoint_policy=args.checkpoint_policy)
    report = harness.score_predictions(corpus, preds, args.split, scorer, args.workers)
    return report, corpus, preds


def _coverage_exit(args, report) -> int:
    if report.complete:
        return EXIT_OK
    msg = (
        f"predictions cover the split only partially "
        f"({len(report.rejections)} rejections over {report.split_size} scenarios)"
    )
    if args.allow_partial:
        log.warning(msg)
        return EXIT_OK
    log.error(msg)
    return EXIT_PARTIAL


def cmd_validate(args) -> int:
    _require(args, "corpus")
    corpus, preds = _load(args)
    sizes = split_sizes(corpus)
    lines = [f"corpus: {len(corpus)} scenarios (" + ", ".join(f"{k} {v}" for k, v in sizes.items()) + ")"]
    if preds is not None:
        lines.append(f"predictions: {len(preds.records)} records, {len(preds.rejections)} rejected")
        for r in preds.rejections:
            lines.append(f"  rejected line {r.line}: {r.scenario_id}: {r.reason}")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_VALIDATION if preds is not None and preds.rejections else EXIT_OK


def cmd_score(args) -> int:
    report, _, _ = _score_report(args)
    ext = _ext(args.format)
    _write(args.out, f"scores.{ext}", harness.format_scores(report, args.format))
    if args.out is not None:
        _write(args.out, "scenario_scores.csv", harness.format_details(report))
        _write(args.out, "rejections.csv", harness.format_rejections(report.rejections))
    return _coverage_exit(args, report)


def _provider(args):
    if args.mock_embeddings:
        return harness.make_provider(mock=True)
    return harness.make_provider(args.embedding_endpoint)


def cmd_coherence(args) -> int:
    _require(args, "corpus")
    corpus, preds = _load(args)
    provider = _provider(args)
    if preds is None:
        res = harness.coherence_for_corpus(corpus, provider, split=args.split, workers=args.workers)
        results = [("reference", "traces", res)]
    else:
        results = harness.coherence_for_predictions(
            corpus, preds.records, provider, split=args.split, workers=args.workers
        )
    _write(args.out, f"coherence.{_ext(args.format)}", harness.format_coherence(results, args.format))
    return EXIT_OK


def cmd_rollout(args) -> int:
    _require(args, "corpus", "predictions", "out")
    corpus, preds = _load(args)
    records, rejected = harness.rollout_predictions(corpus, preds.records, args.workers)
    for r in rejected:
        log.warning("skipped %s/%s: %s", r.model_id, r.scenario_id, r.reason)
    save_predictions(records, args.out)
    return EXIT_OK


def cmd_augment(args) -> int:
    _require(args, "corpus")
    corpus = load_corpus(args.corpus)
    updated = harness.augment_corpus(corpus, args.workers)
    save_corpus(updated, args.out or args.corpus)
    for sc in updated:
        for f in sc.flags:
            log.warning("%s: %s", sc.id, f)
    return EXIT_OK


def cmd_prompt(args) -> int:
    _require(args, "corpus", "out")
    corpus = load_corpus(args.corpus)
    mode = PromptMode(args.mode)
    ids = [i for i in (args.examples or "").split(",") if i]
    prompts = harness.render_prompts(corpus, mode, ids, args.split, args.media_kind)
    for sid, text in prompts.items():
        _write(args.out, f"{sid}.{mode.value}.txt", text)
    return EXIT_OK


def cmd_correlate(args) -> int:
    _require(args, "external_scores")
    report, _, _ = _score_report(args)
    results = harness.correlate(report, harness.read_external_scores(args.external_scores))
    _write(args.out, f"correlation.{_ext(args.format)}", harness.format_correlation(results, args.format))
    if args.out is not None:
        _write(args.out, "scatter.csv", harness.format_scatter(results))
    return EXIT_OK


def cmd_report(args) -> int:
    report, corpus, preds = _score_report(args)
    fmt = args.format
    parts = [harness.format_scores(report, fmt)]
    traced = [r for r in preds.records if r.trace is not None]
    if traced and (args.mock_embeddings or args.embedding_endpoint):
        results = harness.coherence_for_predictions(
            corpus, traced, _provider(args), split=args.split, workers=args.workers
        )
        parts.append(harness.format_coherence(results, fmt))
    parts.append(harness.format_rejections(report.rejections, fmt))
    _write(args.out, f"report.{_ext(fmt)}", "\n".join(parts))
    return _coverage_exit(args, report)


def cmd_synth(args) -> int:
    _require(args, "out")
    from .synthetic import fixture_corpus

    save_corpus(fixture_corpus(seed=args.seed), args.out)
    return EXIT_OK


COMMANDS = {
    "validate": (cmd_validate, "check corpus and prediction files against their schemas"),
    "score": (cmd_score, "multi-maneuver score and L2 per scenario type"),
    "coherence": (cmd_coherence, "semantic coherence of reasoning traces and trajectories"),
    "rollout": (cmd_rollout, "turn predicted driving actions into trajectories"),
    "augment": (cmd_augment, "add wrong-speed references to every scenario"),
    "prompt": (cmd_prompt, "render one prompt file per scenario"),
    "correlate": (cmd_correlate, "correlate MMS and L2 with external per-scenario scores"),
    "report": (cmd_report, "score and coherence tables in one file"),
    "synth": (cmd_synth, "write the synthetic fixture corpus"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--corpus", help="scenario file or directory")
    common.add_argument("--predictions", action="append", help="prediction JSONL file (repeatable)")
    common.add_argument("--split", default="all", choices=("all", "train", "test", "val"))
    common.add_argument("--out", help="output directory (file for rollout)")
    common.add_argument("--format", default="markdown", choices=("csv", "markdown"))
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument(
        "--checkpoint-policy", default="checkpoints", choices=("checkpoints", "per-waypoint")
    )
    common.add_argument("--embedding-endpoint", help="http(s)://... or cmd:<command>")
    common.add_argument("--mock-embeddings", action="store_true")
    common.add_argument("--allow-partial", action="store_true", help="partial coverage exits 0")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="maneuver-eval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "prompt":
            p.add_argument("--mode", required=True, choices=[m.value for m in PromptMode])
            p.add_argument("--examples", help="comma-separated few-shot example scenario ids")
            p.add_argument("--media-kind", default="image", choices=("image", "video"))
        if name == "correlate":
            p.add_argument("--external-scores", help="CSV of scenario_id,score")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )
    if args.workers < 1:
        parser.error("--workers must be at least 1")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (WrongExampleCountError, ProviderUnavailableError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (SchemaViolationError, MalformedRecordError) as exc:
        where = getattr(exc, "path", "") or getattr(exc, "line", "")
        log.error("validation failed%s: %s", f" at {where}" if where else "", exc)
        return EXIT_VALIDATION
    except (MissingTracesError, MissingActionsError, JoinTooSmallError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except (ManeuverEvalError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
