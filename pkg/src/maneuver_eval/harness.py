"""Batch evaluation: scoring, coherence, rollout, augmentation, prompts and
correlation over a corpus, with reports in fixed table layouts.

Work is fanned out per scenario over a bounded thread pool and merged in
sorted order, so output bytes never depend on the degree of parallelism.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, TypeVar

from .actions import classify_actions, rollout
from .augment import wrong_speed_references
from .coherence import (
    CentroidSet,
    CoherenceResult,
    EmbeddingProvider,
    MockEmbeddingProvider,
    build_centroids,
    coherence_score,
    provider_from_endpoint,
)
from .dataset import (
    PredictionLoad,
    PredictionRecord,
    Rejection,
    Scenario,
    ScenarioType,
    select_split,
)
from .exceptions import (
    JoinTooSmallError,
    ManeuverEvalError,
    MissingActionsError,
    MissingTracesError,
    UnknownCommandError,
)
from .mms import (
    LinearFit,
    MmsResult,
    MultiManeuverScorer,
    ReferenceCategory,
    pearson_and_fit,
)
from .prompts import ActionFields, FewShotExample, PromptMode, render
from .trajectory import L2Error, l2_error

T = TypeVar("T")
R = TypeVar("R")

# score table columns, in report order
TYPE_COLUMNS: tuple[tuple[str, ScenarioType], ...] = (
    ("selected", ScenarioType.SPECIFICALLY_SELECTED),
    ("heavy rain", ScenarioType.HEAVY_RAIN),
    ("construction", ScenarioType.CONSTRUCTION_ZONE),
    ("overtake", ScenarioType.OVERTAKE_LANE_CHANGE),
    ("intersection", ScenarioType.INTERSECTION),
    ("nighttime", ScenarioType.NIGHTTIME),
    ("snow", ScenarioType.SNOW_WINTRY_MIX),
)
SCORE_COLUMNS = ("avg", *(name for name, _ in TYPE_COLUMNS), "L2")
COHERENCE_COLUMNS = ("avg", "accel 0-3s", "accel 3-5s", "steer 0-3s", "steer 3-5s")
MIN_CORRELATION_PAIRS = 3


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """``map`` over a bounded thread pool; results keep input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _fmt(x: float, digits: int = 2) -> str:
    return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


def _table(header: Sequence[str], rows: Iterable[Sequence[str]], fmt: str) -> str:
    rows = list(rows)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioScore:
    scenario_id: str
    scenario_type: ScenarioType
    model_id: str
    inference_mode: str
    mms: MmsResult
    l2: L2Error


@dataclass(frozen=True)
class ScoreRow:
    model_id: str
    inference_mode: str
    avg: float
    per_type: Mapping[str, float]
    l2: float
    n_scored: int
    n_rejected: int


@dataclass(frozen=True)
class EvaluationReport:
    """Per (model, mode) rows, scenario detail and rejections.

    Every scenario of the evaluated split appears for each (model, mode)
    group either in ``details`` or in ``rejections``.
    """

    rows: tuple[ScoreRow, ...]
    details: tuple[ScenarioScore, ...]
    rejections: tuple[Rejection, ...]
    split_size: int
    coherence: tuple[tuple[str, str, CoherenceResult], ...] = ()

    @property
    def complete(self) -> bool:
        return all(r.n_rejected == 0 for r in self.rows) and bool(self.rows)

    def row(self, model_id: str, mode: str) -> ScoreRow:
        for r in self.rows:
            if r.model_id == model_id and r.inference_mode == mode:
                return r
        raise KeyError((model_id, mode))


def _groups(records: Iterable[PredictionRecord]) -> dict[tuple[str, str], dict[str, PredictionRecord]]:
    out: dict[tuple[str, str], dict[str, PredictionRecord]] = {}
    for r in records:
        out.setdefault((r.model_id, r.inference_mode.value), {})[r.scenario_id] = r
    return dict(sorted(out.items()))


def score_predictions(
    corpus: Sequence[Scenario],
    predictions: PredictionLoad,
    split: str | None = None,
    scorer: MultiManeuverScorer | None = None,
    workers: int = 1,
) -> EvaluationReport:
    """MMS and L2 for every prediction of every (model, mode) group."""
    scorer = scorer or MultiManeuverScorer()
    scenarios = select_split(corpus, split)
    groups = _groups(predictions.records)

    tasks: list[tuple[str, str, Scenario, PredictionRecord]] = []
    rejections: list[Rejection] = list(predictions.rejections)
    rejected_keys: dict[tuple[str, str], int] = {}
    for (model, mode), recs in groups.items():
        for sc in scenarios:
            rec = recs.get(sc.id)
            reason = None
            if rec is None:
                reason = "no prediction"
            elif rec.trajectory is None:
                reason = "prediction has no trajectory"
            if reason:
                rejections.append(Rejection(sc.id, f"{mode}: {reason}", None, model))
                rejected_keys[(model, mode)] = rejected_keys.get((model, mode), 0) + 1
            else:
                tasks.append((model, mode, sc, rec))

    def run(task) -> ScenarioScore:
        model, mode, sc, rec = task
        res = scorer.evaluate(rec.trajectory, sc.past, sc.references)
        return ScenarioScore(sc.id, sc.scenario_type, model, mode, res, l2_error(rec.trajectory, sc.expert))

    details = parallel_map(run, tasks, workers)
    details.sort(key=lambda d: (d.model_id, d.inference_mode, d.scenario_id))

    rows = []
    for model, mode in groups:
        mine = [d for d in details if d.model_id == model and d.inference_mode == mode]
        per_type = {}
        for name, st in TYPE_COLUMNS:
            vals = [d.mms.score for d in mine if d.scenario_type is st]
            per_type[name] = sum(vals) / len(vals) if vals else float("nan")
        n = len(mine)
        rows.append(
            ScoreRow(
                model,
                mode,
                sum(d.mms.score for d in mine) / n if n else float("nan"),
                per_type,
                sum(d.l2.mean for d in mine) / n if n else float("nan"),
                n,
                rejected_keys.get((model, mode), 0),
            )
        )
    rejections.sort(key=lambda r: (r.model_id, r.scenario_id, r.reason, r.line or 0))
    return EvaluationReport(tuple(rows), tuple(details), tuple(rejections), len(scenarios))


def format_scores(report: EvaluationReport, fmt: str = "markdown") -> str:
    header = ("model", "mode", *SCORE_COLUMNS, "scored", "rejected")
    rows = [
        (
            r.model_id,
            r.inference_mode,
            _fmt(r.avg),
            *(_fmt(r.per_type[name]) for name, _ in TYPE_COLUMNS),
            _fmt(r.l2),
            str(r.n_scored),
            str(r.n_rejected),
        )
        for r in report.rows
    ]
    return _table(header, rows, fmt)


def format_details(report: EvaluationReport) -> str:
    header = (
        "model", "mode", "scenario_id", "scenario_type", "mms", "case", "matched",
        "best_reference", "similarity", "jerk_flag", "tortuosity_flag", "l2_mean", "l2_final",
    )
    rows = [
        (
            d.model_id,
            d.inference_mode,
            d.scenario_id,
            d.scenario_type.value,
            _fmt(d.mms.score, 4),
            d.mms.case_applied.value,
            d.mms.matched_category.value if d.mms.matched_category else "",
            d.mms.best_category.value if d.mms.best_category else "",
            _fmt(d.mms.similarity_s, 4),
            str(int(d.mms.comfort.jerk_flag)),
            str(int(d.mms.comfort.tortuosity_flag)),
            _fmt(d.l2.mean, 4),
            _fmt(d.l2.final, 4),
        )
        for d in report.details
    ]
    return _table(header, rows, "csv")


def format_rejections(rejections: Sequence[Rejection], fmt: str = "csv") -> str:
    rows = [
        (r.model_id, r.scenario_id, "" if r.line is None else str(r.line), r.reason)
        for r in rejections
    ]
    return _table(("model", "scenario_id", "line", "reason"), rows, fmt)


# ---------------------------------------------------------------------------
# coherence
# ---------------------------------------------------------------------------


def make_provider(endpoint: str | None = None, mock: bool = False) -> EmbeddingProvider:
    if mock:
        return MockEmbeddingProvider()
    return provider_from_endpoint(endpoint)


def coherence_for_predictions(
    corpus: Sequence[Scenario],
    records: Sequence[PredictionRecord],
    provider: EmbeddingProvider,
    centroids: Mapping[str, CentroidSet] | None = None,
    split: str | None = None,
    workers: int = 4,
) -> list[tuple[str, str, CoherenceResult]]:
    """Coherence per (model, mode) group between record traces and trajectories."""
    scenarios = {s.id: s for s in select_split(corpus, split)}
    with_traces = [r for r in records if r.trace is not None and r.scenario_id in scenarios]
    if not with_traces:
        raise MissingTracesError("no prediction carries a reasoning trace")
    centroids = centroids or build_centroids(provider, max_in_flight=workers)
    out = []
    for (model, mode), recs in _groups(with_traces).items():
        usable = [r for r in recs.values() if r.trajectory is not None]
        result = coherence_score(
            [r.trace for r in usable],
            [r.trajectory for r in usable],
            centroids,
            provider,
            scenario_ids=[r.scenario_id for r in usable],
            max_in_flight=workers,
        )
        missing = tuple(
            (r.scenario_id, "prediction has no trajectory")
            for r in recs.values()
            if r.trajectory is None
        )
        if missing:
            result = replace(result, excluded=tuple(sorted(result.excluded + missing)))
        out.append((model, mode, result))
    return out


def coherence_for_corpus(
    corpus: Sequence[Scenario],
    provider: EmbeddingProvider,
    centroids: Mapping[str, CentroidSet] | None = None,
    split: str | None = None,
    workers: int = 4,
) -> CoherenceResult:
    """Coherence of the corpus's own traces against its expert trajectories."""
    scenarios = [s for s in select_split(corpus, split) if s.traces]
    if not scenarios:
        raise MissingTracesError("no scenario carries a reasoning trace")
    centroids = centroids or build_centroids(provider, max_in_flight=workers)
    traces, plans, ids = [], [], []
    for s in scenarios:
        for k, tr in enumerate(s.traces):
            traces.append(tr)
            plans.append(s.expert)
            ids.append(s.id if len(s.traces) == 1 else f"{s.id}#{k}")
    return coherence_score(traces, plans, centroids, provider, ids, max_in_flight=workers)


def format_coherence(results: Sequence[tuple[str, str, CoherenceResult]], fmt: str = "markdown") -> str:
    header = ("model", "mode", *COHERENCE_COLUMNS, "scored", "excluded")
    rows = []
    for model, mode, res in results:
        cols = res.columns()
        rows.append(
            (
                model,
                mode,
                *(_fmt(v) for v in cols.values()),
                str(res.n_scored),
                str(res.n_excluded),
            )
        )
    return _table(header, rows, fmt)


# ---------------------------------------------------------------------------
# kinematic rollout
# ---------------------------------------------------------------------------


def rollout_predictions(
    corpus: Sequence[Scenario],
    records: Sequence[PredictionRecord],
    workers: int = 1,
) -> tuple[list[PredictionRecord], list[Rejection]]:
    """Replace each record's trajectory by the bicycle rollout of its actions.

    Records without usable actions are returned as rejections.
    """
    by_id = {s.id: s for s in corpus}
    usable, rejected = [], []
    for r in records:
        if r.actions is None:
            rejected.append(Rejection(r.scenario_id, "record has no action fields", None, r.model_id))
            continue
        try:
            acts = r.actions.actions
        except UnknownCommandError as exc:
            rejected.append(Rejection(r.scenario_id, str(exc), None, r.model_id))
            continue
        usable.append((r, acts))
    if not usable:
        raise MissingActionsError("no prediction carries parsed action fields")

    def run(item) -> PredictionRecord:
        rec, acts = item
        traj = rollout(by_id[rec.scenario_id].past, acts)
        return replace(rec, trajectory=traj)

    out = parallel_map(run, usable, workers)
    out.sort(key=lambda r: r.key)
    return out, rejected


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

_AUGMENT_FLAG = "augment_failed"


def augment_scenario(sc: Scenario, factors: Sequence[float] = (0.8, 1.2)) -> Scenario:
    """Regenerate the wrong-speed references from the expert.

    Existing wrong-speed references are replaced, so repeated runs converge
    to the same scenario. A failure leaves the references untouched and adds
    an ``augment_failed`` flag.
    """
    flags = tuple(f for f in sc.flags if not f.startswith(_AUGMENT_FLAG))
    try:
        new = wrong_speed_references(sc.expert, factors)
    except ManeuverEvalError as exc:
        return replace(sc, flags=flags + (f"{_AUGMENT_FLAG}: {type(exc).__name__}: {exc}",))
    refs = sc.references.replace_category(ReferenceCategory.WRONG_SPEED, new)
    return replace(sc, references=refs, flags=flags)


def augment_corpus(corpus: Sequence[Scenario], workers: int = 1) -> list[Scenario]:
    out = parallel_map(augment_scenario, list(corpus), workers)
    return sorted(out, key=lambda s: s.id)


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------


def example_from_scenario(sc: Scenario) -> FewShotExample:
    """Few-shot example built from a scenario's expert and first trace."""
    acts = classify_actions(sc.expert)
    sa = sc.traces[0].situational_awareness if sc.traces else ""
    reasoning = ActionFields.from_actions(acts, situational_awareness=sa)
    return FewShotExample(sc.id, sc.media_locator, sc.past, sc.instruction, reasoning, sc.expert)


def render_prompts(
    corpus: Sequence[Scenario],
    mode: PromptMode,
    example_ids: Sequence[str] = (),
    split: str | None = None,
    media_kind: str = "image",
) -> dict[str, str]:
    """Prompt text per scenario id."""
    by_id = {s.id: s for s in corpus}
    missing = [i for i in example_ids if i not in by_id]
    if missing:
        raise KeyError(f"unknown example ids: {', '.join(missing)}")
    examples = [example_from_scenario(by_id[i]) for i in example_ids]
    return {
        s.id: render(s, mode, examples, media_kind)
        for s in select_split(corpus, split)
        if s.id not in example_ids
    }


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationResult:
    model_id: str
    inference_mode: str
    mms: LinearFit
    l2: LinearFit
    scatter: tuple[tuple[str, float, float, float], ...] = field(default=())


def correlate(
    report: EvaluationReport, external: Mapping[str, float]
) -> list[CorrelationResult]:
    """Pearson r and least-squares fits of external scores on MMS and L2."""
    out = []
    for row in report.rows:
        pts = [
            (d.scenario_id, d.mms.score, d.l2.mean, float(external[d.scenario_id]))
            for d in report.details
            if d.model_id == row.model_id
            and d.inference_mode == row.inference_mode
            and d.scenario_id in external
        ]
        if len(pts) < MIN_CORRELATION_PAIRS:
            raise JoinTooSmallError(
                f"{row.model_id}/{row.inference_mode}: only {len(pts)} scored scenarios "
                f"have external scores (need {MIN_CORRELATION_PAIRS})"
            )
        out.append(
            CorrelationResult(
                row.model_id,
                row.inference_mode,
                pearson_and_fit([(m, ds) for _, m, _, ds in pts]),
                pearson_and_fit([(l2, ds) for _, _, l2, ds in pts]),
                tuple(pts),
            )
        )
    if not out:
        raise JoinTooSmallError("no scored predictions to correlate")
    return out


def format_correlation(results: Sequence[CorrelationResult], fmt: str = "csv") -> str:
    rows = []
    for c in results:
        for metric, fit in (("mms", c.mms), ("l2", c.l2)):
            rows.append(
                (c.model_id, c.inference_mode, metric, _fmt(fit.r, 6), _fmt(fit.slope, 6),
                 _fmt(fit.intercept, 6), str(fit.n))
            )
    return _table(("model", "mode", "metric", "r", "slope", "intercept", "n"), rows, fmt)


def format_scatter(results: Sequence[CorrelationResult]) -> str:
    rows = [
        (c.model_id, c.inference_mode, sid, _fmt(m, 6), _fmt(l2, 6), _fmt(ds, 6))
        for c in results
        for sid, m, l2, ds in c.scatter
    ]
    return _table(("model", "mode", "scenario_id", "mms", "l2", "external"), rows, "csv")


def read_external_scores(path: str | Path) -> dict[str, float]:
    """Two-column CSV (scenario_id, score) with a header row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        out = {}
        for row in reader:
            if row:
                out[row[0]] = float(row[1])
        return out


__all__ = [
    "COHERENCE_COLUMNS",
    "SCORE_COLUMNS",
    "TYPE_COLUMNS",
    "CorrelationResult",
    "EvaluationReport",
    "ScenarioScore",
    "ScoreRow",
    "augment_corpus",
    "augment_scenario",
    "coherence_for_corpus",
    "coherence_for_predictions",
    "correlate",
    "example_from_scenario",
    "format_coherence",
    "format_correlation",
    "format_details",
    "format_rejections",
    "format_scatter",
    "format_scores",
    "make_provider",
    "parallel_map",
    "read_external_scores",
    "render_prompts",
    "rollout_predictions",
    "score_predictions",
]
