"""Scenario corpus and prediction file I/O.

Scenarios are stored one per JSON file with an explicit ``schema_version``;
predictions are JSON lines. Both formats are described by the JSON Schema
documents under ``data/schemas``. Everything that leaves a loader has passed
schema validation and trajectory validation.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import jsonschema

from .coherence import ReasoningTrace
from .exceptions import (
    DuplicateIdError,
    MalformedRecordError,
    ManeuverEvalError,
    SchemaViolationError,
    UnknownScenarioTypeError,
)
from .mms import Reference, ReferenceCategory, ReferenceSet
from .prompts import ActionFields, PromptMode, parse_completion
from .trajectory import Trajectory, validate_trajectory

SCHEMA_VERSION = "1.0"
SUPPORTED_MAJOR = 1
SPLITS = ("train", "test", "val")
FULL_SPLIT_SIZES = {"train": 500, "test": 400, "val": 100}

INSTRUCTION_FAMILIES = (
    "drive straight on",
    "turn right",
    "turn left",
    "use right lane",
    "use left lane",
    "overtake",
)


class ScenarioType(enum.Enum):
    SPECIFICALLY_SELECTED = "specifically_selected"
    NIGHTTIME = "nighttime"
    SNOW_WINTRY_MIX = "snow_wintry_mix"
    HEAVY_RAIN = "heavy_rain"
    CONSTRUCTION_ZONE = "construction_zone"
    OVERTAKE_LANE_CHANGE = "overtake_lane_change"
    INTERSECTION = "intersection"


def instruction_family(instruction: str) -> str | None:
    """Known instruction family of ``instruction``, or None for free-form text."""
    text = " ".join(instruction.casefold().split())
    for fam in INSTRUCTION_FAMILIES:
        if text == fam or text.startswith(fam + " "):
            return fam
    return None


@lru_cache(maxsize=None)
def fixture_corpus_dir() -> Path:
    """Directory of the synthetic fixture corpus shipped with the package."""
    return Path(str(resources.files(__package__).joinpath("data/fixture_corpus")))


def load_schema(name: str) -> dict:
    """Bundled JSON Schema, ``scenario`` or ``prediction``."""
    text = resources.files(__package__).joinpath(f"data/schemas/{name}.schema.json").read_text("utf-8")
    return json.loads(text)


@lru_cache(maxsize=None)
def _validator(name: str) -> jsonschema.protocols.Validator:
    schema = load_schema(name)
    cls = jsonschema.validators.validator_for(schema)
    return cls(schema)


def _schema_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    id: str
    split: str
    scenario_type: ScenarioType
    instruction: str
    past: Trajectory
    references: ReferenceSet
    traces: tuple[ReasoningTrace, ...] = ()
    media: Mapping = field(default_factory=dict)
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        validate_trajectory(self.past, "past")
        if self.references.expert is None:
            raise SchemaViolationError(
                f"scenario {self.id} has no expert_like reference", path="references"
            )

    @property
    def expert(self) -> Trajectory:
        return self.references.expert

    @property
    def media_locator(self) -> str:
        return self.media.get("front_image") or self.media.get("front_video") or "$IMAGE_PATH$"

    @property
    def instruction_family(self) -> str | None:
        return instruction_family(self.instruction)

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "split": self.split,
            "scenario_type": self.scenario_type.value,
            "instruction": self.instruction,
            "past": self.past.to_list(),
            "references": [
                {"category": r.category.value, "source": r.source, "trajectory": r.trajectory.to_list()}
                for r in self.references
            ],
        }
        if self.traces:
            d["traces"] = [t.to_dict() for t in self.traces]
        if self.media:
            d["media"] = dict(self.media)
        if self.flags:
            d["flags"] = list(self.flags)
        return d


def _check_version(version: str, source: str) -> None:
    try:
        major = int(str(version).split(".")[0])
    except ValueError:
        major = -1
    if major != SUPPORTED_MAJOR:
        raise SchemaViolationError(
            f"unsupported schema_version {version!r}", path="schema_version", source=source
        )


def scenario_from_dict(d: Mapping, source: str = "") -> Scenario:
    """Validate a decoded scenario document and build the Scenario."""
    if not isinstance(d, Mapping):
        raise SchemaViolationError("scenario document must be an object", source=source)
    if "schema_version" in d:
        _check_version(d["schema_version"], source)
    st = d.get("scenario_type")
    if isinstance(st, str) and st not in {t.value for t in ScenarioType}:
        raise UnknownScenarioTypeError(f"unknown scenario type {st!r}", path="scenario_type", source=source)
    errors = sorted(_validator("scenario").iter_errors(d), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = _schema_path(err)
        if err.validator == "required":
            # name the missing property itself
            missing = [p for p in err.validator_value if p not in err.instance]
            path = "/".join(filter(None, [path, missing[0] if missing else ""]))
        raise SchemaViolationError(err.message, path=path, source=source)

    def traj(value, kind: str, path: str) -> Trajectory:
        try:
            t = Trajectory.past(value) if kind == "past" else Trajectory.future(value)
            return validate_trajectory(t, kind)
        except ManeuverEvalError as exc:
            raise SchemaViolationError(str(exc), path=path, source=source) from exc

    past = traj(d["past"], "past", "past")
    refs = [
        Reference(
            ReferenceCategory(r["category"]),
            traj(r["trajectory"], "future", f"references/{i}/trajectory"),
            r.get("source", "annotated"),
        )
        for i, r in enumerate(d["references"])
    ]
    if not any(r.category is ReferenceCategory.EXPERT_LIKE for r in refs):
        raise SchemaViolationError(
            "references lack an expert_like trajectory", path="references", source=source
        )
    try:
        ref_set = ReferenceSet(tuple(refs))
    except SchemaViolationError as exc:
        raise SchemaViolationError(str(exc), path=exc.path, source=source) from exc
    return Scenario(
        id=d["id"],
        split=d["split"],
        scenario_type=ScenarioType(d["scenario_type"]),
        instruction=d["instruction"],
        past=past,
        references=ref_set,
        traces=tuple(ReasoningTrace.from_dict(t) for t in d.get("traces", ())),
        media=dict(d.get("media", {})),
        flags=tuple(d.get("flags", ())),
    )


class ScenarioConverter(Protocol):
    """Maps a foreign scenario document onto this package's format."""

    def __call__(self, raw: Mapping) -> Mapping: ...


def _scenario_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(path)
    return sorted(p for p in path.rglob("*.json") if p.is_file())


def load_scenario(path: str | Path, converter: ScenarioConverter | None = None) -> Scenario:
    path = Path(path)
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolationError(f"invalid JSON: {exc}", source=str(path)) from exc
    if converter is not None:
        raw = converter(raw)
    return scenario_from_dict(raw, source=str(path))


def load_corpus(path: str | Path, converter: ScenarioConverter | None = None) -> list[Scenario]:
    """Load every ``*.json`` scenario under ``path``, sorted by id."""
    scenarios: dict[str, Scenario] = {}
    origin: dict[str, Path] = {}
    for f in _scenario_files(Path(path)):
        sc = load_scenario(f, converter)
        if sc.id in scenarios:
            raise DuplicateIdError(f"scenario id {sc.id!r} appears in {origin[sc.id]} and {f}")
        scenarios[sc.id] = sc
        origin[sc.id] = f
    return [scenarios[k] for k in sorted(scenarios)]


def dump_scenario(sc: Scenario) -> str:
    """Canonical serialization: sorted keys, two-space indent, trailing newline."""
    return json.dumps(sc.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def save_corpus(scenarios: Iterable[Scenario], path: str | Path) -> list[Path]:
    """Write one ``<id>.json`` file per scenario into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sc in sorted(scenarios, key=lambda s: s.id):
        target = out / f"{sc.id}.json"
        target.write_text(dump_scenario(sc), encoding="utf-8")
        written.append(target)
    return written


def select_split(corpus: Sequence[Scenario], split: str | None) -> list[Scenario]:
    if split in (None, "all"):
        return list(corpus)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [s for s in corpus if s.split == split]


def split_sizes(corpus: Sequence[Scenario]) -> dict[str, int]:
    return {s: sum(sc.split == s for sc in corpus) for s in SPLITS}


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRecord:
    scenario_id: str
    model_id: str
    inference_mode: PromptMode
    raw_completion: str | None = None
    trajectory: Trajectory | None = None
    actions: ActionFields | None = None
    trace: ReasoningTrace | None = None
    diagnostics: tuple[str, ...] = ()

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.model_id, self.inference_mode.value, self.scenario_id)

    def to_dict(self) -> dict:
        d: dict = {
            "scenario_id": self.scenario_id,
            "model_id": self.model_id,
            "inference_mode": self.inference_mode.value,
        }
        if self.raw_completion is not None:
            d["raw_completion"] = self.raw_completion
        if self.trajectory is not None:
            d["trajectory"] = self.trajectory.to_list()
        if self.actions is not None:
            d["actions"] = self.actions.to_dict()
        if self.trace is not None:
            d["trace"] = self.trace.to_dict()
        if self.diagnostics:
            d["diagnostics"] = list(self.diagnostics)
        return d


@dataclass(frozen=True)
class Rejection:
    """A prediction line or scenario that could not be used, with the reason."""

    scenario_id: str
    reason: str
    line: int | None = None
    model_id: str = ""


@dataclass(frozen=True)
class PredictionLoad:
    records: tuple[PredictionRecord, ...]
    rejections: tuple[Rejection, ...]


def record_from_dict(d: Mapping, line: int) -> PredictionRecord:
    """Build a record, parsing ``raw_completion`` when no trajectory is given.

    Raises:
        MalformedRecordError: schema violation or invalid trajectory.
        ManeuverEvalError: the completion could not be parsed.
    """
    errors = list(_validator("prediction").iter_errors(d))
    if errors:
        err = errors[0]
        where = _schema_path(err) or "record"
        raise MalformedRecordError(f"{where}: {err.message}", line)
    if "schema_version" in d:
        try:
            _check_version(d["schema_version"], "")
        except SchemaViolationError as exc:
            raise MalformedRecordError(str(exc), line) from exc
    traj = actions = trace = None
    diagnostics = tuple(d.get("diagnostics", ()))
    if "trajectory" in d:
        try:
            traj = validate_trajectory(Trajectory.future(d["trajectory"]), "future")
        except ManeuverEvalError as exc:
            raise MalformedRecordError(f"trajectory: {exc}", line) from exc
    if "actions" in d:
        actions = ActionFields.from_dict(d["actions"])
    if "trace" in d:
        trace = ReasoningTrace.from_dict(d["trace"])
    raw = d.get("raw_completion")
    if raw is not None and (traj is None or actions is None):
        try:
            parsed = parse_completion(raw)
        except ManeuverEvalError:
            if traj is None:
                raise
            parsed = None
        if parsed is not None:
            traj = traj or parsed.trajectory
            actions = actions or parsed.actions
            trace = trace or parsed.trace
            diagnostics = diagnostics + tuple(
                x for x in parsed.diagnostics if x not in diagnostics
            )
    return PredictionRecord(
        scenario_id=d["scenario_id"],
        model_id=d["model_id"],
        inference_mode=PromptMode(d["inference_mode"]),
        raw_completion=raw,
        trajectory=traj,
        actions=actions,
        trace=trace,
        diagnostics=diagnostics,
    )


def load_predictions(path: str | Path, corpus: Sequence[Scenario]) -> PredictionLoad:
    """Read a JSON-lines prediction file against a loaded corpus.

    Unknown scenario ids and unparseable completions go to the rejection
    report. Structurally broken lines raise ``MalformedRecordError``.
    """
    known = {s.id for s in corpus}
    records: dict[tuple, PredictionRecord] = {}
    rejections: list[Rejection] = []
    text = Path(path).read_text("utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"invalid JSON: {exc.msg}", lineno) from exc
        if not isinstance(d, dict):
            raise MalformedRecordError("record must be a JSON object", lineno)
        sid = d.get("scenario_id", "")
        if isinstance(sid, str) and sid and sid not in known:
            rejections.append(Rejection(sid, "unknown scenario id", lineno, str(d.get("model_id", ""))))
            continue
        try:
            rec = record_from_dict(d, lineno)
        except MalformedRecordError:
            raise
        except ManeuverEvalError as exc:
            rejections.append(
                Rejection(sid, f"unparseable completion: {exc}", lineno, str(d.get("model_id", "")))
            )
            continue
        if rec.key in records:
            raise MalformedRecordError(f"duplicate record for {rec.key}", lineno)
        records[rec.key] = rec
    ordered = tuple(records[k] for k in sorted(records))
    return PredictionLoad(ordered, tuple(rejections))


def dump_predictions(records: Iterable[PredictionRecord]) -> str:
    lines = [
        json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False)
        for r in sorted(records, key=lambda r: r.key)
    ]
    return "".join(line + "\n" for line in lines)


def save_predictions(records: Iterable[PredictionRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_predictions(records), encoding="utf-8")
    return path
