"""Semantic coherence between reasoning traces and planned trajectories.

Each interval answer of a trace is embedded, assigned to the action class
whose centroid has the highest cosine similarity (Rocchio), and compared
with the action derived geometrically from the plan for the same interval.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
import shlex
import subprocess
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_embedding_matrix
from .actions import AccelClass, IntervalActions, SteerClass, classify
from .exceptions import (
    DimensionMismatchError,
    LengthMismatchError,
    ManeuverEvalError,
    ProviderUnavailableError,
    ZeroVectorError,
)
from .trajectory import Trajectory

ActionClass = Union[AccelClass, SteerClass]

LANGUAGES = ("en", "es", "zh")
ENDPOINT_ENV = "MANEUVER_EVAL_EMBEDDING_ENDPOINT"
MODEL_ENV = "MANEUVER_EVAL_EMBEDDING_MODEL"
MIN_PHRASES_PER_CLASS = 3

# canonical class order, used for argmax tie-breaks
CLASS_ORDER: tuple[ActionClass, ...] = (*AccelClass, *SteerClass)

# (axis, interval) cells in report order
CELLS = (
    ("acceleration", "first_3s"),
    ("acceleration", "last_2s"),
    ("steering", "first_3s"),
    ("steering", "last_2s"),
)


def class_key(c: ActionClass) -> str:
    """Phrase-file key of an action class, e.g. ``acceleration/maintain``."""
    axis = "acceleration" if isinstance(c, AccelClass) else "steering"
    return f"{axis}/{c.value}"


def class_from_key(key: str) -> ActionClass:
    axis, _, value = key.partition("/")
    if axis == "acceleration":
        return AccelClass(value)
    if axis == "steering":
        return SteerClass(value)
    raise ValueError(f"unknown action class key {key!r}")


# ---------------------------------------------------------------------------
# embeddings and providers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    norm: float = field(init=False)

    def __post_init__(self) -> None:
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise ValueError("embedding must be a non-empty finite vector")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)
        object.__setattr__(self, "norm", float(np.linalg.norm(v)))

    @property
    def dimension(self) -> int:
        return int(self.vector.size)


class EmbeddingProvider(Protocol):
    model_id: str

    def embed(self, text: str) -> Embedding: ...


class _CachingProvider:
    """Shared plumbing: input checks, per-session cache, dimension pinning."""

    model_id: str = "unknown"

    def __init__(self) -> None:
        self._cache: dict[str, Embedding] = {}
        self._lock = threading.Lock()
        self._dimension: int | None = None

    @property
    def dimension(self) -> int | None:
        return self._dimension

    def embed(self, text: str) -> Embedding:
        if not isinstance(text, str) or not text.strip():
            raise ManeuverEvalError("cannot embed empty text")
        with self._lock:
            hit = self._cache.get(text)
        if hit is not None:
            return hit
        emb = Embedding(self._compute(text))
        with self._lock:
            if self._dimension is None:
                self._dimension = emb.dimension
            elif emb.dimension != self._dimension:
                raise DimensionMismatchError(
                    f"provider returned dimension {emb.dimension}, session uses {self._dimension}"
                )
            # first result wins so repeated calls stay identical
            return self._cache.setdefault(text, emb)

    def _compute(self, text: str) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError


_TOKEN = re.compile(r"\w+", re.UNICODE)
_SPACE = re.compile(r"\s+")


def _normalize_text(text: str) -> str:
    return _SPACE.sub(" ", text.casefold()).strip()


class MockEmbeddingProvider(_CachingProvider):
    """Deterministic offline provider.

    Tokens are hashed to seeded Gaussian unit vectors and summed. Any anchor
    phrase found in the text (longest match first, non-overlapping) adds a
    heavily weighted unit direction keyed by the anchor's class, so every
    phrase of a class shares one dominant direction.

    Args:
        anchors: phrase -> class key. Defaults to the shipped phrase file.
        dim: embedding dimension.
        seed: hash salt.
        anchor_weight: weight of a class direction relative to the token part.
    """

    model_id = "mock-hash-v1"

    def __init__(
        self,
        anchors: Mapping[str, str] | None = None,
        dim: int = 64,
        seed: int = 0,
        anchor_weight: float = 4.0,
    ) -> None:
        super().__init__()
        if anchors is None:
            anchors = {p.text: p.key for p in load_phrases()}
        self.dim = int(dim)
        self.seed = int(seed)
        self.anchor_weight = float(anchor_weight)
        self._anchors = sorted(
            ((_normalize_text(k), v) for k, v in anchors.items()),
            key=lambda kv: (-len(kv[0]), kv[0]),
        )

    def _direction(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\x1f{token}".encode(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def _compute(self, text: str) -> np.ndarray:
        norm_text = _normalize_text(text)
        vec = np.zeros(self.dim)
        rest = norm_text
        for phrase, key in self._anchors:
            if phrase and phrase in rest:
                count = rest.count(phrase)
                vec += count * self.anchor_weight * self._direction(f"\x00class:{key}")
                rest = rest.replace(phrase, " ")
        tokens = _TOKEN.findall(norm_text)
        if tokens:
            tok = sum(self._direction(t) for t in tokens)
            vec += tok / max(np.linalg.norm(tok), 1e-12)
        n = np.linalg.norm(vec)
        if n == 0:
            raise ZeroVectorError(f"no embeddable content in {text!r}")
        return vec / n


def _vector_from_reply(reply: object) -> np.ndarray:
    if not isinstance(reply, dict) or "vector" not in reply:
        raise ProviderUnavailableError("provider reply lacks a 'vector' field")
    try:
        return np.asarray(reply["vector"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ProviderUnavailableError(f"provider returned a non-numeric vector: {exc}") from exc


class SubprocessEmbeddingProvider(_CachingProvider):
    """Talks JSON lines to a long-running local process.

    Each request is ``{"text": ..., "model": ...}`` on one line; the process
    answers with ``{"vector": [...]}`` on one line.
    """

    def __init__(self, command: Sequence[str] | str, model_id: str = "default") -> None:
        super().__init__()
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.model_id = model_id
        self._proc: subprocess.Popen | None = None
        self._io_lock = threading.Lock()

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    encoding="utf-8",
                    bufsize=1,
                )
            except OSError as exc:
                raise ProviderUnavailableError(f"cannot start {self.command!r}: {exc}") from exc
        return self._proc

    def _compute(self, text: str) -> np.ndarray:
        with self._io_lock:
            proc = self._ensure()
            try:
                proc.stdin.write(json.dumps({"text": text, "model": self.model_id}) + "\n")
                proc.stdin.flush()
                line = proc.stdout.readline()
            except (OSError, ValueError) as exc:
                raise ProviderUnavailableError(f"embedding process failed: {exc}") from exc
        if not line:
            raise ProviderUnavailableError("embedding process closed its output")
        try:
            return _vector_from_reply(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ProviderUnavailableError(f"malformed provider reply: {exc}") from exc

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
        self._proc = None


class HttpEmbeddingProvider(_CachingProvider):
    """POSTs ``{"text", "model"}`` JSON to an endpoint returning ``{"vector"}``."""

    def __init__(self, endpoint: str, model_id: str = "default", timeout: float = 30.0) -> None:
        super().__init__()
        self.endpoint = endpoint
        self.model_id = model_id
        self.timeout = timeout

    def _compute(self, text: str) -> np.ndarray:
        body = json.dumps({"text": text, "model": self.model_id}).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise ProviderUnavailableError(f"{self.endpoint}: {exc}") from exc
        return _vector_from_reply(reply)


def provider_from_endpoint(endpoint: str | None = None, model_id: str | None = None):
    """Build a provider from an endpoint string or the environment.

    ``http(s)://...`` selects the HTTP transport; ``cmd:<command line>``
    starts a subprocess.
    """
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
    model_id = model_id or os.environ.get(MODEL_ENV, "default")
    if not endpoint:
        raise ProviderUnavailableError(
            f"no embedding endpoint given and {ENDPOINT_ENV} is unset"
        )
    if endpoint.startswith(("http://", "https://")):
        return HttpEmbeddingProvider(endpoint, model_id)
    if endpoint.startswith("cmd:"):
        return SubprocessEmbeddingProvider(endpoint[4:], model_id)
    raise ProviderUnavailableError(f"unsupported endpoint scheme: {endpoint!r}")


# ---------------------------------------------------------------------------
# reference phrases and centroids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Phrase:
    key: str
    language: str
    text: str

    @property
    def action_class(self) -> ActionClass:
        return class_from_key(self.key)


def load_phrases(path: str | Path | None = None) -> list[Phrase]:
    """Read a tab-separated class/language/phrase file ('#' lines are comments)."""
    if path is None:
        text = resources.files(__package__).joinpath("data/action_phrases.tsv").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    reader = csv.DictReader(lines, delimiter="\t", quoting=csv.QUOTE_NONE)
    missing = {"class", "language", "phrase"} - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"phrase file lacks columns {sorted(missing)}")
    phrases = []
    for row in reader:
        class_from_key(row["class"])
        phrases.append(Phrase(row["class"], row["language"], row["phrase"].strip()))
    return phrases


@dataclass(frozen=True)
class ClassCentroid:
    action_class: ActionClass
    centroid: Embedding


def _cosines(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ZeroVectorError("cannot classify a zero vector")
    return (X / norms[:, None]) @ C.T


class RocchioClassifier(ClassifierMixin, BaseEstimator):
    """Nearest-centroid classifier under cosine similarity.

    Centroids are the mean of each class's training vectors, re-normalized
    to unit length. Ties go to the class listed first in ``class_order``.

    Args:
        class_order: tie-break order of the classes; defaults to the sorted
            labels seen in ``fit``.
    """

    def __init__(self, class_order: Sequence | None = None) -> None:
        self.class_order = class_order

    def fit(self, X, y):
        X = check_embedding_matrix(X)
        y = list(y)
        if len(y) != len(X):
            raise LengthMismatchError(f"{len(X)} vectors but {len(y)} labels")
        seen = set(y)
        order = list(self.class_order) if self.class_order is not None else sorted(seen, key=str)
        classes = [c for c in order if c in seen]
        if set(classes) != seen:
            raise ValueError(f"labels {seen - set(classes)} missing from class_order")
        centroids = []
        for c in classes:
            mean = X[[i for i, lab in enumerate(y) if lab == c]].mean(axis=0)
            n = np.linalg.norm(mean)
            if n == 0:
                raise ZeroVectorError(f"centroid of class {c!r} is zero")
            centroids.append(mean / n)
        self.classes_ = np.empty(len(classes), dtype=object)
        self.classes_[:] = classes
        self.centroids_ = np.vstack(centroids)
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X) -> np.ndarray:
        X = check_embedding_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatchError(
                f"expected dimension {self.n_features_in_}, got {X.shape[1]}"
            )
        return X

    def decision_function(self, X) -> np.ndarray:
        """Cosine similarity of each row of ``X`` to each centroid."""
        return _cosines(self._check(X), self.centroids_)

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum, which is the class-order tie-break
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def score(self, X, y, sample_weight=None) -> float:
        """Mean accuracy; computed directly since enum labels have no ordering."""
        hits = np.array([p == t for p, t in zip(self.predict(X), y)], dtype=float)
        return float(np.average(hits, weights=sample_weight))

    def centroids(self) -> list[ClassCentroid]:
        return [ClassCentroid(c, Embedding(v)) for c, v in zip(self.classes_, self.centroids_)]

    @classmethod
    def from_centroids(cls, centroids: Sequence[ClassCentroid]) -> "RocchioClassifier":
        if not centroids:
            raise ValueError("at least one centroid is required")
        dims = {c.centroid.dimension for c in centroids}
        if len(dims) != 1:
            raise DimensionMismatchError(f"centroids have mixed dimensions {sorted(dims)}")
        clf = cls(class_order=[c.action_class for c in centroids])
        clf.classes_ = np.empty(len(centroids), dtype=object)
        clf.classes_[:] = [c.action_class for c in centroids]
        clf.centroids_ = np.vstack([c.centroid.vector / c.centroid.norm for c in centroids])
        clf.n_features_in_ = dims.pop()
        return clf


def rocchio_classify(z: Embedding | np.ndarray, centroids: Sequence[ClassCentroid]) -> ActionClass:
    """Class whose centroid has maximal cosine with ``z``.

    Ties resolve by the fixed class order (decelerate to accelerate, left to
    right), independently of the order of ``centroids``.
    """
    ordered = sorted(centroids, key=lambda c: CLASS_ORDER.index(c.action_class))
    vec = z.vector if isinstance(z, Embedding) else z
    return RocchioClassifier.from_centroids(ordered).predict(np.asarray(vec)[None, :])[0]


@dataclass
class CentroidSet:
    """Per-axis classifiers for one language."""

    language: str
    acceleration: RocchioClassifier
    steering: RocchioClassifier

    def for_axis(self, axis: str) -> RocchioClassifier:
        return self.acceleration if axis == "acceleration" else self.steering


def _embed_all(provider: EmbeddingProvider, texts: Iterable[str], max_in_flight: int) -> dict:
    """Embed unique texts with bounded concurrency; failures map to the exception."""
    unique = sorted(set(texts))
    out: dict[str, Embedding | Exception] = {}

    def one(t: str):
        try:
            return provider.embed(t)
        except (ManeuverEvalError, OSError) as exc:
            return exc

    if max_in_flight <= 1 or len(unique) <= 1:
        for t in unique:
            out[t] = one(t)
        return out
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        for t, res in zip(unique, pool.map(one, unique)):
            out[t] = res
    return out


def build_centroids(
    provider: EmbeddingProvider,
    phrases: Sequence[Phrase] | None = None,
    languages: Sequence[str] | None = None,
    max_in_flight: int = 4,
) -> dict[str, CentroidSet]:
    """Fit one acceleration and one steering classifier per language."""
    phrases = list(load_phrases() if phrases is None else phrases)
    languages = sorted({p.language for p in phrases}) if languages is None else list(languages)
    vectors = _embed_all(provider, (p.text for p in phrases if p.language in languages), max_in_flight)
    for t, v in vectors.items():
        if isinstance(v, Exception):
            raise v
    sets = {}
    for lang in languages:
        fitted = {}
        for axis, enum_cls in (("acceleration", AccelClass), ("steering", SteerClass)):
            X, y = [], []
            for c in enum_cls:
                texts = [p.text for p in phrases if p.language == lang and p.key == class_key(c)]
                if len(texts) < MIN_PHRASES_PER_CLASS:
                    raise ValueError(
                        f"class {class_key(c)} has {len(texts)} {lang} phrases, "
                        f"need at least {MIN_PHRASES_PER_CLASS}"
                    )
                X += [vectors[t].vector for t in texts]
                y += [c] * len(texts)
            fitted[axis] = RocchioClassifier(class_order=list(enum_cls)).fit(np.vstack(X), y)
        sets[lang] = CentroidSet(lang, fitted["acceleration"], fitted["steering"])
    return sets


# ---------------------------------------------------------------------------
# traces and scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReasoningTrace:
    situational_awareness: str
    accel_first_3s: str
    steer_first_3s: str
    accel_last_2s: str
    steer_last_2s: str
    language: str = "en"

    def segment(self, axis: str, interval: str) -> str:
        prefix = "accel" if axis == "acceleration" else "steer"
        return getattr(self, f"{prefix}_{interval}")

    def to_dict(self) -> dict[str, str]:
        return {
            "situational_awareness": self.situational_awareness,
            "accel_first_3s": self.accel_first_3s,
            "steer_first_3s": self.steer_first_3s,
            "accel_last_2s": self.accel_last_2s,
            "steer_last_2s": self.steer_last_2s,
            "language": self.language,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> "ReasoningTrace":
        return cls(
            d["situational_awareness"],
            d["accel_first_3s"],
            d["steer_first_3s"],
            d["accel_last_2s"],
            d["steer_last_2s"],
            d.get("language", "en"),
        )


def template_trace(
    actions: IntervalActions,
    language: str = "en",
    phrases: Sequence[Phrase] | None = None,
    variant: int = 0,
    situational_awareness: str = "",
) -> ReasoningTrace:
    """Trace whose segments name ``actions`` with reference phrases.

    ``variant`` picks among the paraphrases of each class.
    """
    phrases = list(load_phrases() if phrases is None else phrases)

    def say(c: ActionClass) -> str:
        options = [p.text for p in phrases if p.language == language and p.key == class_key(c)]
        if not options:
            raise ValueError(f"no {language} phrase for {class_key(c)}")
        return f"({options[variant % len(options)]})"

    (a1, s1), (a2, s2) = actions.first_3s, actions.last_2s
    return ReasoningTrace(
        situational_awareness or "Template trace.",
        say(a1),
        say(s1),
        say(a2),
        say(s2),
        language,
    )


@dataclass(frozen=True)
class ScenarioCoherence:
    scenario_id: str
    accel_first: int
    accel_last: int
    steer_first: int
    steer_last: int


@dataclass(frozen=True)
class CoherenceResult:
    """Per-scenario cell matches plus corpus-level rates.

    ``excluded`` lists (scenario id, reason) pairs that could not be scored.
    """

    details: tuple[ScenarioCoherence, ...]
    excluded: tuple[tuple[str, str], ...] = ()

    @property
    def n_scored(self) -> int:
        return len(self.details)

    @property
    def n_excluded(self) -> int:
        return len(self.excluded)

    def _rate(self, name: str) -> float:
        if not self.details:
            return float("nan")
        return sum(getattr(d, name) for d in self.details) / len(self.details)

    @property
    def accel_first(self) -> float:
        return self._rate("accel_first")

    @property
    def accel_last(self) -> float:
        return self._rate("accel_last")

    @property
    def steer_first(self) -> float:
        return self._rate("steer_first")

    @property
    def steer_last(self) -> float:
        return self._rate("steer_last")

    @property
    def average(self) -> float:
        return (self.accel_first + self.accel_last + self.steer_first + self.steer_last) / 4.0

    def columns(self) -> dict[str, float]:
        """The five report columns in table order."""
        return {
            "avg": self.average,
            "accel_0_3s": self.accel_first,
            "accel_3_5s": self.accel_last,
            "steer_0_3s": self.steer_first,
            "steer_3_5s": self.steer_last,
        }


def coherence_score(
    traces: Sequence[ReasoningTrace],
    plans: Sequence[Trajectory],
    centroids: Mapping[str, CentroidSet],
    provider: EmbeddingProvider,
    scenario_ids: Sequence[str] | None = None,
    max_in_flight: int = 4,
) -> CoherenceResult:
    """Match rate between trace-described and plan-derived actions.

    Scenarios whose segments cannot be embedded or classified (empty text,
    provider failure, unsupported language) are excluded and reported.
    """
    if len(traces) != len(plans):
        raise LengthMismatchError(f"{len(traces)} traces but {len(plans)} plans")
    if scenario_ids is None:
        width = len(str(max(len(traces) - 1, 0)))
        scenario_ids = [f"{i:0{width}d}" for i in range(len(traces))]
    elif len(scenario_ids) != len(traces):
        raise LengthMismatchError(f"{len(scenario_ids)} ids for {len(traces)} traces")

    texts = [
        tr.segment(axis, interval)
        for tr in traces
        for axis, interval in CELLS
        if tr.segment(axis, interval).strip()
    ]
    vectors = _embed_all(provider, texts, max_in_flight)

    details, excluded = [], []
    for sid, tr, plan in sorted(zip(scenario_ids, traces, plans), key=lambda r: r[0]):
        cs = centroids.get(tr.language)
        if cs is None:
            excluded.append((sid, f"no centroids for language {tr.language!r}"))
            continue
        try:
            truth = {interval: classify(plan, interval) for interval in ("first_3s", "last_2s")}
        except ManeuverEvalError as exc:
            excluded.append((sid, f"plan not classifiable: {exc}"))
            continue
        flags, reason = [], None
        for axis, interval in CELLS:
            text = tr.segment(axis, interval)
            emb = vectors.get(text) if text.strip() else None
            if emb is None:
                reason = f"empty {axis} segment for {interval}"
                break
            if isinstance(emb, Exception):
                reason = f"embedding failed: {emb}"
                break
            try:
                predicted = cs.for_axis(axis).predict(emb.vector[None, :])[0]
            except ManeuverEvalError as exc:
                reason = f"classification failed: {exc}"
                break
            expected = truth[interval][0 if axis == "acceleration" else 1]
            flags.append(int(predicted == expected))
        if reason is not None:
            excluded.append((sid, reason))
            continue
        details.append(ScenarioCoherence(sid, *flags))
    return CoherenceResult(tuple(details), tuple(excluded))
