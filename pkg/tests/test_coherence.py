"""Tests for embeddings, Rocchio classification and coherence scoring."""

from __future__ import annotations

import dataclasses
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maneuver_eval.actions import AccelClass, IntervalActions, SteerClass, classify_actions, rollout
from maneuver_eval.coherence import (
    CLASS_ORDER,
    ClassCentroid,
    Embedding,
    MockEmbeddingProvider,
    ReasoningTrace,
    RocchioClassifier,
    SubprocessEmbeddingProvider,
    _CachingProvider,
    build_centroids,
    class_from_key,
    class_key,
    coherence_score,
    load_phrases,
    provider_from_endpoint,
    rocchio_classify,
    template_trace,
)
from maneuver_eval.exceptions import (
    DimensionMismatchError,
    LengthMismatchError,
    ManeuverEvalError,
    ProviderUnavailableError,
    ZeroVectorError,
)
from maneuver_eval.synthetic import balanced_plans, make_past

A, S = AccelClass, SteerClass


@pytest.fixture(scope="module")
def provider():
    return MockEmbeddingProvider()


@pytest.fixture(scope="module")
def centroids(provider):
    return build_centroids(provider)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _brute_force_predict(z: np.ndarray, clf: RocchioClassifier):
    best, best_cos = None, -np.inf
    for c, mu in zip(clf.classes_, clf.centroids_):
        cos = float(z @ mu) / (np.linalg.norm(z) * np.linalg.norm(mu))
        if cos > best_cos:
            best, best_cos = c, cos
    return best


class TestEmbeddingProvider:
    def test_deterministic(self, provider):
        a = provider.embed("slow down a little")
        b = MockEmbeddingProvider().embed("slow down a little")
        assert np.array_equal(a.vector, b.vector)
        assert provider.embed("slow down a little") is a

    def test_fixture_vector(self):
        v = MockEmbeddingProvider().embed("maintain speed").vector
        assert v.shape == (64,)
        assert v[:4] == pytest.approx(
            [-0.19100769554146813, 0.044116013831366055, -0.17631821766380576, 0.13320617503902304],
            abs=1e-15,
        )
        assert np.linalg.norm(v) == pytest.approx(1.0)

    @pytest.mark.parametrize("text", ["", "   "])
    def test_empty(self, provider, text):
        with pytest.raises(ManeuverEvalError):
            provider.embed(text)

    def test_no_tokens(self, provider):
        with pytest.raises(ZeroVectorError):
            provider.embed("!!!")

    def test_dimension_pinned(self):
        class Growing(_CachingProvider):
            def _compute(self, text):
                return np.ones(len(text))

        p = Growing()
        p.embed("ab")
        with pytest.raises(DimensionMismatchError):
            p.embed("abc")

    def test_seed_changes_vectors(self):
        a = MockEmbeddingProvider(seed=0).embed("turn left")
        b = MockEmbeddingProvider(seed=1).embed("turn left")
        assert not np.allclose(a.vector, b.vector)

    def test_subprocess_transport(self, tmp_path):
        script = tmp_path / "embedder.py"
        script.write_text(
            textwrap.dedent(
                """
                import json, sys
                for line in sys.stdin:
                    req = json.loads(line)
                    print(json.dumps({"vector": [len(req["text"]), 1.0, 0.0]}), flush=True)
                """
            )
        )
        p = provider_from_endpoint(f"cmd:{sys.executable} {script}", "toy")
        assert isinstance(p, SubprocessEmbeddingProvider)
        try:
            assert p.embed("abcd").vector.tolist() == [4.0, 1.0, 0.0]
            assert p.model_id == "toy"
        finally:
            p.close()

    def test_subprocess_missing_binary(self):
        p = SubprocessEmbeddingProvider(["/nonexistent/embedder"])
        with pytest.raises(ProviderUnavailableError):
            p.embed("hello")

    def test_http_unreachable(self):
        p = provider_from_endpoint("http://127.0.0.1:9/embed")
        p.timeout = 0.5
        with pytest.raises(ProviderUnavailableError):
            p.embed("hello")

    def test_unset_endpoint(self, monkeypatch):
        monkeypatch.delenv("MANEUVER_EVAL_EMBEDDING_ENDPOINT", raising=False)
        with pytest.raises(ProviderUnavailableError):
            provider_from_endpoint()

    def test_bad_scheme(self):
        with pytest.raises(ProviderUnavailableError):
            provider_from_endpoint("ftp://example")


class TestPhrases:
    def test_coverage(self):
        phrases = load_phrases()
        for lang in ("en", "es", "zh"):
            for c in CLASS_ORDER:
                assert sum(p.language == lang and p.key == class_key(c) for p in phrases) >= 3

    @pytest.mark.parametrize("c", CLASS_ORDER)
    def test_key_round_trip(self, c):
        assert class_from_key(class_key(c)) is c

    def test_every_phrase_classifies_to_its_class(self, provider, centroids):
        for p in load_phrases():
            axis = p.key.split("/")[0]
            z = provider.embed(p.text).vector
            assert centroids[p.language].for_axis(axis).predict(z)[0] is p.action_class, p

    def test_speed_synonyms(self, provider, centroids):
        clf = centroids["en"].acceleration
        got = {clf.predict(provider.embed(t).vector)[0] for t in ("keeping the current speed", "maintaining my speed")}
        assert got == {A.MAINTAIN}

    def test_too_few_phrases(self, provider):
        phrases = [p for p in load_phrases() if p.language == "en"]
        drop = class_key(S.LEFT)
        kept = [p for p in phrases if p.key != drop] + [p for p in phrases if p.key == drop][:2]
        with pytest.raises(ValueError, match="at least 3"):
            build_centroids(provider, kept)


class TestRocchio:
    @pytest.fixture
    def fitted(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(30, 8))
        y = [CLASS_ORDER[i % 5] for i in range(30)]
        return RocchioClassifier(class_order=CLASS_ORDER[:5]).fit(X, y), X

    def test_centroid_classifies_to_itself(self, fitted):
        clf, _ = fitted
        for c, mu in zip(clf.classes_, clf.centroids_):
            assert clf.predict(mu)[0] is c

    def test_negated_centroid_loses(self):
        mus = [ClassCentroid(c, Embedding(np.eye(5)[i])) for i, c in enumerate(CLASS_ORDER[:5])]
        assert rocchio_classify(-np.eye(5)[2], mus) is not CLASS_ORDER[2]

    def test_matches_brute_force(self, fitted):
        clf, X = fitted
        for z in np.random.default_rng(9).normal(size=(50, 8)):
            assert clf.predict(z)[0] is _brute_force_predict(z, clf)

    def test_centroids_are_unit_means(self, fitted):
        clf, X = fitted
        mean = X[0::5].mean(axis=0)
        assert np.allclose(clf.centroids_[0], mean / np.linalg.norm(mean), atol=1e-12)

    def test_tie_follows_class_order(self):
        mus = [ClassCentroid(A.ACCEL_STRONG, Embedding([1.0, 0.0])), ClassCentroid(A.DECEL_STRONG, Embedding([0.0, 1.0]))]
        assert rocchio_classify(np.array([1.0, 1.0]), mus) is A.DECEL_STRONG

    def test_zero_vector(self, fitted):
        with pytest.raises(ZeroVectorError):
            fitted[0].predict(np.zeros(8))

    def test_dimension_mismatch(self, fitted):
        with pytest.raises(DimensionMismatchError):
            fitted[0].predict(np.ones(7))

    def test_estimator_api(self, fitted):
        clf, X = fitted
        assert clf.get_params() == {"class_order": CLASS_ORDER[:5]}
        assert clf.n_features_in_ == 8
        y = clf.predict(X)
        assert clf.score(X, y) == 1.0

    def test_from_centroids_round_trip(self, fitted):
        clf, X = fitted
        again = RocchioClassifier.from_centroids(clf.centroids())
        assert list(again.predict(X)) == list(clf.predict(X))

    @given(st.integers(0, 2**32 - 1), st.floats(1e-6, 1e6))
    def test_scale_invariance(self, seed, alpha):
        rng = np.random.default_rng(seed)
        mus = [ClassCentroid(c, Embedding(rng.normal(size=16))) for c in CLASS_ORDER[:5]]
        z = rng.normal(size=16)
        assert rocchio_classify(alpha * z, mus) is rocchio_classify(z, mus)

    @given(st.integers(0, 2**32 - 1))
    def test_irrelevant_centroid(self, seed):
        rng = np.random.default_rng(seed)
        mus = [ClassCentroid(c, Embedding(_unit(rng.normal(size=16)))) for c in CLASS_ORDER[:4]]
        z = rng.normal(size=16)
        winner = rocchio_classify(z, mus)
        best = max(float(_unit(z) @ m.centroid.vector) for m in mus)
        # a fifth centroid strictly less aligned with z than the winner
        cos = (best - 1.0) / 2.0
        ortho = np.linalg.svd(z[None, :])[2][1]
        extra = cos * _unit(z) + np.sqrt(1.0 - cos**2) * ortho
        assert rocchio_classify(z, mus + [ClassCentroid(CLASS_ORDER[4], Embedding(extra))]) is winner


def _plans_with_traces(flip_steer: bool = False):
    plans, acts = balanced_plans()
    keep = [i for i, a in enumerate(acts) if S.STRAIGHT not in (a.first_3s[1], a.last_2s[1])]
    plans = [plans[i] for i in keep]
    acts = [acts[i] for i in keep]
    flip = {S.LEFT: S.RIGHT, S.SLIGHT_LEFT: S.SLIGHT_RIGHT, S.SLIGHT_RIGHT: S.SLIGHT_LEFT, S.RIGHT: S.LEFT}
    if flip_steer:
        acts = [
            IntervalActions((a.first_3s[0], flip[a.first_3s[1]]), (a.last_2s[0], flip[a.last_2s[1]]))
            for a in acts
        ]
    return [template_trace(a, variant=i) for i, a in enumerate(acts)], plans


class TestCoherenceScore:
    def test_self_consistent_fixtures(self, corpus, provider, centroids):
        traces = [sc.traces[0] for sc in corpus]
        res = coherence_score(traces, [sc.expert for sc in corpus], centroids, provider, [sc.id for sc in corpus])
        assert res.columns() == {k: 1.0 for k in ("avg", "accel_0_3s", "accel_3_5s", "steer_0_3s", "steer_3_5s")}
        assert res.n_excluded == 0

    def test_languages_are_mixed(self, corpus):
        assert {sc.traces[0].language for sc in corpus} == {"en", "es", "zh"}

    def test_opposite_steering(self, provider, centroids):
        traces, plans = _plans_with_traces(flip_steer=True)
        res = coherence_score(traces, plans, centroids, provider)
        assert (res.steer_first, res.steer_last) == (0.0, 0.0)
        assert (res.accel_first, res.accel_last) == (1.0, 1.0)
        assert res.average == 0.5

    def test_hand_counted(self, provider, centroids):
        past = make_past(10.0)
        acts = IntervalActions((A.MAINTAIN, S.SLIGHT_LEFT), (A.ACCEL_SLIGHT, S.STRAIGHT))
        plan = rollout(past, acts)
        assert classify_actions(plan) == acts
        wrong = {
            "accel_first_3s": "(brake hard)",
            "steer_first_3s": "(turn right)",
            "accel_last_2s": "(keep the current speed)",
            "steer_last_2s": "(steer slightly to the left)",
        }
        base = template_trace(acts)
        # scenario i spoils the cells listed for it
        spoiled = [
            (), (), (), ("accel_first_3s",), ("accel_first_3s", "steer_first_3s"),
            ("steer_last_2s",), ("accel_last_2s",), ("accel_last_2s", "steer_last_2s"),
            tuple(wrong), (),
        ]
        traces = [dataclasses.replace(base, **{f: wrong[f] for f in cells}) for cells in spoiled]
        res = coherence_score(traces, [plan] * 10, centroids, provider)
        # per cell: accel_first spoiled 3x, steer_first 2x, accel_last 3x, steer_last 3x
        assert res.accel_first == pytest.approx(0.7)
        assert res.steer_first == pytest.approx(0.8)
        assert res.accel_last == pytest.approx(0.7)
        assert res.steer_last == pytest.approx(0.7)
        assert res.average == pytest.approx((0.7 + 0.8 + 0.7 + 0.7) / 4)
        assert [d.scenario_id for d in res.details if d.accel_first == 0] == ["3", "4", "8"]

    def test_order_independent(self, corpus, provider, centroids):
        traces = [sc.traces[0] for sc in corpus]
        plans = [sc.expert for sc in corpus]
        ids = [sc.id for sc in corpus]
        perm = np.random.default_rng(0).permutation(len(ids))
        a = coherence_score(traces, plans, centroids, provider, ids)
        b = coherence_score([traces[i] for i in perm], [plans[i] for i in perm], centroids, provider, [ids[i] for i in perm])
        assert a == b

    def test_exclusions_are_reported(self, corpus, provider, centroids):
        sc = corpus[0]
        good = sc.traces[0]
        traces = [
            good,
            dataclasses.replace(good, language="fr"),
            dataclasses.replace(good, steer_last_2s="  "),
            dataclasses.replace(good, accel_first_3s="???"),
        ]
        res = coherence_score(traces, [sc.expert] * 4, centroids, provider, ["a", "b", "c", "d"])
        assert res.n_scored == 1
        reasons = dict(res.excluded)
        assert set(reasons) == {"b", "c", "d"}
        assert "language" in reasons["b"]
        assert "empty" in reasons["c"]
        assert "embedding failed" in reasons["d"]

    def test_length_mismatch(self, corpus, provider, centroids):
        with pytest.raises(LengthMismatchError):
            coherence_score([corpus[0].traces[0]], [], centroids, provider)

    def test_trace_dict_round_trip(self, corpus):
        tr = corpus[0].traces[0]
        assert ReasoningTrace.from_dict(tr.to_dict()) == tr
