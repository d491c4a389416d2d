"""Tests for scenario and prediction I/O."""

from __future__ import annotations

import copy
import json

import numpy as np
import pytest

from maneuver_eval.dataset import (
    ScenarioType,
    dump_predictions,
    dump_scenario,
    fixture_corpus_dir,
    instruction_family,
    load_corpus,
    load_predictions,
    load_scenario,
    save_corpus,
    save_predictions,
    scenario_from_dict,
    select_split,
    split_sizes,
)
from maneuver_eval.exceptions import (
    DuplicateIdError,
    MalformedRecordError,
    SchemaViolationError,
    UnknownScenarioTypeError,
)
from maneuver_eval.mms import ReferenceCategory
from maneuver_eval.prompts import PromptMode, format_waypoints


@pytest.fixture()
def raw():
    return json.loads((fixture_corpus_dir() / "constr-001.json").read_text("utf-8"))


def record(sc, **extra):
    d = {"scenario_id": sc.id, "model_id": "m", "inference_mode": "zero_shot"}
    d.update(extra)
    return json.dumps(d)


class TestFixtureCorpus:
    def test_coverage(self, corpus):
        assert len(corpus) >= 20
        assert {sc.scenario_type for sc in corpus} == set(ScenarioType)
        cats = {r.category for sc in corpus for r in sc.references.references}
        assert cats == set(ReferenceCategory)
        assert sum(split_sizes(corpus).values()) == len(corpus)

    def test_sorted_unique(self, corpus):
        ids = [sc.id for sc in corpus]
        assert ids == sorted(set(ids))

    def test_every_scenario_has_expert(self, corpus):
        for sc in corpus:
            assert sc.expert.xy.shape == (25, 2)
            assert np.allclose(sc.past.xy[-1], 0.0)

    def test_select_split(self, corpus):
        assert len(select_split(corpus, "all")) == len(corpus)
        assert all(sc.split == "test" for sc in select_split(corpus, "test"))
        with pytest.raises(ValueError):
            select_split(corpus, "dev")

    @pytest.mark.parametrize(
        "text, family",
        [
            ("use right lane", "use right lane"),
            ("Overtake  truck driving on the right", "overtake"),
            ("turn lefter", None),
            ("xyzzy", None),
        ],
    )
    def test_instruction_family(self, text, family):
        assert instruction_family(text) == family


class TestScenarioSchema:
    def test_round_trip(self, corpus, tmp_path):
        save_corpus(corpus, tmp_path)
        again = load_corpus(tmp_path)
        assert [dump_scenario(a) for a in again] == [dump_scenario(b) for b in corpus]

    def test_byte_stable(self, corpus, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        save_corpus(corpus, a)
        save_corpus(list(reversed(corpus)), b)
        for f in sorted(a.iterdir()):
            assert f.read_bytes() == (b / f.name).read_bytes()

    @pytest.mark.parametrize(
        "mutate, path",
        [
            (lambda d: d.pop("past"), "past"),
            (lambda d: d.pop("instruction"), "instruction"),
            (lambda d: d.__setitem__("split", "dev"), "split"),
            (lambda d: d["references"][0].__setitem__("category", "nearly_right"), "references/0/category"),
            (lambda d: d["references"][0]["trajectory"].pop(), "references/0/trajectory"),
            (lambda d: d["past"].__setitem__(-1, [1.0, 0.0]), "past"),
            (lambda d: d.__setitem__("references", [r for r in d["references"] if r["category"] != "expert_like"]), "references"),
            (lambda d: d.__setitem__("schema_version", "2.0"), "schema_version"),
        ],
        ids=["no-past", "no-instruction", "bad-split", "bad-category", "short-ref", "unanchored", "no-expert", "version"],
    )
    def test_violation_paths(self, raw, mutate, path):
        mutate(raw)
        with pytest.raises(SchemaViolationError) as info:
            scenario_from_dict(raw, source="x.json")
        assert info.value.path.startswith(path)

    def test_unknown_type(self, raw):
        raw["scenario_type"] = "volcano"
        with pytest.raises(UnknownScenarioTypeError):
            scenario_from_dict(raw)

    def test_minor_version_accepted(self, raw):
        raw["schema_version"] = "1.7"
        assert scenario_from_dict(raw).id == "constr-001"

    def test_invalid_json(self, tmp_path):
        f = tmp_path / "bad.json"
        f.write_text("{", encoding="utf-8")
        with pytest.raises(SchemaViolationError):
            load_scenario(f)

    def test_duplicate_ids(self, raw, tmp_path):
        for name in ("a.json", "b.json"):
            (tmp_path / name).write_text(json.dumps(raw), encoding="utf-8")
        with pytest.raises(DuplicateIdError):
            load_corpus(tmp_path)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path / "nope")

    def test_converter(self, raw, tmp_path):
        foreign = {"payload": raw}
        f = tmp_path / "f.json"
        f.write_text(json.dumps(foreign), encoding="utf-8")
        assert load_scenario(f, converter=lambda d: d["payload"]).id == "constr-001"


class TestPredictions:
    def test_trajectory_record(self, corpus, tmp_path):
        sc = corpus[0]
        f = tmp_path / "p.jsonl"
        f.write_text(record(sc, trajectory=sc.expert.to_list()) + "\n", encoding="utf-8")
        load = load_predictions(f, corpus)
        assert len(load.records) == 1 and not load.rejections
        assert np.array_equal(load.records[0].trajectory.xy, sc.expert.xy)

    def test_raw_completion_parsed(self, corpus, tmp_path):
        sc = corpus[0]
        text = f"Plan:\n<trajectory>{format_waypoints(sc.expert)}</trajectory>\n<trajectory>{format_waypoints(sc.expert)}</trajectory>"
        f = tmp_path / "p.jsonl"
        f.write_text(record(sc, raw_completion=text), encoding="utf-8")
        (rec,) = load_predictions(f, corpus).records
        assert np.max(np.abs(rec.trajectory.xy - sc.expert.xy)) <= 0.005 + 1e-9
        assert any("using the last" in d for d in rec.diagnostics)

    def test_rejections(self, corpus, tmp_path):
        sc = corpus[0]
        lines = [
            record(sc, model_id="a", raw_completion="no tags here"),
            json.dumps({"scenario_id": "ghost", "model_id": "a", "inference_mode": "zero_shot"}),
            record(sc, model_id="b", trajectory=sc.expert.to_list()),
        ]
        f = tmp_path / "p.jsonl"
        f.write_text("\n".join(lines) + "\n\n", encoding="utf-8")
        load = load_predictions(f, corpus)
        assert [r.model_id for r in load.records] == ["b"]
        assert [(r.line, r.scenario_id) for r in load.rejections] == [(1, sc.id), (2, "ghost")]
        assert "unknown scenario id" in load.rejections[1].reason

    @pytest.mark.parametrize(
        "line",
        [
            "{not json",
            "[1, 2]",
            json.dumps({"scenario_id": "constr-001", "model_id": "m"}),
            json.dumps({"scenario_id": "constr-001", "model_id": "m", "inference_mode": "telepathy"}),
            json.dumps({"scenario_id": "constr-001", "model_id": "m", "inference_mode": "zero_shot", "trajectory": [[0, 0]]}),
        ],
        ids=["json", "array", "no-mode", "bad-mode", "short-trajectory"],
    )
    def test_malformed(self, corpus, tmp_path, line):
        f = tmp_path / "p.jsonl"
        f.write_text("\n" + line + "\n", encoding="utf-8")
        with pytest.raises(MalformedRecordError) as info:
            load_predictions(f, corpus)
        assert info.value.line == 2

    def test_duplicate_record(self, corpus, tmp_path):
        sc = corpus[0]
        line = record(sc, trajectory=sc.expert.to_list())
        f = tmp_path / "p.jsonl"
        f.write_text(line + "\n" + line + "\n", encoding="utf-8")
        with pytest.raises(MalformedRecordError):
            load_predictions(f, corpus)

    def test_save_round_trip(self, corpus, tmp_path):
        f = tmp_path / "p.jsonl"
        f.write_text(
            "\n".join(record(sc, model_id=m, trajectory=sc.expert.to_list()) for m in "ba" for sc in corpus[:3]),
            encoding="utf-8",
        )
        load = load_predictions(f, corpus)
        out = save_predictions(load.records, tmp_path / "o" / "q.jsonl")
        assert out.read_text("utf-8") == dump_predictions(reversed(load.records))
        again = load_predictions(out, corpus)
        assert [r.key for r in again.records] == [r.key for r in load.records]
        assert again.records[0].inference_mode is PromptMode.ZERO_SHOT

    def test_to_dict_is_copy_safe(self, corpus):
        d = corpus[0].to_dict()
        before = copy.deepcopy(d)
        d["past"][0][0] = 999.0
        assert corpus[0].to_dict() == before
