import json

import pytest

from ldsim.data import QARecord, StudentHistory
from ldsim.knowledge import ConceptRelationGraph
from ldsim.llm import Gateway
from ldsim.mock import MockLLM
from ldsim.reasoning import (
    DistilledDataset, DistilledRecord, augment_pseudo, build_distilled_dataset, distill_student,
    mastery_arguments, sample_pseudo_questions,
)

CONCEPTS = {"c": "Fractions", "d": "Decimals"}
GRAPH = ConceptRelationGraph(CONCEPTS, {("d", "c")})
QUESTIONS = {f"q{i}": frozenset({"c"} if i % 2 == 0 else {"d"}) for i in range(8)}


def history(responses, student="u1"):
    return StudentHistory(student, [QARecord(f"q{2 * (i % 4)}", frozenset({"c"}), r)
                                    for i, r in enumerate(responses)])


class Fixed:
    model_id = "fixed"

    def __init__(self, reply):
        self.reply, self.calls, self.args = reply, 0, []

    def generate(self, prompt, template_id, arguments):
        self.calls += 1
        self.args.append(arguments)
        return self.reply


def test_five_record_oracle():
    recs, skipped = distill_student(history([1, 0, 1, 1, 0]), GRAPH, Gateway(MockLLM(CONCEPTS, {("d", "c")})))
    assert skipped == 0
    # causal correct rate on "c" before each step, credit 0.5 + 0.5 * n / (n + 1)
    expected = [(0.5, 0.5), (1.0, 0.75), (0.5, 0.833333), (0.666667, 0.875), (0.75, 0.9)]
    assert [(r.mastery, r.credit) for r in recs] == pytest.approx(expected, abs=1e-6)
    assert [r.step for r in recs] == [0, 1, 2, 3, 4]
    assert not any(r.pseudo for r in recs)


def test_verbatim_values():
    (rec,), _ = distill_student(history([1]), GRAPH, Gateway(Fixed('{"mastery": 0.7, "credit": 0.9}')))
    assert (rec.mastery, rec.credit) == (0.7, 0.9)


def test_all_parses_fail():
    backend = Fixed("I cannot tell")
    recs, skipped = distill_student(history([1, 0, 1]), GRAPH, Gateway(backend, retries=2))
    assert recs == [] and skipped == 3
    assert backend.calls == 3 * 3


def test_empty_history_rejected():
    with pytest.raises(ValueError):
        distill_student(StudentHistory("u", []), GRAPH, Gateway(Fixed("")))


def test_prior_masteries_reach_later_prompts():
    backend = Fixed('{"mastery": 0.25, "credit": 1}')
    distill_student(history([1, 0]), GRAPH, Gateway(backend))
    first, second = (json.loads(a["history"]) for a in backend.args)
    assert first[0]["mastery"] is None
    assert second[0]["mastery"] == 0.25 and second[1]["mastery"] is None


def test_arguments_restrict_graph_to_student():
    args = mastery_arguments(history([1]), 0, QARecord("q0", frozenset({"c"}), 1), GRAPH, {})
    assert args["graph"] == "(none)"
    assert "Fractions" in args["concepts"] and "Decimals" not in args["concepts"]
    pseudo = QARecord("q1", frozenset({"d"}), -1)
    args = mastery_arguments(history([1, 1]), 1, pseudo, GRAPH, {}, include_target_record=False)
    assert args["graph"] == "d <- c"
    assert [e["step"] for e in json.loads(args["history"])] == [0]


def test_pseudo_sampling_rules():
    h = history([1] * 6)
    qs = sample_pseudo_questions(h, 2, 3, list(QUESTIONS), seed=0)
    assert len(set(qs)) == 3 and h.records[2].question not in qs
    assert qs == sample_pseudo_questions(h, 2, 3, list(QUESTIONS), seed=0)
    assert all(len(set(sample_pseudo_questions(h, 2, 7, list(QUESTIONS), seed=s))) == 7 for s in range(5))
    with pytest.raises(ValueError):
        sample_pseudo_questions(h, 2, 8, list(QUESTIONS), seed=0)
    with pytest.raises(ValueError):
        sample_pseudo_questions(h, 2, 0, list(QUESTIONS), seed=0)


def test_pseudo_depends_on_seed():
    h = history([1] * 6)
    draws = {tuple(sample_pseudo_questions(h, 0, 3, list(QUESTIONS), seed=s)) for s in range(10)}
    assert len(draws) > 1


def test_augment_pseudo_records():
    h = history([1, 0, 1])
    recs, skipped = augment_pseudo(h, 1, 2, QUESTIONS, GRAPH, Gateway(MockLLM(CONCEPTS, {("d", "c")})), seed=0)
    assert skipped == 0 and len(recs) == 2
    for r in recs:
        assert r.pseudo and r.step == 1 and r.record.response == -1
        assert r.record.concepts == QUESTIONS[r.record.question]
    assert augment_pseudo(h, 1, 0, QUESTIONS, GRAPH, Gateway(Fixed("")), 0, allow_empty=True) == ([], 0)


def test_pseudo_mastery_ignores_real_record_at_step():
    mock = Gateway(MockLLM(CONCEPTS, {("d", "c")}))
    a, _ = augment_pseudo(history([1, 1, 0]), 2, 3, QUESTIONS, GRAPH, mock, seed=4)
    b, _ = augment_pseudo(history([1, 1, 1]), 2, 3, QUESTIONS, GRAPH, mock, seed=4)
    assert [(r.record, r.mastery) for r in a] == [(r.record, r.mastery) for r in b]


def test_dataset_counts_and_round_trip(tmp_path):
    train = [history([1, 0, 1, 1, 0, 1, 0, 0, 1], "u1"), history([0, 1, 1], "u2")]
    gw = Gateway(MockLLM(CONCEPTS, {("d", "c")}))
    ds = build_distilled_dataset(train, GRAPH, gw, QUESTIONS, n_pseudo=2, every=4, seed=0)
    assert len(ds.real["u1"]) == 9 and len(ds.pseudo["u1"]) == 2 * 3
    assert len(ds.real["u2"]) == 3 and len(ds.pseudo["u2"]) == 2
    assert len(ds) == 9 + 6 + 3 + 2
    assert len(ds.records(include_pseudo=False)) == 12
    ds.save_jsonl(tmp_path / "d.jsonl")
    back = DistilledDataset.load_jsonl(tmp_path / "d.jsonl")
    assert back.real == ds.real and back.pseudo == ds.pseudo


def test_distillation_is_deterministic(tmp_path):
    train = [history([1, 0, 1, 1, 0], "u1"), history([0, 1], "u2")]
    paths = []
    for i, par in enumerate((1, 3)):
        ds = build_distilled_dataset(train, GRAPH, Gateway(MockLLM(CONCEPTS, {("d", "c")}), parallelism=par),
                                     QUESTIONS, n_pseudo=2, every=2, seed=9)
        paths.append(tmp_path / f"{i}.jsonl")
        ds.save_jsonl(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_inputs_not_mutated():
    h = history([1, 0, 1])
    before = list(h.records)
    build_distilled_dataset([h], GRAPH, Gateway(MockLLM(CONCEPTS, {("d", "c")})), QUESTIONS, n_pseudo=1)
    assert h.records == before


def test_record_validation():
    with pytest.raises(ValueError):
        DistilledRecord("u", 0, QARecord("q", frozenset({"c"}), 1), 1.2, 0.5)
    bad = DistilledRecord("u", 0, QARecord("q", frozenset({"c"}), 1), 0.2, 0.5).to_json()
    bad["pseudo"] = True
    with pytest.raises(ValueError):
        DistilledRecord.from_json(bad)
