import itertools
import json

import pytest

from ldsim.knowledge import (
    ConceptRelationGraph, assess_prerequisite, assess_relevance, build_concept_graph,
)
from ldsim.llm import Gateway, TransportError
from ldsim.mock import MockLLM

# 8 elementary-math concepts, 12 prerequisite edges (start, end): end comes first.
MATH = {
    "c0": "Counting", "c1": "Addition", "c2": "Subtraction", "c3": "Multiplication",
    "c4": "Division", "c5": "Fractions", "c6": "Area Parallelogram", "c7": "Surface Area of Prism",
}
MATH_DAG = {
    ("c1", "c0"), ("c2", "c0"), ("c2", "c1"), ("c3", "c1"), ("c4", "c3"), ("c4", "c2"),
    ("c5", "c4"), ("c5", "c3"), ("c6", "c3"), ("c7", "c6"), ("c7", "c1"), ("c7", "c3"),
}


class ByPrompt:
    """Backend answering from a {(template, concept_i, concept_j): reply} table."""

    model_id = "table"

    def __init__(self, table, default="No."):
        self.table, self.default, self.calls = table, default, 0

    def generate(self, prompt, template_id, arguments):
        self.calls += 1
        return self.table.get((template_id, arguments["concept_i"], arguments["concept_j"]), self.default)


def test_relevance_needs_both_orders():
    yes_yes = ByPrompt({("relevance", "A", "B"): "Yes", ("relevance", "B", "A"): "Yes"})
    assert assess_relevance("A", "B", Gateway(yes_yes)) == 1
    assert yes_yes.calls == 2
    yes_no = ByPrompt({("relevance", "A", "B"): "Yes", ("relevance", "B", "A"): "No"})
    assert assess_relevance("A", "B", Gateway(yes_no)) == 0


def test_relevance_rejects_same_concept():
    with pytest.raises(ValueError):
        assess_relevance("A", "A", Gateway(ByPrompt({})))


def test_prerequisite_examples():
    gw = Gateway(MockLLM(MATH, MATH_DAG))
    assert assess_prerequisite("Multiplication", "Addition", gw) == (1, 0)
    assert assess_prerequisite("Surface Area of Prism", "Area Parallelogram", gw)[0] == 1
    unrelated = Gateway(MockLLM({"a": "Art", "b": "Biology"}))
    assert assess_prerequisite("Art", "Biology", unrelated) == (0, 0)


def test_single_concept_graph():
    g = build_concept_graph({"c0": "Counting"}, Gateway(MockLLM({"c0": "Counting"})))
    assert list(g.nodes) == ["c0"] and g.edges == set()


def test_empty_catalog_rejected():
    with pytest.raises(ValueError):
        build_concept_graph({}, Gateway(ByPrompt({})))


def test_mock_dag_reconstructed_exactly():
    assert len(MATH_DAG) == 12
    g = build_concept_graph(MATH, Gateway(MockLLM(MATH, MATH_DAG)))
    assert g.edges == MATH_DAG


def test_all_relevant_no_prerequisite():
    pairs = list(itertools.combinations(MATH, 2))
    mock = MockLLM(MATH, related=pairs)
    gw = Gateway(mock)
    g = build_concept_graph(MATH, gw)
    assert g.edges == set()
    assert gw.calls == 2 * len(pairs) + 2 * len(pairs)


@pytest.mark.parametrize("dag", [set(), {("c1", "c0")}, MATH_DAG])
def test_call_count_bound(dag):
    mock = MockLLM(MATH, dag)
    gw = Gateway(mock)
    build_concept_graph(MATH, gw)
    n_pairs = len(MATH) * (len(MATH) - 1) // 2
    relevant = sum(mock._related(a, b) for a, b in itertools.combinations(MATH, 2))
    assert gw.calls == mock.invocations == 2 * n_pairs + 2 * relevant


def test_two_cycles_are_kept():
    table = {("relevance", "A", "B"): "yes", ("relevance", "B", "A"): "yes",
             ("prerequisite", "A", "B"): "yes", ("prerequisite", "B", "A"): "yes"}
    g = build_concept_graph({"a": "A", "b": "B"}, Gateway(ByPrompt(table)))
    assert g.edges == {("a", "b"), ("b", "a")}


def test_undetermined_pairs_become_absent_edges():
    class Broken:
        model_id = "broken"

        def generate(self, prompt, template_id, arguments):
            if {arguments["concept_i"], arguments["concept_j"]} == {"A", "C"}:
                return "perhaps"
            if {arguments["concept_i"], arguments["concept_j"]} == {"B", "C"}:
                raise TransportError("down")
            return "yes"

    g = build_concept_graph({"a": "A", "b": "B", "c": "C"}, Gateway(Broken(), retries=1))
    assert g.undetermined == 2
    assert g.edges == {("a", "b"), ("b", "a")}


def test_scope_restricts_pairs():
    gw = Gateway(MockLLM(MATH, MATH_DAG))
    g = build_concept_graph(MATH, gw, pairs=[frozenset(("c3", "c1"))])
    assert g.edges == {("c3", "c1")}
    assert gw.calls == 4


def test_parallel_build_matches_serial():
    a = build_concept_graph(MATH, Gateway(MockLLM(MATH, MATH_DAG), parallelism=4))
    assert a.edges == MATH_DAG


def test_graph_json_canonical(tmp_path):
    g1 = build_concept_graph(MATH, Gateway(MockLLM(MATH, MATH_DAG)))
    g2 = build_concept_graph(dict(reversed(MATH.items())), Gateway(MockLLM(MATH, MATH_DAG), parallelism=3))
    g1.save(tmp_path / "a.json")
    g2.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = ConceptRelationGraph.load(tmp_path / "a.json")
    assert back.nodes == g1.nodes and back.edges == g1.edges
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["edges"][0] == {"start": "c1", "end": "c0"}


def test_graph_invariants():
    with pytest.raises(ValueError):
        ConceptRelationGraph({"a": "A"}, {("a", "a")})
    with pytest.raises(ValueError):
        ConceptRelationGraph({"a": "A"}, {("a", "b")})
    full = ConceptRelationGraph.fully_connected({"a": "A", "b": "B", "c": "C"})
    assert len(full.edges) == 6
    assert full.restrict(["a", "b"]).edges == {("a", "b"), ("b", "a")}
