"""Deterministic stand-in for the LLM, driven by a known prerequisite DAG and a
known mastery function.  Lets the distillation pipeline run offline."""

from __future__ import annotations

import json
from typing import Callable, Iterable

import networkx as nx

from .data import NEUTRAL_RATE, QARecord
from .llm import ParseError

MasteryFn = Callable[[list[QARecord], frozenset[str]], tuple[float, float]]


def causal_rate_mastery(prefix: list[QARecord], concepts: frozenset[str]) -> tuple[float, float]:
    """Mean over ``concepts`` of the student's correct rate on each concept so far.

    Credit grows with the number of attempts seen for those concepts.
    """
    rates, attempts = [], 0
    for c in sorted(concepts):
        n = k = 0
        for rec in prefix:
            if not rec.is_pseudo and c in rec.concepts:
                n += 1
                k += rec.response
        rates.append(k / n if n else NEUTRAL_RATE)
        attempts += n
    credit = 0.5 + 0.5 * attempts / (attempts + 1)
    return sum(rates) / len(rates), credit


class MockLLM:
    """Answers relevance, prerequisite and mastery prompts from an oracle.

    ``prerequisites`` holds pairs ``(start, end)`` meaning *end* is a prerequisite
    of *start*.  Two concepts are related iff they are connected in the undirected
    version of that graph, unless ``related`` lists the related pairs explicitly.
    """

    model_id = "mock-oracle"

    def __init__(self, concepts: dict[str, str], prerequisites: Iterable[tuple[str, str]] = (),
                 related: Iterable[tuple[str, str]] | None = None,
                 mastery_fn: MasteryFn = causal_rate_mastery):
        self.concepts = dict(concepts)
        self.by_text = {t: c for c, t in self.concepts.items()}
        if len(self.by_text) != len(self.concepts):
            raise ValueError("concept texts must be unique for the mock oracle")
        self.prerequisites = {(a, b) for a, b in prerequisites}
        if related is None:
            g = nx.Graph()
            g.add_nodes_from(self.concepts)
            g.add_edges_from(self.prerequisites)
            comp = {c: i for i, cc in enumerate(nx.connected_components(g)) for c in cc}
            self._related = lambda a, b: comp[a] == comp[b]
        else:
            pairs = {frozenset(p) for p in related}
            self._related = lambda a, b: frozenset((a, b)) in pairs
        self.mastery_fn = mastery_fn
        self.invocations = 0

    def _concept(self, text: str) -> str:
        try:
            return self.by_text[text]
        except KeyError:
            raise ParseError(f"mock oracle does not know concept {text!r}") from None

    def generate(self, prompt: str, template_id: str, arguments: dict[str, str]) -> str:
        self.invocations += 1
        if template_id in ("relevance", "prerequisite"):
            a = self._concept(arguments["concept_i"])
            b = self._concept(arguments["concept_j"])
            if template_id == "relevance":
                yes = a != b and self._related(a, b)
            else:
                yes = (a, b) in self.prerequisites
            return "Yes." if yes else "No."
        if template_id == "mastery":
            history = json.loads(arguments["history"])
            target = json.loads(arguments["target"])
            prefix = [QARecord(h["question"], frozenset(h["concepts"]), int(h["response"]))
                      for h in history if h["step"] < target["step"]]
            m, s = self.mastery_fn(prefix, frozenset(target["concepts"]))
            return json.dumps({"mastery": round(m, 6), "credit": round(s, 6)})
        raise ValueError(f"unknown template {template_id!r}")
