"""Concept prerequisite graph distilled from an LLM.

Every unordered pair of concepts is first checked for relevance, asking in both
orders and requiring both answers to be "yes".  Relevant pairs are then asked
the prerequisite question in both orders; each positive answer adds one
directed edge, so 2-cycles can occur.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .llm import Gateway, ParseError, TransportError, parse_binary

logger = logging.getLogger(__name__)


@dataclass
class ConceptRelationGraph:
    """Directed edges ``(start, end)``: *end* must be mastered before *start*."""

    nodes: dict[str, str]
    edges: set[tuple[str, str]] = field(default_factory=set)
    undetermined: int = 0

    def __post_init__(self):
        self.edges = set(self.edges)
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop on concept {a!r}")
            if a not in self.nodes or b not in self.nodes:
                raise ValueError(f"edge ({a!r}, {b!r}) references an unknown concept")

    def add_edge(self, start: str, end: str) -> None:
        if start == end:
            raise ValueError(f"self-loop on concept {start!r}")
        self.edges.add((start, end))

    def prerequisites_of(self, concept: str) -> list[str]:
        return sorted(b for a, b in self.edges if a == concept)

    def restrict(self, concepts: Iterable[str]) -> "ConceptRelationGraph":
        keep = set(concepts)
        return ConceptRelationGraph({c: t for c, t in self.nodes.items() if c in keep},
                                    {(a, b) for a, b in self.edges if a in keep and b in keep})

    def to_json(self) -> dict:
        return {
            "nodes": [{"id": c, "text": t} for c, t in sorted(self.nodes.items())],
            "edges": [{"start": a, "end": b} for a, b in sorted(self.edges)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ConceptRelationGraph":
        return cls({n["id"]: n["text"] for n in doc["nodes"]},
                   {(e["start"], e["end"]) for e in doc["edges"]})

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True, ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ConceptRelationGraph":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def fully_connected(cls, nodes: dict[str, str]) -> "ConceptRelationGraph":
        return cls(dict(nodes), {(a, b) for a in nodes for b in nodes if a != b})


def _ask(gateway: Gateway, template_id: str, text_i: str, text_j: str) -> int:
    return gateway.ask(template_id, {"concept_i": text_i, "concept_j": text_j}, parse_binary)


def assess_relevance(text_i: str, text_j: str, gateway: Gateway) -> int:
    """1 iff the LLM calls the pair related in both prompt orders."""
    if text_i == text_j:
        raise ValueError("relevance needs two distinct concepts")
    b_ij = _ask(gateway, "relevance", text_i, text_j)
    b_ji = _ask(gateway, "relevance", text_j, text_i)
    return int(b_ij == 1 and b_ji == 1)


def assess_prerequisite(text_i: str, text_j: str, gateway: Gateway) -> tuple[int, int]:
    """``(b_ij, b_ji)``; ``b_ij == 1`` means concept j is a prerequisite of concept i."""
    if text_i == text_j:
        raise ValueError("prerequisite check needs two distinct concepts")
    return _ask(gateway, "prerequisite", text_i, text_j), _ask(gateway, "prerequisite", text_j, text_i)


def build_concept_graph(concepts: dict[str, str], gateway: Gateway,
                        pairs: Iterable[frozenset[str]] | None = None) -> ConceptRelationGraph:
    """Query the LLM about concept pairs and assemble the prerequisite graph.

    ``pairs`` restricts which unordered pairs are examined (e.g. co-occurring
    concepts); by default all pairs are.  Pairs whose answers stay unparsable,
    or whose backend is unreachable, count as unrelated.
    """
    if not concepts:
        raise ValueError("empty concept catalog")
    ids = sorted(concepts)
    if pairs is None:
        todo = list(itertools.combinations(ids, 2))
    else:
        wanted = {frozenset(p) for p in pairs}
        todo = [(a, b) for a, b in itertools.combinations(ids, 2) if frozenset((a, b)) in wanted]

    def judge(pair):
        a, b = pair
        try:
            if not assess_relevance(concepts[a], concepts[b], gateway):
                return pair, (0, 0), False
            return pair, assess_prerequisite(concepts[a], concepts[b], gateway), False
        except (ParseError, TransportError) as exc:
            logger.warning("pair (%s, %s) undetermined: %s", a, b, exc)
            return pair, (0, 0), True

    graph = ConceptRelationGraph(dict(concepts))
    for (a, b), (b_ab, b_ba), failed in gateway.map(judge, todo):
        graph.undetermined += failed
        if b_ab:
            graph.add_edge(a, b)
        if b_ba:
            graph.add_edge(b, a)
    if graph.undetermined:
        logger.warning("%d concept pairs undetermined, treated as unrelated", graph.undetermined)
    logger.info("concept graph: %d nodes, %d edges from %d pairs", len(ids), len(graph.edges), len(todo))
    return graph
