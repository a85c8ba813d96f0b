"""
Recovering a prerequisite graph from yes/no questions
=====================================================

Every pair of concepts is first checked for relevance (asked in both orders),
and only relevant pairs are asked about prerequisites.  The mock oracle below
answers from a hand-written DAG, so the recovered graph can be compared with it.
"""

import tempfile

from ldsim.knowledge import build_concept_graph
from ldsim.llm import Gateway, ResponseCache
from ldsim.mock import MockLLM

concepts = {
    "c0": "Counting", "c1": "Addition", "c2": "Subtraction", "c3": "Multiplication",
    "c4": "Division", "c5": "Fractions", "c6": "Area Parallelogram", "c7": "Surface Area of Prism",
}
# (start, end): end must be learned before start
dag = {("c1", "c0"), ("c2", "c0"), ("c2", "c1"), ("c3", "c1"), ("c4", "c3"), ("c4", "c2"),
       ("c5", "c4"), ("c5", "c3"), ("c6", "c3"), ("c7", "c6"), ("c7", "c1"), ("c7", "c3")}

cache_dir = tempfile.mkdtemp()
gateway = Gateway(MockLLM(concepts, dag), ResponseCache(cache_dir), parallelism=4)
graph = build_concept_graph(concepts, gateway)

for start, end in sorted(graph.edges):
    print(f"{concepts[end]:>16s}  ->  {concepts[start]}")
print("recovered exactly:", graph.edges == dag)
print("backend calls:", gateway.calls)

# A second gateway over the same cache directory never reaches the backend.
again = Gateway(MockLLM(concepts, dag), ResponseCache(cache_dir))
build_concept_graph(concepts, again)
print("calls on a warm cache:", again.calls, "cache hits:", again.cache_hits)

print("canonical JSON size:", len(graph.dumps()), "bytes")
