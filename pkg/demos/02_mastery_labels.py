"""
Mastery labels for one student
==============================

The reasoning step asks, for each record, how well the student masters the
concepts of that question and how confident that judgement is.  Pseudo records
pose other questions at the same step; their response is unknown (-1).
"""

from ldsim.config import toy_path
from ldsim.data import load_dataset
from ldsim.knowledge import ConceptRelationGraph
from ldsim.llm import Gateway
from ldsim.mock import MockLLM
from ldsim.reasoning import augment_pseudo, distill_student
import json

ds = load_dataset(toy_path("responses.csv"), concept_texts=toy_path("concepts.csv"))
edges = {(e["start"], e["end"]) for e in json.loads(toy_path("prerequisites.json").read_text())["edges"]}
graph = ConceptRelationGraph(ds.concepts, edges)
gateway = Gateway(MockLLM(ds.concepts, edges))

student = ds.histories[0]
records, skipped = distill_student(student, graph, gateway)
print(f"student {student.student}: {len(records)} labels, {skipped} skipped")
for r in records[:10]:
    concepts = ", ".join(ds.concepts[c] for c in sorted(r.record.concepts))
    print(f"step {r.step:2d}  {r.record.question:>4s}  r={r.record.response}  "
          f"m={r.mastery:.3f}  s={r.credit:.3f}  ({concepts})")

# Three extra questions imagined at step 8.
pseudo, _ = augment_pseudo(student, 8, 3, ds.questions, graph, gateway, seed=0,
                           masteries={r.step: r.mastery for r in records})
for r in pseudo:
    print(f"pseudo at step {r.step}: {r.record.question}  m={r.mastery:.3f}  response={r.record.response}")
