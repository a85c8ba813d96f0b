"""
A recommender talking to a simulated student
============================================

The environment starts from a real history and answers each recommended
question with a predicted outcome, which then becomes part of the history.
Here a greedy policy keeps asking the question the student is least likely to
get right.  An untrained network is used, so the numbers only show the loop.
"""

import numpy as np
import torch

from ldsim.data import question_rates
from ldsim.harness import SimulatorEnv
from ldsim.knowledge import ConceptRelationGraph
from ldsim.model import Simulator, build_hier_graph
from ldsim.synthetic import generate_irt_benchmark

bench = generate_irt_benchmark(n_students=30, n_steps=20, n_questions=15, n_concepts=8, n_edges=8, seed=1)
ds = bench.dataset
graph = build_hier_graph(ConceptRelationGraph(ds.concepts, bench.prerequisites), ds.questions)
torch.manual_seed(0)
model = Simulator(graph, d=32).eval()
rates = question_rates(ds.histories)

env = SimulatorEnv(model, rates, {h.student: h for h in ds.histories})
obs = env.reset(student=ds.histories[0].student, prefix=10)
print("start:", obs)

for _ in range(8):
    # peek at every question with a throwaway env positioned at the same history
    probe = SimulatorEnv(model, rates)
    scores = []
    for q in graph.questions:
        probe.reset(env.history)
        scores.append(probe.step(q)[1])
    q = graph.questions[int(np.argmin(scores))]
    r_hat, p, obs = env.step(q)
    print(f"ask {q:>4s}  p(correct)={p:.3f}  predicted={r_hat}  step={obs['step']}")

print("history now holds", len(env.history), "records; the last ones are simulated:")
print([(r.question, r.response) for r in env.history[-3:]])
