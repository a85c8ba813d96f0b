"""
Training on the bundled synthetic students
==========================================

Stage 1 fits the scalar mastery head to the distilled labels, stage 2 fits
response prediction.  The model is smaller than the default (d=32) and the
epoch budget is short so this runs in well under a minute.
"""

import json

from ldsim.config import toy_path
from ldsim.data import load_dataset, question_rates, split_dataset
from ldsim.harness import multi_step_eval, single_step_eval
from ldsim.knowledge import ConceptRelationGraph
from ldsim.llm import Gateway
from ldsim.mock import MockLLM
from ldsim.model import build_hier_graph
from ldsim.reasoning import build_distilled_dataset
from ldsim.train import TrainConfig, make_model, stage1_train, stage2_train

ds = load_dataset(toy_path("responses.csv"), concept_texts=toy_path("concepts.csv"))
train, val, test = split_dataset(ds.histories, (0.8, 0.1, 0.1), seed=0)
edges = {(e["start"], e["end"]) for e in json.loads(toy_path("prerequisites.json").read_text())["edges"]}
concept_graph = ConceptRelationGraph(ds.concepts, edges)
rates = question_rates(train)

gateway = Gateway(MockLLM(ds.concepts, edges))
labels = build_distilled_dataset(train, concept_graph, gateway, ds.questions, n_pseudo=2, every=8)
print("distilled records:", len(labels), "of which pseudo:", len(labels) - len(labels.records(False)))

config = TrainConfig(d=32, stage1_epochs=8, stage2_epochs=15, patience=4)
model = make_model(build_hier_graph(concept_graph, ds.questions), config)

r1 = stage1_train(model, labels, train, rates, config)
print("stage 1 L_b per epoch:", [round(e["L_b"], 4) for e in r1.epochs])
r2 = stage2_train(model, train, rates, config, val)
print("stage 2 best epoch:", r2.best_epoch, "val AUC:", round(r2.best_metric, 4))

single = single_step_eval(model, test, rates)
multi = multi_step_eval(model, test, rates, n=30)
print(f"single-step  ACC {single.acc:.3f}  AUC {single.auc:.3f}  (majority {single.majority_rate:.3f})")
print(f"multi-step   ACC {multi.acc:.3f}  AUC {multi.auc:.3f}  over the last 30 steps")
