"""Synthetic students from a two-parameter IRT model with drifting ability.

Each student has a global ability, per-concept offsets, a linear growth trend
and a small practice gain per attempt on a concept; prerequisite concepts lend
part of their skill to the concepts that depend on them.  Question sequences
mostly stay on the current concept and occasionally jump.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, QARecord, StudentHistory

CONCEPT_NAMES = [
    "Counting", "Addition", "Subtraction", "Multiplication", "Division",
    "Fractions", "Decimals", "Percentages", "Ratios", "Negative Numbers",
    "Order of Operations", "Exponents", "Square Roots", "Linear Equations",
    "Area of Rectangles", "Area Parallelogram", "Perimeter", "Volume of Boxes",
    "Surface Area of Prism", "Pythagorean Theorem",
]


@dataclass
class IRTBenchmark:
    dataset: Dataset
    prerequisites: set[tuple[str, str]]   # (start, end): end is a prerequisite of start
    probabilities: dict[str, list[float]]  # true P(correct) per student and step
    difficulty: dict[str, float]
    discrimination: dict[str, float]


def random_dag(n: int, n_edges: int, rng: np.random.Generator) -> set[tuple[int, int]]:
    """``n_edges`` edges (i, j) with j < i, i.e. lower indices are prerequisites."""
    candidates = [(i, j) for i in range(n) for j in range(i)]
    if n_edges > len(candidates):
        raise ValueError("too many edges for a DAG")
    pick = rng.choice(len(candidates), size=n_edges, replace=False)
    return {candidates[k] for k in pick}


def generate_irt_benchmark(n_students: int = 200, n_steps: int = 50, n_questions: int = 50,
                           n_concepts: int = 20, n_edges: int = 25, multi_concept_rate: float = 0.3,
                           growth: float = 0.8, practice_gain: float = 0.08,
                           stay_rate: float = 0.7, seed: int = 7) -> IRTBenchmark:
    rng = np.random.default_rng(seed)
    if n_concepts <= len(CONCEPT_NAMES):
        names = CONCEPT_NAMES[:n_concepts]
    else:
        names = [f"Concept {i}" for i in range(n_concepts)]
    cids = [f"c{i}" for i in range(n_concepts)]
    concepts = dict(zip(cids, names))
    dag = random_dag(n_concepts, n_edges, rng)
    prereqs = {(cids[i], cids[j]) for i, j in dag}
    parents = {i: [j for a, j in dag if a == i] for i in range(n_concepts)}

    qids = [f"q{i}" for i in range(n_questions)]
    cover_idx = []
    for j in range(n_questions):
        main = j % n_concepts
        cs = {main}
        if rng.random() < multi_concept_rate:
            cs.add(int(rng.integers(n_concepts)))
        cover_idx.append(sorted(cs))
    questions = {q: frozenset(cids[c] for c in cs) for q, cs in zip(qids, cover_idx)}
    # harder concepts sit deeper in the DAG
    depth = np.zeros(n_concepts)
    for i in range(n_concepts):
        if parents[i]:
            depth[i] = 1 + max(depth[j] for j in parents[i])
    b = rng.normal(0.0, 1.0, n_questions) + 0.3 * np.array([depth[cs].mean() for cs in cover_idx])
    b -= b.mean()
    a = rng.uniform(0.8, 2.0, n_questions)
    by_concept = {c: [j for j, cs in enumerate(cover_idx) if c in cs] for c in range(n_concepts)}

    histories, probs = [], {}
    for u in range(n_students):
        sid = f"u{u}"
        theta = rng.normal(0.0, 1.0)
        offset = rng.normal(0.0, 0.6, n_concepts)
        trend = growth * rng.uniform(0.3, 1.7)
        practice = np.zeros(n_concepts)
        q = int(rng.integers(n_questions))
        recs, ps = [], []
        for t in range(n_steps):
            if t and rng.random() >= stay_rate:
                q = int(rng.integers(n_questions))
            elif t:
                c = cover_idx[q][0]
                q = int(rng.choice(by_concept[c])) if rng.random() < 0.5 else (q + 1) % n_questions
            skill = theta + trend * t / n_steps + offset + practice
            inherited = np.array([skill[i] if not parents[i] else
                                  0.6 * skill[i] + 0.4 * np.mean(skill[parents[i]])
                                  for i in range(n_concepts)])
            ability = inherited[cover_idx[q]].mean()
            p = 1.0 / (1.0 + np.exp(-1.7 * a[q] * (ability - b[q])))
            r = int(rng.random() < p)
            for c in cover_idx[q]:
                practice[c] += practice_gain * (1.5 if r else 1.0)
            recs.append(QARecord(qids[q], questions[qids[q]], r))
            ps.append(float(p))
        histories.append(StudentHistory(sid, recs))
        probs[sid] = ps

    ds = Dataset(concepts, questions, histories)
    return IRTBenchmark(ds, prereqs, probs, dict(zip(qids, b.tolist())), dict(zip(qids, a.tolist())))


def write_benchmark(bench: IRTBenchmark, directory: str | Path) -> None:
    """``responses.csv``, ``concepts.csv`` and the oracle ``prerequisites.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "responses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["student", "question", "concepts", "response", "timestamp"])
        for h in bench.dataset.histories:
            for t, rec in enumerate(h.records):
                w.writerow([h.student, rec.question, "|".join(sorted(rec.concepts, key=lambda c: int(c[1:]))),
                            rec.response, t])
    with open(directory / "concepts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "text"])
        for c, text in bench.dataset.concepts.items():
            w.writerow([c, text])
    edges = sorted(bench.prerequisites, key=lambda e: (int(e[0][1:]), int(e[1][1:])))
    (directory / "prerequisites.json").write_text(
        json.dumps({"edges": [{"start": s, "end": e} for s, e in edges]}, indent=1) + "\n", encoding="utf-8")
