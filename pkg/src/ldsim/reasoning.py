"""Per-step mastery labels inferred by an LLM from student logs.

Real records get one (mastery, credit) pair each.  Pseudo records pose a
different, randomly drawn question at the same step; their response is the
sentinel -1 because the outcome is unknown, so they only ever serve as
mastery-regression targets.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PSEUDO_RESPONSE, QARecord, StudentHistory, concept_stats
from .knowledge import ConceptRelationGraph
from .llm import Gateway, ParseError, TransportError, parse_mastery

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistilledRecord:
    student: str
    step: int
    record: QARecord
    mastery: float
    credit: float

    def __post_init__(self):
        if not (0.0 <= self.mastery <= 1.0 and 0.0 <= self.credit <= 1.0):
            raise ValueError(f"mastery/credit out of range: {self.mastery}, {self.credit}")

    @property
    def pseudo(self) -> bool:
        return self.record.response == PSEUDO_RESPONSE

    def to_json(self) -> dict:
        return {"student": self.student, "step": self.step, "question": self.record.question,
                "concepts": sorted(self.record.concepts), "response": self.record.response,
                "mastery": self.mastery, "credit": self.credit, "pseudo": self.pseudo}

    @classmethod
    def from_json(cls, d: dict) -> "DistilledRecord":
        rec = cls(d["student"], int(d["step"]),
                  QARecord(d["question"], frozenset(d["concepts"]), int(d["response"])),
                  float(d["mastery"]), float(d["credit"]))
        if rec.pseudo != bool(d.get("pseudo", rec.pseudo)):
            raise ValueError("pseudo flag disagrees with response")
        return rec


@dataclass
class DistilledDataset:
    real: dict[str, list[DistilledRecord]] = field(default_factory=dict)
    pseudo: dict[str, list[DistilledRecord]] = field(default_factory=dict)
    skipped: int = 0

    def records(self, include_pseudo: bool = True) -> list[DistilledRecord]:
        out = [r for recs in self.real.values() for r in recs]
        if include_pseudo:
            out += [r for recs in self.pseudo.values() for r in recs]
        return out

    def __len__(self) -> int:
        return len(self.records())

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for student in sorted(set(self.real) | set(self.pseudo)):
                for r in self.real.get(student, []) + self.pseudo.get(student, []):
                    fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "DistilledDataset":
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    r = DistilledRecord.from_json(json.loads(line))
                    (out.pseudo if r.pseudo else out.real).setdefault(r.student, []).append(r)
        return out


def _concept_text(graph: ConceptRelationGraph, c: str) -> str:
    return graph.nodes.get(c, c)


def mastery_arguments(history: StudentHistory, target_step: int, target: QARecord,
                      graph: ConceptRelationGraph, masteries: dict[int, float],
                      include_target_record: bool = True) -> dict[str, str]:
    """Bound arguments of the mastery prompt for one (real or pseudo) target.

    The log holds every record of the student; for pseudo targets the real record
    at ``target_step`` is left out.  Earlier mastery estimates are attached to
    the steps they belong to.  The relation list only covers concepts of this
    student, to bound the prompt length.
    """
    seen = sorted({c for r in history.records for c in r.concepts} | set(target.concepts))
    sub = graph.restrict(seen)
    log = []
    for t, rec in enumerate(history.records):
        if t == target_step and not include_target_record:
            continue
        log.append({"step": t, "question": rec.question, "concepts": sorted(rec.concepts),
                    "response": rec.response, "mastery": masteries.get(t)})
    rates = []
    for c in seen:
        rate, n = concept_stats(history.records, c)
        rates.append(f"{c}: {rate:.3f} over {n} attempt(s)")
    return {
        "concepts": "\n".join(f"{c}: {_concept_text(graph, c)}" for c in seen),
        "graph": "\n".join(f"{a} <- {b}" for a, b in sorted(sub.edges)) or "(none)",
        "concept_rates": "\n".join(rates),
        "history": json.dumps(log, separators=(",", ":")),
        "target": json.dumps({"step": target_step, "question": target.question,
                              "concepts": sorted(target.concepts)}, separators=(",", ":")),
    }


def distill_student(history: StudentHistory, graph: ConceptRelationGraph,
                    gateway: Gateway) -> tuple[list[DistilledRecord], int]:
    """Mastery label for each step of one student.  Returns ``(records, skipped)``."""
    if not history.records:
        raise ValueError(f"student {history.student!r} has no records")
    out, masteries, skipped = [], {}, 0
    for t, rec in enumerate(history.records):
        args = mastery_arguments(history, t, rec, graph, masteries)
        try:
            m, s = gateway.ask("mastery", args, parse_mastery)
        except (ParseError, TransportError) as exc:
            logger.warning("student %s step %d skipped: %s", history.student, t, exc)
            skipped += 1
            continue
        masteries[t] = m
        out.append(DistilledRecord(history.student, t, rec, m, s))
    return out, skipped


def _rng(seed: int, student: str, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(student.encode("utf-8")), step])


def sample_pseudo_questions(history: StudentHistory, step: int, n: int, questions: list[str],
                            seed: int) -> list[str]:
    """``n`` distinct questions drawn uniformly, never the real question at ``step``."""
    real_q = history.records[step].question
    pool = sorted(q for q in questions if q != real_q)
    if not 1 <= n <= len(pool):
        raise ValueError(f"n must lie in [1, {len(pool)}], got {n}")
    idx = _rng(seed, history.student, step).choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def augment_pseudo(history: StudentHistory, step: int, n: int, questions: dict[str, frozenset[str]],
                   graph: ConceptRelationGraph, gateway: Gateway, seed: int,
                   masteries: dict[int, float] | None = None,
                   allow_empty: bool = False) -> tuple[list[DistilledRecord], int]:
    """Pseudo records for ``n`` random questions posed at ``step``.  Returns ``(records, skipped)``."""
    if n == 0 and allow_empty:
        return [], 0
    chosen = sample_pseudo_questions(history, step, n, list(questions), seed)
    masteries = masteries or {}
    prior = {t: m for t, m in masteries.items() if t < step}
    out, skipped = [], 0
    for q in chosen:
        rec = QARecord(q, questions[q], PSEUDO_RESPONSE)
        args = mastery_arguments(history, step, rec, graph, prior, include_target_record=False)
        try:
            m, s = gateway.ask("mastery", args, parse_mastery)
        except (ParseError, TransportError) as exc:
            logger.warning("pseudo record %s/%d/%s skipped: %s", history.student, step, q, exc)
            skipped += 1
            continue
        out.append(DistilledRecord(history.student, step, rec, m, s))
    return out, skipped


def build_distilled_dataset(train: list[StudentHistory], graph: ConceptRelationGraph,
                            gateway: Gateway, questions: dict[str, frozenset[str]],
                            n_pseudo: int = 5, every: int = 4, seed: int = 0) -> DistilledDataset:
    """Distil every training student; add ``n_pseudo`` pseudo records at every
    ``every``-th step (steps 0, every, 2*every, ...).  ``every=1`` augments all steps."""
    if every < 1:
        raise ValueError("every must be >= 1")

    def one(history: StudentHistory):
        real, skipped = distill_student(history, graph, gateway)
        pseudo = []
        if n_pseudo > 0:
            masteries = {r.step: r.mastery for r in real}
            for t in range(0, len(history.records), every):
                recs, sk = augment_pseudo(history, t, n_pseudo, questions, graph, gateway, seed, masteries)
                pseudo += recs
                skipped += sk
        return history.student, real, pseudo, skipped

    out = DistilledDataset()
    for student, real, pseudo, skipped in gateway.map(one, [h for h in train if h.records]):
        out.real[student] = real
        if pseudo:
            out.pseudo[student] = pseudo
        out.skipped += skipped
    logger.info("distilled %d real and %d pseudo records (%d skipped)",
                sum(map(len, out.real.values())), sum(map(len, out.pseudo.values())), out.skipped)
    return out
