"""QA-log datasets: catalogs, per-student histories, filtering, splitting and
the causal statistics consumed by the simulator network.

Identifiers (students, questions, concepts) are kept as strings exactly as they
appear in the source file.  The network maps them to dense indices later.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PSEUDO_RESPONSE = -1
NEUTRAL_RATE = 0.5

REQUIRED_COLUMNS = ("student", "question", "concepts", "response", "timestamp")

# Maximum number of concepts a question may cover, per supported schema.
SCHEMA_MAX_CONCEPTS: dict[str, int | None] = {
    "generic": None,
    "junyi": 1,
    "assist09": 6,
    "assist12": 1,
    "algebra": 6,
}

# Minimum QA records per student used when preparing each public dataset.
SCHEMA_MIN_RECORDS: dict[str, int] = {
    "generic": 1,
    "junyi": 100,
    "assist09": 50,
    "assist12": 100,
    "algebra": 100,
}


class SchemaError(ValueError):
    """The input file does not have the columns required by the schema."""


class RowValidationError(ValueError):
    """A single data row violates the record invariants."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class QARecord:
    question: str
    concepts: frozenset[str]
    response: int

    def __post_init__(self):
        if not self.concepts:
            raise ValueError(f"question {self.question!r} has an empty concept set")
        if self.response not in (0, 1, PSEUDO_RESPONSE):
            raise ValueError(f"response must be 0, 1 or -1, got {self.response!r}")

    @property
    def is_pseudo(self) -> bool:
        return self.response == PSEUDO_RESPONSE


@dataclass
class StudentHistory:
    student: str
    records: list[QARecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def prefix(self, t: int) -> list[QARecord]:
        """Records strictly before step ``t`` (0-based)."""
        return self.records[:t]


@dataclass
class Dataset:
    """Concept catalog, question catalog and the student histories."""

    concepts: dict[str, str]
    questions: dict[str, frozenset[str]]
    histories: list[StudentHistory]

    def subset(self, histories: list[StudentHistory]) -> "Dataset":
        return Dataset(self.concepts, self.questions, histories)

    @property
    def num_records(self) -> int:
        return sum(len(h) for h in self.histories)


def _parse_concepts(raw: str) -> frozenset[str]:
    return frozenset(c.strip() for c in raw.split("|") if c.strip())


def load_concept_texts(path: str | Path) -> dict[str, str]:
    """Read an ``id,text`` CSV with concept descriptions."""
    texts = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "text"} <= set(reader.fieldnames):
            raise SchemaError(f"{path}: concept file needs columns 'id' and 'text'")
        for i, row in enumerate(reader, start=1):
            text = (row["text"] or "").strip()
            if not text:
                raise RowValidationError(i, "empty concept text")
            texts[row["id"].strip()] = text
    return texts


def load_dataset(path: str | Path, schema: str = "generic",
                 concept_texts: str | Path | dict[str, str] | None = None) -> Dataset:
    """Load a QA log CSV.

    The file must have a header with the columns ``student, question, concepts,
    response, timestamp``; concepts are pipe separated.  Histories are sorted by
    timestamp, ties keep file order.  Row indices in errors count data rows from 1.
    """
    if schema not in SCHEMA_MAX_CONCEPTS:
        raise SchemaError(f"unknown schema {schema!r}; expected one of {sorted(SCHEMA_MAX_CONCEPTS)}")
    max_concepts = SCHEMA_MAX_CONCEPTS[schema]
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)

    rows: dict[str, list[tuple[float, int, QARecord]]] = {}
    questions: dict[str, frozenset[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        for i, row in enumerate(reader, start=1):
            concepts = _parse_concepts(row["concepts"] or "")
            if not concepts:
                raise RowValidationError(i, "empty concept field")
            if max_concepts is not None and len(concepts) > max_concepts:
                raise RowValidationError(
                    i, f"question {row['question']} has {len(concepts)} concepts; "
                       f"schema {schema!r} allows at most {max_concepts}")
            try:
                response = int(row["response"])
            except (TypeError, ValueError):
                raise RowValidationError(i, f"non-binary response {row['response']!r}") from None
            if response not in (0, 1):
                raise RowValidationError(i, f"non-binary response {row['response']!r}")
            try:
                ts = float(row["timestamp"])
            except (TypeError, ValueError):
                raise RowValidationError(i, f"bad timestamp {row['timestamp']!r}") from None
            question = row["question"].strip()
            known = questions.setdefault(question, concepts)
            if known != concepts:
                raise RowValidationError(i, f"question {question} listed with inconsistent concepts")
            rows.setdefault(row["student"].strip(), []).append(
                (ts, i, QARecord(question, concepts, response)))

    histories = []
    for student, items in rows.items():
        items.sort(key=lambda x: (x[0], x[1]))
        histories.append(StudentHistory(student, [rec for _, _, rec in items]))

    all_concepts = sorted({c for cs in questions.values() for c in cs})
    if isinstance(concept_texts, dict):
        texts = dict(concept_texts)
    elif concept_texts is not None:
        texts = load_concept_texts(concept_texts)
    else:
        texts = {}
    concepts = {c: texts.get(c, f"concept {c}") for c in all_concepts}
    return Dataset(concepts, questions, histories)


def save_dataset_csv(dataset: Dataset, path: str | Path) -> None:
    """Write histories back to the CSV layout; timestamps become step indices."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REQUIRED_COLUMNS)
        for h in dataset.histories:
            for t, rec in enumerate(h.records):
                writer.writerow([h.student, rec.question, "|".join(sorted(rec.concepts)),
                                 rec.response, t])


def dataset_to_json(dataset: Dataset) -> dict:
    return {
        "concepts": [{"id": c, "text": t} for c, t in sorted(dataset.concepts.items())],
        "questions": [{"id": q, "concepts": sorted(cs)} for q, cs in sorted(dataset.questions.items())],
        "histories": [
            {"student": h.student,
             "records": [[r.question, sorted(r.concepts), r.response] for r in h.records]}
            for h in dataset.histories
        ],
    }


def dataset_from_json(doc: dict) -> Dataset:
    concepts = {c["id"]: c["text"] for c in doc["concepts"]}
    questions = {q["id"]: frozenset(q["concepts"]) for q in doc["questions"]}
    histories = [
        StudentHistory(h["student"], [QARecord(q, frozenset(cs), int(r)) for q, cs, r in h["records"]])
        for h in doc["histories"]
    ]
    return Dataset(concepts, questions, histories)


def dump_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(dataset_to_json(dataset), sort_keys=True) + "\n", encoding="utf-8")


def read_dataset_dump(path: str | Path) -> Dataset:
    return dataset_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def filter_and_truncate(histories: Iterable[StudentHistory], min_records: int, max_len: int,
                        keep: str = "first") -> list[StudentHistory]:
    """Drop students with fewer than ``min_records`` records and cut the rest to
    ``max_len`` records (the first ones by default, or the last with ``keep="last"``)."""
    if min_records < 1 or max_len < 1:
        raise ValueError("min_records and max_len must be >= 1")
    if keep not in ("first", "last"):
        raise ValueError("keep must be 'first' or 'last'")
    out = []
    for h in histories:
        if len(h.records) < min_records:
            continue
        recs = h.records[:max_len] if keep == "first" else h.records[-max_len:]
        out.append(StudentHistory(h.student, list(recs)))
    return out


def parse_ratios(text: str) -> tuple[float, ...]:
    """``"8:1:1"`` -> ``(0.8, 0.1, 0.1)``."""
    parts = [float(p) for p in text.split(":")]
    total = sum(parts)
    if total <= 0 or any(p < 0 for p in parts):
        raise ValueError(f"bad split ratios {text!r}")
    return tuple(p / total for p in parts)


def split_dataset(histories: Sequence[StudentHistory], ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> tuple[list[StudentHistory], ...]:
    """Split by student into len(ratios) partitions.

    Sizes use largest-remainder rounding, so 10 students at 8:1:1 give (8, 1, 1).
    Every partition with a nonzero ratio receives at least one student.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    n = len(histories)
    nonzero = [i for i, r in enumerate(ratios) if r > 0]
    if n < len(nonzero):
        raise ValueError(f"cannot split {n} students into {len(nonzero)} non-empty partitions")

    raw = [r * n for r in ratios]
    sizes = [math.floor(x) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    # give empty non-zero partitions a student taken from the largest one
    for i in nonzero:
        if sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1

    perm = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for size in sizes:
        parts.append([histories[j] for j in perm[start:start + size]])
        start += size
    return tuple(parts)


def concept_stats(prefix: Iterable[QARecord], concept: str) -> tuple[float, int]:
    """(correct rate, attempt count) of ``concept`` over a history prefix.

    Pseudo records are ignored; an unattempted concept gets the neutral rate 0.5.
    """
    correct = count = 0
    for rec in prefix:
        if rec.is_pseudo or concept not in rec.concepts:
            continue
        count += 1
        correct += rec.response
    return (correct / count if count else NEUTRAL_RATE), count


class ConceptCounter:
    """Running per-concept (correct, attempts) counts for one student.

    Equivalent to calling :func:`concept_stats` on the growing prefix, but O(|C_t|)
    per update.  Used during rollouts where responses are the model's own predictions.
    """

    def __init__(self, records: Iterable[QARecord] = ()):
        self.correct: Counter[str] = Counter()
        self.attempts: Counter[str] = Counter()
        for rec in records:
            self.update(rec)

    def update(self, rec: QARecord) -> None:
        if rec.is_pseudo:
            return
        for c in rec.concepts:
            self.attempts[c] += 1
            self.correct[c] += rec.response

    def stats(self, concept: str) -> tuple[float, int]:
        n = self.attempts[concept]
        return (self.correct[concept] / n if n else NEUTRAL_RATE), n

    def copy(self) -> "ConceptCounter":
        out = ConceptCounter()
        out.correct = self.correct.copy()
        out.attempts = self.attempts.copy()
        return out


def question_correct_rate(train: Iterable[StudentHistory], question: str) -> float:
    correct = count = 0
    for h in train:
        for rec in h.records:
            if rec.question == question and not rec.is_pseudo:
                count += 1
                correct += rec.response
    return correct / count if count else NEUTRAL_RATE


def question_rates(train: Iterable[StudentHistory]) -> dict[str, float]:
    """Correct rate of every question seen in ``train``.  Look up unseen ones with
    ``rates.get(q, NEUTRAL_RATE)``."""
    correct: Counter[str] = Counter()
    count: Counter[str] = Counter()
    for h in train:
        for rec in h.records:
            if rec.is_pseudo:
                continue
            count[rec.question] += 1
            correct[rec.question] += rec.response
    return {q: correct[q] / n for q, n in count.items()}


def cooccurring_concepts(histories: Iterable[StudentHistory]) -> set[frozenset[str]]:
    """Unordered concept pairs that appear together in at least one student's history."""
    pairs = set()
    for h in histories:
        seen = sorted({c for rec in h.records for c in rec.concepts})
        for i, a in enumerate(seen):
            for b in seen[i + 1:]:
                pairs.add(frozenset((a, b)))
    return pairs
