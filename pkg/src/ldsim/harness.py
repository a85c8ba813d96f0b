"""Simulation protocols, metrics and the environment interface for recommenders.

Multi-step rollouts feed every predicted response back into the working
history (and hence into the per-concept statistics) before predicting the
next question; ground truth past the prefix is never read.  Single-step
evaluation uses the true history before every step.
"""

from __future__ import annotations

import json
import logging
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np
import torch
from scipy.stats import rankdata

from .data import QARecord, StudentHistory
from .model import Simulator, collate, encode_targets

logger = logging.getLogger(__name__)

DEFAULT_HORIZON = 30


class UndefinedMetricError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy(predicted: Sequence[int], labels: Sequence[int]) -> float:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    if len(labels) == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float((predicted == labels).mean())


@dataclass
class RolloutResult:
    student: str
    prefix_length: int
    questions: list[str]
    predicted: list[int]
    probabilities: list[float]
    wall_time: float = 0.0


@dataclass
class EvalReport:
    mode: str
    acc: float | None
    auc: float | None
    n_predictions: int
    n_students: int
    skipped_students: int = 0
    majority_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


class _Stepper:
    """Incremental predictor over a working history; shared by rollouts and the env."""

    def __init__(self, model: Simulator, question_rates: dict[str, float], prefix: Sequence[QARecord],
                 stochastic: bool = False, seed: int = 0):
        self.model = model
        self.question_rates = question_rates
        self.records = list(prefix)
        self.stochastic = stochastic
        self.generator = torch.Generator().manual_seed(seed) if stochastic else None
        with torch.no_grad():
            self.emb = model.encode_graph()

    def step(self, question: str) -> tuple[int, float]:
        coverage = self.model.graph.coverage
        if question not in coverage:
            raise ValueError(f"unknown question {question!r}")
        rec_concepts = coverage[question]
        enc = encode_targets(self.model.graph, self.records, [(len(self.records), question)],
                             self.question_rates, self.model.use_own_response)
        with torch.no_grad():
            out = self.model(collate([enc]), sample=self.stochastic, generator=self.generator, emb=self.emb)
        p = float(out.p[0, 0])
        r_hat = int(p >= 0.5)
        self.records.append(QARecord(question, rec_concepts, r_hat))
        return r_hat, p


def multi_step_simulate(model: Simulator, prefix: Sequence[QARecord], questions: Sequence[str],
                        question_rates: dict[str, float], student: str = "",
                        stochastic: bool = False, seed: int = 0) -> RolloutResult:
    """Predict responses to ``questions`` one after another, conditioning each on
    the prefix plus the earlier predictions."""
    if not questions:
        raise ValueError("need at least one question")
    start = time.perf_counter()
    stepper = _Stepper(model, question_rates, prefix, stochastic, seed)
    preds, probs = [], []
    for q in questions:
        r_hat, p = stepper.step(q)
        preds.append(r_hat)
        probs.append(p)
    return RolloutResult(student, len(prefix), list(questions), preds, probs, time.perf_counter() - start)


def single_step_predictions(model: Simulator, histories: Iterable[StudentHistory],
                            question_rates: dict[str, float], last_n: int | None = None,
                            batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced correct-probabilities and true labels over all steps (or the
    last ``last_n`` steps) of every history."""
    items, labels = [], []
    for h in histories:
        T = len(h.records)
        start = 0 if last_n is None else max(0, T - last_n)
        targets = [(t, h.records[t].question) for t in range(start, T)]
        if not targets:
            continue
        items.append(encode_targets(model.graph, h.records, targets, question_rates, model.use_own_response))
        labels.append([h.records[t].response for t, _ in targets])
    if not items:
        return np.zeros(0), np.zeros(0, dtype=int)
    probs = []
    with torch.no_grad():
        emb = model.encode_graph()
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            out = model(collate(chunk), emb=emb)
            for b, it in enumerate(chunk):
                probs.append(out.p[b, :len(it[2])].double().numpy())
    return np.concatenate(probs), np.concatenate([np.asarray(lab) for lab in labels])


def _report(mode: str, p: np.ndarray, y: np.ndarray, pred: np.ndarray, n_students: int,
            skipped: int) -> EvalReport:
    if len(y) == 0:
        return EvalReport(mode, None, None, 0, n_students, skipped)
    try:
        a = auc(p, y)
    except UndefinedMetricError:
        a = None
    majority = float(max(y.mean(), 1 - y.mean()))
    return EvalReport(mode, accuracy(pred, y), a, int(len(y)), n_students, skipped, majority)


def single_step_eval(model: Simulator, test: Sequence[StudentHistory], question_rates: dict[str, float],
                     last_n: int | None = None) -> EvalReport:
    p, y = single_step_predictions(model, test, question_rates, last_n)
    return _report("single-step", p, y, (p >= 0.5).astype(int), len(test), 0)


def multi_step_eval(model: Simulator, test: Sequence[StudentHistory], question_rates: dict[str, float],
                    n: int = DEFAULT_HORIZON) -> EvalReport:
    """Roll out the last ``n`` steps of every test student from the earlier records.

    Students with ``n`` or fewer records are skipped.
    """
    ps, preds, ys, skipped = [], [], [], 0
    for h in test:
        if len(h.records) <= n:
            logger.info("student %s skipped: %d records, horizon %d", h.student, len(h.records), n)
            skipped += 1
            continue
        t = len(h.records) - n
        res = multi_step_simulate(model, h.records[:t], [r.question for r in h.records[t:]],
                                  question_rates, h.student)
        ps += res.probabilities
        preds += res.predicted
        ys += [r.response for r in h.records[t:]]
    return _report("multi-step", np.array(ps), np.array(ys, dtype=int), np.array(preds, dtype=int),
                   len(test), skipped)


def measure_latency(model: Simulator, history: StudentHistory, question_rates: dict[str, float],
                    n: int = DEFAULT_HORIZON, repeats: int = 5) -> dict:
    """Wall time of one rollout over the last ``n`` steps, after one warm-up run."""
    t = len(history.records) - n
    if t < 0:
        raise ValueError("history shorter than the horizon")
    prefix, questions = history.records[:t], [r.question for r in history.records[t:]]
    multi_step_simulate(model, prefix, questions, question_rates)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        multi_step_simulate(model, prefix, questions, question_rates)
        times.append(time.perf_counter() - start)
    return {"median": statistics.median(times), "mean": statistics.fmean(times),
            "stdev": statistics.stdev(times) if len(times) > 1 else 0.0, "runs": times}


class SimulatorEnv:
    """Reset/step interface for a recommender interacting with one simulated student.

    ``students`` optionally maps student ids to histories so ``reset(student=...)``
    can start from a stored history (its first ``prefix`` records, or all).
    """

    def __init__(self, model: Simulator, question_rates: dict[str, float],
                 students: dict[str, StudentHistory] | None = None,
                 stochastic: bool = False, seed: int = 0):
        self.model = model
        self.question_rates = question_rates
        self.students = students or {}
        self.stochastic = stochastic
        self.seed = seed
        self._stepper: _Stepper | None = None
        self._step = 0
        self._last: tuple[str, int] | None = None

    def reset(self, history: Sequence[QARecord] | None = None, student: str | None = None,
              prefix: int | None = None) -> dict:
        if history is None:
            if student is None:
                history = []
            elif student in self.students:
                history = self.students[student].records
            else:
                raise KeyError(f"unknown student {student!r}")
        history = list(history)[:prefix] if prefix is not None else list(history)
        self._stepper = _Stepper(self.model, self.question_rates, history, self.stochastic, self.seed)
        self._step = 0
        self._last = None
        return self.observation()

    @property
    def history(self) -> list[QARecord]:
        """Working history: the reset prefix followed by every simulated answer."""
        if self._stepper is None:
            raise ProtocolError("no history before reset()")
        return list(self._stepper.records)

    def observation(self) -> dict:
        obs = {"step": self._step, "history_length": len(self._stepper.records) if self._stepper else 0}
        if self._last is not None:
            obs["last_question"], obs["last_r_hat"] = self._last
        return obs

    def step(self, question: str) -> tuple[int, float, dict]:
        if self._stepper is None:
            raise ProtocolError("step() called before reset()")
        r_hat, p = self._stepper.step(question)
        self._step += 1
        self._last = (question, r_hat)
        return r_hat, p, self.observation()


def serve_stdio(env: SimulatorEnv, stdin: TextIO = sys.stdin, stdout: TextIO = sys.stdout) -> int:
    """Newline-delimited JSON loop: ``{"op": "reset", "student": ...}`` or
    ``{"op": "step", "question": ...}``; ``{"op": "close"}`` ends the loop."""
    handled = 0
    for line in stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            op = req.get("op")
            if op == "reset":
                hist = req.get("history")
                records = None
                if hist is not None:
                    records = [QARecord(h["question"], frozenset(h["concepts"]), int(h["response"]))
                               for h in hist]
                obs = env.reset(records, req.get("student"), req.get("prefix"))
                resp = {"step": obs["step"], "history_length": obs["history_length"]}
            elif op == "step":
                r_hat, p, obs = env.step(req["question"])
                resp = {"r_hat": r_hat, "p": p, "step": obs["step"]}
            elif op == "close":
                break
            else:
                resp = {"error": f"unknown op {op!r}"}
        except (ProtocolError, KeyError, ValueError, TypeError) as exc:
            resp = {"error": str(exc)}
        stdout.write(json.dumps(resp) + "\n")
        stdout.flush()
        handled += 1
    return handled
