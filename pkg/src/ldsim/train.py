"""Two-stage training and checkpoints.

Stage 1 regresses the scalar mastery head onto the LLM mastery labels of real
and pseudo records.  Stage 2 trains correctness prediction with
``beta * L_c + L_p``: ``L_p`` is the binary cross-entropy of the predicted
probability, ``L_c`` rewards the sampled mastery level with its negative log
probability whenever the resulting prediction was right.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import StudentHistory
from .harness import UndefinedMetricError, accuracy, auc, single_step_predictions
from .model import Batch, HierarchicalGraph, Simulator, collate, encode_targets
from .reasoning import DistilledDataset

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ldsim-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta: float = 40.0
    d: int = 128
    levels: int = 10
    gat_layers: int = 2
    batch_size: int = 16
    stage1_epochs: int = 20
    stage2_epochs: int = 100
    patience: int = 5
    seed: int = 0
    credit_weight: bool = True
    ablate_kd: bool = False
    ablate_rd: bool = False
    state_use_own_response: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    stage: int
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None
    checkpoint: str | None = None
    skipped: bool = False

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def make_model(graph: HierarchicalGraph, config: TrainConfig) -> Simulator:
    torch.manual_seed(config.seed)
    return Simulator(graph, d=config.d, levels=config.levels, gat_layers=config.gat_layers,
                     use_own_response=config.state_use_own_response)


def _check_finite(loss: torch.Tensor, stage: int, epoch: int) -> None:
    if not torch.isfinite(loss):
        raise FloatingPointError(f"stage {stage}, epoch {epoch}: non-finite loss {loss.item()}")


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, size):
        yield order[i:i + size]


# ----------------------------------------------------------------------------- stage 1

@dataclass
class _MasteryItem:
    encoded: tuple
    mastery: np.ndarray
    credit: np.ndarray


def mastery_items(model: Simulator, distilled: DistilledDataset, histories: Sequence[StudentHistory],
                  question_rates: dict[str, float]) -> list[_MasteryItem]:
    """One item per student: every distilled (real or pseudo) record as a target."""
    by_id = {h.student: h for h in histories}
    items = []
    for student in sorted(set(distilled.real) | set(distilled.pseudo)):
        recs = distilled.real.get(student, []) + distilled.pseudo.get(student, [])
        if not recs or student not in by_id:
            continue
        targets = [(r.step, r.record.question) for r in recs]
        enc = encode_targets(model.graph, by_id[student].records, targets, question_rates,
                             model.use_own_response)
        items.append(_MasteryItem(enc, np.array([r.mastery for r in recs]), np.array([r.credit for r in recs])))
    return items


def mastery_loss(model: Simulator, batch: Batch, mastery: torch.Tensor, credit: torch.Tensor,
                 credit_weight: bool = True, emb=None) -> torch.Tensor:
    """Mean squared error between LLM mastery and the scalar head over valid
    targets, optionally weighted by the credit score."""
    s, _ = model.states(batch, emb)
    m_hat = model.mastery_scalar(s)
    w = batch.tgt_valid.to(m_hat.dtype)
    if credit_weight:
        w = w * credit
    return (w * (m_hat - mastery) ** 2).sum() / w.sum().clamp_min(1e-12)


def _stack_labels(items: list[_MasteryItem], shape) -> tuple[torch.Tensor, torch.Tensor]:
    m = np.zeros(shape)
    s = np.zeros(shape)
    for b, it in enumerate(items):
        m[b, :len(it.mastery)] = it.mastery
        s[b, :len(it.credit)] = it.credit
    f = torch.get_default_dtype()
    return torch.tensor(m, dtype=f), torch.tensor(s, dtype=f)


def evaluate_mastery_loss(model: Simulator, items: list[_MasteryItem], credit_weight: bool,
                          batch_size: int = 64) -> float:
    """Record-weighted L_b over ``items`` without gradient."""
    num = den = 0.0
    with torch.no_grad():
        emb = model.encode_graph()
        for idx in _batches(len(items), batch_size, None):
            chunk = [items[i] for i in idx]
            batch = collate([it.encoded for it in chunk])
            m, s = _stack_labels(chunk, batch.tgt_q.shape)
            w = batch.tgt_valid.to(m.dtype) * (s if credit_weight else 1.0)
            s_t, _ = model.states(batch, emb)
            num += float((w * (model.mastery_scalar(s_t) - m) ** 2).sum())
            den += float(w.sum())
    return num / den if den else float("nan")


def stage1_train(model: Simulator, distilled: DistilledDataset, train: Sequence[StudentHistory],
                 question_rates: dict[str, float], config: TrainConfig,
                 val_distilled: DistilledDataset | None = None,
                 val: Sequence[StudentHistory] | None = None) -> TrainReport:
    """Fit the mastery head (and everything upstream of it) to the LLM labels."""
    report = TrainReport(stage=1)
    if config.ablate_rd:
        report.skipped = True
        logger.info("stage 1 skipped (reasoning distillation ablated)")
        return report
    if len(distilled) == 0:
        raise ValueError("stage 1 needs a non-empty distilled dataset")
    torch.set_num_threads(config.threads)
    items = mastery_items(model, distilled, train, question_rates)
    val_items = mastery_items(model, val_distilled, val, question_rates) if val_distilled and val else []
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    if val_items:
        report.epochs.append({"epoch": 0, "val_L_b": evaluate_mastery_loss(model, val_items, config.credit_weight)})

    model.train()
    for epoch in range(1, config.stage1_epochs + 1):
        total = count = 0.0
        for idx in _batches(len(items), config.batch_size, rng):
            chunk = [items[i] for i in idx]
            batch = collate([it.encoded for it in chunk])
            m, s = _stack_labels(chunk, batch.tgt_q.shape)
            loss = mastery_loss(model, batch, m, s, config.credit_weight)
            _check_finite(loss, 1, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "L_b": total / count}
        if val_items:
            row["val_L_b"] = evaluate_mastery_loss(model, val_items, config.credit_weight)
            if report.best_metric is None or row["val_L_b"] < report.best_metric:
                report.best_metric, report.best_epoch = row["val_L_b"], epoch
        report.epochs.append(row)
        logger.info("stage 1 epoch %d: %s", epoch, row)
    model.eval()
    return report


# ----------------------------------------------------------------------------- stage 2

def response_items(model: Simulator, histories: Sequence[StudentHistory],
                   question_rates: dict[str, float]) -> list[tuple[tuple, np.ndarray]]:
    """Every real step of every student as a target, with its true response."""
    items = []
    for h in histories:
        recs = [r for r in h.records if not r.is_pseudo]
        if not recs:
            continue
        targets = [(t, r.question) for t, r in enumerate(recs)]
        enc = encode_targets(model.graph, recs, targets, question_rates, model.use_own_response)
        items.append((enc, np.array([r.response for r in recs], dtype=np.float64)))
    return items


def prediction_losses(model: Simulator, batch: Batch, responses: torch.Tensor,
                      generator: torch.Generator | None = None, emb=None):
    """``(L_c, L_p, forward)`` averaged over valid targets, levels sampled."""
    out = model(batch, sample=True, generator=generator, emb=emb)
    valid = batch.tgt_valid.to(out.p.dtype)
    n = valid.sum().clamp_min(1.0)
    bce = -(responses * out.log_prob[..., 1] + (1 - responses) * out.log_prob[..., 0])
    l_p = (bce * valid).sum() / n
    hit = (out.r_hat.to(responses.dtype) == responses).to(out.p.dtype).detach()
    log_level = torch.log(out.level_probs.gather(-1, out.level.unsqueeze(-1)).squeeze(-1).clamp_min(1e-12))
    l_c = -(hit * log_level * valid).sum() / n
    return l_c, l_p, out


def _stack_responses(chunk, shape) -> torch.Tensor:
    r = np.zeros(shape)
    for b, (_, y) in enumerate(chunk):
        r[b, :len(y)] = y
    return torch.tensor(r, dtype=torch.get_default_dtype())


def stage2_train(model: Simulator, train: Sequence[StudentHistory], question_rates: dict[str, float],
                 config: TrainConfig, val: Sequence[StudentHistory] | None = None,
                 checkpoint: str | Path | None = None) -> TrainReport:
    """Optimise ``beta * L_c + L_p`` with early stopping on validation AUC.

    The best parameters (by validation AUC) are restored at the end and saved
    to ``checkpoint`` if given.
    """
    torch.set_num_threads(config.threads)
    report = TrainReport(stage=2)
    items = response_items(model, train, question_rates)
    if not items:
        raise ValueError("stage 2 needs training records")
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    gen = torch.Generator().manual_seed(config.seed)
    best_state, stale = None, 0

    for epoch in range(1, config.stage2_epochs + 1):
        model.train()
        sums = {"L_c": 0.0, "L_p": 0.0, "L_s": 0.0}
        n = 0
        for idx in _batches(len(items), config.batch_size, rng):
            chunk = [items[i] for i in idx]
            batch = collate([enc for enc, _ in chunk])
            y = _stack_responses(chunk, batch.tgt_q.shape)
            l_c, l_p, _ = prediction_losses(model, batch, y, gen)
            loss = config.beta * l_c + l_p
            _check_finite(loss, 2, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["L_c"] += float(l_c.detach()) * len(idx)
            sums["L_p"] += float(l_p.detach()) * len(idx)
            sums["L_s"] += float(loss.detach()) * len(idx)
            n += len(idx)
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        model.eval()
        if val:
            p, yv = single_step_predictions(model, val, question_rates)
            row["val_acc"] = accuracy((p >= 0.5).astype(int), yv)
            try:
                row["val_auc"] = auc(p, yv)
            except UndefinedMetricError:
                row["val_auc"] = float("nan")
            metric = row["val_auc"]
            if report.best_metric is None or (not math.isnan(metric) and metric > report.best_metric):
                report.best_metric, report.best_epoch = metric, epoch
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
        report.epochs.append(row)
        logger.info("stage 2 epoch %d: %s", epoch, row)
        if val and stale >= config.patience:
            logger.info("early stop after epoch %d (best %d)", epoch, report.best_epoch)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, dataclasses.asdict(config))
        report.checkpoint = str(checkpoint)
    return report


# ----------------------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Simulator, path: str | Path, hyperparameters: dict | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.config,
        "graph": model.graph.to_json(),
        "graph_hash": model.graph.digest(),
        "hyperparameters": hyperparameters or {},
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path: str | Path, graph: HierarchicalGraph | None = None) -> Simulator:
    """Rebuild a :class:`Simulator`.  When ``graph`` is given its hash must match
    the one stored at save time."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an ldsim checkpoint")
    if blob["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob['version']}")
    if graph is None:
        g = blob["graph"]
        graph = HierarchicalGraph(g["concepts"], g["questions"], {tuple(e) for e in g["prerequisites"]},
                                  {q: frozenset(cs) for q, cs in g["coverage"].items()})
    if graph.digest() != blob["graph_hash"]:
        raise CheckpointError(f"{path}: graph hash mismatch (checkpoint was trained on a different graph)")
    model = Simulator(graph, **blob["model"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def checkpoint_hyperparameters(path: str | Path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    return json.loads(json.dumps(blob.get("hyperparameters", {})))
