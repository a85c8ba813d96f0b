"""The simulation network.

Questions and concepts are embedded by a graph attention network over the
concept-question graph.  For a target question at step t the model

1. embeds each of its concepts from the student's (correct rate, attempts) on it,
2. averages those contextual concept vectors,
3. attends with that average over the questions answered before t to get the
   learning state,
4. picks a discrete mastery level from the learning state, and
5. predicts correctness from (state + level embedding) concatenated with the
   target question embedding.

All per-step work is batched: a :class:`Batch` holds, for B students, the padded
answer histories and M target (step, question) pairs per student.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import NEUTRAL_RATE, QARecord
from .knowledge import ConceptRelationGraph


class HierarchicalGraph:
    """Concepts and questions as one node set.

    Node ``i < n_concepts`` is ``concepts[i]``; node ``n_concepts + j`` is
    ``questions[j]``.  ``edge_index[0]`` are message sources, ``edge_index[1]``
    targets.  A prerequisite edge (start, end) sends messages from the
    prerequisite *end* to *start*; coverage edges go both ways.  Self-loops are
    not stored here, the GAT adds them.
    """

    def __init__(self, concepts: Sequence[str], questions: Sequence[str],
                 prerequisites: set[tuple[str, str]], coverage: dict[str, frozenset[str]]):
        self.concepts = list(concepts)
        self.questions = list(questions)
        self.prerequisites = set(prerequisites)
        self.coverage = dict(coverage)
        self.concept_index = {c: i for i, c in enumerate(self.concepts)}
        self.question_index = {q: j for j, q in enumerate(self.questions)}
        if set(self.concepts) & set(self.questions):
            raise ValueError("concept and question ids must be disjoint")

        c0 = len(self.concepts)
        src, dst = [], []
        for a, b in sorted(self.prerequisites):
            src.append(self.concept_index[b])
            dst.append(self.concept_index[a])
        for q in self.questions:
            for c in sorted(self.coverage[q]):
                qi, ci = c0 + self.question_index[q], self.concept_index[c]
                src += [ci, qi]
                dst += [qi, ci]
        self.edge_index = np.array([src, dst], dtype=np.int64).reshape(2, -1)

        k = max(len(self.coverage[q]) for q in self.questions) if self.questions else 1
        self.question_concepts = np.zeros((len(self.questions), k), dtype=np.int64)
        self.question_concept_mask = np.zeros((len(self.questions), k), dtype=bool)
        for j, q in enumerate(self.questions):
            cs = sorted(self.coverage[q])
            self.question_concepts[j, :len(cs)] = [self.concept_index[c] for c in cs]
            self.question_concept_mask[j, :len(cs)] = True

    @property
    def n_nodes(self) -> int:
        return len(self.concepts) + len(self.questions)

    @property
    def n_coverage_edges(self) -> int:
        return sum(len(cs) for cs in self.coverage.values())

    def to_json(self) -> dict:
        return {"concepts": self.concepts, "questions": self.questions,
                "prerequisites": sorted(map(list, self.prerequisites)),
                "coverage": {q: sorted(self.coverage[q]) for q in self.questions}}

    def digest(self) -> str:
        doc = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()


def build_hier_graph(concept_graph: ConceptRelationGraph | None, questions: dict[str, frozenset[str]],
                     fully_connected: bool = False) -> HierarchicalGraph:
    """Combine the prerequisite graph with question coverage.

    Concepts only referenced by questions become isolated concept nodes.  With
    ``fully_connected`` every ordered concept pair is linked instead of the
    distilled prerequisites.
    """
    for q, cs in questions.items():
        if not cs:
            raise ValueError(f"question {q!r} covers no concept")
    concepts = set(concept_graph.nodes) if concept_graph is not None else set()
    concepts |= {c for cs in questions.values() for c in cs}
    concepts = sorted(concepts)
    if fully_connected:
        edges = {(a, b) for a in concepts for b in concepts if a != b}
    else:
        edges = set(concept_graph.edges) if concept_graph is not None else set()
    return HierarchicalGraph(concepts, sorted(questions), edges, questions)


def _add_self_loops(edge_index: torch.Tensor, n: int) -> torch.Tensor:
    loops = torch.arange(n, dtype=edge_index.dtype).repeat(2, 1)
    keep = edge_index[0] != edge_index[1]
    return torch.cat([edge_index[:, keep], loops], dim=1)


class GATLayer(nn.Module):
    """Single-head graph attention layer; expects self-loops in ``edge_index``."""

    def __init__(self, d_in: int, d_out: int, negative_slope: float = 0.2):
        super().__init__()
        self.proj = nn.Linear(d_in, d_out, bias=False)
        self.att_src = nn.Parameter(torch.empty(d_out))
        self.att_dst = nn.Parameter(torch.empty(d_out))
        self.bias = nn.Parameter(torch.zeros(d_out))
        self.negative_slope = negative_slope
        nn.init.xavier_uniform_(self.proj.weight)
        bound = 1.0 / math.sqrt(d_out)
        nn.init.uniform_(self.att_src, -bound, bound)
        nn.init.uniform_(self.att_dst, -bound, bound)

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        h = self.proj(x)
        src, dst = edge_index
        score = F.leaky_relu((h * self.att_src).sum(-1)[src] + (h * self.att_dst).sum(-1)[dst],
                             self.negative_slope)
        # softmax over incoming edges of each target node
        smax = torch.full((x.shape[0],), -torch.inf, dtype=score.dtype)
        smax = smax.scatter_reduce(0, dst, score, reduce="amax")
        w = torch.exp(score - smax[dst])
        denom = torch.zeros(x.shape[0], dtype=score.dtype).index_add(0, dst, w)
        alpha = w / denom[dst]
        out = torch.zeros_like(h).index_add(0, dst, alpha.unsqueeze(-1) * h[src])
        return out + self.bias


class Attention(nn.Module):
    """Single-head scaled dot-product attention with input/output projections.

    ``query``: (..., d); ``keys``/``values``: (..., T, d), broadcastable against the
    query's batch dims; ``mask``: (..., T), True where a key may be attended.
    Rows with no admissible key give NaN, callers substitute their own fallback.
    """

    def __init__(self, d: int):
        super().__init__()
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.scale = 1.0 / math.sqrt(d)

    def weights(self, query, keys, mask=None):
        scores = (self.k(keys) @ self.q(query).unsqueeze(-1)).squeeze(-1) * self.scale
        if mask is not None:
            scores = scores.masked_fill(~mask, -torch.inf)
        return torch.softmax(scores, dim=-1)

    def forward(self, query, keys, values, mask=None):
        w = self.weights(query, keys, mask)
        return self.o((w.unsqueeze(-2) @ self.v(values)).squeeze(-2))


def mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


@dataclass
class Batch:
    """Padded tensors for B students, T history slots and M targets.

    ``hist_q``/``hist_value`` describe the answered questions (value = question
    correct rate, or the student's own response); ``tgt_step`` is the number of
    history slots visible to each target.  ``tgt_cor``/``tgt_cou`` are the causal
    per-concept statistics of the target question's concepts.
    """

    hist_q: torch.Tensor        # (B, T) long
    hist_value: torch.Tensor    # (B, T) float
    tgt_q: torch.Tensor         # (B, M) long
    tgt_step: torch.Tensor      # (B, M) long
    tgt_valid: torch.Tensor     # (B, M) bool
    tgt_cor: torch.Tensor       # (B, M, K) float
    tgt_cou: torch.Tensor       # (B, M, K) float, raw counts
    tgt_cmask: torch.Tensor     # (B, M, K) bool


def encode_targets(graph: HierarchicalGraph, records: Sequence[QARecord],
                   targets: Sequence[tuple[int, str]], question_rates: dict[str, float],
                   use_own_response: bool = False):
    """Numpy arrays for one student: history slots plus (step, question) targets.

    Statistics for a target at step t use ``records[:t]`` only.  Pseudo records
    (response -1) in ``records`` are not expected; they carry no outcome.
    """
    n_c = len(graph.concepts)
    T = len(records)
    q_idx = np.array([graph.question_index[r.question] for r in records], dtype=np.int64)
    resp = np.array([r.response for r in records], dtype=np.float64)
    if use_own_response:
        value = resp.copy()
    else:
        value = np.array([question_rates.get(r.question, NEUTRAL_RATE) for r in records])

    qc, qm = graph.question_concepts, graph.question_concept_mask
    attempts = np.zeros((T + 1, n_c))
    correct = np.zeros((T + 1, n_c))
    if T:
        hit = np.zeros((T, n_c))
        for t in range(T):
            hit[t, qc[q_idx[t]][qm[q_idx[t]]]] = 1.0
        attempts[1:] = np.cumsum(hit, axis=0)
        correct[1:] = np.cumsum(hit * resp[:, None], axis=0)

    M, K = len(targets), qc.shape[1]
    tq = np.zeros(M, dtype=np.int64)
    ts = np.zeros(M, dtype=np.int64)
    cor = np.full((M, K), NEUTRAL_RATE)
    cou = np.zeros((M, K))
    cmask = np.zeros((M, K), dtype=bool)
    for i, (t, q) in enumerate(targets):
        j = graph.question_index[q]
        tq[i], ts[i] = j, t
        cs = qc[j]
        n = attempts[t, cs]
        cor[i] = np.where(n > 0, correct[t, cs] / np.maximum(n, 1), NEUTRAL_RATE)
        cou[i] = n
        cmask[i] = qm[j]
    return q_idx, value, tq, ts, cor, cou, cmask


def collate(items: list[tuple]) -> Batch:
    """Stack per-student arrays from :func:`encode_targets` into one padded batch."""
    B = len(items)
    T = max(1, max(len(it[0]) for it in items))
    M = max(1, max(len(it[2]) for it in items))
    K = items[0][4].shape[1] if items[0][4].ndim == 2 else 1
    hist_q = np.zeros((B, T), dtype=np.int64)
    hist_v = np.zeros((B, T))
    tq = np.zeros((B, M), dtype=np.int64)
    ts = np.zeros((B, M), dtype=np.int64)
    valid = np.zeros((B, M), dtype=bool)
    cor = np.full((B, M, K), NEUTRAL_RATE)
    cou = np.zeros((B, M, K))
    cmask = np.zeros((B, M, K), dtype=bool)
    cmask[..., 0] = True  # padded targets still need one concept to stay finite
    for b, (q_idx, value, t_q, t_s, c_or, c_ou, c_m) in enumerate(items):
        hist_q[b, :len(q_idx)] = q_idx
        hist_v[b, :len(value)] = value
        m = len(t_q)
        tq[b, :m], ts[b, :m], valid[b, :m] = t_q, t_s, True
        cor[b, :m], cou[b, :m], cmask[b, :m] = c_or, c_ou, c_m
    f = torch.get_default_dtype()
    return Batch(torch.from_numpy(hist_q), torch.tensor(hist_v, dtype=f), torch.from_numpy(tq),
                 torch.from_numpy(ts), torch.from_numpy(valid), torch.tensor(cor, dtype=f),
                 torch.tensor(cou, dtype=f), torch.from_numpy(cmask))


@dataclass
class Forward:
    """Per-target outputs of one forward pass (shapes (B, M, ...))."""

    state: torch.Tensor
    level_probs: torch.Tensor
    level: torch.Tensor
    prob: torch.Tensor          # (B, M, 2): [incorrect, correct]
    log_prob: torch.Tensor
    mastery: torch.Tensor

    @property
    def p(self) -> torch.Tensor:
        return self.prob[..., 1]

    @property
    def r_hat(self) -> torch.Tensor:
        return (self.p >= 0.5).long()


class Simulator(nn.Module):
    def __init__(self, graph: HierarchicalGraph, d: int = 128, levels: int = 10,
                 gat_layers: int = 2, use_own_response: bool = False):
        super().__init__()
        if d % 2:
            raise ValueError("embedding size must be even")
        if levels < 2:
            raise ValueError("need at least two mastery levels")
        self.graph = graph
        self.d, self.levels, self.use_own_response = d, levels, use_own_response
        self.n_concepts = len(graph.concepts)
        self.register_buffer("edge_index", _add_self_loops(torch.from_numpy(graph.edge_index), graph.n_nodes),
                             persistent=False)

        self.node_features = nn.Embedding(graph.n_nodes, d)
        self.gat = nn.ModuleList(GATLayer(d, d) for _ in range(gat_layers))
        self.f_cor = nn.Linear(1, d // 2)
        self.f_cou = nn.Linear(1, d // 2)
        self.f_qrate = nn.Linear(1, d)
        self.concept_attn = Attention(d)
        self.state_attn = Attention(d)
        self.empty_state = nn.Parameter(torch.zeros(d))
        self.level_classifier = mlp(d, d, levels)
        self.level_embedding = nn.Embedding(levels, d)
        self.mastery_head = mlp(d, d, 1)
        self.pred_head = mlp(2 * d, d, 2)
        nn.init.normal_(self.node_features.weight, std=0.1)
        nn.init.normal_(self.level_embedding.weight, std=0.1)

    @property
    def config(self) -> dict:
        return {"d": self.d, "levels": self.levels, "gat_layers": len(self.gat),
                "use_own_response": self.use_own_response}

    def encode_graph(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(question embeddings, concept embeddings)."""
        x = self.node_features.weight
        for i, layer in enumerate(self.gat):
            x = layer(x, self.edge_index)
            if i < len(self.gat) - 1:
                x = F.elu(x)
        return x[self.n_concepts:], x[:self.n_concepts]

    def contextual_concepts(self, e_c: torch.Tensor, cor: torch.Tensor, cou: torch.Tensor) -> torch.Tensor:
        """One contextual vector per concept slot: attention from the concept
        embedding onto its single (rate, log-count) key/value."""
        u = torch.cat([self.f_cor(cor.unsqueeze(-1)), self.f_cou(torch.log1p(cou).unsqueeze(-1))], -1)
        u = u.unsqueeze(-2)
        return self.concept_attn(e_c, u, u)

    def learning_state(self, z_bar, keys, values, visible) -> torch.Tensor:
        """Attention from ``z_bar`` over visible history slots; the learned
        empty-history vector where nothing is visible."""
        has_any = visible.any(-1, keepdim=True)
        safe = visible | ~has_any
        s = self.state_attn(z_bar, keys, values, safe)
        return torch.where(has_any, s, self.empty_state.expand_as(s))

    def states(self, batch: Batch, emb: tuple[torch.Tensor, torch.Tensor] | None = None):
        """Learning states (B, M, d) and question embeddings of the targets."""
        E_q, E_c = emb if emb is not None else self.encode_graph()
        qc = torch.from_numpy(self.graph.question_concepts)[batch.tgt_q]      # (B, M, K)
        z = self.contextual_concepts(E_c[qc], batch.tgt_cor, batch.tgt_cou)   # (B, M, K, d)
        w = batch.tgt_cmask.to(z.dtype).unsqueeze(-1)
        z_bar = (z * w).sum(-2) / w.sum(-2)

        keys = E_q[batch.hist_q]                                              # (B, T, d)
        values = keys + self.f_qrate(batch.hist_value.unsqueeze(-1))
        T = batch.hist_q.shape[1]
        visible = torch.arange(T) < batch.tgt_step.unsqueeze(-1)              # (B, M, T)
        s = self.learning_state(z_bar, keys.unsqueeze(1), values.unsqueeze(1), visible)
        return s, E_q[batch.tgt_q]

    def level_distribution(self, s: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.level_classifier(s), dim=-1)

    def choose_level(self, probs: torch.Tensor, sample: bool, generator: torch.Generator | None = None):
        if not sample:
            return probs.argmax(-1)  # first maximum on ties
        flat = probs.detach().reshape(-1, probs.shape[-1])
        k = torch.multinomial(flat, 1, generator=generator)
        return k.reshape(probs.shape[:-1])

    def predict_from(self, s, level, e_q):
        h = torch.cat([s + self.level_embedding(level), e_q], dim=-1)
        logits = self.pred_head(h)
        return torch.softmax(logits, -1), torch.log_softmax(logits, -1)

    def mastery_scalar(self, s: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mastery_head(s).squeeze(-1))

    def forward(self, batch: Batch, sample: bool = False, generator: torch.Generator | None = None,
                emb=None) -> Forward:
        s, e_q = self.states(batch, emb)
        probs = self.level_distribution(s)
        level = self.choose_level(probs, sample, generator)
        prob, log_prob = self.predict_from(s, level, e_q)
        return Forward(s, probs, level, prob, log_prob, self.mastery_scalar(s))


def concept_set_embedding(z: torch.Tensor) -> torch.Tensor:
    """Mean of the contextual concept vectors ``z`` (n, d)."""
    if z.shape[0] == 0:
        raise ValueError("empty concept set")
    return z.mean(0)
