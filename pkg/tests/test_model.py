import numpy as np
import pytest
import torch

from ldsim.data import QARecord
from ldsim.knowledge import ConceptRelationGraph
from ldsim.model import (
    Attention, GATLayer, Simulator, build_hier_graph, collate, concept_set_embedding, encode_targets,
)
from ldsim.train import prediction_losses


def test_two_concepts_one_question():
    g = build_hier_graph(ConceptRelationGraph({"a": "A", "b": "B"}, set()), {"q": frozenset({"a", "b"})})
    assert g.n_nodes == 3 and g.n_coverage_edges == 2
    assert g.edge_index.shape == (2, 4)  # each coverage edge in both directions


def test_fully_connected_ablation():
    cg = ConceptRelationGraph({"a": "A", "b": "B", "c": "C"}, {("b", "a")})
    g = build_hier_graph(cg, {"q": frozenset({"a"})}, fully_connected=True)
    assert g.prerequisites == {(x, y) for x in "abc" for y in "abc" if x != y}


def test_concepts_materialized_from_coverage():
    g = build_hier_graph(None, {"q1": frozenset({"x"}), "q2": frozenset({"x", "y"})})
    assert g.concepts == ["x", "y"] and g.questions == ["q1", "q2"]
    with pytest.raises(ValueError):
        build_hier_graph(None, {"q": frozenset()})


def test_prerequisite_message_direction():
    g = build_hier_graph(ConceptRelationGraph({"a": "A", "b": "B"}, {("b", "a")}), {"q": frozenset({"a"})})
    # b needs a, so a's features flow into b
    assert [0, 1] in g.edge_index.T.tolist()


def test_default_embedding_shapes(small_graph):
    torch.manual_seed(0)
    e_q, e_c = Simulator(small_graph).encode_graph()
    assert e_q.shape == (len(small_graph.questions), 128)
    assert e_c.shape == (len(small_graph.concepts), 128)


def test_isolated_node_keeps_its_own_features():
    torch.manual_seed(0)
    layer = GATLayer(4, 4)
    torch.nn.init.normal_(layer.bias)
    x = torch.randn(3, 4)
    edges = torch.tensor([[0, 1, 2, 0, 1], [1, 0, 2, 0, 1]])  # node 2 only sees itself
    out = layer(x, edges)
    assert torch.allclose(out[2], layer.proj(x[2]) + layer.bias, atol=1e-6)


def test_gat_permutation_equivariance():
    torch.manual_seed(1)
    layer = GATLayer(6, 6)
    n = 7
    x = torch.randn(n, 6)
    edges = torch.tensor([[0, 1, 2, 3, 4, 5, 6, 0, 2, 3], [1, 2, 0, 4, 5, 6, 3, 0, 2, 3]])
    loops = torch.arange(n).repeat(2, 1)
    edges = torch.cat([edges, loops], 1)
    perm = torch.randperm(n)
    inv = torch.empty_like(perm)
    inv[perm] = torch.arange(n)
    out = layer(x, edges)
    out_p = layer(x[perm], inv[edges])
    assert torch.allclose(out_p, out[perm], atol=1e-6)


def test_singleton_attention_is_projected_value():
    torch.manual_seed(2)
    attn = Attention(8)
    q, kv = torch.randn(8), torch.randn(1, 8)
    assert torch.allclose(attn(q, kv, kv), attn.o(attn.v(kv[0])), atol=1e-6)


def test_duplicate_key_matches_direct_attention():
    torch.manual_seed(3)
    attn = Attention(8)
    q, k = torch.randn(8), torch.randn(2, 8)
    dup = torch.cat([k, k[:1]])
    # direct computation: the duplicated key carries twice its original weight
    scores = attn.k(k) @ attn.q(q) / np.sqrt(8)
    w = torch.exp(scores) * torch.tensor([2.0, 1.0])
    expected = attn.o((w / w.sum()) @ attn.v(k))
    assert torch.allclose(attn(q, dup, dup), expected, atol=1e-6)
    same = k[:1].repeat(3, 1)
    assert torch.allclose(attn(q, same, same), attn(q, k[:1], k[:1]), atol=1e-6)


def test_contextual_concept_singleton_and_unseen(small_model):
    m = small_model
    e_c = torch.randn(m.d)
    cor, cou = torch.tensor(0.5), torch.tensor(0.0)
    z = m.contextual_concepts(e_c, cor, cou)
    u = torch.cat([m.f_cor(cor.view(1)), m.f_cou(torch.log1p(cou).view(1))])
    assert torch.isfinite(z).all()
    assert torch.allclose(z, m.concept_attn.o(m.concept_attn.v(u)), atol=1e-6)
    assert torch.equal(z, m.contextual_concepts(e_c, cor, cou))


def test_concept_set_embedding():
    z = torch.tensor([[0.0, 2.0], [2.0, 0.0]])
    assert torch.equal(concept_set_embedding(z), torch.tensor([1.0, 1.0]))
    assert torch.equal(concept_set_embedding(z[:1]), z[0])
    assert torch.equal(concept_set_embedding(torch.stack([z[0], z[0]])), z[0])
    with pytest.raises(ValueError):
        concept_set_embedding(torch.zeros(0, 2))


def batch_for(model, records, targets, rates):
    return collate([encode_targets(model.graph, records, targets, rates)])


def test_learning_state_empty_and_single(small_model, small_bench, small_rates):
    m = small_model
    qs = small_model.graph.questions
    rec = QARecord(qs[0], small_bench.dataset.questions[qs[0]], 1)
    batch = batch_for(m, [rec], [(0, qs[1]), (1, qs[1])], small_rates)
    with torch.no_grad():
        s, _ = m.states(batch)
        assert torch.equal(s[0, 0], m.empty_state)
        e_q, _ = m.encode_graph()
        u = e_q[0] + m.f_qrate(torch.tensor([small_rates[qs[0]]]))
        assert torch.allclose(s[0, 1], m.state_attn.o(m.state_attn.v(u)), atol=1e-6)


def test_argmax_tie_takes_lowest(small_model):
    probs = torch.full((3, 4), 0.25)
    assert small_model.choose_level(probs, sample=False).tolist() == [0, 0, 0]
    assert small_model.choose_level(torch.tensor([0.1, 0.4, 0.4, 0.1]), sample=False).item() == 1


def test_level_sampling_reproducible(small_model):
    probs = torch.softmax(torch.randn(50, 4), -1)
    a = small_model.choose_level(probs, True, torch.Generator().manual_seed(5))
    b = small_model.choose_level(probs, True, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_threshold():
    from ldsim.model import Forward
    prob = torch.tensor([[0.5, 0.5], [0.51, 0.49], [0.0, 1.0]])
    out = Forward(None, None, None, prob, prob.log(), None)
    assert out.r_hat.tolist() == [1, 0, 1]


def random_batch(model, bench, rates, seed):
    rng = np.random.default_rng(seed)
    items = []
    for h in bench.dataset.histories[:4]:
        n = int(rng.integers(0, len(h) + 1))
        targets = [(int(rng.integers(0, n + 1)), model.graph.questions[rng.integers(len(model.graph.questions))])
                   for _ in range(3)]
        items.append(encode_targets(model.graph, h.records[:n], targets, rates))
    return collate(items)


@pytest.mark.parametrize("seed", range(5))
def test_forward_outputs_are_sound(small_model, small_bench, small_rates, seed):
    with torch.no_grad():
        torch.nn.init.normal_(small_model.empty_state)
        out = small_model(random_batch(small_model, small_bench, small_rates, seed))
    assert torch.allclose(out.level_probs.sum(-1), torch.ones(()), atol=1e-6)
    assert torch.allclose(out.prob.sum(-1), torch.ones(()), atol=1e-6)
    assert ((out.mastery >= 0) & (out.mastery <= 1)).all()
    assert ((out.level >= 0) & (out.level < small_model.levels)).all()
    assert torch.isfinite(out.state).all()


def test_forward_is_deterministic(small_model, small_bench, small_rates):
    batch = random_batch(small_model, small_bench, small_rates, 0)
    with torch.no_grad():
        a, b = small_model(batch), small_model(batch)
    assert torch.equal(a.prob, b.prob) and torch.equal(a.mastery, b.mastery)


def test_mastery_head_range_on_extreme_states(small_model):
    s = torch.randn(100, small_model.d) * 1e3
    m = small_model.mastery_scalar(s)
    assert ((m >= 0) & (m <= 1)).all()
    assert torch.equal(m, small_model.mastery_scalar(s))


def test_finite_difference_prediction_head(small_graph, small_bench, small_rates):
    torch.set_default_dtype(torch.float64)
    try:
        torch.manual_seed(0)
        model = Simulator(small_graph, d=8, levels=3)
        h = small_bench.dataset.histories[0]
        recs = h.records[:3]
        batch = batch_for(model, recs, [(t, r.question) for t, r in enumerate(recs)], small_rates)
        y = torch.tensor([[float(r.response) for r in recs]])

        def loss():
            return prediction_losses(model, batch, y, torch.Generator().manual_seed(0))[1]

        params = list(model.pred_head.parameters())
        grads = torch.autograd.grad(loss(), params)
        eps = 1e-6
        worst = 0.0
        with torch.no_grad():
            for p, g in zip(params, grads):
                flat = p.view(-1)
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + eps
                    up = loss().item()
                    flat[i] = old - eps
                    down = loss().item()
                    flat[i] = old
                    num = (up - down) / (2 * eps)
                    ana = g.view(-1)[i].item()
                    worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
        assert worst <= 1e-4
    finally:
        torch.set_default_dtype(torch.float32)


def test_model_validation(small_graph):
    with pytest.raises(ValueError):
        Simulator(small_graph, d=7)
    with pytest.raises(ValueError):
        Simulator(small_graph, levels=1)


def test_graph_digest_changes_with_edges():
    q = {"q": frozenset({"a"})}
    g1 = build_hier_graph(ConceptRelationGraph({"a": "A", "b": "B"}, set()), q)
    g2 = build_hier_graph(ConceptRelationGraph({"a": "A", "b": "B"}, {("b", "a")}), q)
    assert g1.digest() != g2.digest()
    assert g1.digest() == build_hier_graph(ConceptRelationGraph({"b": "B", "a": "A"}, set()), q).digest()
