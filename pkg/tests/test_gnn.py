import numpy as np
import pytest
import scipy.sparse as sp

from octagraph import autodiff as ad
from octagraph import gnn, hetero
from octagraph.autodiff import Tensor
from octagraph.errors import NumericError
from octagraph.train import AdamW
from toys import toy_dataset, toy_graph


def normalised(graphs):
    stats = hetero.fit_norm_stats(graphs)
    return [hetero.normalize(g, stats) for g in graphs]


def test_parameter_budget():
    model = gnn.HeteroGNN()
    assert model.num_parameters() <= gnn.MAX_PARAMETERS
    with pytest.raises(ValueError):
        gnn.HeteroGNN(gnn.ModelConfig(hidden_dim=64))


def _two_vessel_batch(edges):
    adj = {"VES<-VES": gnn._aggregation_matrix(
        np.array([a for a, b in edges] + [b for a, b in edges]),
        np.array([b for a, b in edges] + [a for a, b in edges]), 2, 2, True)}
    return gnn.Batch({}, adj, {}, 1)


def test_message_pass_identity_without_edges():
    cfg = gnn.ModelConfig(hidden_dim=2, relations=("VES_VES",))
    model = gnn.HeteroGNN(cfg)
    model.params["mp.0.VES<-VES.weight"].data = np.hstack([np.eye(2), np.zeros((2, 2))])
    h = np.array([[1.5, -2.0], [-0.5, 3.0]])
    hs = {hetero.VES: Tensor(h), hetero.ICA: Tensor(np.zeros((0, 2))), hetero.FAZ: Tensor(np.zeros((0, 2)))}
    out = model.message_pass(_two_vessel_batch([]), hs, 0)
    np.testing.assert_array_equal(out[hetero.VES].data, np.maximum(h, 0))


def test_message_pass_two_vessel_hand_computation():
    cfg = gnn.ModelConfig(hidden_dim=2, relations=("VES_VES",))
    model = gnn.HeteroGNN(cfg)
    w = np.array([[1.0, 0.5, -1.0, 2.0], [0.0, -1.0, 1.0, 1.0]])
    model.params["mp.0.VES<-VES.weight"].data = w
    h = np.array([[1.0, 2.0], [3.0, -1.0]])
    hs = {hetero.VES: Tensor(h), hetero.ICA: Tensor(np.zeros((0, 2))), hetero.FAZ: Tensor(np.zeros((0, 2)))}
    out = model.message_pass(_two_vessel_batch([(0, 1)]), hs, 0)[hetero.VES].data
    # node 0: (h0, h1) = (1, 2, 3, -1) -> (1 + 1 - 3 - 2, 0 - 2 + 3 - 1) = (-3, 0)
    # node 1: (h1, h0) = (3, -1, 1, 2) -> (3 - 0.5 - 1 + 4, 0 + 1 + 1 + 2) = (5.5, 4)
    np.testing.assert_allclose(out, [[0.0, 0.0], [5.5, 4.0]])


def test_relation_sum_over_channels():
    cfg = gnn.ModelConfig(hidden_dim=1, relations=("VES_VES", "VES_ICA"))
    model = gnn.HeteroGNN(cfg)
    model.params["mp.0.VES<-VES.weight"].data = np.array([[1.0, 1.0]])
    model.params["mp.0.VES<-ICA.weight"].data = np.array([[0.0, 2.0]])
    adj = {
        "VES<-VES": sp.csr_matrix(np.zeros((1, 1))),
        "VES<-ICA": sp.csr_matrix(np.array([[0.5, 0.5]])),
        "ICA<-VES": sp.csr_matrix(np.array([[1.0], [1.0]])),
    }
    hs = {hetero.VES: Tensor([[2.0]]), hetero.ICA: Tensor([[1.0], [3.0]]), hetero.FAZ: Tensor(np.zeros((0, 1)))}
    out = model.message_pass(gnn.Batch({}, adj, {}, 1), hs, 0)
    # vessel: relu(2 + 0) + relu(2 * mean(1, 3)) = 2 + 4
    assert out[hetero.VES].data[0, 0] == pytest.approx(6.0)


def test_eval_is_deterministic():
    graphs = normalised(toy_dataset(0, 6))
    model = gnn.HeteroGNN(seed=3)
    b = gnn.collate(graphs, model.cfg)
    assert model.forward(b).data.tobytes() == model.forward(b).data.tobytes()


def test_zero_features_give_uniform_probabilities():
    g = toy_graph(np.random.default_rng(0), 1)
    for t in hetero.NODE_TYPES:
        g.nodes[t].norm = np.zeros_like(g.nodes[t].raw)
    model = gnn.HeteroGNN(seed=1)
    (pred,) = model.predict([g])
    np.testing.assert_allclose(pred.probabilities, 1 / 3, atol=1e-12)


def _permuted(g, rng):
    perms = {t: rng.permutation(g.num_nodes(t)) for t in hetero.NODE_TYPES}
    inv = {t: np.argsort(p) for t, p in perms.items()}
    nodes = {t: hetero.NodeSet(g.nodes[t].raw[perms[t]], [g.nodes[t].masks[i] for i in perms[t]],
                               g.nodes[t].norm[perms[t]]) for t in hetero.NODE_TYPES}
    edges = {}
    for rel, (a, b) in hetero.RELATION_TYPES.items():
        e = g.edges[rel]
        e = np.stack([inv[a][e[:, 0]], inv[b][e[:, 1]]], axis=1) if len(e) else e
        if a == b and len(e):
            e = np.sort(e, axis=1)
        edges[rel] = e
    return hetero.HeteroGraph(nodes, edges, g.label, g.meta)


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    graphs = normalised(toy_dataset(2, 5))
    model = gnn.HeteroGNN(seed=2)
    base = model.forward(gnn.collate(graphs, model.cfg)).data
    shuffled = [_permuted(g, rng) for g in graphs]
    np.testing.assert_allclose(model.forward(gnn.collate(shuffled, model.cfg)).data, base, atol=1e-9, rtol=0)


def test_predictions_are_normalised():
    graphs = normalised(toy_dataset(4, 20))
    for p in gnn.HeteroGNN(seed=4).predict(graphs):
        assert abs(p.probabilities.sum() - 1) <= 1e-9
        assert np.argmax(p.probabilities) == np.argmax(p.logits) == p.predicted_class


def test_full_model_gradients():
    graphs = normalised(toy_dataset(6, 3))
    model = gnn.HeteroGNN(gnn.ModelConfig(hidden_dim=4, dropout=0.0), seed=0)
    b = gnn.collate(graphs, model.cfg)
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def loss():
        model.buffers.update({k: v.copy() for k, v in buffers.items()})
        return ad.cross_entropy(model.forward(b, train=True), b.labels)

    model.zero_grad()
    loss().backward()
    for name in ["pre.vessel.0.weight", "pre.faz.1.bn.gamma", "mp.1.ICA<-FAZ.weight", "post.ica.0.bias", "head.0.weight"]:
        p = model.params[name]
        (num,) = ad.numeric_gradient(lambda: loss().data, [p.data])
        # a bias feeding batch-norm has an exactly zero gradient, hence the floor
        err = np.linalg.norm(num - p.grad) / max(np.linalg.norm(num), np.linalg.norm(p.grad), 1e-6)
        assert err <= 1e-4, name


def test_ablated_forward_is_well_defined():
    graphs = normalised(toy_dataset(7, 4))
    for keep in hetero.ABLATIONS.values():
        model = gnn.HeteroGNN(gnn.ModelConfig(relations=keep), seed=0)
        logits = model.forward(gnn.collate(graphs, model.cfg)).data
        assert logits.shape == (4, 3) and np.all(np.isfinite(logits))


def test_single_graph_overfit():
    (g,) = normalised([toy_graph(np.random.default_rng(9), 2, nv=12, ni=6)])
    model = gnn.HeteroGNN(seed=0)
    opt = AdamW(model.params, 1e-3, 0.9, 0.999, 1e-8, 1e-4)
    rng = np.random.default_rng(0)
    b = gnn.collate([g], model.cfg)
    for _ in range(500):
        model.zero_grad()
        ad.cross_entropy(model.forward(b, train=True, rng=rng), b.labels).backward()
        opt.step()
    assert float(ad.cross_entropy(model.forward(b), b.labels).data) < 0.01


def test_rejects_bad_inputs():
    g = toy_graph(np.random.default_rng(0), 0)
    model = gnn.HeteroGNN()
    with pytest.raises(ValueError):
        gnn.collate([g], model.cfg)  # not normalised
    (g,) = normalised([g, toy_graph(np.random.default_rng(1), 1)])[:1]
    g.nodes[hetero.VES].norm[0, 0] = np.nan
    with pytest.raises(NumericError):
        model.predict([g])
