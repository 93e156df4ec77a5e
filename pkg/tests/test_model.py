import numpy as np
import pytest

from conftest import model_gradient_errors
from qgnntrack import autodiff as ad
from qgnntrack.autodiff import Tensor
from qgnntrack.events import SynthConfig, synth_event
from qgnntrack.graphs import EventGraph, build_graph, graph_from_event
from qgnntrack.model import (
    FEATURE_SCALE, VARIANTS, ForwardStats, GNNParams, count_params, edge_network, get_variant, gnn_forward,
    init_params, input_net, node_network, predict,
)
from qgnntrack.train import bce_loss

FAST = ["original_cgnn", "original_qgnn", "upgraded_cgnn", "upgraded_qgnn"]


def chain_graph(n, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.linspace(30, 1000, n), rng.uniform(-0.1, 0.1, n), rng.uniform(-200, 200, n)])
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return EventGraph(X, edges, rng.integers(0, 2, n - 1).astype(float), np.arange(n),
                      np.ones(n, dtype=np.int64), np.arange(1, n + 1))


def permuted(graph, node_perm, edge_perm):
    """Relabel nodes (new ``j`` is old ``node_perm[j]``) and reorder edges."""
    inv = np.argsort(node_perm)
    edges = inv[graph.edges[edge_perm]]
    return EventGraph(graph.X[node_perm], edges, graph.y[edge_perm], graph.layer_index[node_perm],
                      graph.particle_id[node_perm], graph.hit_id[node_perm])


def union(a, b):
    n = a.n_nodes
    return EventGraph(np.vstack([a.X, b.X]), np.vstack([a.edges, b.edges + n]), np.concatenate([a.y, b.y]),
                      np.concatenate([a.layer_index, b.layer_index]), np.concatenate([a.particle_id, b.particle_id]),
                      np.concatenate([a.hit_id, b.hit_id + 10**6]))


class TestVariants:
    def test_counts(self):
        assert count_params("upgraded_cgnn") == (37505, 0)
        assert count_params("upgraded_qgnn") == (37505, 48)
        assert count_params("parallel_qgnn") == (37505, 96)
        assert count_params("original_cgnn") == (129, 0)
        assert count_params("original_qgnn") == (129, 32)

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown variant"):
            get_variant("deep_gnn")

    def test_checkpoint_keys_validated(self, rng):
        arrays = init_params("original_cgnn", rng).arrays()
        back = GNNParams.from_arrays("original_cgnn", arrays)
        assert set(back.tensors) == set(arrays)
        with pytest.raises(ValueError, match="do not match"):
            GNNParams.from_arrays("upgraded_cgnn", arrays)
        arrays["input_net.dense0.bias"] = np.zeros(7)
        with pytest.raises(ValueError, match="shape"):
            GNNParams.from_arrays("original_cgnn", arrays)

    def test_bad_feature_scale(self, rng):
        with pytest.raises(ValueError):
            init_params("original_cgnn", rng, feature_scale=(1.0, 0.0, 1.0))


class TestStructure:
    @pytest.mark.parametrize("variant", list(VARIANTS))
    def test_blocks_and_circuits(self, variant, small_graph, rng):
        params = init_params(variant, rng)
        stats = ForwardStats()
        out = gnn_forward(small_graph, params, stats)
        assert out.shape == (small_graph.n_edges, 1)
        assert np.all((out.value > 0) & (out.value < 1))
        assert (stats.edge_blocks, stats.node_blocks, stats.blocks) == (4, 3, 7)
        expected = 3 * small_graph.n_nodes + 4 * small_graph.n_edges if params.variant.quantum else 0
        assert stats.circuits == expected

    def test_no_iterations(self, small_graph, rng):
        params = init_params(get_variant("upgraded_cgnn").with_iterations(0), rng)
        stats = ForwardStats()
        out = gnn_forward(small_graph, params, stats)
        H0 = input_net(small_graph.X, params)
        assert np.array_equal(out.value, edge_network(H0, small_graph.R_i, small_graph.R_o, params).value)
        assert stats.blocks == 1

    @pytest.mark.parametrize("variant", ["upgraded_cgnn", "upgraded_qgnn"])
    def test_zero_residual_is_identity(self, variant, small_graph, rng):
        params = init_params(variant, rng, zero_residual=True)
        H0 = input_net(small_graph.X, params)
        e = edge_network(H0, small_graph.R_i, small_graph.R_o, params)
        H1 = node_network(H0, e, small_graph.R_i, small_graph.R_o, H0, params)
        assert np.array_equal(H1.value, H0.value)
        assert np.array_equal(gnn_forward(small_graph, params).value, e.value)

    def test_empty_graph(self, rng):
        g = build_graph([])
        assert gnn_forward(g, init_params("upgraded_cgnn", rng)).shape == (0, 1)

    def test_isolated_node_changes_nothing(self, rng):
        g = chain_graph(5)
        extra = EventGraph(np.vstack([g.X, [[500.0, 2.0, 10.0]]]), g.edges, g.y, np.append(g.layer_index, 2),
                           np.append(g.particle_id, 9), np.append(g.hit_id, 99))
        for variant in FAST:
            params = init_params(variant, np.random.default_rng(5))
            assert np.array_equal(predict(extra, params), predict(g, params))

    def test_zero_scores_silence_messages(self, rng):
        g = chain_graph(6)
        params = init_params("original_cgnn", rng)
        H = input_net(g.X, params)
        zeros = Tensor(np.zeros((g.n_edges, 1)))
        lone = EventGraph(g.X, np.zeros((0, 2), dtype=np.int64), np.zeros(0), g.layer_index, g.particle_id, g.hit_id)
        a = node_network(H, zeros, g.R_i, g.R_o, H, params).value
        b = node_network(H, Tensor(np.zeros((0, 1))), lone.R_i, lone.R_o, H, params).value
        assert np.array_equal(a, b)


def test_hand_computed_forward(rng):
    """Two nodes, one edge, one iteration of the small classical model, written out in numpy."""
    g = chain_graph(2)
    params = init_params(get_variant("original_cgnn").with_iterations(1), rng)
    for t in params.tensors.values():
        t.value[...] = rng.normal(scale=0.7, size=t.shape)
    P = params.arrays()

    def lin(x, name):
        return x @ P[f"{name}.weight"] + P[f"{name}.bias"]

    def sig(x):
        return 1 / (1 + np.exp(-x))

    def edge(H):
        h = np.tanh(lin(np.concatenate([H[0], H[1]]), "edge_net.encoder.dense0"))
        return sig(lin(h, "edge_net.readout.dense0"))[0]

    H0 = np.tanh(lin(g.X / np.array(FEATURE_SCALE), "input_net.dense0"))
    e0 = edge(H0)
    zero = np.zeros(4)
    inputs = np.array([np.concatenate([e0 * H0[1], zero, H0[0]]), np.concatenate([zero, e0 * H0[0], H0[1]])])
    H1 = np.tanh(lin(np.tanh(lin(inputs, "node_net.encoder.dense0")), "node_net.readout.dense0"))
    assert predict(g, params)[0] == pytest.approx(edge(H1), abs=1e-14)


def _random_graphs(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        g = graph_from_event(synth_event(SynthConfig(seed=int(rng.integers(10**6))), int(rng.integers(1, 4))))
        if 0 < g.n_edges <= 80:
            out.append(g)
    return out


class TestSymmetry:
    @pytest.mark.parametrize("variant, n_graphs", [(v, 20) for v in FAST] + [("parallel_qgnn", 2)])
    def test_permutation_equivariance(self, variant, n_graphs):
        rng = np.random.default_rng(17)
        params = init_params(variant, rng)
        worst = 0.0
        for g in _random_graphs(n_graphs, 3):
            node_perm, edge_perm = rng.permutation(g.n_nodes), rng.permutation(g.n_edges)
            base = predict(g, params)
            worst = max(worst, np.max(np.abs(predict(permuted(g, node_perm, edge_perm), params) - base[edge_perm])))
        assert worst <= 1e-10

    @pytest.mark.parametrize("variant", FAST)
    def test_disconnected_components(self, variant, rng):
        a, b = _random_graphs(2, 8)
        params = init_params(variant, rng)
        before = predict(union(a, b), params)[: a.n_edges]
        moved = EventGraph(b.X + rng.normal(size=b.X.shape) * [5.0, 0.01, 5.0], b.edges, b.y, b.layer_index,
                           b.particle_id, b.hit_id)
        after = predict(union(a, moved), params)[: a.n_edges]
        assert np.max(np.abs(after - before)) <= 1e-12
        assert np.max(np.abs(before - predict(a, params))) <= 1e-12

    @pytest.mark.parametrize("n_iter", [0, 1, 2, 3])
    def test_receptive_field(self, n_iter):
        # the first edge of a chain sees nodes up to n_iter + 1 hops from node 0
        g = chain_graph(10)
        params = init_params(get_variant("upgraded_cgnn").with_iterations(n_iter), np.random.default_rng(2))
        base = predict(g, params)[0]

        def nudged(node):
            X = g.X.copy()
            X[node] += [20.0, 0.02, 20.0]
            return predict(EventGraph(X, g.edges, g.y, g.layer_index, g.particle_id, g.hit_id), params)[0]

        assert abs(nudged(n_iter + 2) - base) <= 1e-12
        assert abs(nudged(n_iter + 1) - base) > 1e-9


class TestGradients:
    @pytest.mark.parametrize("variant", ["original_cgnn", "original_qgnn"])
    def test_small_models_every_entry(self, variant, small_graph):
        plain, refined, inert = model_gradient_errors(small_graph, init_params(variant, np.random.default_rng(0)),
                                                      bce_loss)
        assert plain.max() <= 1e-5 and refined.max() <= 1e-5
        assert len(plain) + len(inert) == sum(count_params(variant))

    def test_upgraded_classical_sampled(self, small_graph):
        plain, _, _ = model_gradient_errors(small_graph, init_params("upgraded_cgnn", np.random.default_rng(0)),
                                            bce_loss, max_entries=30, rng=np.random.default_rng(0))
        assert plain.max() <= 1e-5

    @pytest.mark.parametrize("variant", ["upgraded_qgnn", "parallel_qgnn"])
    def test_quantum_sampled_richardson(self, variant, small_graph):
        # amplitude normalization of small encoder outputs gives large third derivatives;
        # the extrapolated difference removes the leading truncation term
        n = 30 if variant == "upgraded_qgnn" else 6
        _, refined, inert = model_gradient_errors(small_graph, init_params(variant, np.random.default_rng(0)),
                                                  bce_loss, max_entries=n, rng=np.random.default_rng(0))
        assert refined.max() <= 1e-5
        assert np.all(inert <= 1e-12)

    def test_shared_blocks_accumulate(self, small_graph, rng):
        params = init_params("original_cgnn", rng)
        ad.backward(bce_loss(gnn_forward(small_graph, params), small_graph.y))
        one_pass = get_variant("original_cgnn").with_iterations(0)
        single = GNNParams.from_arrays(one_pass, params.arrays())
        ad.backward(bce_loss(gnn_forward(small_graph, single), small_graph.y))
        # with three more rounds the shared edge block collects more than one application's gradient
        assert not np.allclose(params["edge_net.readout.dense0.bias"].grad, single["edge_net.readout.dense0.bias"].grad)
        assert not single["node_net.encoder.dense0.weight"].grad.any()
