import numpy as np
import pytest

from giim.autodiff import Tensor, backward, neighbor_mean, softmax_cross_entropy, tensor_sum
from giim.errors import ConfigurationError
from giim.experiments import gradcheck_baseline
from giim.graph import (
    EdgeKind,
    GraphNode,
    HeteroGraph,
    LesionRecord,
    NodeKind,
    PatientCase,
    build_exam_graph,
    build_lesion_graph,
)
from giim.model import (
    HIDDEN_WIDTHS,
    HeteroSageLayer,
    MhgModel,
    NnBaseline,
    aggregate,
    layer_forward,
    nn_baseline_forward,
    node_blocks,
)
from oracles import dense_forward, typed_mean_adjacency

S, M = NodeKind.SINGLE, NodeKind.MULTI

# (L, V) shapes whose lesion graphs have at most 8 nodes
SMALL_SHAPES = [(L, V) for L in range(1, 5) for V in range(1, 8) if L * (V + 1) <= 8]


def path_graph(rng, c=3):
    """single - multi - single, the multi node carrying a 2c feature."""
    nodes = [GraphNode(S, 0, 0), GraphNode(M, 0, None), GraphNode(S, 1, 0)]
    feats = [Tensor(rng.normal(size=c)), Tensor(rng.normal(size=2 * c)), Tensor(rng.normal(size=c))]
    edges = []
    for a, b in [(0, 1), (1, 2)]:
        edges += [(a, b, EdgeKind.S2M), (b, a, EdgeKind.S2M)]
    return HeteroGraph(nodes, feats, edges, [(1, 0)])


class TestAggregate:
    def test_identity_mean(self):
        layer = HeteroSageLayer({S: 2, M: 4}, 2, np.random.default_rng(0))
        layer.W_single.data[...] = np.eye(2)
        nodes = [GraphNode(S, 0, 0), GraphNode(S, 0, 1), GraphNode(S, 0, 2)]
        feats = [Tensor([9, 9]), Tensor([2, 0]), Tensor([0, 2])]
        edges = [(1, 0, EdgeKind.INTRA), (0, 1, EdgeKind.INTRA),
                 (2, 0, EdgeKind.INTRA), (0, 2, EdgeKind.INTRA)]
        g = HeteroGraph(nodes, feats, edges)
        agg_s, agg_m = aggregate(layer, g, dict(enumerate(feats)), 0)
        np.testing.assert_array_equal(agg_s.data, [[1, 1]])
        np.testing.assert_array_equal(agg_m.data, [[0, 0]])

    def test_path_graph_matches_dense_adjacency(self, rng):
        g = path_graph(rng)
        layer = HeteroSageLayer({S: 3, M: 6}, 5, rng)
        h = dict(enumerate(g.features))
        H_s = np.vstack([g.features[i].data for i in g.indices(S)])
        H_m = np.vstack([g.features[i].data for i in g.indices(M)])
        for dst in (S, M):
            want_s = typed_mean_adjacency(g, dst, S) @ H_s @ layer.W_single.data
            want_m = typed_mean_adjacency(g, dst, M) @ H_m @ layer.W_multi.data
            for r, n in enumerate(g.indices(dst)):
                agg_s, agg_m = aggregate(layer, g, h, n)
                np.testing.assert_allclose(agg_s.data[0], want_s[r], rtol=0, atol=1e-10)
                np.testing.assert_allclose(agg_m.data[0], want_m[r], rtol=0, atol=1e-10)

    def test_mean_operator_matches_oracle(self, case_factory):
        g = build_lesion_graph(case_factory(3, 3, 2))
        for dst in (S, M):
            for src in (S, M):
                np.testing.assert_allclose(g.mean_operator(dst, src), typed_mean_adjacency(g, dst, src),
                                           rtol=0, atol=1e-15)

    def test_neighbor_index_agrees_with_operator(self, case_factory, rng):
        g = build_lesion_graph(case_factory(3, 2, 2))
        for dst in (S, M):
            for src in (S, M):
                index, counts = g.neighbor_index(dst, src)
                x = rng.normal(size=(len(g.indices(src)), 4))
                np.testing.assert_allclose(neighbor_mean(x, index, counts).data,
                                           typed_mean_adjacency(g, dst, src) @ x, rtol=0, atol=1e-14)


class TestLayerForward:
    def test_constructed_identity(self):
        layer = HeteroSageLayer({S: 2, M: 2}, 2, np.random.default_rng(0))
        layer.W_single.data[...] = np.eye(2)
        layer.W_self[S].data[...] = np.eye(6, 2)  # selects the self part
        h_self, agg_s = np.array([1.0, -1.0]), np.array([2.0, 2.0])
        # concat = [1,-1,2,2,0,0]; select first two, ReLU
        nodes = [GraphNode(S, 0, 0), GraphNode(S, 0, 1)]
        edges = [(0, 1, EdgeKind.INTRA), (1, 0, EdgeKind.INTRA)]
        g = HeteroGraph(nodes, [Tensor(h_self), Tensor(agg_s)], edges)
        out = layer_forward(layer, g, node_blocks(g))
        np.testing.assert_array_equal(out[S].data[0], [1, 0])
        layer.W_self[S].data[...] = np.vstack([np.zeros((2, 2)), np.eye(2), np.zeros((2, 2))])
        out = layer_forward(layer, g, node_blocks(g))
        np.testing.assert_array_equal(out[S].data[0], [2, 2])

    def test_zero_weights_zero_output(self, case_factory):
        g = build_lesion_graph(case_factory(2, 2, 3))
        layer = HeteroSageLayer({S: 3, M: 6}, 4, np.random.default_rng(1))
        for p in layer.parameters():
            p.data[...] = 0.0
        out = layer_forward(layer, g, node_blocks(g))
        assert not out[S].data.any() and not out[M].data.any()


class TestForward:
    @pytest.fixture(scope="class")
    @staticmethod
    def models():
        cache = {}

        def get(c, V, C=3):
            key = (c, V, C)
            if key not in cache:
                cache[key] = MhgModel(c, V, C, seed=sum(key))
            return cache[key]
        return get

    def test_six_layers(self):
        m = MhgModel(4, 2, 3, seed=0)
        assert [l.out_width for l in m.layers] == list(HIDDEN_WIDTHS) + [3]
        assert [l.activation for l in m.layers] == [True] * 5 + [False]

    def test_distinct_neighbour_weights(self):
        m = MhgModel(4, 2, 3, hidden=(5,), seed=0)
        for layer in m.layers:
            assert layer.W_single is not layer.W_multi
            assert not np.array_equal(layer.W_single.data, layer.W_multi.data)

    @pytest.mark.parametrize("L, V", SMALL_SHAPES)
    def test_dense_oracle(self, models, rng, L, V):
        c = 3
        lesions = [LesionRecord(f"l{j}", int(rng.integers(3)), [rng.normal(size=c) for _ in range(V)])
                   for j in range(L)]
        g = build_lesion_graph(PatientCase("p", lesions))
        want, _ = dense_forward(models(c, V), g)
        np.testing.assert_allclose(models(c, V)(g).data, want, rtol=0, atol=1e-10)

    def test_dense_oracle_exam_graph(self, models, rng):
        lesions = [LesionRecord(f"l{j}", j, [rng.normal(size=3) for _ in range(2)]) for j in range(3)]
        g = build_exam_graph(PatientCase("p", lesions, exam_label=2))
        want, _ = dense_forward(models(3, 2), g)
        out = models(3, 2)(g)
        assert out.shape == (1, 3)
        np.testing.assert_allclose(out.data, want, rtol=0, atol=1e-10)

    def test_shape_contract(self, rng):
        model = MhgModel(2, 2, 4, hidden=(6, 6), seed=0)
        lesions = [LesionRecord(f"l{j}", 0, [rng.normal(size=2) for _ in range(2)]) for j in range(3)]
        assert model(build_lesion_graph(PatientCase("p", lesions))).shape == (3, 4)

    def test_width_mismatch(self, case_factory):
        model = MhgModel(4, 2, 3, hidden=(4,), seed=0)
        with pytest.raises(ConfigurationError, match="expects 4"):
            model(build_lesion_graph(case_factory(2, 2, 5)))

    @pytest.mark.parametrize("L", [2, 3, 5])
    def test_permutation_equivariance(self, rng, L):
        model = MhgModel(3, 3, 3, seed=4)
        lesions = [LesionRecord(f"l{j}", j % 3, [rng.normal(size=3) for _ in range(3)]) for j in range(L)]
        for _ in range(3):
            perm = list(rng.permutation(L))
            base = model(build_lesion_graph(PatientCase("p", lesions))).data
            permuted = model(build_lesion_graph(PatientCase("p", [lesions[i] for i in perm]))).data
            np.testing.assert_array_equal(permuted, base[perm])

    def test_type_separation(self, rng):
        model = MhgModel(3, 2, 3, hidden=(8,), seed=2)
        lesions = [LesionRecord(f"l{j}", 0, [rng.normal(size=3) for _ in range(2)]) for j in range(2)]
        g = build_lesion_graph(PatientCase("p", lesions))
        layer = model.layers[0]
        layer.W_multi.data[...] = 0.0
        h = dict(enumerate(g.features))
        single_node = g.indices(S)[0]
        multi_nbr = g.neighbors(single_node, M)[0]
        before = aggregate(layer, g, h, single_node)
        h[multi_nbr] = Tensor(rng.normal(size=6) * 100)
        after = aggregate(layer, g, h, single_node)
        np.testing.assert_array_equal(before[0].data, after[0].data)
        np.testing.assert_array_equal(after[1].data, 0.0)

    def test_deterministic(self, case_factory):
        g = build_lesion_graph(case_factory(2, 2, 3))

        def run():
            m = MhgModel(3, 2, 3, hidden=(8, 8), seed=9)
            loss = softmax_cross_entropy(m(g), g.target_labels())
            grads = backward(loss, m.parameters())
            return loss.data.tobytes(), [grads[p].tobytes() for p in m.parameters()]

        assert run() == run()

    def test_every_parameter_receives_gradient(self, case_factory):
        g = build_lesion_graph(case_factory(2, 3, 3))
        m = MhgModel(3, 3, 3, hidden=(8, 8), seed=3)
        grads = backward(tensor_sum(m(g)), m.parameters())
        # the last layer's single-node update never reaches a (multi-node) target
        unreachable = {"layer2.W_self.single", "layer2.bias.single"}
        for p in m.parameters():
            assert np.any(grads[p] != 0) == (p.name not in unreachable), p.name


class TestNnBaseline:
    def test_zero_weights(self):
        model = NnBaseline(4, 3, hidden=5)
        for p in model.parameters():
            p.data[...] = 0.0
        np.testing.assert_array_equal(nn_baseline_forward(model, np.ones((2, 4))).data, 0.0)

    def test_hidden_zero_rejected(self):
        with pytest.raises(ConfigurationError):
            NnBaseline(4, 3, hidden=0)

    def test_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            nn_baseline_forward(NnBaseline(4, 3), np.ones((1, 5)))

    def test_formula(self, rng):
        model = NnBaseline(4, 3, hidden=6, seed=1)
        model.b1.data[...] = rng.normal(size=(1, 6))
        model.b2.data[...] = rng.normal(size=(1, 3))
        x = rng.normal(size=(5, 4))
        want = np.maximum(x @ model.W1.data + model.b1.data, 0) @ model.W2.data + model.b2.data
        np.testing.assert_allclose(model(x).data, want, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        errors = gradcheck_baseline(seed)
        assert set(errors) == {"W1", "b1", "W2", "b2"}
        assert max(errors.values()) < 1e-4
