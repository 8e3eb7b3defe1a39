from collections import deque

import numpy as np
import pytest

from giim.graph import (
    EdgeKind,
    LesionRecord,
    NodeKind,
    PatientCase,
    build_exam_graph,
    build_lesion_graph,
    edge_counts,
    exam_label_of,
)
from giim.errors import ConfigurationError, IncompleteCaseError
from oracles import enumerate_edges


def _counts(graph):
    c = graph.edge_counts()
    return (c[EdgeKind.INTRA], c[EdgeKind.S2M], c[EdgeKind.INTER_S], c[EdgeKind.INTER_M])


class TestEdgeCounts:
    @pytest.mark.parametrize("L, V, expected", [
        (2, 3, (6, 6, 3, 1)),
        (1, 1, (0, 1, 0, 0)),
        (1, 2, (1, 2, 0, 0)),
        (4, 2, (4, 8, 12, 6)),
    ])
    def test_examples(self, L, V, expected):
        assert edge_counts(L, V) == expected

    def test_closed_form_matches_enumeration(self):
        for L in range(1, 7):
            for V in range(1, 5):
                assert edge_counts(L, V) == enumerate_edges(L, V)

    @pytest.mark.parametrize("L", range(1, 7))
    @pytest.mark.parametrize("V", range(1, 5))
    def test_graph_matches_enumeration(self, case_factory, L, V):
        g = build_lesion_graph(case_factory(L, V, 2))
        assert _counts(g) == enumerate_edges(L, V)
        assert len(g.indices(NodeKind.SINGLE)) == L * V
        assert len(g.indices(NodeKind.MULTI)) == L


class TestLesionGraph:
    def test_multi_feature_is_view_ordered_concat(self):
        case = PatientCase("p", [LesionRecord("a", 0, [[1, 2], [3, 4], [5, 6]])])
        g = build_lesion_graph(case)
        m = g.indices(NodeKind.MULTI)[0]
        np.testing.assert_array_equal(g.features[m].data, [[1, 2, 3, 4, 5, 6]])

    def test_targets_one_per_lesion(self, case_factory):
        case = case_factory(3, 2, 4)
        g = build_lesion_graph(case)
        assert [g.nodes[n].kind for n, _ in g.targets] == [NodeKind.MULTI] * 3
        assert [g.nodes[n].lesion for n, _ in g.targets] == [0, 1, 2]
        assert g.target_labels() == [les.label for les in case.lesions]

    def test_no_self_loops_and_arcs_paired(self, case_factory):
        g = build_lesion_graph(case_factory(3, 3, 2))
        arcs = {(s, d, k) for s, d, k in g.edges}
        assert len(arcs) == len(g.edges)
        for s, d, k in g.edges:
            assert s != d
            assert (d, s, k) in arcs
            assert 0 <= s < len(g.nodes) and 0 <= d < len(g.nodes)

    def test_edge_semantics(self, case_factory):
        g = build_lesion_graph(case_factory(3, 3, 2))
        for s, d, kind in g.edges:
            a, b = g.nodes[s], g.nodes[d]
            if kind == EdgeKind.INTRA:
                assert a.kind == b.kind == NodeKind.SINGLE and a.lesion == b.lesion and a.view != b.view
            elif kind == EdgeKind.S2M:
                assert {a.kind, b.kind} == {NodeKind.SINGLE, NodeKind.MULTI} and a.lesion == b.lesion
            elif kind == EdgeKind.INTER_S:
                assert a.kind == b.kind == NodeKind.SINGLE and a.view == b.view and a.lesion != b.lesion
            else:
                assert a.kind == b.kind == NodeKind.MULTI and a.lesion != b.lesion

    @pytest.mark.parametrize("L, V, c", [(1, 1, 3), (2, 3, 4), (4, 2, 5)])
    def test_widths(self, case_factory, L, V, c):
        g = build_lesion_graph(case_factory(L, V, c))
        for node, f in zip(g.nodes, g.features):
            assert f.shape == (1, c if node.kind == NodeKind.SINGLE else V * c)

    @pytest.mark.parametrize("L, V", [(1, 1), (1, 3), (3, 1), (4, 3)])
    def test_connected(self, case_factory, L, V):
        g = build_lesion_graph(case_factory(L, V, 2))
        seen, queue = {0}, deque([0])
        while queue:
            n = queue.popleft()
            for u in g.neighbors(n):
                if u not in seen:
                    seen.add(u)
                    queue.append(u)
        assert len(seen) == len(g.nodes)

    def test_permutation_consistent(self, case_factory):
        case = case_factory(4, 3, 2)
        perm = [2, 0, 3, 1]
        permuted = PatientCase(case.patient_id, [case.lesions[i] for i in perm])
        g, gp = build_lesion_graph(case), build_lesion_graph(permuted)
        assert _counts(g) == _counts(gp)
        assert gp.target_labels() == [g.target_labels()[i] for i in perm]
        for (n, _), i in zip(gp.targets, perm):
            np.testing.assert_array_equal(gp.features[n].data, g.features[g.targets[i][0]].data)

    def test_imputed_slot_used(self):
        case = PatientCase("p", [LesionRecord("a", 1, [[1.0, 1.0], None])])
        g = build_lesion_graph(case, {(0, 1): np.array([7.0, 8.0])})
        m = g.indices(NodeKind.MULTI)[0]
        np.testing.assert_array_equal(g.features[m].data, [[1, 1, 7, 8]])
        assert len(g.nodes) == 3

    def test_missing_slot_named(self):
        case = PatientCase("p9", [LesionRecord("les3", 0, [[1.0], None])])
        with pytest.raises(IncompleteCaseError, match=r"p9.*les3.*view 1"):
            build_lesion_graph(case)

    def test_no_lesions(self):
        with pytest.raises(ConfigurationError):
            build_lesion_graph(PatientCase("p", []))


class TestExamGraph:
    def _case(self, labels=(3, 5)):
        lesions = [LesionRecord("a", labels[0], [[2, 0], [1, 1]]),
                   LesionRecord("b", labels[1], [[0, 2], [5, 5]])]
        return PatientCase("p", lesions, exam_label=exam_label_of(labels))

    def test_view_node_is_mean(self):
        g = build_exam_graph(self._case())
        np.testing.assert_array_equal(g.features[0].data, [[1, 1]])
        np.testing.assert_array_equal(g.features[1].data, [[3, 3]])

    def test_multi_is_concat(self):
        g = build_exam_graph(self._case())
        np.testing.assert_array_equal(g.features[2].data, [[1, 1, 3, 3]])

    def test_exam_label_is_max(self):
        assert exam_label_of([3, 5]) == 5
        g = build_exam_graph(self._case())
        assert g.targets == [(2, 5)]

    def test_edges(self):
        g = build_exam_graph(self._case())
        c = g.edge_counts()
        assert c[EdgeKind.INTRA] == 1 and c[EdgeKind.S2M] == 2
        assert c[EdgeKind.INTER_S] == c[EdgeKind.INTER_M] == 0

    def test_partial_view_uses_available_lesions(self):
        lesions = [LesionRecord("a", 0, [[2, 2], None]), LesionRecord("b", 1, [[4, 4], [1, 3]])]
        g = build_exam_graph(PatientCase("p", lesions, exam_label=1))
        np.testing.assert_array_equal(g.features[1].data, [[1, 3]])

    def test_absent_view_needs_imputation(self):
        lesions = [LesionRecord("a", 0, [[2, 2], None])]
        case = PatientCase("p", lesions, exam_label=0)
        with pytest.raises(IncompleteCaseError):
            build_exam_graph(case)
        g = build_exam_graph(case, {1: np.zeros(2)})
        np.testing.assert_array_equal(g.features[2].data, [[2, 2, 0, 0]])

    def test_requires_exam_label(self):
        with pytest.raises(ConfigurationError):
            build_exam_graph(PatientCase("p", [LesionRecord("a", 0, [[1.0]])]))
