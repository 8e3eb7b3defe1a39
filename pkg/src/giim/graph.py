"""Per-sample multi-heterogeneous graphs.

A lesion-level graph has one SINGLE node per (lesion, view) and one MULTI
node per lesion whose feature is the concatenation of that lesion's view
features. Four edge families connect them:

* INTRA   -- different views of the same lesion
* S2M     -- a single-view node to its lesion's multi-view node
* INTER_S -- the same view of different lesions
* INTER_M -- multi-view nodes of different lesions

Every undirected relation is stored as two directed arcs. The exam-level
variant (mammography) has one SINGLE node per view holding the mean of the
lesion features seen in that view, plus one MULTI node.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, concat, mean_rows
from .errors import ConfigurationError, IncompleteCaseError


class NodeKind(str, enum.Enum):
    SINGLE = "single"
    MULTI = "multi"


class EdgeKind(str, enum.Enum):
    INTRA = "intra"
    S2M = "s2m"
    INTER_S = "inter_s"
    INTER_M = "inter_m"


@dataclass
class LesionRecord:
    """One lesion: its label and one feature row per view (``None`` = absent)."""

    lesion_id: str
    label: int
    features: list

    def __post_init__(self):
        self.features = [None if f is None else np.asarray(f, dtype=np.float64).reshape(-1)
                         for f in self.features]

    @property
    def present_views(self) -> list:
        return [v for v, f in enumerate(self.features) if f is not None]


@dataclass
class PatientCase:
    patient_id: str
    lesions: list
    exam_label: Optional[int] = None

    @property
    def n_views(self) -> int:
        return len(self.lesions[0].features)

    def is_complete(self) -> bool:
        return all(f is not None for les in self.lesions for f in les.features)

    def missing_slots(self) -> list:
        return [(j, v) for j, les in enumerate(self.lesions)
                for v, f in enumerate(les.features) if f is None]


@dataclass(frozen=True)
class GraphNode:
    kind: NodeKind
    lesion: Optional[int]
    view: Optional[int]


@dataclass
class HeteroGraph:
    nodes: list
    features: list
    edges: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    _neighbor_index: Optional[dict] = field(default=None, repr=False, compare=False)

    def indices(self, kind: NodeKind) -> list:
        return [i for i, n in enumerate(self.nodes) if n.kind == kind]

    def neighbors(self, node: int, kind: Optional[NodeKind] = None) -> list:
        out = [dst for src, dst, _ in self.edges if src == node]
        if kind is not None:
            out = [u for u in out if self.nodes[u].kind == kind]
        return out

    def arc_counts(self) -> dict:
        counts = {k: 0 for k in EdgeKind}
        for _, _, kind in self.edges:
            counts[kind] += 1
        return counts

    def edge_counts(self) -> dict:
        """Undirected edge count per family."""
        return {k: n // 2 for k, n in self.arc_counts().items()}

    def mean_operator(self, dst_kind: NodeKind, src_kind: NodeKind) -> np.ndarray:
        """Row-normalised adjacency from ``src_kind`` nodes into ``dst_kind`` nodes.

        Row ``i`` averages over the ``src_kind`` neighbours of the i-th
        ``dst_kind`` node; a node with no such neighbour gets a zero row.
        """
        dst = self.indices(dst_kind)
        src = self.indices(src_kind)
        dst_pos = {n: i for i, n in enumerate(dst)}
        src_pos = {n: i for i, n in enumerate(src)}
        op = np.zeros((len(dst), len(src)))
        for s, d, _ in self.edges:
            if s in src_pos and d in dst_pos:
                op[dst_pos[d], src_pos[s]] = 1.0
        deg = op.sum(axis=1, keepdims=True)
        np.divide(op, deg, out=op, where=deg > 0)
        return op

    def neighbor_index(self, dst_kind: NodeKind, src_kind: NodeKind) -> tuple:
        """``(index, counts)`` listing, per ``dst_kind`` node, the rows of its ``src_kind`` neighbours.

        Rows are positions within the ``src_kind`` block; ``index`` is padded
        to the largest count.
        """
        dst = self.indices(dst_kind)
        src_pos = {n: i for i, n in enumerate(self.indices(src_kind))}
        dst_pos = {n: i for i, n in enumerate(dst)}
        lists = [[] for _ in dst]
        for s, d, _ in self.edges:
            if s in src_pos and d in dst_pos:
                lists[dst_pos[d]].append(src_pos[s])
        counts = np.array([len(x) for x in lists], dtype=np.intp)
        index = np.zeros((len(dst), int(counts.max(initial=0))), dtype=np.intp)
        for i, x in enumerate(lists):
            index[i, :len(x)] = x
        return index, counts

    def target_labels(self) -> list:
        return [label for _, label in self.targets]


def edge_counts(n_lesions: int, n_views: int) -> tuple:
    """Undirected (intra, s2m, inter_s, inter_m) counts of a lesion-level graph."""
    L, V = n_lesions, n_views
    return (L * V * (V - 1) // 2, L * V, V * L * (L - 1) // 2, L * (L - 1) // 2)


def _link(edges: list, a: int, b: int, kind: EdgeKind):
    edges.append((a, b, kind))
    edges.append((b, a, kind))


def build_lesion_graph(case: PatientCase, imputed: Optional[Mapping] = None) -> HeteroGraph:
    """Lesion-level graph with one target (MULTI node, lesion label) per lesion.

    ``imputed`` maps ``(lesion index, view)`` to a stand-in feature for every
    absent slot; it may hold tensors that require gradients.
    """
    imputed = imputed or {}
    if not case.lesions:
        raise ConfigurationError(f"patient {case.patient_id!r} has no lesions")
    V = case.n_views
    nodes, feats, edges = [], [], []
    single = {}
    for j, lesion in enumerate(case.lesions):
        if len(lesion.features) != V:
            raise ConfigurationError(
                f"lesion {lesion.lesion_id!r} has {len(lesion.features)} views, expected {V}")
        for v, f in enumerate(lesion.features):
            if f is not None:
                feat = Tensor(f)
            elif (j, v) in imputed:
                feat = as_tensor(imputed[(j, v)])
            else:
                raise IncompleteCaseError(
                    f"patient {case.patient_id!r} lesion {lesion.lesion_id!r} view {v} "
                    f"is absent and no imputed feature was supplied")
            single[(j, v)] = len(nodes)
            nodes.append(GraphNode(NodeKind.SINGLE, j, v))
            feats.append(feat)
    multi = {}
    for j in range(len(case.lesions)):
        multi[j] = len(nodes)
        nodes.append(GraphNode(NodeKind.MULTI, j, None))
        feats.append(concat([feats[single[(j, v)]] for v in range(V)]))

    L = len(case.lesions)
    for j in range(L):
        for v, w in combinations(range(V), 2):
            _link(edges, single[(j, v)], single[(j, w)], EdgeKind.INTRA)
    for j in range(L):
        for v in range(V):
            _link(edges, single[(j, v)], multi[j], EdgeKind.S2M)
    for v in range(V):
        for j, k in combinations(range(L), 2):
            _link(edges, single[(j, v)], single[(k, v)], EdgeKind.INTER_S)
    for j, k in combinations(range(L), 2):
        _link(edges, multi[j], multi[k], EdgeKind.INTER_M)

    targets = [(multi[j], lesion.label) for j, lesion in enumerate(case.lesions)]
    return HeteroGraph(nodes, feats, edges, targets)


def exam_label_of(lesion_labels: Sequence[int]) -> int:
    """The exam label is the most severe lesion label."""
    return max(lesion_labels)


def build_exam_graph(case: PatientCase, imputed: Optional[Mapping] = None) -> HeteroGraph:
    """Exam-level graph: one node per view (mean of its lesion features) plus one MULTI node.

    ``imputed`` maps a view index to the stand-in used when no lesion has
    that view.
    """
    imputed = imputed or {}
    if case.exam_label is None:
        raise ConfigurationError(f"patient {case.patient_id!r} has no exam label")
    V = case.n_views
    nodes, feats, edges = [], [], []
    for v in range(V):
        rows = [les.features[v] for les in case.lesions if les.features[v] is not None]
        if rows:
            feat = mean_rows([Tensor(r) for r in rows])
        elif v in imputed:
            feat = as_tensor(imputed[v])
        else:
            raise IncompleteCaseError(
                f"patient {case.patient_id!r} view {v} has no lesion features and no imputed feature")
        nodes.append(GraphNode(NodeKind.SINGLE, None, v))
        feats.append(feat)
    m = len(nodes)
    nodes.append(GraphNode(NodeKind.MULTI, None, None))
    feats.append(concat(feats[:V]))
    for v, w in combinations(range(V), 2):
        _link(edges, v, w, EdgeKind.INTRA)
    for v in range(V):
        _link(edges, v, m, EdgeKind.S2M)
    return HeteroGraph(nodes, feats, edges, [(m, case.exam_label)])


def exam_view_features(case: PatientCase) -> list:
    """Per-view mean of the lesion features (``None`` for a view no lesion shows)."""
    out = []
    for v in range(case.n_views):
        rows = [les.features[v] for les in case.lesions if les.features[v] is not None]
        out.append(np.mean(rows, axis=0) if rows else None)
    return out
