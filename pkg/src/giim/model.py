"""Heterogeneous GraphSAGE-style network over lesion graphs.

For node ``n`` at layer ``k`` the single-view and multi-view neighbourhoods
are averaged separately, each after its own linear map::

    a_s = mean_{u in single(n)} W_single h_u
    a_m = mean_{u in multi(n)}  W_multi  h_u
    h'_n = relu(W_self[kind(n)] [h_n | a_s | a_m] + b[kind(n)])

The last layer drops the ReLU and emits class logits, read at the target
nodes of the graph.
"""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    mean_rows,
    neighbor_mean,
    parameter,
    relu,
    vstack,
)
from .errors import ConfigurationError
from .graph import HeteroGraph, NodeKind

SINGLE, MULTI = NodeKind.SINGLE, NodeKind.MULTI
KINDS = (SINGLE, MULTI)

HIDDEN_WIDTHS = (512, 256, 128, 64, 32)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class HeteroSageLayer:
    """One message-passing layer with per-source-kind neighbour maps and per-kind update."""

    def __init__(self, in_widths: Mapping, out_width: int, rng: np.random.Generator,
                 activation: bool = True, prefix: str = ""):
        self.in_widths = {k: int(in_widths[k]) for k in KINDS}
        self.out_width = d = int(out_width)
        self.activation = activation
        p = prefix
        self.W_single = parameter(glorot(rng, self.in_widths[SINGLE], d), name=f"{p}W_single")
        self.W_multi = parameter(glorot(rng, self.in_widths[MULTI], d), name=f"{p}W_multi")
        self.W_self = {}
        self.bias = {}
        for k in KINDS:
            fan_in = self.in_widths[k] + 2 * d
            self.W_self[k] = parameter(glorot(rng, fan_in, d), name=f"{p}W_self.{k.value}")
            self.bias[k] = parameter(np.zeros((1, d)), name=f"{p}bias.{k.value}")

    def parameters(self) -> list:
        out = [self.W_single, self.W_multi]
        for k in KINDS:
            out += [self.W_self[k], self.bias[k]]
        return out


class MhgModel:
    """Stack of :class:`HeteroSageLayer`: hidden widths, then one layer of ``n_classes``."""

    def __init__(self, feature_width: int, n_views: int, n_classes: int,
                 hidden: Sequence[int] = HIDDEN_WIDTHS, seed: int = 0):
        if feature_width < 1 or n_views < 1 or n_classes < 2:
            raise ConfigurationError(
                f"bad model shape: feature_width={feature_width}, n_views={n_views}, n_classes={n_classes}")
        if any(w < 1 for w in hidden):
            raise ConfigurationError(f"hidden widths must be positive, got {list(hidden)}")
        self.feature_width = feature_width
        self.n_views = n_views
        self.n_classes = n_classes
        self.hidden = tuple(int(w) for w in hidden)
        self.seed = seed
        rng = np.random.default_rng(seed)
        widths = {SINGLE: feature_width, MULTI: n_views * feature_width}
        self.layers = []
        outs = list(self.hidden) + [n_classes]
        for i, w in enumerate(outs):
            last = i == len(outs) - 1
            self.layers.append(HeteroSageLayer(widths, w, rng, activation=not last, prefix=f"layer{i}."))
            widths = {SINGLE: w, MULTI: w}

    @property
    def input_widths(self) -> dict:
        return {SINGLE: self.feature_width, MULTI: self.n_views * self.feature_width}

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def config(self) -> dict:
        return {"feature_width": self.feature_width, "n_views": self.n_views,
                "n_classes": self.n_classes, "hidden": list(self.hidden), "seed": self.seed}

    def __call__(self, graph: HeteroGraph, record: Optional[list] = None) -> Tensor:
        return forward(self, graph, record)


def aggregate(layer: HeteroSageLayer, graph: HeteroGraph, h: Mapping, n: int):
    """Neighbour aggregation for a single node.

    ``h`` maps node index to its current 1×width feature. Returns
    ``(agg_single, agg_multi)``; an empty neighbourhood yields zeros.
    """
    single = [matmul(h[u], layer.W_single) for u in graph.neighbors(n, SINGLE)]
    multi = [matmul(h[u], layer.W_multi) for u in graph.neighbors(n, MULTI)]
    d = layer.out_width
    return mean_rows(single, width=d), mean_rows(multi, width=d)


def _neighbor_tables(graph: HeteroGraph) -> dict:
    tables = graph._neighbor_index
    if tables is None:
        tables = {(dst, src): graph.neighbor_index(dst, src) for dst in KINDS for src in KINDS}
        graph._neighbor_index = tables
    return tables


def layer_forward(layer: HeteroSageLayer, graph: HeteroGraph, h: Mapping,
                  record: Optional[list] = None) -> dict:
    """Apply one layer to every node.

    ``h`` maps each node kind to the stacked features of that kind's nodes
    (rows in graph order). Pre-activations are appended to ``record`` if given.
    """
    tables = _neighbor_tables(graph)
    messages = {SINGLE: matmul(h[SINGLE], layer.W_single) if SINGLE in h else None,
                MULTI: matmul(h[MULTI], layer.W_multi) if MULTI in h else None}
    out = {}
    for kind, own in h.items():
        n = own.shape[0]
        aggs = []
        for src in KINDS:
            if messages[src] is None:
                aggs.append(Tensor(np.zeros((n, layer.out_width))))
            else:
                aggs.append(neighbor_mean(messages[src], *tables[(kind, src)]))
        z = add(matmul(concat([own] + aggs), layer.W_self[kind]), layer.bias[kind])
        if record is not None:
            record.append(z.data)
        out[kind] = relu(z) if layer.activation else z
    return out


def node_blocks(graph: HeteroGraph) -> dict:
    """Stack the input features of each node kind (rows in graph order)."""
    blocks = {}
    for kind in KINDS:
        idx = graph.indices(kind)
        if idx:
            blocks[kind] = vstack([graph.features[i] for i in idx])
    return blocks


def forward(model: MhgModel, graph: HeteroGraph, record: Optional[list] = None) -> Tensor:
    """Logits (T×C) at the graph's target nodes, in target order."""
    h = node_blocks(graph)
    for kind, block in h.items():
        want = model.input_widths[kind]
        if block.shape[1] != want:
            raise ConfigurationError(
                f"{kind.value} node features have width {block.shape[1]}, model expects {want}")
    for layer in model.layers:
        h = layer_forward(layer, graph, h, record)
    pos = {}
    offset = 0
    stacked = []
    for kind in KINDS:
        if kind in h:
            for r, i in enumerate(graph.indices(kind)):
                pos[i] = offset + r
            offset += h[kind].shape[0]
            stacked.append(h[kind])
    return gather_rows(vstack(stacked), [pos[i] for i, _ in graph.targets])


class NnBaseline:
    """Two fully connected layers over concatenated view features."""

    def __init__(self, in_width: int, n_classes: int, hidden: int = 64, seed: int = 0,
                 views: Optional[Sequence[int]] = None):
        if hidden < 1:
            raise ConfigurationError(f"hidden width must be positive, got {hidden}")
        if in_width < 1 or n_classes < 2:
            raise ConfigurationError(f"bad baseline shape: in_width={in_width}, n_classes={n_classes}")
        rng = np.random.default_rng(seed)
        self.in_width = in_width
        self.n_classes = n_classes
        self.hidden = hidden
        self.seed = seed
        self.views = None if views is None else list(views)
        self.W1 = parameter(glorot(rng, in_width, hidden), name="W1")
        self.b1 = parameter(np.zeros((1, hidden)), name="b1")
        self.W2 = parameter(glorot(rng, hidden, n_classes), name="W2")
        self.b2 = parameter(np.zeros((1, n_classes)), name="b2")

    def parameters(self) -> list:
        return [self.W1, self.b1, self.W2, self.b2]

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def __call__(self, x) -> Tensor:
        return nn_baseline_forward(self, x)


def nn_baseline_forward(model: NnBaseline, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1] != model.in_width:
        raise ConfigurationError(f"baseline input has width {x.shape[1]}, expected {model.in_width}")
    hidden = relu(add(matmul(x, model.W1), model.b1))
    return add(matmul(hidden, model.W2), model.b2)
