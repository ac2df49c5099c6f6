"""Entity memory and retrieval over per-context knowledge graphs.

Two retrieval modes feed the modulation layers:

* point-wise: the entity's memory row;
* relational: two rounds of attentive neighbourhood aggregation (GATv2-style
  scoring conditioned on the entity's context representation) over the
  context's graph, with self-loops and reverse edges added.

All contexts in a batch are merged into one disjoint graph so that message
passing is a handful of gather/segment operations.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import DegenerateNeighborhoodError, DimensionError, EntityLookupError
from .kfm import NULL_ENTITY
from .layers import Linear, Module, normal
from .numerics import Tensor

NULL_ROW = 0
FORWARD, REVERSE, SELF = "forward", "reverse", "self"


class EntityMemory(Module):
    """(|E_train| + 1) x d embedding table; row 0 is the null entity, pinned at zero."""

    def __init__(self, entity_ids, d, rng, std=0.02):
        entity_ids = list(entity_ids)
        if entity_ids and entity_ids[0] == NULL_ENTITY:
            entity_ids = entity_ids[1:]
        self.entity_ids = [NULL_ENTITY] + entity_ids
        self.row_of = {e: i for i, e in enumerate(self.entity_ids)}
        self.table = normal(rng, (len(self.entity_ids), d), std)
        self.pin()

    @property
    def size(self):
        return len(self.entity_ids)

    def pin(self):
        """Force the null row (and its gradient) back to zero."""
        self.table.data[NULL_ROW] = 0.0
        if self.table.grad is not None:
            self.table.grad[NULL_ROW] = 0.0

    def rows(self, entities, unknown_to_null=False):
        out = []
        for e in entities:
            row = self.row_of.get(e)
            if row is None:
                if not unknown_to_null:
                    raise EntityLookupError(f"entity {e!r} is not in memory; map it to the null entity upstream")
                row = NULL_ROW
            out.append(row)
        return np.asarray(out, dtype=np.int64)

    def ent_embed(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= self.size):
            raise EntityLookupError("memory row out of range")
        return nx.take_rows(self.table, rows)

    def write(self, entity, vector):
        row = self.row_of[entity]
        if row == NULL_ROW:
            raise EntityLookupError("the null entity row is pinned at zero")
        self.table.data[row] = vector


class RelationIndex:
    """Row layout of the relation table for ``num_relations`` relations.

    Rows ``0..R-1`` are forward relations, ``R..2R-1`` their reverses, and
    row ``2R`` is the self-loop relation.
    """

    def __init__(self, num_relations):
        self.num_relations = int(num_relations)

    @property
    def self_row(self):
        return 2 * self.num_relations

    def row(self, relation, direction=FORWARD):
        if direction == SELF:
            return self.self_row
        if not 0 <= relation < self.num_relations:
            raise EntityLookupError(f"relation id {relation} has no embedding row")
        return relation if direction == FORWARD else self.num_relations + relation


class RelationTable(RelationIndex, Module):
    """Relation embeddings of width d_r projected to the model width."""

    def __init__(self, num_relations, d_rel, d, rng):
        super().__init__(num_relations)
        self.embedding = normal(rng, (2 * self.num_relations + 1, d_rel))
        self.projection = Linear(d_rel, d, rng, bias=False)

    def project(self, rows):
        return self.projection(nx.take_rows(self.embedding, rows))


@dataclass
class KnowledgeGraphView:
    """Facts of one context, as node indices into ``nodes``."""

    nodes: list = field(default_factory=list)
    facts: list = field(default_factory=list)  # (head index, relation id, tail index)

    @classmethod
    def from_triplets(cls, triplets, extra_nodes=()):
        nodes, index = [], {}

        def node(e):
            if e not in index:
                index[e] = len(nodes)
                nodes.append(e)
            return index[e]

        for e in extra_nodes:
            node(e)
        facts = [(node(h), int(r), node(t)) for h, r, t in triplets]
        return cls(nodes, facts)

    def index(self, entity):
        try:
            return self.nodes.index(entity)
        except ValueError:
            raise EntityLookupError(f"entity {entity!r} is not a node of this graph") from None

    def neighbors(self, entity):
        """(neighbour entity, relation id, direction) for every incident fact."""
        i = self.index(entity)
        out = []
        for h, r, t in self.facts:
            if h == i:
                out.append((self.nodes[t], r, FORWARD))
            if t == i:
                out.append((self.nodes[h], r, REVERSE))
        return out

    def adjacency(self):
        return {e: self.neighbors(e) for e in self.nodes}


@dataclass
class GraphBatch:
    """Disjoint union of several context graphs with directed message edges.

    An edge ``src -> dst`` carries ``src``'s state into ``dst``'s aggregate.
    Every node has a self-loop, and every fact contributes a forward edge
    (tail -> head, relation r) and a reverse edge (head -> tail, reverse r).
    """

    node_rows: np.ndarray          # memory row per node, 0 = null entity
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_rel: np.ndarray           # relation-table row per edge
    node_example: np.ndarray       # which context the node belongs to
    node_span: np.ndarray          # [N, 2] token span of the node's first mention, -1 if none

    @property
    def num_nodes(self):
        return int(self.node_rows.shape[0])

    @property
    def node_null(self):
        return self.node_rows == NULL_ROW

    @property
    def edge_mask(self):
        """Messages from null-entity nodes are masked out of the attention."""
        return ~self.node_null[self.edge_src]

    def active_nodes(self):
        active = np.zeros(self.num_nodes, dtype=bool)
        active[self.edge_dst[self.edge_mask]] = True
        return active


def build_graph_batch(views, node_rows, relations, spans=None):
    """Merge per-context graph views into one :class:`GraphBatch`.

    ``node_rows[k]`` gives memory rows for ``views[k].nodes``; ``spans[k]``
    (optional) maps node index -> (start, end) of its first mention.
    """
    rows, src, dst, rel, example, node_span = [], [], [], [], [], []
    offset = 0
    for k, view in enumerate(views):
        r = np.asarray(node_rows[k], dtype=np.int64)
        if r.shape[0] != len(view.nodes):
            raise DimensionError("node_rows does not match the graph's node count")
        rows.append(r)
        n = len(view.nodes)
        example.append(np.full(n, k, dtype=np.int64))
        span = np.full((n, 2), -1, dtype=np.int64)
        if spans is not None:
            for i, (s, e) in spans[k].items():
                span[i] = (s, e)
        node_span.append(span)
        for i in range(n):
            src.append(offset + i)
            dst.append(offset + i)
            rel.append(relations.self_row)
        for h, r_id, t in view.facts:
            src.append(offset + t)
            dst.append(offset + h)
            rel.append(relations.row(r_id, FORWARD))
            src.append(offset + h)
            dst.append(offset + t)
            rel.append(relations.row(r_id, REVERSE))
        offset += n
    as_int = lambda xs: np.asarray(xs, dtype=np.int64)
    return GraphBatch(
        node_rows=np.concatenate(rows) if rows else as_int([]),
        edge_src=as_int(src), edge_dst=as_int(dst), edge_rel=as_int(rel),
        node_example=np.concatenate(example) if example else as_int([]),
        node_span=np.concatenate(node_span) if node_span else np.zeros((0, 2), dtype=np.int64),
    )


def context_representations(hidden, graph):
    """Mean hidden state over each node's mention; zeros for unmentioned nodes.

    ``hidden`` is [B, n, d] (or [n, d] for a single context).
    """
    if hidden.ndim == 2:
        hidden = nx.reshape(hidden, (1,) + hidden.shape)
    b, n, d = hidden.shape
    token_idx, seg = [], []
    for node, (example, (s, e)) in enumerate(zip(graph.node_example, graph.node_span)):
        if s < 0:
            continue
        token_idx.extend(example * n + np.arange(s, e + 1))
        seg.extend([node] * (e - s + 1))
    num = graph.num_nodes
    if not token_idx:
        return Tensor(np.zeros((num, d)))
    seg = np.asarray(seg, dtype=np.int64)
    flat = nx.reshape(hidden, (b * n, d))
    summed = nx.segment_sum(nx.take_rows(flat, token_idx), seg, num)
    counts = np.bincount(seg, minlength=num).astype(np.float64)
    return nx.mul(summed, (1.0 / np.maximum(counts, 1.0))[:, None])


def score_triplet(e_i, r_ij, e_j, h_ei, weight, a, slope=0.2):
    """psi = a . LeakyReLU([e_i || r_ij || e_j || h_ei] @ weight), weight is [4d, d].

    Works on single vectors ([d]) or stacked edges ([E, d]).
    """
    parts = [nx.as_tensor(x) for x in (e_i, r_ij, e_j, h_ei)]
    d = parts[0].shape[-1]
    if any(p.shape[-1] != d for p in parts) or weight.shape != (4 * d, d) or a.shape != (d,):
        raise DimensionError("score_triplet expects four d-vectors, weight [4d, d] and a [d]")
    single = parts[0].ndim == 1
    if single:
        parts = [nx.reshape(p, (1, d)) for p in parts]
    hidden = nx.leaky_relu(nx.matmul(nx.concat(parts, axis=-1), weight), slope)
    psi = nx.matmul(hidden, nx.reshape(a, (d, 1)))
    return nx.reshape(psi, ()) if single else nx.reshape(psi, (psi.shape[0],))


def glorot_std(fan_in, fan_out):
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


class GnnLayer(Module):
    # Glorot-scaled so two rounds of message passing keep the memory's scale
    def __init__(self, d, rng, final):
        self.weight = normal(rng, (4 * d, d), glorot_std(4 * d, d))
        self.attn = normal(rng, (d,), glorot_std(d, 1))
        self.update = Linear(d, d, rng, std=glorot_std(d, d))
        self.final = final

    def scores(self, states, rel_states, context, graph):
        s = score_triplet(
            nx.take_rows(states, graph.edge_dst),
            rel_states,
            nx.take_rows(states, graph.edge_src),
            nx.take_rows(context, graph.edge_dst),
            self.weight, self.attn,
        )
        return s

    def attention(self, states, rel_states, context, graph):
        psi = self.scores(states, rel_states, context, graph)
        return nx.segment_softmax(psi, graph.edge_dst, graph.num_nodes, graph.edge_mask)

    def __call__(self, states, rel_states, context, graph, dropout, rng, training):
        alpha = self.attention(states, rel_states, context, graph)
        messages = nx.mul(nx.reshape(alpha, (-1, 1)), nx.take_rows(states, graph.edge_src))
        agg = nx.segment_sum(messages, graph.edge_dst, graph.num_nodes)
        agg = nx.dropout(agg, dropout, rng, training)
        out = self.update(agg)
        return out if self.final else nx.relu(out)


class RelationalRetriever(Module):
    """Two attentive message-passing layers over the entity memory."""

    def __init__(self, d, num_relations, d_rel, rng, num_layers=2, dropout=0.1):
        self.relations = RelationTable(num_relations, d_rel, d, rng)
        self.layers = [GnnLayer(d, rng, final=(i == num_layers - 1)) for i in range(num_layers)]
        self.dropout = dropout
        self.d = d

    def __call__(self, memory, graph, context, training=False, rng=None):
        """Retrieve one vector per node.

        Returns ``(vectors [N, d], active [N])``; nodes with no unmasked
        neighbour are inactive and get the zero vector.
        """
        states = memory.ent_embed(graph.node_rows)
        rel_states = self.relations.project(graph.edge_rel)
        for layer in self.layers:
            states = layer(states, rel_states, context, graph, self.dropout, rng, training)
        active = graph.active_nodes()
        return nx.mul(states, active[:, None].astype(np.float64)), active


def _single_graph(view, memory, relations, entity, context_rep):
    rows = memory.rows(view.nodes, unknown_to_null=True)
    graph = build_graph_batch([view], [rows], relations)
    d = memory.table.shape[1]
    context = np.zeros((graph.num_nodes, d))
    if isinstance(context_rep, dict):
        for e, vec in context_rep.items():
            context[view.index(e)] = np.asarray(vec, dtype=np.float64)
    elif context_rep is not None:
        context[view.index(entity)] = np.asarray(context_rep, dtype=np.float64)
    return graph, Tensor(context)


def neighbor_attention(retriever, entity, view, memory, context_rep=None, layer=0):
    """Attention weights over ``entity``'s incoming messages at the first GNN layer.

    Returns ``(neighbours, alpha)`` where ``neighbours`` lists ``(entity,
    relation-table row)`` in edge order, self-loop first. Null-entity
    neighbours get exactly zero weight.
    """
    graph, context = _single_graph(view, memory, retriever.relations, entity, context_rep)
    i = view.index(entity)
    incoming = np.flatnonzero(graph.edge_dst == i)
    if not graph.edge_mask[incoming].any():
        raise DegenerateNeighborhoodError(f"every neighbour of {entity!r} is the null entity")
    with nx.no_grad():
        states = memory.ent_embed(graph.node_rows)
        rel_states = retriever.relations.project(graph.edge_rel)
        for k in range(layer):
            states = retriever.layers[k](states, rel_states, context, graph, 0.0, None, False)
        alpha = retriever.layers[layer].attention(states, rel_states, context, graph).data
    neighbours = [(view.nodes[graph.edge_src[k]], int(graph.edge_rel[k])) for k in incoming]
    return neighbours, alpha[incoming]


def relational_retrieve(retriever, entity, view, memory, context_rep=None):
    """Relational retrieval of a single entity (evaluation mode)."""
    graph, context = _single_graph(view, memory, retriever.relations, entity, context_rep)
    i = view.index(entity)
    if not graph.edge_mask[graph.edge_dst == i].any():
        raise DegenerateNeighborhoodError(f"every neighbour of {entity!r} is the null entity")
    vectors, _ = retriever(memory, graph, context)
    return nx.take_rows(vectors, i)


def pointwise_retrieve(memory, entity):
    row = memory.rows([entity], unknown_to_null=False)[0]
    return memory.ent_embed(row)
