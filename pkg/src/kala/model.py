"""The full model: encoder, optional knowledge path, task head."""

from dataclasses import asdict, dataclass
import json

import numpy as np

from . import numerics as nx
from .config import FINE_TUNE, POINTWISE, RELATIONAL, ModelConfig
from .corpus.assemble import QA, TAGGING
from .corpus.vocab import CLS, PAD, SEP
from .errors import ContractError
from .kfm import KfmConfig, KfmLayer
from .knowledge import (EntityMemory, RelationIndex, RelationalRetriever, build_graph_batch,
                        context_representations)
from .layers import Linear, Module
from .transformer import Encoder, TransformerConfig

CHECKPOINT_VERSION = 1
IGNORE = -1


@dataclass
class Batch:
    token_ids: np.ndarray      # [B, n]
    attention_mask: np.ndarray  # [B, n] bool
    offsets: np.ndarray        # [B] position of the first context token
    lengths: np.ndarray        # [B] context length
    token_node: np.ndarray     # [B, n] node index of the covering mention, -1 if none
    graph: object              # GraphBatch
    span_mask: np.ndarray = None  # [B, n] positions an answer may occupy
    starts: np.ndarray = None
    ends: np.ndarray = None
    tag_targets: np.ndarray = None  # [B, n], IGNORE outside the context

    @property
    def size(self):
        return int(self.token_ids.shape[0])


def make_batch(examples, token_vocab, entity_vocab, num_relations, max_len, tag_index=None):
    """Pad and index a list of :class:`TaskExample` into a :class:`Batch`."""
    relations = RelationIndex(num_relations)
    seqs, offsets, lengths, spans_per_view, rows_per_view = [], [], [], [], []
    for ex in examples:
        if ex.task == QA:
            prefix = [CLS] + list(ex.question) + [SEP]
        else:
            prefix = [CLS]
        seq = prefix + list(ex.tokens) + [SEP]
        if len(seq) > max_len:
            raise ContractError(f"{ex.doc_id}: {len(seq)} tokens exceed max_len {max_len}")
        seqs.append(token_vocab.encode(seq))
        offsets.append(len(prefix))
        lengths.append(len(ex.tokens))
    b, n = len(seqs), max(len(s) for s in seqs)
    ids = np.full((b, n), token_vocab.stoi[PAD], dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    token_node = np.full((b, n), -1, dtype=np.int64)
    node_base = 0
    for i, (ex, seq) in enumerate(zip(examples, seqs)):
        ids[i, :len(seq)] = seq
        mask[i, :len(seq)] = True
        view = ex.graph
        node_of = {e: k for k, e in enumerate(view.nodes)}
        first_span = {}
        for m in ex.mentions:
            k = node_of[m.entity]
            s, e = m.start + offsets[i], m.end + offsets[i]
            token_node[i, s:e + 1] = node_base + k
            first_span.setdefault(k, (s, e))
        spans_per_view.append(first_span)
        rows_per_view.append([entity_vocab.row(e) for e in view.nodes])
        node_base += len(view.nodes)
    graph = build_graph_batch([ex.graph for ex in examples], rows_per_view, relations, spans_per_view)
    batch = Batch(ids, mask, np.asarray(offsets), np.asarray(lengths), token_node, graph)
    if examples[0].task == QA:
        batch.span_mask = np.zeros((b, n), dtype=bool)
        batch.starts = np.zeros(b, dtype=np.int64)
        batch.ends = np.zeros(b, dtype=np.int64)
        for i, ex in enumerate(examples):
            batch.span_mask[i, offsets[i]:offsets[i] + lengths[i]] = True
            batch.starts[i] = ex.answer[0] + offsets[i]
            batch.ends[i] = ex.answer[1] + offsets[i]
    else:
        batch.tag_targets = np.full((b, n), IGNORE, dtype=np.int64)
        for i, ex in enumerate(examples):
            batch.tag_targets[i, offsets[i]:offsets[i] + lengths[i]] = [
                tag_index.get(t, 0) for t in ex.tags]
    return batch


class KalaModel(Module):
    """Transformer encoder plus, for KALA variants, memory, retrieval and KFM layers."""

    def __init__(self, cfg, vocab_size, entity_ids, num_relations, task=QA, num_tags=0, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.task = task
        self.vocab_size = vocab_size
        self.num_relations = num_relations
        self.num_tags = num_tags
        rng = np.random.default_rng(seed)
        self.tcfg = TransformerConfig(
            num_layers=cfg.num_layers, hidden=cfg.hidden, intermediate=cfg.intermediate,
            num_heads=cfg.num_heads, vocab_size=vocab_size, max_len=cfg.max_len,
            dropout=cfg.dropout, init_std=cfg.init_std,
            kfm_locations=tuple(cfg.kfm_locations) if cfg.variant != FINE_TUNE else (),
        )
        self.encoder = Encoder(self.tcfg, rng)
        d = cfg.hidden
        if task == QA:
            self.start_head = Linear(d, 1, rng)
            self.end_head = Linear(d, 1, rng)
        elif task == TAGGING:
            self.tag_head = Linear(d, num_tags, rng)
        else:
            raise ContractError(f"unknown task {task!r}")
        self.memory = None
        self.retriever = None
        self.kfm = {}
        if cfg.variant != FINE_TUNE:
            self.memory = EntityMemory(entity_ids, d, rng)
            if cfg.variant == RELATIONAL:
                self.retriever = RelationalRetriever(d, num_relations, cfg.relation_dim, rng,
                                                     num_layers=cfg.gnn_layers,
                                                     dropout=cfg.gnn_dropout)
            self.kfm = {layer: KfmLayer(d, cfg.kfm, rng) for layer in self.tcfg.kfm_locations}

    # ------------------------------------------------------------------
    def parameter_groups(self):
        """Parameters keyed by group: transformer, heads, memory, kfm, gnn."""
        groups = {"transformer": [], "heads": [], "memory": [], "kfm": [], "gnn": []}
        for name, p in self.named_parameters():
            if name.startswith("encoder."):
                groups["transformer"].append((name, p))
            elif name.startswith(("start_head", "end_head", "tag_head")):
                groups["heads"].append((name, p))
            elif name.startswith("memory."):
                groups["memory"].append((name, p))
            elif name.startswith("kfm."):
                groups["kfm"].append((name, p))
            else:
                groups["gnn"].append((name, p))
        return {k: v for k, v in groups.items() if v}

    def knowledge_parameters(self):
        out = []
        for name, p in self.named_parameters():
            if name.startswith(("memory.", "kfm.", "retriever.")):
                out.append(p)
        return out

    def after_backward(self):
        if self.memory is not None:
            self.memory.pin()

    # ------------------------------------------------------------------
    def retrieve(self, batch, h_prev, training=False, rng=None):
        """Entity vectors for every graph node plus the active-node mask."""
        graph = batch.graph
        if self.cfg.variant == POINTWISE:
            return self.memory.ent_embed(graph.node_rows), ~graph.node_null
        context = context_representations(h_prev, graph)
        return self.retriever(self.memory, graph, context, training, rng)

    def forward(self, batch, training=False, rng=None):
        """Run the model; returns ``(outputs, states, modulations)``."""
        modulations = {}
        cache = {}

        def provider(layer, h_prev):
            if layer not in self.kfm:
                return None
            if "v" not in cache or self.cfg.recompute_per_layer:
                cache["v"] = self.retrieve(batch, h_prev, training, rng)
            vectors, active = cache["v"]
            mod = self.kfm[layer].from_vectors(vectors, batch.token_node, active)
            modulations[layer] = mod
            return mod

        states = self.encoder.encode(batch.token_ids,
                                     modulation=provider if self.kfm else None,
                                     attention_mask=batch.attention_mask,
                                     training=training, rng=rng)
        h = states.final
        b, n, _ = h.shape
        if self.task == QA:
            out = {
                "start": nx.reshape(self.start_head(h), (b, n)),
                "end": nx.reshape(self.end_head(h), (b, n)),
            }
        else:
            out = {"tags": self.tag_head(h)}
        return out, states, modulations

    def loss(self, batch, outputs):
        if self.task == QA:
            return nx.add(
                nx.cross_entropy(outputs["start"], batch.starts, batch.span_mask),
                nx.cross_entropy(outputs["end"], batch.ends, batch.span_mask),
            )
        logits = outputs["tags"]
        flat = nx.reshape(logits, (-1, logits.shape[-1]))
        targets = batch.tag_targets.reshape(-1)
        keep = np.flatnonzero(targets != IGNORE)
        return nx.cross_entropy(nx.take_rows(flat, keep), targets[keep])

    # ------------------------------------------------------------------
    def init_memory_from_encoder(self, batches):
        """Set each memory row to the mean mention state of the untrained encoder."""
        if self.memory is None:
            return
        layer = self.tcfg.kfm_locations[0] - 1
        d = self.cfg.hidden
        sums = np.zeros((self.memory.size, d))
        counts = np.zeros(self.memory.size)
        with nx.no_grad():
            for batch in batches:
                states = self.encoder.encode(batch.token_ids, attention_mask=batch.attention_mask)
                reps = context_representations(states[layer], batch.graph).data
                has_span = batch.graph.node_span[:, 0] >= 0
                rows = batch.graph.node_rows
                np.add.at(sums, rows[has_span], reps[has_span])
                np.add.at(counts, rows[has_span], 1.0)
        seen = counts > 0
        self.memory.table.data[seen] = sums[seen] / counts[seen, None]
        self.memory.pin()

    # ------------------------------------------------------------------
    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise ContractError(f"shape mismatch for {name}: {p.shape} vs {state[name].shape}")
            p.data[...] = state[name]


def save_checkpoint(path, model, token_vocab, relations, tag_set=(), extra=None):
    meta = {
        "version": CHECKPOINT_VERSION,
        "task": model.task,
        "model": asdict(model.cfg),
        "vocab_size": model.vocab_size,
        "num_relations": model.num_relations,
        "num_tags": model.num_tags,
        "entity_ids": model.memory.entity_ids if model.memory is not None else [],
        "tokens": token_vocab.itos,
        "relations": list(relations.names),
        "tag_set": list(tag_set),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path):
    """Rebuild ``(model, token_vocab, relations, meta)`` from a checkpoint file."""
    from .corpus.vocab import RelationVocabulary, TokenVocabulary

    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {meta.get('version')}")
    mcfg = dict(meta["model"])
    mcfg["kfm"] = KfmConfig(**mcfg["kfm"])
    cfg = ModelConfig(**mcfg)
    entity_ids = meta["entity_ids"][1:] if meta["entity_ids"] else []
    model = KalaModel(cfg, meta["vocab_size"], entity_ids, meta["num_relations"],
                      task=meta["task"], num_tags=meta["num_tags"])
    model.load_state_dict(state)
    token_vocab = TokenVocabulary(meta["tokens"][4:])
    relations = RelationVocabulary(meta["relations"])
    return model, token_vocab, relations, meta
