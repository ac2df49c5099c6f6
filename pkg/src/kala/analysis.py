"""FLOPs accounting, modulation statistics and unseen-entity proximity."""

from dataclasses import asdict, dataclass, field
import csv
import io

import numpy as np

from . import numerics as nx
from .config import FINE_TUNE, RELATIONAL, VARIANTS
from .errors import ContractError
from .kfm import SITES

# Per-element costs of non-matmul ops (ELECTRA-style constants).
DROPOUT_FLOPS = 4
LAYER_NORM_FLOPS = 5
ACTIVATION_FLOPS = 8
SOFTMAX_FLOPS = 5
TRAINING_MULTIPLIER = 3  # forward + backward ~ 3x forward


@dataclass
class CorpusStats:
    avg_nodes: float           # graph nodes per context
    avg_edges_per_node: float  # message edges (self-loops excluded) per node
    max_seq_len: int
    memory_size: int           # memory rows, null row included
    avg_mentions: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ContractError(f"{name} must be non-negative")


def corpus_stats(data, split="train", max_seq_len=None):
    """Statistics of ``data.splits[split]`` as consumed by :func:`estimate_flops`."""
    examples = data.splits[split]
    if not examples:
        raise ContractError(f"split {split!r} is empty")
    nodes = np.array([len(ex.graph.nodes) for ex in examples], dtype=float)
    edges = np.array([2 * len(ex.graph.facts) for ex in examples], dtype=float)
    mentions = np.array([len(ex.mentions) for ex in examples], dtype=float)
    if max_seq_len is None:
        max_seq_len = max(len(ex.tokens) + (len(ex.question) + 3 if ex.question else 2)
                          for ex in examples)
    return CorpusStats(
        avg_nodes=float(nodes.mean()),
        avg_edges_per_node=float(edges.sum() / max(nodes.sum(), 1.0)),
        max_seq_len=int(max_seq_len),
        memory_size=data.entity_vocab.memory_size,
        avg_mentions=float(mentions.mean()),
    )


@dataclass
class FlopsReport:
    variant: str
    components: dict            # forward FLOPs per component
    multiplier: int = TRAINING_MULTIPLIER
    constants: dict = field(default_factory=lambda: {
        "dropout": DROPOUT_FLOPS, "layer_norm": LAYER_NORM_FLOPS,
        "activation": ACTIVATION_FLOPS, "softmax": SOFTMAX_FLOPS,
    })

    @property
    def forward(self):
        return float(sum(self.components.values()))

    @property
    def training(self):
        return self.forward * self.multiplier

    def to_text(self):
        lines = [f"variant: {self.variant}"]
        width = max(len(k) for k in self.components)
        for name, value in self.components.items():
            lines.append(f"  {name:<{width}}  {value:.4e}")
        lines.append(f"  {'forward':<{width}}  {self.forward:.4e}")
        lines.append(f"  {'training':<{width}}  {self.training:.4e}  (x{self.multiplier})")
        lines.append("  constants: " + ", ".join(f"{k}={v}" for k, v in self.constants.items()))
        return "\n".join(lines)


def affine_flops(tokens, d_in, d_out, bias=True):
    """A multiply-add is two FLOPs; the bias adds one per output."""
    return tokens * (2 * d_in * d_out + (d_out if bias else 0))


def estimate_flops(cfg, stats, variant=None, num_labels=2):
    """Analytic forward FLOPs of one sequence of ``stats.max_seq_len`` tokens.

    ``cfg`` is a :class:`ModelConfig`. Entity-memory reads are counted as a
    dense one-hot product (2 * memory_size * d per node), KFM MLPs at every
    position up to the maximum length, and GNN propagation per edge times
    edges-per-node times nodes.
    """
    variant = variant or cfg.variant
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    n, d, dff, heads = stats.max_seq_len, cfg.hidden, cfg.intermediate, cfg.num_heads
    layers = cfg.num_layers

    attn_proj = (3 * affine_flops(n, d, d) + affine_flops(n, d, d)
                 + n * d * (DROPOUT_FLOPS + 1 + LAYER_NORM_FLOPS))
    attn_mix = n * (2 * n * d + n * heads * (SOFTMAX_FLOPS + DROPOUT_FLOPS + 1) + 2 * n * d)
    ff = (affine_flops(n, d, dff) + n * dff * ACTIVATION_FLOPS + affine_flops(n, dff, d)
          + n * d * (DROPOUT_FLOPS + 1 + LAYER_NORM_FLOPS))
    comps = {
        "embedding": n * d * (1 + LAYER_NORM_FLOPS + DROPOUT_FLOPS),
        "attention_projections": layers * attn_proj,
        "attention_mixing": layers * attn_mix,
        "feed_forward": layers * ff,
        "head": affine_flops(n, d, num_labels),
        "kfm": 0.0,
        "memory": 0.0,
        "gnn": 0.0,
        "gnn_update": 0.0,
    }
    if variant == FINE_TUNE:
        return FlopsReport(variant, comps)

    locations = len(cfg.kfm_locations)
    sites = sum(bool(getattr(cfg.kfm, s)) for s in SITES)
    # one two-layer MLP per site at each mention position (bounded by n), then x*gamma + beta
    mlp = affine_flops(n, d, d) + n * d * ACTIVATION_FLOPS + affine_flops(n, d, d)
    comps["kfm"] = locations * (sites * mlp + 2 * 2 * n * d)
    nodes = stats.avg_nodes
    comps["memory"] = nodes * 2 * stats.memory_size * d

    if variant == RELATIONAL:
        d_rel = cfg.relation_dim
        per_edge = (
            2 * d_rel * d                 # relation projection
            + 2 * (4 * d) * d             # [e_i || r || e_j || h] @ W
            + d * ACTIVATION_FLOPS        # LeakyReLU
            + 2 * d                       # a . (.)
            + SOFTMAX_FLOPS               # normalisation over the neighbourhood
            + 2 * d                       # alpha * e_j accumulated
        )
        edges = stats.avg_edges_per_node * nodes
        comps["gnn"] = cfg.gnn_layers * per_edge * edges
        comps["gnn_update"] = cfg.gnn_layers * (affine_flops(nodes, d, d)
                                                + nodes * d * (ACTIVATION_FLOPS + DROPOUT_FLOPS))
    return FlopsReport(variant, comps)


def flops_ratio(cfg, stats, variant=RELATIONAL):
    return estimate_flops(cfg, stats, variant).training / estimate_flops(cfg, stats, FINE_TUNE).training


def bert_base_config(kfm_locations=(11,)):
    """BERT-base-sized ModelConfig for FLOPs comparisons."""
    from .config import ModelConfig

    return ModelConfig(num_layers=12, hidden=768, intermediate=3072, num_heads=12, max_len=512,
                       kfm_locations=list(kfm_locations), relation_dim=128)


# ----------------------------------------------------------------------------
# modulation statistics
# ----------------------------------------------------------------------------

def _histogram(values, bins):
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return counts, edges


def collect_modulations(model, data, examples, batch_size=64):
    """All gamma/beta entries at mention positions, keyed ``L{layer}.{site}``."""
    out = {}
    if not model.kfm:
        return out
    with nx.no_grad():
        for _, batch in data.batches(examples, batch_size, model.cfg.max_len):
            _, _, mods = model.forward(batch)
            covered = batch.token_node >= 0
            for layer, mod in mods.items():
                for site, tensor in mod.as_dict().items():
                    values = np.broadcast_to(tensor.data, covered.shape + (model.cfg.hidden,))
                    out.setdefault(f"L{layer}.{site}", []).append(values[covered].reshape(-1))
    return {k: np.concatenate(v) for k, v in out.items()}


def modulation_histogram(model, data, examples, bins=40):
    """Histogram, mean and std of every modulation matrix over mention positions."""
    values = collect_modulations(model, data, examples)
    result = {}
    for key, v in values.items():
        if v.size == 0:
            result[key] = {"empty": True, "n": 0}
            continue
        counts, edges = _histogram(v, bins)
        result[key] = {"n": int(v.size), "mean": float(v.mean()), "std": float(v.std()),
                       "counts": counts.tolist(), "edges": edges.tolist()}
    if not result:
        result["empty"] = True
    return result


def histogram_rows(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["matrix", "bin_left", "bin_right", "count"])
    for key, h in result.items():
        if not isinstance(h, dict) or h.get("empty"):
            continue
        for c, lo, hi in zip(h["counts"], h["edges"][:-1], h["edges"][1:]):
            w.writerow([key, f"{lo:.6g}", f"{hi:.6g}", c])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# unseen-entity proximity
# ----------------------------------------------------------------------------

def cosine_distance_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise ContractError("cosine distance is undefined for zero vectors")
    return np.clip(1.0 - (a / na) @ (b / nb).T, 0.0, 2.0)


def nearest_seen(unseen, seen):
    """Index of and distance to the nearest seen row for every unseen row."""
    dist = cosine_distance_matrix(unseen, seen)
    idx = dist.argmin(axis=1)
    return idx, dist[np.arange(len(idx)), idx]


def entity_representations(model, data, examples, batch_size=64):
    """Mean final-layer hidden state over every mention of each entity."""
    d = model.cfg.hidden
    sums, counts = {}, {}
    with nx.no_grad():
        for chunk, batch in data.batches(examples, batch_size, model.cfg.max_len):
            _, states, _ = model.forward(batch)
            h = states.final.data
            for i, ex in enumerate(chunk):
                off = batch.offsets[i]
                for m in ex.mentions:
                    vec = h[i, off + m.start:off + m.end + 1].sum(axis=0)
                    sums[m.entity] = sums.get(m.entity, np.zeros(d)) + vec
                    counts[m.entity] = counts.get(m.entity, 0) + (m.end - m.start + 1)
    return {e: sums[e] / counts[e] for e in sums}


@dataclass
class ProximityResult:
    rows: list = field(default_factory=list)  # (unseen entity, nearest seen entity, distance)
    empty: bool = False

    @property
    def mean(self):
        return float(np.mean([r[2] for r in self.rows])) if self.rows else None

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["unseen_entity", "nearest_seen_entity", "cosine_distance"])
        for e, s, dist in self.rows:
            w.writerow([e, s, f"{dist:.6f}"])
        return buf.getvalue()


def unseen_proximity(model, data, examples, vocab=None):
    """Cosine distance from each unseen entity to its nearest seen entity."""
    vocab = vocab if vocab is not None else data.train_entities
    reps = entity_representations(model, data, examples)
    unseen = sorted(e for e in reps if e not in vocab)
    seen = sorted(e for e in reps if e in vocab)
    if not unseen or not seen:
        return ProximityResult(empty=True)
    idx, dist = nearest_seen(np.stack([reps[e] for e in unseen]), np.stack([reps[e] for e in seen]))
    return ProximityResult([(e, seen[j], float(x)) for e, j, x in zip(unseen, idx, dist)])

