"""Token, entity and relation vocabularies plus the relation-selection rule."""

from collections import Counter
from dataclasses import dataclass, field
import csv
import io

import numpy as np

from ..errors import ContractError
from ..kfm import NULL_ENTITY

NO_RELATION = "no_relation"
DEFAULT_RE_THRESHOLD = 0.1

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)


class TokenVocabulary:
    """Closed word vocabulary; anything unseen maps to ``[UNK]``."""

    def __init__(self, tokens=()):
        self.itos = list(SPECIAL_TOKENS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def encode(self, tokens):
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]

    def __len__(self):
        return len(self.itos)


class RelationVocabulary:
    """Relation names in registration order; new names get a fresh id."""

    def __init__(self, names=()):
        self.names = []
        self.index = {}
        for n in names:
            self.add(n)

    def add(self, name):
        if name == NO_RELATION:
            raise ContractError("no_relation is not a relation")
        if name not in self.index:
            self.index[name] = len(self.names)
            self.names.append(name)
        return self.index[name]

    def __getitem__(self, name):
        return self.index[name]

    def __contains__(self, name):
        return name in self.index

    def __len__(self):
        return len(self.names)


@dataclass
class EntityVocabulary:
    """Training entities (sorted by id) with mention counts.

    Row 0 of the entity memory is the null entity; ``row(e)`` of an entity
    outside the vocabulary is 0.
    """

    entities: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if NULL_ENTITY in self.entities:
            raise ContractError("the null entity cannot be a training entity")
        self._row = {e: i + 1 for i, e in enumerate(self.entities)}

    def __contains__(self, entity):
        return entity in self._row

    def __len__(self):
        return len(self.entities)

    @property
    def memory_size(self):
        return len(self.entities) + 1

    def row(self, entity):
        return self._row.get(entity, 0)

    def resolve(self, entity):
        """The entity itself if known, otherwise the null entity."""
        return entity if entity in self._row else NULL_ENTITY

    def pruned(self, min_count):
        """Keep only entities that appear more than ``min_count`` times."""
        keep = [e for e in self.entities if self.counts.get(e, 0) > min_count]
        return EntityVocabulary(keep, {e: self.counts[e] for e in keep})


def build_entity_vocab(examples):
    """Union of the mentioned entities of every training example."""
    counts = Counter()
    for ex in examples:
        for m in ex.mentions:
            counts[m.entity] += 1
    counts.pop(NULL_ENTITY, None)
    return EntityVocabulary(sorted(counts), dict(counts))


def select_relation(distribution, threshold=DEFAULT_RE_THRESHOLD):
    """Pick a relation from a relation classifier's output.

    ``distribution`` maps relation name (including ``no_relation``) to
    probability. The top-1 relation wins; when the top-1 is ``no_relation``
    the top-2 relation is used instead if its probability is strictly larger
    than ``threshold``. Ties are broken by relation name.
    """
    if not distribution:
        raise ContractError("empty relation distribution")
    if any(p < 0 for p in distribution.values()):
        raise ContractError("relation probabilities must be non-negative")
    ranked = sorted(distribution.items(), key=lambda kv: (-kv[1], kv[0]))
    top = ranked[0][0]
    if top != NO_RELATION:
        return top
    if len(ranked) > 1 and ranked[1][1] > threshold:
        return ranked[1][0]
    return NO_RELATION


def entity_frequency_histogram(vocab, head_fraction=0.1):
    """Counts sorted by descending frequency (ties by id) and summary stats."""
    table = sorted(vocab.counts.items(), key=lambda kv: (-kv[1], kv[0]))
    values = np.array([c for _, c in table], dtype=np.float64)
    total = float(values.sum()) if values.size else 0.0
    n_head = max(1, int(round(head_fraction * len(table)))) if table else 0
    summary = {
        "entities": len(table),
        "mentions": int(total),
        "max": int(values.max()) if values.size else 0,
        "median": float(np.median(values)) if values.size else 0.0,
        "singletons": int((values == 1).sum()),
        "head_fraction": head_fraction,
        "head_mass": float(values[:n_head].sum() / total) if total else 0.0,
    }
    return table, summary


def histogram_csv(table):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["entity", "count"])
    writer.writerows(table)
    return buf.getvalue()
