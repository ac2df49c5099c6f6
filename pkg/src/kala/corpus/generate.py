"""Synthetic corpora where entity knowledge decides the answer.

Every entity has a latent type. A context mentions a few candidate entities
of distinct types, one "type hub" entity per candidate type (its surface
form is the type word), and filler words, in random order. The knowledge
graph of the context links each candidate to its type hub
(``instance_of``) plus a few random ``related_to`` facts between candidates.

* QA: the question is ``which <type> ?`` and the answer is the candidate of
  that type.
* tagging: candidates are tagged ``B-<type>``/``I-<type>``, everything else
  ``O``.

Entity names are random syllable strings, so nothing in the surface form
reveals the type. Training contexts only use the "seen" entity pool, drawn
with power-law frequencies. A configurable share of validation/test contexts
is unseen-heavy: the answer and at least three candidates come from a
disjoint "unseen" pool, whose types are recoverable only through the graph.
"""

from dataclasses import asdict, dataclass
import hashlib
import json
import os

import numpy as np

from ..errors import ConfigError
from .assemble import QA, TAGGING, UNSEEN_CONTEXT_MIN
from .records import (EntityRecord, FactRecord, dumps, serialize_entity_records,
                      serialize_fact_records, write_text)
from .vocab import DEFAULT_RE_THRESHOLD, NO_RELATION, select_relation

TYPE_WORDS = ("city", "person", "drug", "disease", "company", "river", "gene", "team",
              "country", "protein", "album", "planet")
FILLER_WORDS = ("the", "of", "and", "said", "report", "new", "on", "in", "was", "after",
                "with", "for", "from", "near", "today", "also", "by", "while", "over", "since",
                "about", "under", "more", "last", "first", "could", "would", "then", "there",
                "when", "where", "some", "many", "other", "early", "late", "again", "still",
                "both", "very")
INSTANCE_OF, RELATED_TO = "instance_of", "related_to"
FORMAT_VERSION = 1


@dataclass
class GenConfig:
    task: str = QA
    num_types: int = 8
    seen_entities: int = 240
    unseen_entities: int = 120
    syllables: int = 30
    min_syllables: int = 2
    max_syllables: int = 3
    train_contexts: int = 1200
    val_contexts: int = 200
    test_contexts: int = 300
    candidates: int = 4
    filler: int = 10
    unseen_fraction: float = 0.5
    power_law_exponent: float = 1.0
    type_facts: bool = True
    noise_facts: int = 1
    re_noise: float = 0.15
    re_threshold: float = DEFAULT_RE_THRESHOLD

    def validate(self):
        if self.task not in (QA, TAGGING):
            raise ConfigError(f"unknown task {self.task!r}")
        if not 1 <= self.num_types <= len(TYPE_WORDS):
            raise ConfigError(f"num_types must lie in 1..{len(TYPE_WORDS)}")
        if not 1 <= self.candidates <= self.num_types:
            raise ConfigError("candidates per context must not exceed the number of types")
        if not 0.0 <= self.unseen_fraction <= 1.0:
            raise ConfigError("unseen_fraction must lie in [0, 1]")
        if self.unseen_fraction > 0:
            if not self.type_facts:
                raise ConfigError("unseen entities need facts to be resolvable; enable type_facts")
            if self.candidates < UNSEEN_CONTEXT_MIN:
                raise ConfigError(f"unseen-heavy contexts need at least {UNSEEN_CONTEXT_MIN} candidates")
            if self.unseen_entities < self.num_types:
                raise ConfigError("unseen pool must cover every type")
        if self.seen_entities < self.num_types:
            raise ConfigError("seen pool must cover every type")
        if self.filler < 2 * self.candidates - 1:
            raise ConfigError("filler must separate every pair of mentions")
        if not self.min_syllables <= self.max_syllables:
            raise ConfigError("min_syllables > max_syllables")
        capacity = sum(self.syllables ** k for k in range(self.min_syllables, self.max_syllables + 1))
        if capacity < 2 * (self.seen_entities + self.unseen_entities):
            raise ConfigError("not enough syllables for unique entity names")


class PowerLawSampler:
    """Draw ranks 0..n-1 with probability proportional to (rank + 1) ** -exponent."""

    def __init__(self, n, exponent):
        weights = np.arange(1, n + 1, dtype=np.float64) ** -float(exponent)
        self.p = weights / weights.sum()
        self.cdf = np.cumsum(self.p)

    def sample(self, rng, size=None):
        u = rng.random(size)
        return np.minimum(np.searchsorted(self.cdf, u, side="right"), len(self.p) - 1)

    def head_mass(self, fraction=0.1):
        k = max(1, int(round(fraction * len(self.p))))
        return float(self.p[:k].sum())

    def ks_distance(self, samples):
        counts = np.bincount(np.asarray(samples), minlength=len(self.p))
        empirical = np.cumsum(counts) / counts.sum()
        return float(np.max(np.abs(empirical - self.cdf)))


@dataclass
class Entity:
    id: str
    name: str
    type: str
    pool: str  # "hub", "seen" or "unseen"


def _syllables(rng, count):
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    pool = [c + v for c in consonants for v in vowels]
    order = rng.permutation(len(pool))[:count]
    return [pool[i] for i in sorted(order)]


def _make_entities(cfg, rng):
    types = TYPE_WORDS[:cfg.num_types]
    syl = _syllables(rng, cfg.syllables)
    used = set()

    def fresh_name():
        while True:
            k = int(rng.integers(cfg.min_syllables, cfg.max_syllables + 1))
            name = " ".join(syl[i] for i in rng.integers(0, len(syl), size=k))
            if name not in used:
                used.add(name)
                return name

    entities, counter = [], 0
    for t in types:
        entities.append(Entity(f"E{counter:05d}", t, t, "hub"))
        counter += 1
    for pool, n in (("seen", cfg.seen_entities), ("unseen", cfg.unseen_entities)):
        for rank in range(n):
            entities.append(Entity(f"E{counter:05d}", fresh_name(), types[rank % len(types)], pool))
            counter += 1
    return entities


class _Builder:
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.rng = rng
        self.entities = _make_entities(cfg, rng)
        self.hub = {e.type: e for e in self.entities if e.pool == "hub"}
        self.seen = [e for e in self.entities if e.pool == "seen"]
        self.unseen = [e for e in self.entities if e.pool == "unseen"]
        self.sampler = PowerLawSampler(len(self.seen), cfg.power_law_exponent)
        self.in_training = set()  # seen entities used by some training context

    def _pick(self, draw, taken_types, taken):
        while True:
            e = draw()
            if e.type not in taken_types and e.id not in taken:
                taken_types.add(e.type)
                taken.add(e.id)
                return e

    def candidates(self, unseen_heavy, training):
        cfg, rng = self.cfg, self.rng
        types, ids = set(), set()
        restrict = not training and self.in_training

        def seen_draw():
            # evaluation contexts only reuse entities that training actually showed
            while True:
                e = self.seen[int(self.sampler.sample(rng))]
                if not restrict or e.id in self.in_training:
                    return e

        unseen_draw = lambda: self.unseen[int(rng.integers(len(self.unseen)))]
        if not unseen_heavy:
            chosen = [self._pick(seen_draw, types, ids) for _ in range(cfg.candidates)]
            return chosen, int(rng.integers(cfg.candidates))
        n_unseen = int(rng.integers(UNSEEN_CONTEXT_MIN, cfg.candidates + 1))
        chosen = [self._pick(unseen_draw, types, ids) for _ in range(n_unseen)]
        chosen += [self._pick(seen_draw, types, ids) for _ in range(cfg.candidates - n_unseen)]
        answer = 0  # an unseen candidate; order is shuffled below
        perm = rng.permutation(len(chosen))
        chosen = [chosen[i] for i in perm]
        return chosen, int(np.flatnonzero(perm == answer)[0])

    def relation_distribution(self, relation, clean):
        """Simulated relation-classifier output for one entity pair."""
        rng = self.rng
        if clean or rng.random() >= self.cfg.re_noise:
            p = float(rng.uniform(0.55, 0.95))
            return {relation: p, NO_RELATION: 1.0 - p}
        p = float(rng.uniform(0.02, 0.3))
        return {NO_RELATION: 1.0 - p, relation: p}

    def context(self, doc_id, unseen_heavy, training=False):
        cfg, rng = self.cfg, self.rng
        chosen, answer_idx = self.candidates(unseen_heavy, training)
        if training:
            self.in_training.update(e.id for e in chosen)
        answer = chosen[answer_idx]
        hubs = [self.hub[e.type] for e in chosen]
        segments = [(e, e.name.split()) for e in chosen] + [(h, [h.name]) for h in hubs]
        order = rng.permutation(len(segments))
        segments = [segments[i] for i in order]
        # filler: one word in every inner gap, the rest spread at random
        gaps = np.zeros(len(segments) + 1, dtype=int)
        gaps[1:-1] = 1
        extra = cfg.filler - int(gaps.sum())
        gaps += np.bincount(rng.integers(0, len(gaps), size=extra), minlength=len(gaps))
        words = [FILLER_WORDS[i] for i in rng.integers(0, len(FILLER_WORDS), size=cfg.filler)]

        tokens, tags, records = [], [], []
        cursor, w = 0, 0

        def emit(tok, tag):
            nonlocal cursor
            start = cursor + (1 if tokens else 0)
            tokens.append(tok)
            tags.append(tag)
            cursor = start + len(tok)
            return start

        for k in range(len(segments) + 1):
            for _ in range(gaps[k]):
                emit(words[w], "O")
                w += 1
            if k == len(segments):
                break
            ent, toks = segments[k]
            is_candidate = ent.pool != "hub"
            start = None
            for j, tok in enumerate(toks):
                tag = "O"
                if is_candidate:
                    tag = ("B-" if j == 0 else "I-") + ent.type
                s = emit(tok, tag)
                start = s if start is None else start
            records.append((ent, EntityRecord(ent.name, start, cursor, ent.id)))
        context = " ".join(tokens)

        facts = []
        if cfg.type_facts:
            for e in chosen:
                clean = unseen_heavy and e is answer
                rel = select_relation(self.relation_distribution(INSTANCE_OF, clean), cfg.re_threshold)
                if rel != NO_RELATION:
                    facts.append(FactRecord(e.id, rel, self.hub[e.type].id))
        for _ in range(cfg.noise_facts):
            i, j = rng.choice(len(chosen), size=2, replace=False)
            rel = select_relation(self.relation_distribution(RELATED_TO, False), cfg.re_threshold)
            if rel != NO_RELATION:
                facts.append(FactRecord(chosen[i].id, rel, chosen[j].id))

        row = {"doc_id": doc_id, "context": context}
        if cfg.task == QA:
            ans_rec = next(r for ent, r in records if ent is answer)
            row["question"] = f"which {answer.type} ?"
            row["answer"] = {"text": ans_rec.text, "start": ans_rec.start, "end": ans_rec.end}
        else:
            row["tags"] = tags
        return row, [r for _, r in records], facts


@dataclass
class GeneratedCorpus:
    splits: dict          # split -> list of example rows
    entity_records: list  # [(doc_id, EntityRecord)]
    fact_records: list    # [(doc_id, FactRecord)]
    entities: list
    unseen_contexts: dict


def generate_synthetic_corpus(cfg, seed):
    cfg.validate()
    rng = np.random.default_rng(seed)
    builder = _Builder(cfg, rng)
    splits, ent_recs, fact_recs, unseen_counts = {}, [], [], {}
    sizes = {"train": cfg.train_contexts, "val": cfg.val_contexts, "test": cfg.test_contexts}
    for split, n in sizes.items():
        n_unseen = 0 if split == "train" else int(round(cfg.unseen_fraction * n))
        flags = np.zeros(n, dtype=bool)
        flags[:n_unseen] = True
        flags = rng.permutation(flags)
        rows = []
        for i in range(n):
            doc_id = f"{split}-{i:05d}"
            row, ents, facts = builder.context(doc_id, bool(flags[i]), split == "train")
            rows.append(row)
            ent_recs.extend((doc_id, r) for r in ents)
            fact_recs.extend((doc_id, f) for f in facts)
        splits[split] = rows
        unseen_counts[split] = n_unseen
    return GeneratedCorpus(splits, ent_recs, fact_recs, builder.entities, unseen_counts)


def _sha256(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_corpus(corpus, directory, cfg, seed):
    """Write split files, entity/fact files and a manifest; return the manifest."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    for split, rows in corpus.splits.items():
        files[f"{split}.jsonl"] = "".join(dumps(r) + "\n" for r in rows)
    files["entities.jsonl"] = serialize_entity_records(corpus.entity_records)
    files["facts.jsonl"] = serialize_fact_records(corpus.fact_records)
    for name, text in files.items():
        write_text(os.path.join(directory, name), text)
    manifest = {
        "version": FORMAT_VERSION,
        "seed": seed,
        "config": asdict(cfg),
        "splits": {split: [r["doc_id"] for r in rows] for split, rows in corpus.splits.items()},
        "unseen_contexts": corpus.unseen_contexts,
        "entities": {e.id: {"type": e.type, "pool": e.pool} for e in corpus.entities},
        "files": {name: _sha256(text) for name, text in sorted(files.items())},
    }
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    write_text(os.path.join(directory, "manifest.json"), text)
    manifest["sha256"] = _sha256(text)
    return manifest
