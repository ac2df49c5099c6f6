"""Turn parsed records into token-level task examples."""

from dataclasses import dataclass, field
import logging
import os

from ..errors import AnnotationError, ContractError, ParseError
from ..kfm import validate_mentions
from ..knowledge import KnowledgeGraphView
from .records import parse_entity_file, parse_fact_file, read_jsonl, tokenize
from .vocab import RelationVocabulary

log = logging.getLogger(__name__)

QA, TAGGING = "qa", "tagging"
SEEN, UNSEEN = "seen", "unseen"
UNSEEN_CONTEXT_MIN = 3


@dataclass(frozen=True)
class Mention:
    entity: str
    start: int  # inclusive token index within the context
    end: int    # inclusive


@dataclass
class TaskExample:
    doc_id: str
    tokens: list
    mentions: list
    graph: KnowledgeGraphView
    question: list = None
    answer: tuple = None      # inclusive token span within the context
    tags: list = None

    @property
    def task(self):
        return QA if self.question is not None else TAGGING

    def entities(self):
        seen, out = set(), []
        for m in self.mentions:
            if m.entity not in seen:
                seen.add(m.entity)
                out.append(m.entity)
        return out

    def unseen_entities(self, vocab):
        return [e for e in self.entities() if e not in vocab]

    def answer_text(self):
        s, e = self.answer
        return " ".join(self.tokens[s:e + 1])


def char_to_token_span(offsets, start, end):
    """Token span covering characters ``[start, end)``, or None if misaligned."""
    first = next((i for i, (_, s, _) in enumerate(offsets) if s == start), None)
    last = next((i for i, (_, _, e) in enumerate(offsets) if e == end), None)
    if first is None or last is None or last < first:
        return None
    return first, last


def assemble_example(row, entity_records, fact_records, relations, task):
    context = row["context"]
    offsets = tokenize(context)
    tokens = [t for t, _, _ in offsets]
    mentions = []
    for rec in entity_records:
        span = char_to_token_span(offsets, rec.start, rec.end)
        if span is None:
            log.warning("%s: mention %r [%d, %d) does not align with tokens; dropped",
                        row["doc_id"], rec.text, rec.start, rec.end)
            continue
        mentions.append(Mention(rec.id, *span))
    mentions.sort(key=lambda m: (m.start, m.end))
    try:
        validate_mentions([(m.start, m.end) for m in mentions], len(tokens))
    except AnnotationError as exc:
        raise AnnotationError(f"{row['doc_id']}: {exc}") from None
    order = []
    for m in mentions:
        if m.entity not in order:
            order.append(m.entity)
    triplets = [(f.h, relations.add(f.r), f.t) for f in fact_records]
    graph = KnowledgeGraphView.from_triplets(triplets, extra_nodes=order)

    ex = TaskExample(row["doc_id"], tokens, mentions, graph)
    if task == QA:
        ans = row["answer"]
        span = char_to_token_span(offsets, ans["start"], ans["end"])
        if span is None:
            raise ParseError(f"{row['doc_id']}: answer does not align with tokens")
        ex.question = [t for t, _, _ in tokenize(row["question"])]
        ex.answer = span
    elif task == TAGGING:
        tags = list(row["tags"])
        if len(tags) != len(tokens):
            raise ParseError(f"{row['doc_id']}: {len(tags)} tags for {len(tokens)} tokens")
        ex.tags = tags
    else:
        raise ContractError(f"unknown task {task!r}")
    return ex


@dataclass
class Corpus:
    task: str
    splits: dict
    relations: RelationVocabulary
    tag_set: list = field(default_factory=list)


def load_corpus(directory, task=None, relations=None):
    """Read ``{train,val,test}.jsonl`` plus the entity and fact files."""
    entity_path = os.path.join(directory, "entities.jsonl")
    fact_path = os.path.join(directory, "facts.jsonl")
    relations = relations or RelationVocabulary()
    rows = {}
    for split in ("train", "val", "test"):
        path = os.path.join(directory, f"{split}.jsonl")
        if os.path.exists(path):
            rows[split] = read_jsonl(path)
    if "train" not in rows:
        raise ContractError(f"{directory} has no train.jsonl")
    if task is None:
        first = rows["train"][0] if rows["train"] else {}
        task = QA if "question" in first else TAGGING
    documents = {r["doc_id"]: r["context"] for split_rows in rows.values() for r in split_rows}
    entities, facts = {}, {}
    for doc_id, rec in parse_entity_file(entity_path, documents):
        entities.setdefault(doc_id, []).append(rec)
    for doc_id, rec in parse_fact_file(fact_path, relations):
        facts.setdefault(doc_id, []).append(rec)
    splits = {
        split: [assemble_example(r, entities.get(r["doc_id"], []), facts.get(r["doc_id"], []),
                                 relations, task) for r in split_rows]
        for split, split_rows in rows.items()
    }
    tag_set = []
    if task == TAGGING:
        tag_set = sorted({t for ex in splits["train"] for t in ex.tags} - {"O"})
        tag_set = ["O"] + tag_set
    return Corpus(task, splits, relations, tag_set)


def split_seen_unseen(examples, vocab):
    """Contexts with fewer than three unseen entities are Seen, the rest Unseen."""
    seen, unseen = [], []
    for ex in examples:
        (unseen if len(ex.unseen_entities(vocab)) >= UNSEEN_CONTEXT_MIN else seen).append(ex)
    return seen, unseen
