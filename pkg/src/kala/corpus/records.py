"""Line-delimited JSON formats for entities, facts and task examples.

Entity file, one line per document::

    {"doc_id": "train-00000", "entities": [{"text": "New York", "start": 0, "end": 8, "id": "E00060"}]}

Fact file, one line per document::

    {"doc_id": "train-00000", "facts": [{"h": "E00060", "r": "instance_of", "t": "E00001"}]}

Character offsets are half-open (``end`` is exclusive). Serialisation is
canonical (fixed key order, no spaces after separators, UTF-8, trailing
newline) so parse/serialise round-trips are byte-exact.
"""

from dataclasses import dataclass
import json
import logging
import re

from ..errors import ParseError, RangeError

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class EntityRecord:
    text: str
    start: int
    end: int
    id: str

    def to_json(self):
        return {"text": self.text, "start": self.start, "end": self.end, "id": self.id}


@dataclass(frozen=True)
class FactRecord:
    h: str
    r: str
    t: str

    def to_json(self):
        return {"h": self.h, "r": self.r, "t": self.t}


def tokenize(text):
    """Whitespace + punctuation split; returns ``[(token, char_start, char_end)]``."""
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def dumps(obj):
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line


def _load(path, lineno, line):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg})", path, lineno) from None
    if not isinstance(obj, dict) or "doc_id" not in obj:
        raise ParseError("record must be an object with a doc_id", path, lineno)
    return obj


def _field(obj, key, kind, path, lineno):
    if key not in obj:
        raise ParseError(f"missing field {key!r}", path, lineno)
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ParseError(f"field {key!r} must be an integer", path, lineno)
    if kind is str and not isinstance(value, str):
        raise ParseError(f"field {key!r} must be a string", path, lineno)
    return value


def parse_entity_file(path, documents=None):
    """Read an entity file into ``[(doc_id, EntityRecord)]``.

    With ``documents`` (doc_id -> context text) each boundary is checked
    against its document and the surface text must match.
    """
    out = []
    for lineno, line in _lines(path):
        obj = _load(path, lineno, line)
        doc_id = obj["doc_id"]
        entities = obj.get("entities")
        if not isinstance(entities, list):
            raise ParseError("field 'entities' must be a list", path, lineno)
        for item in entities:
            if not isinstance(item, dict):
                raise ParseError("entity must be an object", path, lineno)
            rec = EntityRecord(
                text=_field(item, "text", str, path, lineno),
                start=_field(item, "start", int, path, lineno),
                end=_field(item, "end", int, path, lineno),
                id=_field(item, "id", str, path, lineno),
            )
            if not 0 <= rec.start < rec.end:
                raise RangeError(f"bad boundary [{rec.start}, {rec.end}) for {rec.id}", path, lineno)
            if documents is not None:
                text = documents.get(doc_id)
                if text is None:
                    raise ParseError(f"unknown document {doc_id!r}", path, lineno)
                if rec.end > len(text):
                    raise RangeError(
                        f"boundary [{rec.start}, {rec.end}) outside document of length {len(text)}",
                        path, lineno)
                if text[rec.start:rec.end] != rec.text:
                    raise ParseError(f"surface text {rec.text!r} does not match document", path, lineno)
            out.append((doc_id, rec))
    return out


def parse_fact_file(path, relations=None):
    """Read a fact file into ``[(doc_id, FactRecord)]``.

    Repeated triplets within a document are dropped (and counted in the log).
    Relation names not yet in ``relations`` (a ``RelationVocabulary``) are
    registered.
    """
    out, duplicates = [], 0
    for lineno, line in _lines(path):
        obj = _load(path, lineno, line)
        facts = obj.get("facts")
        if not isinstance(facts, list):
            raise ParseError("field 'facts' must be a list", path, lineno)
        seen = set()
        for item in facts:
            if not isinstance(item, dict):
                raise ParseError("fact must be an object", path, lineno)
            rec = FactRecord(
                h=_field(item, "h", str, path, lineno),
                r=_field(item, "r", str, path, lineno),
                t=_field(item, "t", str, path, lineno),
            )
            if rec in seen:
                duplicates += 1
                continue
            seen.add(rec)
            if relations is not None:
                relations.add(rec.r)
            out.append((obj["doc_id"], rec))
    if duplicates:
        log.info("%s: dropped %d duplicate triplet(s)", path, duplicates)
    return out


def _grouped(records):
    groups = []
    for doc_id, rec in records:
        if not groups or groups[-1][0] != doc_id:
            groups.append((doc_id, []))
        groups[-1][1].append(rec)
    return groups


def serialize_entity_records(records):
    return "".join(
        dumps({"doc_id": doc_id, "entities": [r.to_json() for r in recs]}) + "\n"
        for doc_id, recs in _grouped(records)
    )


def serialize_fact_records(records):
    return "".join(
        dumps({"doc_id": doc_id, "facts": [r.to_json() for r in recs]}) + "\n"
        for doc_id, recs in _grouped(records)
    )


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_jsonl(path, rows):
    write_text(path, "".join(dumps(r) + "\n" for r in rows))


def read_jsonl(path):
    return [_load(path, lineno, line) for lineno, line in _lines(path)]
