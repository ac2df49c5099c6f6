"""Data model, file formats, vocabularies and the synthetic corpus generator."""

from .assemble import (QA, TAGGING, Corpus, Mention, TaskExample, load_corpus,
                       split_seen_unseen)
from .generate import GenConfig, PowerLawSampler, generate_synthetic_corpus, write_corpus
from .records import (EntityRecord, FactRecord, parse_entity_file, parse_fact_file,
                      serialize_entity_records, serialize_fact_records, tokenize)
from .vocab import (NO_RELATION, EntityVocabulary, RelationVocabulary, TokenVocabulary,
                    build_entity_vocab, entity_frequency_histogram, histogram_csv,
                    select_relation)

__all__ = [
    "QA", "TAGGING", "Corpus", "Mention", "TaskExample", "load_corpus", "split_seen_unseen",
    "GenConfig", "PowerLawSampler", "generate_synthetic_corpus", "write_corpus",
    "EntityRecord", "FactRecord", "parse_entity_file", "parse_fact_file",
    "serialize_entity_records", "serialize_fact_records", "tokenize",
    "NO_RELATION", "EntityVocabulary", "RelationVocabulary", "TokenVocabulary",
    "build_entity_vocab", "entity_frequency_histogram", "histogram_csv", "select_relation",
]
