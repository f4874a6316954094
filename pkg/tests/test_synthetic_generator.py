"""Tests for the planted-evidence corpus generator."""

from __future__ import annotations

import pytest

from src.embedding import hash_bucket
from src.latex_ingest import load_ingested_corpus
from src.query_pipeline import read_queries
from src.representations import chunk_text
from src.synthetic_generator import generate_planted_corpus, write_planted_corpus


def _filler_words(corpus) -> set:
    words = set()
    for doc in corpus.docs:
        chunks = chunk_text(doc.text, corpus.chunk_size)
        for chunk in chunks:
            if chunk.index != doc.evidence_chunk_index:
                words |= set(chunk.text.split())
    return words


class TestGeneration:
    def test_deterministic(self):
        a = generate_planted_corpus(n_docs=6, n_verbatim=3, n_paraphrase=0, seed=11)
        b = generate_planted_corpus(n_docs=6, n_verbatim=3, n_paraphrase=0, seed=11)
        assert a.docs == b.docs
        assert [q.text for q in a.queries] == [q.text for q in b.queries]

    def test_seed_changes_corpus(self):
        a = generate_planted_corpus(n_docs=4, seed=1)
        b = generate_planted_corpus(n_docs=4, seed=2)
        assert [d.text for d in a.docs] != [d.text for d in b.docs]

    def test_evidence_is_one_whole_chunk(self):
        corpus = generate_planted_corpus(n_docs=8, chunk_size=16, filler_chunks=4)
        for doc in corpus.docs:
            chunks = chunk_text(doc.text, 16)
            assert len(chunks) == 5
            assert chunks[doc.evidence_chunk_index].text.split() == doc.evidence_text.split()

    def test_vocabularies_are_disjoint(self):
        corpus = generate_planted_corpus(n_docs=10)
        filler = _filler_words(corpus)
        seen = set()
        for doc in corpus.docs:
            vocabulary = set(doc.vocabulary)
            assert not vocabulary & seen
            assert not vocabulary & filler
            seen |= vocabulary

    def test_hash_buckets_never_collide(self):
        corpus = generate_planted_corpus(n_docs=10, dimension=512)
        filler_buckets = {hash_bucket(w, 512) for w in _filler_words(corpus)}
        seen = set()
        for doc in corpus.docs:
            buckets = {hash_bucket(w, 512) for w in doc.vocabulary}
            assert not buckets & filler_buckets
            assert not buckets & seen
            seen |= buckets

    def test_query_split(self):
        corpus = generate_planted_corpus(n_docs=10, n_verbatim=3, n_paraphrase=4)
        assert [q.gold_doc_id for q in corpus.verbatim_queries] == ["doc-000", "doc-001", "doc-002"]
        assert [q.gold_doc_id for q in corpus.paraphrase_queries] == ["doc-003", "doc-004", "doc-005", "doc-006"]
        assert all(q.audit["planted"] == "verbatim" for q in corpus.verbatim_queries)
        assert corpus.verbatim_queries[0].text == corpus.docs[0].evidence_text

    def test_paraphrase_shares_no_word_with_gold(self):
        corpus = generate_planted_corpus(n_docs=12, n_verbatim=2, n_paraphrase=10, seed=5)
        texts = {d.doc_id: set(d.text.split()) for d in corpus.docs}
        for query in corpus.paraphrase_queries:
            words = set(query.text.split())
            assert len(words) == 12
            assert not words & texts[query.gold_doc_id]

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            generate_planted_corpus(n_docs=3, n_verbatim=3, n_paraphrase=1)
        with pytest.raises(ValueError):
            generate_planted_corpus(n_docs=4, n_verbatim=0, n_paraphrase=2, paraphrase_sources=6)


class TestWithoutEvidence:
    def test_cuts_only_the_named_document(self):
        corpus = generate_planted_corpus(n_docs=5)
        cut = corpus.without_evidence("doc-003")
        doc = cut.docs[3]
        assert doc.evidence_chunk_index is None
        assert doc.evidence_text == ""
        assert len(doc.text.split()) == 3 * corpus.chunk_size
        assert not set(doc.text.split()) & set(doc.vocabulary)
        assert cut.docs[:3] == corpus.docs[:3]
        assert cut.docs[4] == corpus.docs[4]
        assert cut.queries == corpus.queries

    def test_original_untouched(self):
        corpus = generate_planted_corpus(n_docs=3)
        corpus.without_evidence("doc-000")
        assert corpus.docs[0].evidence_chunk_index is not None


class TestWrite:
    def test_round_trip_to_disk(self, tmp_path):
        corpus = generate_planted_corpus(n_docs=4, n_verbatim=2, n_paraphrase=0)
        paths = write_planted_corpus(corpus, tmp_path / "planted")

        loaded = load_ingested_corpus(paths["corpus"])
        assert [d.doc_id for d in loaded] == corpus.doc_ids
        assert loaded[1].normalized == corpus.ingested()[1].normalized

        queries = read_queries(paths["queries"])
        assert [q.query_id for q in queries] == ["doc-000:text:000", "doc-001:text:000"]
        assert queries[0].text == corpus.docs[0].evidence_text
